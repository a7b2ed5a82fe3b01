//! Desk-scale metrics: toy-FID over a frozen embedder, mIoU through a frozen
//! segmenter, object-crop FID by size bucket, multi-resolution and
//! multi-modal FID.

mod crops;
mod frozen;
mod protocol;
mod stats;

pub use crops::{crop_objects, resize_bilinear, resize_nearest, CropBuckets, ObjectCrop, DEFAULT_CROP_SIZE};
pub use frozen::{train_segmenter, FrozenSegmenter, SegmenterTraining, EMBED_DIM};
pub use protocol::{
    crop_fid, evaluate, multimodal_fid, multires_fid, toy_fid, EvalOptions, MetricReport, Sampler, MIN_FID_SAMPLES,
};
pub use stats::{fit_gaussian, frechet_distance, miou, GaussianStats, Miou};
