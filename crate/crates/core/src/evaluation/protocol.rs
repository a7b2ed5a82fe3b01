use std::fmt::Write as _;

use dpgan_autograd::{ParamStore, Tensor};

use super::crops::{crop_objects, resize_bilinear, CropBuckets, ObjectCrop, DEFAULT_CROP_SIZE};
use super::frozen::FrozenSegmenter;
use super::stats::{fit_gaussian, frechet_distance, miou};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::generator::{sample_noise, Generator};
use crate::rng;
use crate::scene_data::{image_batch, one_hot_batch, DatasetMeta, Image, LabelMap, SizeBucket};
use crate::trainer::TrainState;

/// Minimum images per side of a toy-FID comparison.
pub const MIN_FID_SAMPLES: usize = 16;

fn embed_images(images: &[&Image], emb: &FrozenSegmenter) -> Result<Vec<Vec<f64>>> {
    let batch: Tensor<f32> = image_batch(images)?;
    emb.embed(&batch)
}

/// Fréchet distance between embedder statistics of two image sets.
pub fn toy_fid(real: &[&Image], fake: &[&Image], emb: &FrozenSegmenter) -> Result<f64> {
    for (side, set) in [("real", real), ("fake", fake)] {
        if set.len() < MIN_FID_SAMPLES {
            return Err(Error::Metric(format!("toy-FID needs at least {MIN_FID_SAMPLES} {side} images, got {}", set.len())));
        }
    }
    let a = fit_gaussian(&embed_images(real, emb)?)?;
    let b = fit_gaussian(&embed_images(fake, emb)?)?;
    frechet_distance(&a, &b)
}

/// Toy-FID after bilinear resampling of both sets to `scale` times their size.
pub fn multires_fid(real: &[&Image], fake: &[&Image], scales: &[f64], emb: &FrozenSegmenter) -> Result<Vec<(f64, f64)>> {
    let first = real.first().or(fake.first()).ok_or_else(|| Error::Metric("empty image sets".into()))?;
    scales
        .iter()
        .map(|&s| {
            let h = (first.height() as f64 * s).round() as usize;
            let w = (first.width() as f64 * s).round() as usize;
            if h < 16 || w < 16 {
                return Err(Error::Metric(format!("scale {s} gives {h}x{w}, below 16 pixels")));
            }
            let resize = |set: &[&Image]| set.iter().map(|im| resize_bilinear(im, h, w)).collect::<Vec<_>>();
            let (r, f) = (resize(real), resize(fake));
            let fid = toy_fid(&r.iter().collect::<Vec<_>>(), &f.iter().collect::<Vec<_>>(), emb)?;
            Ok((s, fid))
        })
        .collect()
}

/// A generator with fixed parameters, run in fixed-size batches.
#[derive(Clone, Debug)]
pub struct Sampler<'a> {
    pub gen: &'a Generator,
    pub params: &'a ParamStore<f32>,
    pub model: &'a ModelConfig,
    pub batch_size: usize,
}

impl<'a> Sampler<'a> {
    /// The EMA generator of a training state.
    pub fn ema(state: &'a TrainState) -> Self {
        Self { gen: &state.gen, params: &state.ema, model: &state.cfg.model, batch_size: state.cfg.batch_size }
    }

    /// The live generator of a training state.
    pub fn live(state: &'a TrainState) -> Self {
        Self { gen: &state.gen, params: &state.g, model: &state.cfg.model, batch_size: state.cfg.batch_size }
    }

    /// One image per label map; noise for batch `k` comes from stream
    /// `(noise_seed, NOISE, k)`.
    pub fn generate(&self, labels: &[&LabelMap], noise_seed: u64) -> Result<Vec<Image>> {
        let m = self.model;
        let mut out = Vec::with_capacity(labels.len());
        for (k, chunk) in labels.chunks(self.batch_size.max(1)).enumerate() {
            let mut r = rng::stream(noise_seed, &[rng::NOISE, k as u64]);
            let z = sample_noise(&mut r, chunk.len(), m.z_dim, m.resolution, m.z_mode);
            let onehot: Tensor<f32> = one_hot_batch(chunk, m.num_classes)?;
            let images = self.gen.synthesize(self.params, &z, &onehot)?;
            for i in 0..chunk.len() {
                out.push(Image::from_batch(&images, i)?);
            }
        }
        Ok(out)
    }
}

/// Mean and sample variance of toy-FID over one generation per noise seed,
/// plus the individual values.
pub fn multimodal_fid(
    sampler: &Sampler<'_>,
    labels: &[&LabelMap],
    real: &[&Image],
    noise_seeds: &[u64],
    emb: &FrozenSegmenter,
) -> Result<(f64, f64, Vec<f64>)> {
    if noise_seeds.len() < 2 {
        return Err(Error::Metric(format!("multi-modal FID needs at least 2 runs, got {}", noise_seeds.len())));
    }
    let runs = noise_seeds
        .iter()
        .map(|&s| {
            let fake = sampler.generate(labels, s)?;
            toy_fid(real, &fake.iter().collect::<Vec<_>>(), emb)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, var) = mean_var(&runs);
    Ok((mean, var, runs))
}

fn pick(c: &CropBuckets, b: Option<SizeBucket>) -> Vec<&ObjectCrop> {
    match b {
        None => c.all().collect(),
        Some(b) => c.bucket(b).iter().collect(),
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v[0] + v.iter().map(|x| x - v[0]).sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Toy-FID between object crops of the real and generated sets; `None` when
/// either side has fewer than `MIN_FID_SAMPLES` crops.
pub fn crop_fid(real: &[&ObjectCrop], fake: &[&ObjectCrop], emb: &FrozenSegmenter) -> Result<Option<f64>> {
    if real.len() < MIN_FID_SAMPLES || fake.len() < MIN_FID_SAMPLES {
        return Ok(None);
    }
    let r: Vec<&Image> = real.iter().map(|c| &c.image).collect();
    let f: Vec<&Image> = fake.iter().map(|c| &c.image).collect();
    toy_fid(&r, &f, emb).map(Some)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub noise_seed: u64,
    /// Noise seeds for the multi-modal statistics; fewer than 2 skips them.
    pub modes: usize,
    /// Multi-resolution scales; empty skips them.
    pub scales: Vec<f64>,
    pub crop_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { noise_seed: 0, modes: 5, scales: vec![0.5, 1.0, 2.0], crop_size: DEFAULT_CROP_SIZE }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub samples: usize,
    pub toy_fid: f64,
    pub miou: f64,
    pub obj_miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub obj_fid_all: Option<f64>,
    pub obj_fid_large: Option<f64>,
    pub obj_fid_medium: Option<f64>,
    pub obj_fid_small: Option<f64>,
    pub fid_mean: Option<f64>,
    pub fid_var: Option<f64>,
    pub multires: Vec<(f64, f64)>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

impl MetricReport {
    /// `(key, value)` rows in a stable order.
    pub fn rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("samples".to_string(), self.samples.to_string()),
            ("toy_fid".to_string(), format!("{:.6}", self.toy_fid)),
            ("miou".to_string(), format!("{:.6}", self.miou)),
            ("obj_miou".to_string(), format!("{:.6}", self.obj_miou)),
        ];
        for (c, v) in self.per_class_iou.iter().enumerate() {
            rows.push((format!("iou_{c}"), fmt_opt(*v)));
        }
        for (k, v) in [
            ("obj_fid_all", self.obj_fid_all),
            ("obj_fid_large", self.obj_fid_large),
            ("obj_fid_medium", self.obj_fid_medium),
            ("obj_fid_small", self.obj_fid_small),
            ("fid_mean", self.fid_mean),
            ("fid_var", self.fid_var),
        ] {
            rows.push((k.to_string(), fmt_opt(v)));
        }
        for (s, v) in &self.multires {
            rows.push((format!("fid_scale_{s}"), format!("{v:.6}")));
        }
        rows
    }

    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Metric(format!("csv: {e}"));
        w.write_record(["metric", "value"]).map_err(err)?;
        for (k, v) in self.rows() {
            w.write_record([k, v]).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Metric(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Generates one image per held-out label map and scores it against the
/// paired real images.
pub fn evaluate(
    sampler: &Sampler<'_>,
    data: &[(LabelMap, Image)],
    meta: &DatasetMeta,
    seg: &FrozenSegmenter,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let labels: Vec<&LabelMap> = data.iter().map(|d| &d.0).collect();
    let real: Vec<&Image> = data.iter().map(|d| &d.1).collect();
    let fake = sampler.generate(&labels, opts.noise_seed)?;
    let fake_refs: Vec<&Image> = fake.iter().collect();
    let mut report = MetricReport { samples: data.len(), ..MetricReport::default() };
    report.toy_fid = toy_fid(&real, &fake_refs, seg)?;

    let batch: Tensor<f32> = image_batch(&fake_refs)?;
    let pred = seg.segment(&batch)?;
    let gt: Vec<LabelMap> = labels.iter().map(|&l| l.clone()).collect();
    let m = miou(&pred, &gt, meta.num_classes)?;
    report.miou = m.miou;
    report.obj_miou = m.subset(&meta.object_classes());
    report.per_class_iou = m.per_class;

    let objects = meta.object_classes();
    let real_crops = crop_objects(&real, &labels, &objects, meta, opts.crop_size)?;
    let fake_crops = crop_objects(&fake_refs, &labels, &objects, meta, opts.crop_size)?;
    let fid_for = |b| crop_fid(&pick(&real_crops, b), &pick(&fake_crops, b), seg);
    report.obj_fid_all = fid_for(None)?;
    report.obj_fid_large = fid_for(Some(SizeBucket::Large))?;
    report.obj_fid_medium = fid_for(Some(SizeBucket::Medium))?;
    report.obj_fid_small = fid_for(Some(SizeBucket::Small))?;

    if opts.modes >= 2 {
        let seeds: Vec<u64> = (0..opts.modes as u64).map(|k| opts.noise_seed.wrapping_add(k)).collect();
        let (mean, var, _) = multimodal_fid(sampler, &labels, &real, &seeds, seg)?;
        report.fid_mean = Some(mean);
        report.fid_var = Some(var);
    }
    if !opts.scales.is_empty() {
        report.multires = multires_fid(&real, &fake_refs, &opts.scales, seg)?;
    }
    Ok(report)
}
