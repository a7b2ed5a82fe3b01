//! Procedural multi-scale scene dataset: paired label maps and rendered
//! images, one-hot encoding, and per-class pixel-frequency weights.

mod io;
mod regions;
mod render;

use dpgan_autograd::{Float, Tensor};

use crate::error::{Error, Result};

pub use io::{load_dataset, read_label_png, read_rgb_png, save_dataset, write_label_png, write_rgb_png, DatasetReader};
pub use regions::{connected_components, Component, Components};
pub use render::{generate_scene, generate_scenes, BackgroundTexture, SceneSpec};

/// Reference resolution the object-size thresholds are quoted at.
const REFERENCE_RESOLUTION: f64 = 256.0;
const REFERENCE_SMALL_MAX: f64 = 2500.0;
const REFERENCE_LARGE_MIN: f64 = 10000.0;

pub const DEFAULT_CLASS_NAMES: [&str; 8] =
    ["background", "building", "tree", "car", "sign", "pole", "person", "marking"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub class_names: Vec<String>,
    /// Components with fewer pixels than this are "small".
    pub small_max: usize,
    /// Components with more pixels than this are "large".
    pub large_min: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl DatasetMeta {
    pub fn new(
        num_classes: usize,
        height: usize,
        width: usize,
        class_names: Vec<String>,
        small_max: usize,
        large_min: usize,
    ) -> Result<Self> {
        let meta = Self { num_classes, height, width, class_names, small_max, large_min };
        meta.validate()?;
        Ok(meta)
    }

    /// Square `resolution` with default class names and size thresholds
    /// scaled from the 256-pixel reference by `(resolution / 256)^2`.
    pub fn desk(resolution: usize, num_classes: usize) -> Result<Self> {
        let names = (0..num_classes)
            .map(|c| DEFAULT_CLASS_NAMES.get(c).map_or_else(|| format!("class_{c}"), |s| s.to_string()))
            .collect();
        let area = (resolution as f64 / REFERENCE_RESOLUTION).powi(2);
        Self::new(
            num_classes,
            resolution,
            resolution,
            names,
            (REFERENCE_SMALL_MAX * area).round() as usize,
            (REFERENCE_LARGE_MIN * area).round() as usize,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidMeta(m));
        if self.num_classes < 2 || self.num_classes > 256 {
            return bad(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        for (axis, v) in [("height", self.height), ("width", self.width)] {
            if v < 16 || !v.is_power_of_two() {
                return bad(format!("{axis} must be a power of two >= 16, got {v}"));
            }
        }
        if self.class_names.len() != self.num_classes {
            return bad(format!("{} class names for {} classes", self.class_names.len(), self.num_classes));
        }
        if self.small_max >= self.large_min {
            return bad(format!("small_max {} must be below large_min {}", self.small_max, self.large_min));
        }
        Ok(())
    }

    pub fn size_bucket(&self, pixels: usize) -> SizeBucket {
        if pixels < self.small_max {
            SizeBucket::Small
        } else if pixels > self.large_min {
            SizeBucket::Large
        } else {
            SizeBucket::Medium
        }
    }

    /// Classes other than background.
    pub fn object_classes(&self) -> Vec<u8> {
        (1..self.num_classes).map(|c| c as u8).collect()
    }
}

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Model(format!("label data of length {} for {height}x{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self { height, width, data: vec![class; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.data[row * self.width + col] = class;
    }

    /// Rejects the first pixel whose class id is `>= num_classes`.
    pub fn check_range(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize >= num_classes) {
            Some(i) => Err(Error::LabelOutOfRange {
                row: i / self.width,
                col: i % self.width,
                value: self.data[i] as usize,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &v in &self.data {
            if let Some(c) = counts.get_mut(v as usize) {
                *c += 1;
            }
        }
        counts
    }
}

/// RGB image in `[-1, 1]`, channel-major `[3, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Model(format!("image data of length {} for 3x{height}x{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Sample `index` of an `[n, 3, h, w]` tensor.
    pub fn from_batch<T: Float>(batch: &Tensor<T>, index: usize) -> Result<Self> {
        let [_, c, h, w] = batch.dims4("image")?;
        if c != 3 {
            return Err(Error::Model(format!("expected 3 image channels, found {c}")));
        }
        let sample = batch.batch_slice(index, 1)?;
        Self::new(h, w, sample.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// Round-trips through 8-bit storage.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| dequantize(quantize(v))).collect();
        Self { height: self.height, width: self.width, data }
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub(crate) fn dequantize(q: u8) -> f32 {
    q as f32 / 255.0 * 2.0 - 1.0
}

/// Per-pixel one-hot encoding, channel-major `[num_classes, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotMap {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn one_hot(label: &LabelMap, num_classes: usize) -> Result<OneHotMap> {
    label.check_range(num_classes)?;
    let hw = label.height * label.width;
    let mut data = vec![0.0; num_classes * hw];
    for (p, &c) in label.data.iter().enumerate() {
        data[c as usize * hw + p] = 1.0;
    }
    Ok(OneHotMap { num_classes, height: label.height, width: label.width, data })
}

/// One-hot encodings of a batch as an `[n, num_classes, h, w]` tensor.
pub fn one_hot_batch<T: Float>(labels: &[&LabelMap], num_classes: usize) -> Result<Tensor<T>> {
    let first = labels.first().ok_or_else(|| Error::Model("empty label batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(labels.len() * num_classes * h * w);
    for l in labels {
        if (l.height, l.width) != (h, w) {
            return Err(Error::Model("label maps in a batch differ in size".into()));
        }
        data.extend(one_hot(l, num_classes)?.data.into_iter().map(|v| T::of(v as f64)));
    }
    Ok(Tensor::new(&[labels.len(), num_classes, h, w], data)?)
}

/// Images of a batch as an `[n, 3, h, w]` tensor.
pub fn image_batch<T: Float>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Model("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        if (im.height, im.width) != (h, w) {
            return Err(Error::Model("images in a batch differ in size".into()));
        }
        data.extend(im.data.iter().map(|&v| T::of(v as f64)));
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], data)?)
}

/// Inverse per-pixel class frequency weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub alpha: Vec<f64>,
    pub present: Vec<bool>,
}

/// `alpha[c]` is the mean of `H*W / count_c` over the maps that contain class
/// `c`; classes absent from every map get weight 0.
pub fn class_frequencies(labels: &[&LabelMap], num_classes: usize) -> ClassWeights {
    let mut sum = vec![0.0f64; num_classes];
    let mut maps = vec![0usize; num_classes];
    for l in labels {
        let hw = (l.height * l.width) as f64;
        for (c, &count) in l.class_counts(num_classes).iter().enumerate() {
            if count > 0 {
                sum[c] += hw / count as f64;
                maps[c] += 1;
            }
        }
    }
    let alpha = sum.iter().zip(&maps).map(|(&s, &m)| if m > 0 { s / m as f64 } else { 0.0 }).collect();
    ClassWeights { alpha, present: maps.iter().map(|&m| m > 0).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn one_hot_single_pixel() {
        let oh = one_hot(&map(1, 1, &[0]), 2).unwrap();
        assert_eq!(oh.data, vec![1.0, 0.0]);
    }

    #[test]
    fn one_hot_checkerboard() {
        let oh = one_hot(&map(2, 2, &[0, 1, 1, 0]), 2).unwrap();
        assert_eq!(&oh.data[..4], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(&oh.data[4..], &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn one_hot_rejects_out_of_range_pixel() {
        let err = one_hot(&map(2, 2, &[0, 0, 0, 5]), 4).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { row: 1, col: 1, value: 5, .. }), "{err}");
    }

    #[test]
    fn class_weights_examples() {
        let w = class_frequencies(&[&map(2, 2, &[0, 0, 0, 1])], 2);
        assert!((w.alpha[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((w.alpha[1] - 4.0).abs() < 1e-12);

        let uniform = class_frequencies(&[&map(2, 2, &[0; 4])], 2);
        assert_eq!(uniform.alpha, vec![1.0, 0.0]);
        assert_eq!(uniform.present, vec![true, false]);

        let a = map(2, 2, &[0, 0, 1, 1]);
        let b = map(2, 2, &[0; 4]);
        let w = class_frequencies(&[&a, &b], 2);
        assert!((w.alpha[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn meta_validation() {
        assert!(DatasetMeta::desk(64, 8).is_ok());
        assert!(DatasetMeta::desk(64, 1).is_err());
        assert!(DatasetMeta::desk(48, 8).is_err());
        let m = DatasetMeta::desk(64, 8).unwrap();
        assert_eq!((m.small_max, m.large_min), (156, 625));
        assert_eq!(m.size_bucket(1600), SizeBucket::Large);
        assert_eq!(m.size_bucket(100), SizeBucket::Small);
    }
}
