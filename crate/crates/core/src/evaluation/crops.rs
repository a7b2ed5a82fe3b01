use crate::error::{Error, Result};
use crate::scene_data::{connected_components, DatasetMeta, Image, LabelMap, SizeBucket};

pub const DEFAULT_CROP_SIZE: usize = 32;

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &Image, height: usize, width: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    if (h, w) == (height, width) {
        return image.clone();
    }
    let src = image.data();
    let axis = |out: usize, size: usize| -> Vec<(usize, usize, f32)> {
        let scale = size as f64 / out as f64;
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(size - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let (rows, cols) = (axis(height, h), axis(width, w));
    let mut data = Vec::with_capacity(3 * height * width);
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = plane[r0 * w + c0] * (1.0 - fc) + plane[r0 * w + c1] * fc;
                let bottom = plane[r1 * w + c0] * (1.0 - fc) + plane[r1 * w + c1] * fc;
                data.push(top * (1.0 - fr) + bottom * fr);
            }
        }
    }
    Image::new(height, width, data).expect("consistent size")
}

/// Nearest-neighbor resampling of a label map.
pub fn resize_nearest(label: &LabelMap, height: usize, width: usize) -> LabelMap {
    let (h, w) = (label.height(), label.width());
    let data = (0..height)
        .flat_map(|r| {
            let sr = ((r as f64 + 0.5) * h as f64 / height as f64) as usize;
            (0..width).map(move |c| (sr.min(h - 1), (((c as f64 + 0.5) * w as f64 / width as f64) as usize).min(w - 1)))
        })
        .map(|(r, c)| label.get(r, c))
        .collect();
    LabelMap::new(height, width, data).expect("consistent size")
}

fn crop_image(image: &Image, top: usize, left: usize, bottom: usize, right: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut data = Vec::with_capacity(3 * (bottom - top) * (right - left));
    for c in 0..3 {
        for r in top..bottom {
            data.extend_from_slice(&image.data()[c * h * w + r * w + left..c * h * w + r * w + right]);
        }
    }
    Image::new(bottom - top, right - left, data).expect("consistent size")
}

fn crop_label(label: &LabelMap, top: usize, left: usize, bottom: usize, right: usize) -> LabelMap {
    let data = (top..bottom).flat_map(|r| (left..right).map(move |c| (r, c))).map(|(r, c)| label.get(r, c)).collect();
    LabelMap::new(bottom - top, right - left, data).expect("consistent size")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectCrop {
    pub class: u8,
    /// Pixel count of the source component.
    pub pixels: usize,
    pub bucket: SizeBucket,
    pub image: Image,
    pub label: LabelMap,
}

/// Object crops grouped by size bucket.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CropBuckets {
    pub small: Vec<ObjectCrop>,
    pub medium: Vec<ObjectCrop>,
    pub large: Vec<ObjectCrop>,
}

impl CropBuckets {
    pub fn bucket(&self, b: SizeBucket) -> &[ObjectCrop] {
        match b {
            SizeBucket::Small => &self.small,
            SizeBucket::Medium => &self.medium,
            SizeBucket::Large => &self.large,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &ObjectCrop> {
        self.small.iter().chain(&self.medium).chain(&self.large)
    }

    pub fn len(&self) -> usize {
        self.small.len() + self.medium.len() + self.large.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Crops every connected component of an object class to its bounding box
/// and resizes it to `crop_size` squared.
pub fn crop_objects(
    images: &[&Image],
    labels: &[&LabelMap],
    object_classes: &[u8],
    meta: &DatasetMeta,
    crop_size: usize,
) -> Result<CropBuckets> {
    if images.len() != labels.len() {
        return Err(Error::Metric(format!("{} images for {} label maps", images.len(), labels.len())));
    }
    let mut out = CropBuckets::default();
    for (image, label) in images.iter().zip(labels) {
        if (image.height(), image.width()) != (label.height(), label.width()) {
            return Err(Error::Metric("image and label map sizes differ".into()));
        }
        for comp in connected_components(label).list {
            if !object_classes.contains(&comp.class) {
                continue;
            }
            let (t, l, b, r) = (comp.top, comp.left, comp.bottom, comp.right);
            let bucket = meta.size_bucket(comp.pixels);
            let crop = ObjectCrop {
                class: comp.class,
                pixels: comp.pixels,
                bucket,
                image: resize_bilinear(&crop_image(image, t, l, b, r), crop_size, crop_size),
                label: resize_nearest(&crop_label(label, t, l, b, r), crop_size, crop_size),
            };
            match bucket {
                SizeBucket::Small => out.small.push(crop),
                SizeBucket::Medium => out.medium.push(crop),
                SizeBucket::Large => out.large.push(crop),
            }
        }
    }
    Ok(out)
}
