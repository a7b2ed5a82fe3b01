use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{DatasetMeta, Image, LabelMap};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundTexture {
    /// Color above the horizon, RGB in `[-1, 1]`.
    pub sky: [f32; 3],
    /// Color below the horizon.
    pub ground: [f32; 3],
    /// Horizon height as a fraction of the image, from the top.
    pub horizon: f32,
    /// Amplitude of per-pixel uniform noise.
    pub noise: f32,
}

impl Default for BackgroundTexture {
    fn default() -> Self {
        Self { sky: [-0.2, 0.1, 0.6], ground: [-0.45, -0.45, -0.4], horizon: 0.45, noise: 0.04 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub meta: DatasetMeta,
    /// Inclusive range of objects per scene.
    pub object_count: (usize, usize),
    pub object_classes: Vec<u8>,
    /// Inclusive range of object area as a fraction of the image, sampled
    /// log-uniformly.
    pub area_fraction: (f64, f64),
    pub background: BackgroundTexture,
}

impl SceneSpec {
    pub fn new(seed: u64, meta: DatasetMeta) -> Self {
        let object_classes = meta.object_classes();
        Self {
            seed,
            meta,
            object_count: (3, 8),
            object_classes,
            area_fraction: (0.001, 0.25),
            background: BackgroundTexture::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.object_classes.is_empty() {
            return bad("object class list is empty".into());
        }
        if let Some(&c) = self.object_classes.iter().find(|&&c| c == 0 || c as usize >= self.meta.num_classes) {
            return bad(format!("object class {c} is not in 1..{}", self.meta.num_classes));
        }
        let (lo, hi) = self.area_fraction;
        if !(lo > 0.0 && hi <= 1.0 && lo <= hi) {
            return bad(format!("area fraction range ({lo}, {hi}) must satisfy 0 < min <= max <= 1"));
        }
        if self.object_count.0 > self.object_count.1 {
            return bad(format!("object count range {:?} is inverted", self.object_count));
        }
        Ok(())
    }

    /// True when the area range reaches both the small and the large bucket.
    pub fn covers_size_buckets(&self) -> bool {
        let hw = (self.meta.height * self.meta.width) as f64;
        self.area_fraction.0 * hw < self.meta.small_max as f64 && self.area_fraction.1 * hw > self.meta.large_min as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Rect,
    Ellipse,
    Diamond,
    /// Thin vertical bar of 1 to 3 pixels.
    Pole,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Texture {
    Flat,
    Stripes,
    Speckle,
    Checker,
}

#[derive(Clone, Copy, Debug)]
struct Appearance {
    shape: Shape,
    /// Range of width / height.
    aspect: (f64, f64),
    color: [f32; 3],
    texture: Texture,
}

fn appearance(class: u8) -> Appearance {
    let a = |shape, aspect, color, texture| Appearance { shape, aspect, color, texture };
    match class {
        1 => a(Shape::Rect, (0.6, 1.6), [0.45, -0.3, -0.5], Texture::Stripes),
        2 => a(Shape::Ellipse, (0.7, 1.3), [-0.6, 0.35, -0.6], Texture::Speckle),
        3 => a(Shape::Rect, (1.6, 2.5), [0.1, -0.7, 0.7], Texture::Flat),
        4 => a(Shape::Diamond, (1.0, 1.0), [0.85, 0.75, -0.8], Texture::Flat),
        5 => a(Shape::Pole, (1.0, 1.0), [0.9, 0.9, 0.9], Texture::Flat),
        6 => a(Shape::Ellipse, (0.35, 0.5), [0.8, 0.2, 0.35], Texture::Flat),
        7 => a(Shape::Rect, (3.0, 6.0), [0.95, 0.95, 0.2], Texture::Checker),
        c => {
            let shapes = [Shape::Rect, Shape::Ellipse, Shape::Diamond];
            let textures = [Texture::Flat, Texture::Stripes, Texture::Speckle, Texture::Checker];
            let hue = (c as f32 * 0.618_034).fract() * std::f32::consts::TAU;
            let color = [hue.cos() * 0.8, (hue + 2.094).cos() * 0.8, (hue + 4.189).cos() * 0.8];
            a(shapes[c as usize % 3], (0.7, 1.4), color, textures[c as usize % 4])
        }
    }
}

#[derive(Clone, Debug)]
struct Placed {
    class: u8,
    look: Appearance,
    top: f64,
    left: f64,
    height: f64,
    width: f64,
    tint: [f32; 3],
}

impl Placed {
    fn covers(&self, r: usize, c: usize) -> bool {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let u = (x - self.left) / self.width;
        let v = (y - self.top) / self.height;
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        match self.look.shape {
            Shape::Rect | Shape::Pole => true,
            Shape::Ellipse => (u - 0.5).powi(2) + (v - 0.5).powi(2) < 0.25,
            Shape::Diamond => (u - 0.5).abs() + (v - 0.5).abs() < 0.5,
        }
    }

    fn shade(&self, r: usize, c: usize, rng: &mut ChaCha8Rng) -> [f32; 3] {
        let v = ((r as f64 + 0.5 - self.top) / self.height).clamp(0.0, 1.0) as f32;
        let light = 0.15 - 0.3 * v;
        let pattern = match self.look.texture {
            Texture::Flat => 0.0,
            Texture::Stripes => {
                if (r as f64 - self.top).rem_euclid(4.0) < 2.0 {
                    0.25
                } else {
                    -0.15
                }
            }
            Texture::Speckle => rng.random_range(-0.25..0.25),
            Texture::Checker => {
                if ((r / 2) + (c / 2)).is_multiple_of(2) {
                    0.0
                } else {
                    -0.5
                }
            }
        };
        let mut rgb = [0.0; 3];
        for (k, out) in rgb.iter_mut().enumerate() {
            *out = (self.look.color[k] + self.tint[k] + light + pattern).clamp(-1.0, 1.0);
        }
        rgb
    }
}

/// Object extents in pixels for a target pixel area.
fn extents(look: &Appearance, area: f64, aspect: f64, rng: &mut ChaCha8Rng, h: f64, w: f64) -> (f64, f64) {
    let fill = match look.shape {
        Shape::Rect | Shape::Pole => 1.0,
        Shape::Ellipse => std::f64::consts::FRAC_PI_4,
        Shape::Diamond => 0.5,
    };
    let box_area = area / fill;
    let (mut bh, mut bw) = if look.shape == Shape::Pole {
        let bw = rng.random_range(1..=3) as f64;
        (box_area / bw, bw)
    } else {
        ((box_area / aspect).sqrt(), (box_area * aspect).sqrt())
    };
    if bh > h {
        bw = (bw * bh / h).min(w);
        bh = h;
    }
    if bw > w {
        bh = (bh * bw / w).min(h);
        bw = w;
    }
    (bh.max(1.0), bw.max(1.0))
}

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Placed> {
    let (h, w) = (spec.meta.height as f64, spec.meta.width as f64);
    let count = rng.random_range(spec.object_count.0..=spec.object_count.1);
    let (lo, hi) = (spec.area_fraction.0.ln(), spec.area_fraction.1.ln());
    let mut objects: Vec<Placed> = (0..count)
        .map(|_| {
            let class = spec.object_classes[rng.random_range(0..spec.object_classes.len())];
            let look = appearance(class);
            let area = if hi > lo { rng.random_range(lo..=hi) } else { lo }.exp() * h * w;
            let aspect = if look.aspect.1 > look.aspect.0 {
                rng.random_range(look.aspect.0..look.aspect.1)
            } else {
                look.aspect.0
            };
            let (height, width) = extents(&look, area, aspect, rng, h, w);
            let top = rng.random_range(0.0..=(h - height)).floor();
            let left = rng.random_range(0.0..=(w - width)).floor();
            let tint = std::array::from_fn(|_| rng.random_range(-0.06..0.06));
            Placed { class, look, top, left, height, width, tint }
        })
        .collect();
    // Larger objects first so small ones stay visible on top.
    objects.sort_by(|a, b| (b.height * b.width).total_cmp(&(a.height * a.width)));
    objects
}

/// Renders scene `index` of `spec`. Pure in `(spec, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<(LabelMap, Image)> {
    spec.validate()?;
    let (h, w) = (spec.meta.height, spec.meta.width);
    let mut rng = rng::stream(spec.seed, &[rng::SCENE, index]);
    let objects = place_objects(spec, &mut rng);

    let mut owner = vec![usize::MAX; h * w];
    for (i, obj) in objects.iter().enumerate() {
        let r0 = obj.top.max(0.0) as usize;
        let c0 = obj.left.max(0.0) as usize;
        let r1 = ((obj.top + obj.height).ceil() as usize).min(h);
        let c1 = ((obj.left + obj.width).ceil() as usize).min(w);
        for r in r0..r1 {
            for c in c0..c1 {
                if obj.covers(r, c) {
                    owner[r * w + c] = i;
                }
            }
        }
    }
    if owner.iter().all(|&o| o != usize::MAX) {
        owner[0] = usize::MAX;
    }

    let bg = &spec.background;
    let horizon = (bg.horizon * h as f32).round() as usize;
    let mut labels = vec![0u8; h * w];
    let mut rgb = vec![0.0f32; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let color = match objects.get(owner[p]) {
                Some(obj) => {
                    labels[p] = obj.class;
                    obj.shade(r, c, &mut rng)
                }
                None => {
                    let base = if r < horizon { bg.sky } else { bg.ground };
                    let fade = if r < horizon { 0.2 * r as f32 / h as f32 } else { 0.0 };
                    let n = if bg.noise > 0.0 { rng.random_range(-bg.noise..bg.noise) } else { 0.0 };
                    base.map(|v| (v + fade + n).clamp(-1.0, 1.0))
                }
            };
            for k in 0..3 {
                rgb[k * h * w + p] = color[k];
            }
        }
    }
    Ok((LabelMap::new(h, w, labels)?, Image::new(h, w, rgb)?))
}

/// Scenes `start..start + count`, generated in parallel.
pub fn generate_scenes(spec: &SceneSpec, start: u64, count: usize) -> Result<Vec<(LabelMap, Image)>> {
    spec.validate()?;
    (0..count as u64).into_par_iter().map(|i| generate_scene(spec, start + i)).collect()
}
