use std::path::Path;

use dpgan_autograd::{Bound, Graph, ParamStore, Tensor, Var};

use crate::blocks::{Builder, ConvSpec, Conv2d, Fwd};
use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::losses::{pixel_loss_real, PixelTargets};
use crate::rng;
use crate::scene_data::{class_frequencies, image_batch, Image, LabelMap};
use crate::trainer::{batch_indices, Adam};

/// Width of the pooled embedding.
pub const EMBED_DIM: usize = 64;
/// Images per forward pass during inference.
const CHUNK: usize = 16;

#[derive(Clone, Debug)]
struct Net {
    stem: Conv2d,
    stem2: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    mid: Conv2d,
    fuse: Conv2d,
    head: Conv2d,
}

impl Net {
    fn build(b: &mut Builder<'_, f32>, num_classes: usize) -> Result<Self> {
        let relu_gain = std::f64::consts::SQRT_2;
        Ok(Self {
            stem: b.conv("stem", ConvSpec::new(3, 32, 3).gain(relu_gain))?,
            stem2: b.conv("stem2", ConvSpec::new(32, 32, 3).gain(relu_gain))?,
            down1: b.conv("down1", ConvSpec::new(32, 48, 3).stride(2).gain(relu_gain))?,
            down2: b.conv("down2", ConvSpec::new(48, 64, 3).stride(2).gain(relu_gain))?,
            mid: b.conv("mid", ConvSpec::new(64, 64, 3).gain(relu_gain))?,
            fuse: b.conv("fuse", ConvSpec::new(96, EMBED_DIM, 1).gain(relu_gain))?,
            head: b.conv("head", ConvSpec::new(EMBED_DIM, num_classes, 1))?,
        })
    }

    /// Returns the penultimate features and the class logits.
    fn forward(&self, f: &mut Fwd<'_, f32>, x: Var) -> Result<(Var, Var)> {
        let conv_relu = |c: &Conv2d, f: &mut Fwd<'_, f32>, x: Var| -> Result<Var> {
            let y = c.forward(f, x)?;
            Ok(f.g.relu(y))
        };
        let s = conv_relu(&self.stem, f, x)?;
        let s = conv_relu(&self.stem2, f, s)?;
        let d = conv_relu(&self.down1, f, s)?;
        let d = conv_relu(&self.down2, f, d)?;
        let d = conv_relu(&self.mid, f, d)?;
        let up = f.g.upsample_nearest(d, 4)?;
        let cat = f.g.concat(&[s, up], 1)?;
        let feat = conv_relu(&self.fuse, f, cat)?;
        let logits = self.head.forward(f, feat)?;
        Ok((feat, logits))
    }
}

/// Small fully convolutional segmenter with no normalization layers, so each
/// image is processed independently of its batch. Its pooled penultimate
/// features double as the image embedding.
#[derive(Clone, Debug)]
pub struct FrozenSegmenter {
    num_classes: usize,
    net: Net,
    store: ParamStore<f32>,
}

fn check_images(images: &Tensor<f32>) -> Result<[usize; 4]> {
    let dims = images.dims4("segmenter input")?;
    let [_, c, h, w] = dims;
    if c != 3 || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::Metric(format!("segmenter expects [n, 3, h, w] with h and w multiples of 4, got {dims:?}")));
    }
    Ok(dims)
}

impl FrozenSegmenter {
    /// Randomly initialized network.
    pub fn new(num_classes: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Net::build(&mut Builder::new(&mut store, rng::stream(seed, &[rng::INIT, 2])), num_classes)?;
        Ok(Self { num_classes, net, store })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn run<R>(&self, images: &Tensor<f32>, mut take: impl FnMut(&Graph<f32>, Var, Var) -> R) -> Result<Vec<R>> {
        let [n, ..] = check_images(images)?;
        let mut out = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let chunk = images.batch_slice(start, CHUNK.min(n - start))?;
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, &self.store, false);
            let mut f = Fwd::new(&mut g, &bound, &self.store);
            let x = f.g.constant(chunk);
            let (feat, logits) = self.net.forward(&mut f, x)?;
            out.push(take(&g, feat, logits));
        }
        Ok(out)
    }

    /// Class logits `[n, num_classes, h, w]`.
    pub fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let parts = self.run(images, |g, _, l| g.value(l).clone())?;
        Ok(Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())?)
    }

    /// Per-pixel argmax labels.
    pub fn segment(&self, images: &Tensor<f32>) -> Result<Vec<LabelMap>> {
        let logits = self.logits(images)?;
        let [n, c, h, w] = logits.dims4("logits")?;
        let hw = h * w;
        let d = logits.data();
        (0..n)
            .map(|b| {
                let labels = (0..hw)
                    .map(|p| {
                        let mut best = 0;
                        for k in 1..c {
                            if d[(b * c + k) * hw + p] > d[(b * c + best) * hw + p] {
                                best = k;
                            }
                        }
                        best as u8
                    })
                    .collect();
                LabelMap::new(h, w, labels)
            })
            .collect()
    }

    /// Spatially averaged penultimate features, one `EMBED_DIM` vector per image.
    pub fn embed(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let parts = self.run(images, |g, feat, _| {
            let t = g.value(feat);
            let [n, c, h, w] = t.dims4("features").expect("rank-4 features");
            let hw = h * w;
            (0..n)
                .map(|b| (0..c).map(|k| t.data()[(b * c + k) * hw..(b * c + k + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64).collect())
                .collect::<Vec<Vec<f64>>>()
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        a.push_f64("meta.num_classes", Tensor::scalar(self.num_classes as f64));
        a.push_store("seg.", &self.store);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let num_classes = a.require("meta.num_classes")?.to_f64().item()? as usize;
        if !(2..=256).contains(&num_classes) {
            return Err(Error::Checkpoint(format!("segmenter with {num_classes} classes")));
        }
        let mut s = Self::new(num_classes, 0)?;
        a.fill_store("seg.", &mut s.store)?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SegmenterTraining {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 8, lr: 1e-3, seed: 0 }
    }
}

/// Fits a segmenter on `data` with class-balanced cross-entropy and Adam.
/// `progress` receives `(step, loss)` after every update.
pub fn train_segmenter(
    data: &[(LabelMap, Image)],
    num_classes: usize,
    opts: &SegmenterTraining,
    mut progress: impl FnMut(usize, f64),
) -> Result<FrozenSegmenter> {
    if data.is_empty() || opts.batch_size == 0 {
        return Err(Error::Metric("segmenter training needs data and a positive batch size".into()));
    }
    let mut seg = FrozenSegmenter::new(num_classes, opts.seed)?;
    let mut opt = Adam::new(&seg.store, opts.lr, 0.9, 0.999, 1e-8);
    for step in 0..opts.steps {
        let idx = batch_indices(opts.seed, step as u64, opts.batch_size, data.len());
        let labels: Vec<&LabelMap> = idx.iter().map(|&i| &data[i].0).collect();
        let images: Vec<&Image> = idx.iter().map(|&i| &data[i].1).collect();
        let x: Tensor<f32> = image_batch(&images)?;
        check_images(&x)?;
        let targets = PixelTargets::new(&labels, &class_frequencies(&labels, num_classes));
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &seg.store, true);
        let loss = {
            let mut f = Fwd::new(&mut g, &bound, &seg.store);
            let xv = f.g.constant(x);
            let (_, logits) = seg.net.forward(&mut f, xv)?;
            pixel_loss_real(f.g, logits, &targets)?
        };
        let value = g.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { term: "segmenter", value });
        }
        let mut grads = g.backward(loss)?;
        let grads = bound.gradients(&mut grads);
        opt.step(&mut seg.store, &grads);
        progress(step, value);
    }
    Ok(seg)
}
