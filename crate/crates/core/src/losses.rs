//! Training objectives as graph functions.

use dpgan_autograd::{Float, Graph, Tensor, Var};
use rand::Rng;

use crate::config::{LmReduction, MaskGranularity};
use crate::error::{Error, Result};
use crate::scene_data::{connected_components, ClassWeights, LabelMap};

/// Per-pixel targets and class-balancing weights for a batch of label maps,
/// laid out as `(n, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelTargets {
    pub classes: Vec<usize>,
    /// `alpha[class]` of every pixel.
    pub alpha: Vec<f64>,
}

impl PixelTargets {
    pub fn new(labels: &[&LabelMap], weights: &ClassWeights) -> Self {
        let mut classes = Vec::new();
        let mut alpha = Vec::new();
        for l in labels {
            for &c in l.data() {
                classes.push(c as usize);
                alpha.push(weights.alpha.get(c as usize).copied().unwrap_or(0.0));
            }
        }
        Self { classes, alpha }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// `-mean_p alpha_p * log softmax(logits)[target_p]`.
pub fn pixel_loss_real<T: Float>(g: &mut Graph<T>, logits: Var, targets: &PixelTargets) -> Result<Var> {
    let logp = g.log_softmax_channels(logits)?;
    let inv = 1.0 / targets.len().max(1) as f64;
    let w: Vec<T> = targets.alpha.iter().map(|&a| T::of(a * inv)).collect();
    Ok(g.weighted_nll(logp, &targets.classes, &w)?)
}

/// `-mean_p log softmax(logits)[fake_class]`.
pub fn pixel_loss_fake<T: Float>(g: &mut Graph<T>, logits: Var, fake_class: usize) -> Result<Var> {
    let [n, _, h, w] = g.value(logits).dims4("pixel_loss_fake")?;
    let count = n * h * w;
    let logp = g.log_softmax_channels(logits)?;
    let wt = vec![T::of(1.0 / count as f64); count];
    Ok(g.weighted_nll(logp, &vec![fake_class; count], &wt)?)
}

/// `max(0, 1 - s)` averaged over locations.
fn hinge_below_one<T: Float>(g: &mut Graph<T>, s: Var) -> Var {
    let neg = g.scale(s, -1.0);
    let m = g.add_scalar(neg, 1.0);
    let r = g.relu(m);
    g.mean(r)
}

/// `max(0, 1 + s)` averaged over locations.
fn hinge_above_minus_one<T: Float>(g: &mut Graph<T>, s: Var) -> Var {
    let m = g.add_scalar(s, 1.0);
    let r = g.relu(m);
    g.mean(r)
}

fn average<T: Float>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms.split_first().ok_or_else(|| Error::Model("loss over an empty tap list".into()))?;
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Discriminator patch hinge, averaged over taps.
pub fn ms_patch_loss_d<T: Float>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::Model(format!("{} real and {} fake patch taps", real.len(), fake.len())));
    }
    let terms = real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| {
            let a = hinge_below_one(g, r);
            let b = hinge_above_minus_one(g, f);
            Ok(g.add(a, b)?)
        })
        .collect::<Result<Vec<_>>>()?;
    average(g, &terms)
}

/// Generator patch hinge `mean(max(0, 1 - s))`, or `-mean(s)` when `nonsat`.
pub fn ms_patch_loss_g<T: Float>(g: &mut Graph<T>, fake: &[Var], nonsat: bool) -> Result<Var> {
    let terms: Vec<Var> = fake
        .iter()
        .map(|&s| {
            if nonsat {
                let m = g.mean(s);
                g.scale(m, -1.0)
            } else {
                hinge_below_one(g, s)
            }
        })
        .collect();
    average(g, &terms)
}

/// Mean squared difference per tap, averaged over taps. Real taps are detached.
pub fn feature_match_loss<T: Float>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::Model(format!("{} real and {} fake feature taps", real.len(), fake.len())));
    }
    let terms = real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| {
            let r = g.detach(r);
            let d = g.sub(f, r)?;
            let d = g.square(d);
            Ok(g.mean(d))
        })
        .collect::<Result<Vec<_>>>()?;
    average(g, &terms)
}

/// Binary `h x w` mask with one fair coin flip per region.
pub fn labelmix_mask(label: &LabelMap, granularity: MaskGranularity, rng: &mut impl Rng) -> Vec<u8> {
    match granularity {
        MaskGranularity::Component => {
            let cc = connected_components(label);
            let flips: Vec<u8> = cc.list.iter().map(|_| rng.random_range(0..2)).collect();
            cc.ids.iter().map(|&id| flips[id as usize]).collect()
        }
        MaskGranularity::Class => {
            let flips: Vec<u8> = (0..256).map(|_| rng.random_range(0..2)).collect();
            label.data().iter().map(|&c| flips[c as usize]).collect()
        }
    }
}

/// Stacks `h x w` binary masks into an `[n, 1, h, w]` tensor.
pub fn mask_tensor<T: Float>(masks: &[Vec<u8>], h: usize, w: usize) -> Result<Tensor<T>> {
    let data = masks.iter().flatten().map(|&m| T::of(m as f64)).collect();
    Ok(Tensor::new(&[masks.len(), 1, h, w], data)?)
}

/// `M * x + (1 - M) * xhat`.
pub fn labelmix<T: Float>(g: &mut Graph<T>, x: Var, xhat: Var, mask: &Tensor<T>) -> Result<Var> {
    Ok(g.mask_mix(x, xhat, mask)?)
}

/// `|| D(mix) - mix(D(x), D(xhat)) ||^2`, summed per sample and averaged
/// over the batch (`Sum`), or averaged over every element (`Mean`).
pub fn labelmix_consistency_loss<T: Float>(
    g: &mut Graph<T>,
    logits_mix: Var,
    logits_real: Var,
    logits_fake: Var,
    mask: &Tensor<T>,
    reduction: LmReduction,
) -> Result<Var> {
    let target = g.mask_mix(logits_real, logits_fake, mask)?;
    let d = g.sub(logits_mix, target)?;
    let d = g.square(d);
    Ok(match reduction {
        LmReduction::Mean => g.mean(d),
        LmReduction::Sum => {
            let n = g.shape(d)[0].max(1);
            let s = g.sum(d);
            g.scale(s, 1.0 / n as f64)
        }
    })
}

/// `pixel + ms + fm` with unit weights; absent terms are skipped.
pub fn generator_loss<T: Float>(g: &mut Graph<T>, pixel: Var, ms: Option<Var>, fm: Option<Var>) -> Result<Var> {
    let mut total = pixel;
    for t in [ms, fm].into_iter().flatten() {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// `pixel + ms + lambda * lm`; absent terms are skipped.
pub fn discriminator_total_loss<T: Float>(
    g: &mut Graph<T>,
    pixel: Var,
    ms: Option<Var>,
    lm: Option<Var>,
    lambda_lm: f64,
) -> Result<Var> {
    let mut total = pixel;
    if let Some(ms) = ms {
        total = g.add(total, ms)?;
    }
    if let Some(lm) = lm {
        let lm = g.scale(lm, lambda_lm);
        total = g.add(total, lm)?;
    }
    Ok(total)
}

/// Scalar values of every term of one training step. Terms that are
/// switched off by the configuration report 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_pixel_real: f64,
    pub l_pixel_fake: f64,
    pub l_ms_d: f64,
    pub l_ms_g: f64,
    pub l_fm: f64,
    pub l_lm: f64,
    /// Weighted pixel term of the generator objective.
    pub l_pixel_g: f64,
    pub l_g_total: f64,
    pub l_d_total: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 9] =
        ["l_pixel_real", "l_pixel_fake", "l_ms_d", "l_ms_g", "l_fm", "l_lm", "l_pixel_g", "l_g_total", "l_d_total"];

    pub fn values(&self) -> [f64; 9] {
        [
            self.l_pixel_real,
            self.l_pixel_fake,
            self.l_ms_d,
            self.l_ms_g,
            self.l_fm,
            self.l_lm,
            self.l_pixel_g,
            self.l_g_total,
            self.l_d_total,
        ]
    }

    /// Fails with the name of the first non-finite term.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in Self::FIELDS.iter().zip(self.values()) {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: name, value: v });
            }
        }
        Ok(())
    }
}
