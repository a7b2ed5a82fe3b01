//! Layers shared by the generator and the discriminator.

use dpgan_autograd::spectral::power_iterate;
use dpgan_autograd::{Bound, Float, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const LRELU_SLOPE: f64 = 0.2;
/// Suffix of the power-iteration buffer that belongs to a spectrally
/// normalized weight `<name>.weight`.
pub const SN_SUFFIX: &str = ".weight_u";

/// Per-channel mean and standard deviation over batch and spatial axes.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// `sigma` includes the `NORM_EPS` guard: `sqrt(var + eps)`.
pub fn compute_norm_stats<T: Float>(h: &Tensor<T>) -> Result<NormStats> {
    let [n, c, hh, ww] = h.dims4("compute_norm_stats")?;
    let hw = hh * ww;
    let count = (n * hw) as f64;
    if count == 0.0 {
        return Err(Error::Model("norm stats of an empty batch".into()));
    }
    let d = h.data();
    let mut mu = vec![0.0; c];
    let mut sigma = vec![0.0; c];
    for ch in 0..c {
        let plane = |b: usize| &d[(b * c + ch) * hw..(b * c + ch + 1) * hw];
        let mean = (0..n).flat_map(plane).map(|v| v.as_f64()).sum::<f64>() / count;
        let var = (0..n).flat_map(plane).map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / count;
        mu[ch] = mean;
        sigma[ch] = (var + NORM_EPS).sqrt();
    }
    Ok(NormStats { mu, sigma })
}

/// `gamma * (h - mu_c) / sigma_c + beta`, with `gamma` and `beta` shaped like `h`.
pub fn spade_modulate<T: Float>(h: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, stats: &NormStats) -> Result<Tensor<T>> {
    let [_, c, hh, ww] = h.dims4("spade_modulate")?;
    for (what, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != h.shape() {
            return Err(Error::Model(format!("spade {what} shape {:?} differs from activation {:?}", t.shape(), h.shape())));
        }
    }
    if stats.mu.len() != c || stats.sigma.len() != c {
        return Err(Error::Model(format!("norm stats for {} channels, activation has {c}", stats.mu.len())));
    }
    let hw = hh * ww;
    let out = h
        .data()
        .iter()
        .zip(gamma.data().iter().zip(beta.data()))
        .enumerate()
        .map(|(i, (&x, (&g, &b)))| {
            let ch = (i / hw) % c;
            T::of(g.as_f64() * (x.as_f64() - stats.mu[ch]) / stats.sigma[ch] + b.as_f64())
        })
        .collect();
    Ok(Tensor::new(h.shape(), out)?)
}

/// Everything a forward pass needs: the graph being recorded, the graph
/// leaves of the parameters, and the store (for power-iteration buffers).
pub struct Fwd<'a, T: Float> {
    pub g: &'a mut Graph<T>,
    pub bound: &'a Bound,
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Float> Fwd<'a, T> {
    pub fn new(g: &'a mut Graph<T>, bound: &'a Bound, store: &'a ParamStore<T>) -> Self {
        Self { g, bound, store }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn lrelu(&mut self, x: Var) -> Var {
        self.g.leaky_relu(x, LRELU_SLOPE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub bias: bool,
    /// Scale applied to the orthogonal initialization.
    pub gain: f64,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k, stride: 1, bias: true, gain: 1.0 }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }
}

/// Registers parameters in a store with deterministic initialization.
pub struct Builder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    /// Spectral normalization for every conv created while set.
    pub spectral: bool,
}

/// An `rows x cols` matrix with orthonormal rows or columns (whichever is
/// shorter), scaled by `gain`.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Vec<f64> {
    let (tall_r, tall_c) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall_r, tall_c, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..tall_c {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows >= cols { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(gain * m[(i, j)]);
        }
    }
    out
}

impl<'a, T: Float> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: ChaCha8Rng) -> Self {
        Self { store, rng, spectral: false }
    }

    fn insert(&mut self, name: String, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        Ok(self.store.insert(name, tensor, kind)?)
    }

    pub fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<Conv2d> {
        let ConvSpec { cin, cout, k, bias, gain, .. } = spec;
        let fan = cin * k * k;
        let w = orthogonal(cout, fan, gain, &mut self.rng);
        let weight = self.insert(
            format!("{name}.weight"),
            Tensor::new(&[cout, cin, k, k], w.iter().map(|&v| T::of(v)).collect())?,
            ParamKind::Trainable,
        )?;
        let bias = if bias {
            Some(self.insert(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Trainable)?)
        } else {
            None
        };
        let sn_u = if self.spectral {
            let mut u: Vec<f64> = (0..cout).map(|_| self.rng.sample(StandardNormal)).collect();
            power_iterate(&w, cout, &mut u, 20);
            let u = Tensor::new(&[cout], u.into_iter().map(T::of).collect())?;
            Some(self.insert(format!("{name}{SN_SUFFIX}"), u, ParamKind::Buffer)?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, sn_u, spec })
    }

    /// Per-channel scale (initialized to 1) and shift (initialized to 0).
    pub fn affine(&mut self, name: &str, channels: usize) -> Result<Affine> {
        let scale = self.insert(format!("{name}.scale"), Tensor::full(&[channels], T::one()), ParamKind::Trainable)?;
        let shift = self.insert(format!("{name}.shift"), Tensor::zeros(&[channels]), ParamKind::Trainable)?;
        Ok(Affine { scale, shift })
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub sn_u: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    /// "Same" padding; output size is `input / stride`.
    pub fn forward<T: Float>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let mut w = f.param(self.weight);
        if let Some(u) = self.sn_u {
            w = f.g.spectral_normalize(w, f.store.get(u).data())?;
        }
        let b = self.bias.map(|b| f.param(b));
        Ok(f.g.conv2d(x, w, b, self.spec.stride, self.spec.k / 2)?)
    }
}

#[derive(Clone, Debug)]
pub struct Affine {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl Affine {
    pub fn forward<T: Float>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let (s, b) = (f.param(self.scale), f.param(self.shift));
        Ok(f.g.channel_affine(x, s, b)?)
    }
}

/// 3x3 conv (no bias) -> batch standardization -> learned affine -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub affine: Affine,
}

impl ConvBlock {
    pub fn build<T: Float>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let conv = b.conv(&format!("{name}.conv"), ConvSpec::new(cin, cout, 3).stride(stride).no_bias())?;
        let affine = b.affine(&format!("{name}.norm"), cout)?;
        Ok(Self { conv, affine })
    }

    pub fn forward<T: Float>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(f, x)?;
        let h = f.g.batch_standardize(h, NORM_EPS)?;
        let h = self.affine.forward(f, h)?;
        Ok(f.g.relu(h))
    }
}

/// Spatially-adaptive normalization: parameter-free batch standardization
/// modulated by `1 + conv_gamma(cond)` and `conv_beta(cond)`.
#[derive(Clone, Debug)]
pub struct Spade {
    pub gamma: Conv2d,
    pub beta: Conv2d,
}

/// Init gain of the convs that produce gamma and beta.
pub const SPADE_GAIN: f64 = 0.1;

impl Spade {
    pub fn build<T: Float>(b: &mut Builder<'_, T>, name: &str, cond: usize, channels: usize) -> Result<Self> {
        let spec = ConvSpec::new(cond, channels, 3).gain(SPADE_GAIN);
        Ok(Self { gamma: b.conv(&format!("{name}.gamma"), spec)?, beta: b.conv(&format!("{name}.beta"), spec)? })
    }

    /// The `(gamma, beta)` maps for a conditioning input.
    pub fn params<T: Float>(&self, f: &mut Fwd<'_, T>, cond: Var) -> Result<(Var, Var)> {
        let g = self.gamma.forward(f, cond)?;
        let g = f.g.add_scalar(g, 1.0);
        let b = self.beta.forward(f, cond)?;
        Ok((g, b))
    }

    pub fn forward<T: Float>(&self, f: &mut Fwd<'_, T>, x: Var, cond: Var) -> Result<Var> {
        let (xs, cs) = (f.g.shape(x), f.g.shape(cond));
        if xs[2..] != cs[2..] {
            return Err(Error::Model(format!(
                "conditioning at {}x{} for an activation at {}x{}",
                cs[2], cs[3], xs[2], xs[3]
            )));
        }
        let (gamma, beta) = self.params(f, cond)?;
        let h = f.g.batch_standardize(x, NORM_EPS)?;
        let h = f.g.mul(h, gamma)?;
        Ok(f.g.add(h, beta)?)
    }
}

/// Pre-activation residual block with SPADE normalization, followed by a
/// nearest-neighbour 2x upsample.
#[derive(Clone, Debug)]
pub struct SpadeResBlock {
    pub norm_0: Spade,
    pub conv_0: Conv2d,
    pub norm_1: Spade,
    pub conv_1: Conv2d,
    pub skip: Option<Conv2d>,
}

impl SpadeResBlock {
    pub fn build<T: Float>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, cond: usize) -> Result<Self> {
        let mid = cin.min(cout);
        Ok(Self {
            norm_0: Spade::build(b, &format!("{name}.norm_0"), cond, cin)?,
            conv_0: b.conv(&format!("{name}.conv_0"), ConvSpec::new(cin, mid, 3))?,
            norm_1: Spade::build(b, &format!("{name}.norm_1"), cond, mid)?,
            conv_1: b.conv(&format!("{name}.conv_1"), ConvSpec::new(mid, cout, 3))?,
            skip: if cin != cout {
                Some(b.conv(&format!("{name}.skip"), ConvSpec::new(cin, cout, 1).no_bias())?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Float>(&self, f: &mut Fwd<'_, T>, x: Var, cond: Var) -> Result<Var> {
        let h = self.norm_0.forward(f, x, cond)?;
        let h = f.lrelu(h);
        let h = self.conv_0.forward(f, h)?;
        let h = self.norm_1.forward(f, h, cond)?;
        let h = f.lrelu(h);
        let h = self.conv_1.forward(f, h)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(f, x)?,
            None => x,
        };
        let out = f.g.add(s, h)?;
        Ok(f.g.upsample_nearest(out, 2)?)
    }
}

/// Residual block halving the resolution.
#[derive(Clone, Debug)]
pub struct ResBlockDown {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub skip: Conv2d,
    /// Skips the leading activation (for blocks that see raw images).
    pub first: bool,
}

impl ResBlockDown {
    pub fn build<T: Float>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, first: bool) -> Result<Self> {
        Ok(Self {
            conv_a: b.conv(&format!("{name}.conv_a"), ConvSpec::new(cin, cout, 3))?,
            conv_b: b.conv(&format!("{name}.conv_b"), ConvSpec::new(cout, cout, 3).stride(2))?,
            skip: b.conv(&format!("{name}.skip"), ConvSpec::new(cin, cout, 1))?,
            first,
        })
    }

    pub fn forward<T: Float>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let h = if self.first { x } else { f.lrelu(x) };
        let h = self.conv_a.forward(f, h)?;
        let h = f.lrelu(h);
        // A stride-2 "same" 3x3 conv equals the full conv followed by
        // nearest downsampling.
        let h = self.conv_b.forward(f, h)?;
        let s = f.g.downsample_nearest(x, 2)?;
        let s = self.skip.forward(f, s)?;
        Ok(f.g.add(s, h)?)
    }
}

/// Residual block doubling the resolution.
#[derive(Clone, Debug)]
pub struct ResBlockUp {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub skip: Conv2d,
}

impl ResBlockUp {
    pub fn build<T: Float>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv_a: b.conv(&format!("{name}.conv_a"), ConvSpec::new(cin, cout, 3))?,
            conv_b: b.conv(&format!("{name}.conv_b"), ConvSpec::new(cout, cout, 3))?,
            skip: b.conv(&format!("{name}.skip"), ConvSpec::new(cin, cout, 1))?,
        })
    }

    pub fn forward<T: Float>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let h = f.lrelu(x);
        let h = f.g.upsample_nearest(h, 2)?;
        let h = self.conv_a.forward(f, h)?;
        let h = f.lrelu(h);
        let h = self.conv_b.forward(f, h)?;
        // 1x1 conv commutes with nearest upsampling; run it at the lower resolution.
        let s = self.skip.forward(f, x)?;
        let s = f.g.upsample_nearest(s, 2)?;
        Ok(f.g.add(s, h)?)
    }
}

/// Runs power iteration on every spectrally normalized weight in `store`,
/// updating the buffers in place.
pub fn refresh_spectral<T: Float>(store: &mut ParamStore<T>, iters: usize) {
    let pairs: Vec<(ParamId, ParamId)> = store
        .ids()
        .filter_map(|u| {
            let name = &store.entry(u).name;
            let base = name.strip_suffix(SN_SUFFIX)?;
            store.find(&format!("{base}.weight")).map(|w| (w, u))
        })
        .collect();
    for (w, u) in pairs {
        let rows = store.get(w).shape()[0];
        let weight = store.get(w).data().to_vec();
        power_iterate(&weight, rows, store.get_mut(u).data_mut(), iters);
    }
}

/// Number of trainable scalars.
pub fn parameter_count<T: Float>(store: &ParamStore<T>) -> usize {
    store.entries().iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.tensor.numel()).sum()
}
