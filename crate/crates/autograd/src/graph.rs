use crate::conv::{self, ConvGeom};
use crate::float::Float;
use crate::spectral;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Standardize { x: Var, inv_std: Vec<T> },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Ln(Var),
    Square(Var),
    Concat { parts: Vec<(Var, usize)>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Upsample { x: Var, factor: usize },
    Downsample { x: Var, factor: usize },
    LogSoftmax(Var),
    WeightedNll { logp: Var, targets: Vec<usize>, weights: Vec<T> },
    Sum(Var),
    Mean(Var),
    MaskMix { a: Var, b: Var, mask: Tensor<T> },
    SpectralNorm { w: Var, u: Vec<T>, v: Vec<T>, sigma: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation, replayed in reverse by
/// [`Graph::backward`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_axis_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape { op, expected: self.shape(a).to_vec(), found: self.shape(b).to_vec() });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// 2-D convolution with a square `k x k` kernel. `w` is `[cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4("conv2d")?;
        let [cout, wcin, k, k2] = self.value(w).dims4("conv2d weight")?;
        if wcin != cin || k != k2 {
            return Err(TensorError::Shape {
                op: "conv2d",
                expected: vec![cout, cin, k, k],
                found: self.shape(w).to_vec(),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::Shape { op: "conv2d bias", expected: vec![cout], found: self.shape(b).to_vec() });
            }
        }
        if stride == 0 {
            return Err(TensorError::Invalid("conv2d stride must be positive".into()));
        }
        let (ho, wo) = match (ConvGeom::out_size(h, k, stride, pad), ConvGeom::out_size(wd, k, stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(TensorError::Invalid(format!("kernel {k} larger than padded input {h}x{wd}"))),
        };
        let geom = ConvGeom { n, cin, h, w: wd, cout, k, stride, pad, ho, wo };
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let s = T::of(factor);
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let s = T::of(offset);
        self.unary(x, |v| v + s, Op::Shift(x))
    }

    /// `x[n, c, ..] * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::Rank { op: "channel_affine", expected: 4, shape: xs });
        }
        let c = xs[1];
        for p in [scale, shift] {
            if self.shape(p) != [c] {
                return Err(TensorError::Shape { op: "channel_affine", expected: vec![c], found: self.shape(p).to_vec() });
            }
        }
        let (outer, _, inner) = outer_axis_inner(&xs, 1);
        let (sv, bv) = (self.value(scale).data(), self.value(shift).data());
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                out.extend(xv[base..base + inner].iter().map(|&v| v * sv[ch] + bv[ch]));
            }
        }
        let value = Tensor::new(&xs, out)?;
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(value, Op::ChannelAffine { x, scale, shift }, rg))
    }

    /// Per-channel standardization over batch and spatial axes:
    /// `(x - mean_c) / sqrt(var_c + eps)` with the biased variance.
    pub fn batch_standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("batch_standardize")?;
        let hw = h * w;
        let count = (n * hw) as f64;
        let xv = self.value(x).data();
        let mut inv_std = Vec::with_capacity(c);
        let mut means = Vec::with_capacity(c);
        for ch in 0..c {
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for b in 0..n {
                for &v in &xv[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    let v = v.as_f64();
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s / count;
            let var = (s2 / count - mean * mean).max(0.0);
            means.push(T::of(mean));
            inv_std.push(T::of(1.0 / (var + eps).sqrt()));
        }
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for (o, &v) in out[r.clone()].iter_mut().zip(&xv[r]) {
                    *o = (v - means[ch]) * inv_std[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Standardize { x, inv_std }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(x, |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Rank { op: "concat", expected: axis + 1, shape: base });
        }
        let mut total = 0;
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape { op: "concat", expected: base.clone(), found: s.to_vec() });
            }
            total += s[axis];
            sizes.push((p, s[axis]));
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = outer_axis_inner(&base, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &(p, size) in &sizes {
                let chunk = size * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat { parts: sizes, axis }, rg))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(TensorError::Invalid(format!("narrow {start}+{len} on axis {axis} of {xs:?}")));
        }
        let (outer, size, inner) = outer_axis_inner(&xs, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * size + start) * inner;
            out.extend_from_slice(&xv[from..from + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    /// Nearest-neighbour upsampling by an integer factor (block replication).
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("upsample_nearest")?;
        if factor == 0 {
            return Err(TensorError::Invalid("upsample factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in xv.chunks(h * w) {
            for oy in 0..ho {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..wo {
                    out.push(row[ox / factor]);
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample { x, factor }, rg))
    }

    /// Nearest-neighbour downsampling: keeps every `factor`-th row and column.
    pub fn downsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("downsample_nearest")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(TensorError::Invalid(format!("cannot downsample {h}x{w} by {factor}")));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (ho, wo) = (h / factor, w / factor);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in xv.chunks(h * w) {
            for oy in 0..ho {
                for ox in 0..wo {
                    out.push(plane[oy * factor * w + ox * factor]);
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Downsample { x, factor }, rg))
    }

    /// Log-softmax over the channel axis of an NCHW tensor.
    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("log_softmax_channels")?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut m = T::neg_infinity();
                for ch in 0..c {
                    m = m.max(xv[base + ch * hw + p]);
                }
                let mut s = T::zero();
                for ch in 0..c {
                    s += (xv[base + ch * hw + p] - m).exp();
                }
                let lse = m + s.ln();
                for ch in 0..c {
                    out[base + ch * hw + p] = xv[base + ch * hw + p] - lse;
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    /// `-sum_p weights[p] * logp[n, targets[p], y, x]` over pixels `p = (n, y, x)`.
    ///
    /// Any normalization is folded into `weights`.
    pub fn weighted_nll(&mut self, logp: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let [n, c, h, w] = self.value(logp).dims4("weighted_nll")?;
        let hw = h * w;
        if targets.len() != n * hw || weights.len() != n * hw {
            return Err(TensorError::Invalid(format!(
                "weighted_nll expects {} targets and weights, got {} and {}",
                n * hw,
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Invalid(format!("target class {t} out of range for {c} channels")));
        }
        let lv = self.value(logp).data();
        let mut acc = T::zero();
        for (p, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
            let (b, pix) = (p / hw, p % hw);
            acc += wt * lv[(b * c + t) * hw + pix];
        }
        let rg = self.rg(&[logp]);
        Ok(self.push(
            Tensor::scalar(-acc),
            Op::WeightedNll { logp, targets: targets.to_vec(), weights: weights.to_vec() },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / T::of(v.numel().max(1) as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `mask * a + (1 - mask) * b`, with a `[n, 1, h, w]` mask broadcast over channels.
    pub fn mask_mix(&mut self, a: Var, b: Var, mask: &Tensor<T>) -> Result<Var> {
        self.same_shape("mask_mix", a, b)?;
        let [n, c, h, w] = self.value(a).dims4("mask_mix")?;
        if mask.shape() != [n, 1, h, w] {
            return Err(TensorError::Shape { op: "mask_mix", expected: vec![n, 1, h, w], found: mask.shape().to_vec() });
        }
        let hw = h * w;
        let (av, bv, mv) = (self.value(a).data(), self.value(b).data(), mask.data());
        let mut out = vec![T::zero(); av.len()];
        for bi in 0..n {
            let m = &mv[bi * hw..(bi + 1) * hw];
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for p in 0..hw {
                    out[base + p] = m[p] * av[base + p] + (T::one() - m[p]) * bv[base + p];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MaskMix { a, b, mask: mask.clone() }, rg))
    }

    /// `w / sigma` where `sigma = u^T W v`, `v = normalize(W^T u)`, and `W` is
    /// `w` flattened to `[rows, numel / rows]`. `u` and `v` carry no gradient.
    pub fn spectral_normalize(&mut self, w: Var, u: &[T]) -> Result<Var> {
        let wv = self.value(w);
        let rows = *wv.shape().first().ok_or(TensorError::NotScalar { shape: vec![] })?;
        if u.len() != rows {
            return Err(TensorError::Shape { op: "spectral_normalize", expected: vec![rows], found: vec![u.len()] });
        }
        let (v, sigma) = spectral::sigma(wv.data(), rows, u);
        let inv = T::one() / sigma;
        let value = wv.map(|x| x * inv);
        let rg = self.rg(&[w]);
        Ok(self.push(value, Op::SpectralNorm { w, u: u.to_vec(), v, sigma }, rg))
    }

    /// A gradient-free copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn accumulate_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) -> Result<()> {
        let t = Tensor::new(self.shape(v), data)?;
        self.accumulate(grads, v, t)
    }

    fn propagate(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let g = gy.data();
        let zip = |v: Var, f: &dyn Fn(T, T) -> T| -> Vec<T> {
            self.value(v).data().iter().zip(g).map(|(&x, &d)| f(x, d)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.requires_grad(*x), self.requires_grad(*w), b.is_some_and(|b| self.requires_grad(b)));
                let cg = conv::backward(geom, self.value(*x).data(), self.value(*w).data(), g, need);
                if let Some(dx) = cg.dx {
                    self.accumulate_vec(grads, *x, dx)?;
                }
                if let Some(dw) = cg.dw {
                    self.accumulate_vec(grads, *w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate_vec(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone())?;
                self.accumulate(grads, *b, gy.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone())?;
                self.accumulate(grads, *b, gy.map(|d| -d))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate_vec(grads, *a, zip(*b, &|y, d| y * d))?;
                }
                if self.requires_grad(*b) {
                    self.accumulate_vec(grads, *b, zip(*a, &|x, d| x * d))?;
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, gy.map(|d| d * s))?;
            }
            Op::Shift(x) => self.accumulate(grads, *x, gy.clone())?,
            Op::ChannelAffine { x, scale, shift } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let (outer, _, inner) = outer_axis_inner(xs, 1);
                let (xv, sv) = (self.value(*x).data(), self.value(*scale).data());
                let mut dscale = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            dscale[ch] += g[i] * xv[i];
                            dshift[ch] += g[i];
                            dx[i] = g[i] * sv[ch];
                        }
                    }
                }
                self.accumulate_vec(grads, *x, dx)?;
                self.accumulate_vec(grads, *scale, dscale)?;
                self.accumulate_vec(grads, *shift, dshift)?;
            }
            Op::Standardize { x, inv_std } => {
                let [n, c, h, w] = node.value.dims4("batch_standardize")?;
                let hw = h * w;
                let count = T::of((n * hw) as f64);
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ch in 0..c {
                    let (mut sd, mut sdy) = (T::zero(), T::zero());
                    for b in 0..n {
                        for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            sd += g[i];
                            sdy += g[i] * y[i];
                        }
                    }
                    let (md, mdy) = (sd / count, sdy / count);
                    for b in 0..n {
                        for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            dx[i] = inv_std[ch] * (g[i] - md - y[i] * mdy);
                        }
                    }
                }
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::Relu(x) => {
                self.accumulate_vec(grads, *x, zip(*x, &|v, d| if v > T::zero() { d } else { T::zero() }))?
            }
            Op::LeakyRelu(x, s) => {
                let s = *s;
                self.accumulate_vec(grads, *x, zip(*x, &|v, d| if v > T::zero() { d } else { d * s }))?
            }
            Op::Tanh(x) => {
                let dx = node.value.data().iter().zip(g).map(|(&y, &d)| d * (T::one() - y * y)).collect();
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::Ln(x) => self.accumulate_vec(grads, *x, zip(*x, &|v, d| d / v))?,
            Op::Square(x) => self.accumulate_vec(grads, *x, zip(*x, &|v, d| T::of(2.0) * v * d))?,
            Op::Concat { parts, axis } => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = outer_axis_inner(node.value.shape(), *axis);
                let mut offset = 0;
                for &(p, size) in parts {
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(outer * size * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            d.extend_from_slice(&g[from..from + size * inner]);
                        }
                        self.accumulate_vec(grads, p, d)?;
                    }
                    offset += size;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, size, inner) = outer_axis_inner(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![T::zero(); outer * size * inner];
                for o in 0..outer {
                    let to = (o * size + start) * inner;
                    d[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate_vec(grads, *x, d)?;
            }
            Op::Upsample { x, factor } => {
                let [_, _, h, w] = self.value(*x).dims4("upsample_nearest")?;
                let wo = w * factor;
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (plane, dplane) in g.chunks(h * factor * wo).zip(d.chunks_mut(h * w)) {
                    for (i, &v) in plane.iter().enumerate() {
                        let (oy, ox) = (i / wo, i % wo);
                        dplane[(oy / factor) * w + ox / factor] += v;
                    }
                }
                self.accumulate_vec(grads, *x, d)?;
            }
            Op::Downsample { x, factor } => {
                let [_, _, h, w] = self.value(*x).dims4("downsample_nearest")?;
                let (ho, wo) = (h / factor, w / factor);
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (plane, dplane) in g.chunks(ho * wo).zip(d.chunks_mut(h * w)) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dplane[oy * factor * w + ox * factor] = plane[oy * wo + ox];
                        }
                    }
                }
                self.accumulate_vec(grads, *x, d)?;
            }
            Op::LogSoftmax(x) => {
                let [n, c, h, w] = node.value.dims4("log_softmax_channels")?;
                let hw = h * w;
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for b in 0..n {
                    let base = b * c * hw;
                    for p in 0..hw {
                        let mut s = T::zero();
                        for ch in 0..c {
                            s += g[base + ch * hw + p];
                        }
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            d[i] = g[i] - y[i].exp() * s;
                        }
                    }
                }
                self.accumulate_vec(grads, *x, d)?;
            }
            Op::WeightedNll { logp, targets, weights } => {
                let [_, c, h, w] = self.value(*logp).dims4("weighted_nll")?;
                let hw = h * w;
                let gs = g[0];
                let mut d = vec![T::zero(); self.value(*logp).numel()];
                for (p, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                    let (b, pix) = (p / hw, p % hw);
                    d[(b * c + t) * hw + pix] = -wt * gs;
                }
                self.accumulate_vec(grads, *logp, d)?;
            }
            Op::Sum(x) => {
                let gs = g[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gs))?;
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).numel().max(1) as f64);
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g[0] / n))?;
            }
            Op::MaskMix { a, b, mask } => {
                let [n, c, h, w] = node.value.dims4("mask_mix")?;
                let hw = h * w;
                let mv = mask.data();
                let mut da = vec![T::zero(); g.len()];
                let mut db = vec![T::zero(); g.len()];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for p in 0..hw {
                            let m = mv[bi * hw + p];
                            da[base + p] = m * g[base + p];
                            db[base + p] = (T::one() - m) * g[base + p];
                        }
                    }
                }
                self.accumulate_vec(grads, *a, da)?;
                self.accumulate_vec(grads, *b, db)?;
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wv = self.value(*w).data();
                let cols = v.len();
                let s = *sigma;
                let inner: T = g.iter().zip(wv).map(|(&d, &x)| d * x).sum();
                let k = inner / (s * s);
                let mut d = Vec::with_capacity(wv.len());
                for (r, &ur) in u.iter().enumerate() {
                    for (cc, &vc) in v.iter().enumerate() {
                        d.push(g[r * cols + cc] / s - k * ur * vc);
                    }
                }
                self.accumulate_vec(grads, *w, d)?;
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
