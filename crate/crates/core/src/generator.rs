//! Dual-pyramid generator: a downsampling feature pyramid over `z ++ label`
//! whose outputs condition every rung of a SPADE upsampling pyramid.

use dpgan_autograd::{Bound, Float, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::blocks::{Builder, Conv2d, ConvBlock, ConvSpec, Fwd, SpadeResBlock};
use crate::config::{GenVariant, ModelConfig, ZMode};
use crate::error::{Error, Result};

/// Synthesis-pyramid widths at 256x256, bottom (8x8) first.
pub const FULL_ISP_WIDTHS: [usize; 6] = [1024, 1024, 512, 256, 128, 64];
pub const FULL_SAP_STEM: usize = 32;
pub const FULL_ALPHA: usize = 64;
/// Resolution of the bottom rung.
pub const BOTTOM: usize = 8;

/// Channel and resolution ladder of a generator, independent of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorArch {
    pub resolution: usize,
    pub input_channels: usize,
    /// `(channels, size)` of each SAP block output, in evaluation order.
    pub sap: Vec<(usize, usize)>,
    pub alpha_channels: usize,
    /// Input channels of the conditioning convs at every rung.
    pub cond_channels: usize,
    /// `(in_channels, out_channels, input_size)` of each SPADE block.
    pub isp: Vec<(usize, usize, usize)>,
}

impl GeneratorArch {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.resolution;
        let rungs = (r / BOTTOM).trailing_zeros() as usize;
        let div = cfg.width_divisor;
        let input_channels = cfg.z_dim + cfg.num_classes;
        let alpha = FULL_ALPHA / div;
        let mut sap = vec![(FULL_SAP_STEM / div, r), (alpha, r)];
        sap.extend((1..=rungs).map(|j| (alpha, r >> j)));
        let widths: Vec<usize> = FULL_ISP_WIDTHS[..=rungs].iter().map(|w| w / div).collect();
        let isp = (0..rungs).map(|i| (widths[i], widths[i + 1], BOTTOM << i)).collect();
        let cond_channels = match (cfg.gen, cfg.no_cat) {
            (GenVariant::Oa, _) => input_channels,
            (GenVariant::Dp, true) => alpha,
            (GenVariant::Dp, false) => 2 * alpha,
        };
        Ok(Self { resolution: r, input_channels, sap, alpha_channels: alpha, cond_channels, isp })
    }

    pub fn rungs(&self) -> usize {
        self.isp.len()
    }

    /// `(channels, size)` of alpha^i for `i = 0..=rungs` (alpha^0 is 8x8).
    pub fn alphas(&self) -> Vec<(usize, usize)> {
        (0..=self.rungs()).map(|i| (self.alpha_channels, BOTTOM << i)).collect()
    }

    /// `(channels, size)` after each SPADE block, ending at the full resolution.
    pub fn isp_outputs(&self) -> Vec<(usize, usize)> {
        self.isp.iter().map(|&(_, cout, s)| (cout, 2 * s)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: ModelConfig,
    pub arch: GeneratorArch,
    pub sap: Vec<ConvBlock>,
    pub init: Conv2d,
    pub blocks: Vec<SpadeResBlock>,
    pub out: Conv2d,
}

/// Graph handles produced by one generator pass.
#[derive(Clone, Debug)]
pub struct GenOutput {
    pub image: Var,
    /// `alphas[i]` is alpha^i; empty for the label-only variant.
    pub alphas: Vec<Var>,
    /// Conditioning input of each rung.
    pub conds: Vec<Var>,
}

impl Generator {
    pub fn build<T: Float>(cfg: &ModelConfig, b: &mut Builder<'_, T>) -> Result<Self> {
        let arch = GeneratorArch::new(cfg)?;
        b.spectral = cfg.g_spectral;
        let mut sap = Vec::new();
        if cfg.gen == GenVariant::Dp {
            let mut cin = arch.input_channels;
            for (j, &(cout, size)) in arch.sap.iter().enumerate() {
                let stride = if j < 2 { 1 } else { 2 };
                debug_assert!(j < 2 || size * 2 == arch.sap[j - 1].1);
                sap.push(ConvBlock::build(b, &format!("sap.{j}"), cin, cout, stride)?);
                cin = cout;
            }
        }
        let init = b.conv("isp.init", ConvSpec::new(arch.input_channels, arch.isp[0].0, 3))?;
        let blocks = arch
            .isp
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, _))| SpadeResBlock::build(b, &format!("isp.{i}"), cin, cout, arch.cond_channels))
            .collect::<Result<Vec<_>>>()?;
        let top = arch.isp.last().map_or(0, |s| s.1);
        let out_in = if cfg.route_top_alpha { top + arch.alpha_channels } else { top };
        let out = b.conv("isp.out", ConvSpec::new(out_in, 3, 3))?;
        Ok(Self { cfg: cfg.clone(), arch, sap, init, blocks, out })
    }

    /// Alpha ladder of the adaptation pyramid; `alphas[i]` is alpha^i.
    pub fn adaptation_pyramid<T: Float>(&self, f: &mut Fwd<'_, T>, zy: Var) -> Result<Vec<Var>> {
        if self.sap.is_empty() {
            return Err(Error::Model("the label-only generator has no adaptation pyramid".into()));
        }
        let mut h = zy;
        let mut top_first = Vec::new();
        for (j, block) in self.sap.iter().enumerate() {
            h = block.forward(f, h)?;
            if j >= 1 {
                top_first.push(h);
            }
        }
        top_first.reverse();
        Ok(top_first)
    }

    /// Conditioning input of every rung.
    pub fn conditioning<T: Float>(&self, f: &mut Fwd<'_, T>, zy: Var, alphas: &[Var]) -> Result<Vec<Var>> {
        (0..self.arch.rungs())
            .map(|i| match self.cfg.gen {
                GenVariant::Oa => Ok(f.g.downsample_nearest(zy, self.arch.resolution / (BOTTOM << i))?),
                GenVariant::Dp if self.cfg.no_cat => Ok(alphas[i]),
                GenVariant::Dp => {
                    let up = f.g.upsample_nearest(alphas[0], 1 << i)?;
                    Ok(f.g.concat(&[alphas[i], up], 1)?)
                }
            })
            .collect()
    }

    /// Records a generator pass. `z` is `[n, z_dim, R, R]`, `label` the
    /// one-hot `[n, N, R, R]`.
    pub fn forward<T: Float>(&self, f: &mut Fwd<'_, T>, z: Var, label: Var) -> Result<GenOutput> {
        let r = self.arch.resolution;
        let expect = |what: &str, shape: &[usize], c: usize| {
            if shape.len() != 4 || shape[1] != c || shape[2] != r || shape[3] != r {
                return Err(Error::Model(format!("generator {what} has shape {shape:?}, expected [n, {c}, {r}, {r}]")));
            }
            Ok(())
        };
        expect("noise", f.g.shape(z), self.cfg.z_dim)?;
        expect("label", f.g.shape(label), self.cfg.num_classes)?;
        let zy = f.g.concat(&[z, label], 1)?;
        let alphas = match self.cfg.gen {
            GenVariant::Dp => self.adaptation_pyramid(f, zy)?,
            GenVariant::Oa => Vec::new(),
        };
        let conds = self.conditioning(f, zy, &alphas)?;
        let bottom = f.g.downsample_nearest(zy, r / BOTTOM)?;
        let mut x = self.init.forward(f, bottom)?;
        for (block, &cond) in self.blocks.iter().zip(&conds) {
            x = block.forward(f, x, cond)?;
        }
        x = f.lrelu(x);
        if self.cfg.route_top_alpha {
            let top = *alphas.last().ok_or_else(|| Error::Model("route_top_alpha needs the dual-pyramid generator".into()))?;
            x = f.g.concat(&[x, top], 1)?;
        }
        x = self.out.forward(f, x)?;
        let image = f.g.tanh(x);
        Ok(GenOutput { image, alphas, conds })
    }

    /// Untracked synthesis.
    pub fn synthesize<T: Float>(&self, store: &ParamStore<T>, z: &Tensor<T>, label: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, store, false);
        let mut f = Fwd::new(&mut g, &bound, store);
        let z = f.g.constant(z.clone());
        let label = f.g.constant(label.clone());
        let out = self.forward(&mut f, z, label)?;
        Ok(g.value(out.image).clone())
    }
}

/// `[n, z_dim, size, size]` standard normal noise. In tiled mode one vector
/// per sample is replicated over all locations.
pub fn sample_noise<T: Float>(rng: &mut impl Rng, n: usize, z_dim: usize, size: usize, mode: ZMode) -> Tensor<T> {
    let hw = size * size;
    let mut data = Vec::with_capacity(n * z_dim * hw);
    for _ in 0..n {
        for _ in 0..z_dim {
            match mode {
                ZMode::Tiled => {
                    let v: f64 = rng.sample(StandardNormal);
                    data.extend(std::iter::repeat_n(T::of(v), hw));
                }
                ZMode::PerPixel => data.extend((0..hw).map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))),
            }
        }
    }
    Tensor::new(&[n, z_dim, size, size], data).expect("noise shape")
}
