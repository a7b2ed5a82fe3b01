//! U-Net discriminator with per-pixel (N+1)-class logits, patch heads on
//! selected blocks, and feature taps for feature matching.

use dpgan_autograd::{Bound, Float, Graph, ParamStore, Tensor, Var};

use crate::blocks::{Affine, Builder, Conv2d, ConvSpec, Fwd, ResBlockDown, ResBlockUp, NORM_EPS};
use crate::config::{ModelConfig, Placement};
use crate::error::{Error, Result};

/// Encoder widths at 256x256, first block first.
pub const FULL_ENC_WIDTHS: [usize; 6] = [128, 128, 256, 256, 512, 512];
/// Decoder widths at 256x256, first (lowest-resolution) block first.
pub const FULL_DEC_WIDTHS: [usize; 6] = [512, 256, 256, 128, 128, 64];
/// Resolution at the bottom of the encoder.
pub const BOTTOM: usize = 4;

/// A block of the U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    /// Encoder block, 1-based.
    Enc(usize),
    /// Decoder block, 1-based.
    Dec(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorArch {
    pub resolution: usize,
    pub num_classes: usize,
    /// `(channels, size)` after each encoder block.
    pub enc: Vec<(usize, usize)>,
    /// `(in_channels, out_channels, out_size)` of each decoder block.
    pub dec: Vec<(usize, usize, usize)>,
    pub patch_sites: Vec<Site>,
    pub fm_sites: Vec<Site>,
}

impl DiscriminatorArch {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.resolution;
        let m = (r / BOTTOM).trailing_zeros() as usize;
        let div = cfg.width_divisor;
        let enc_w: Vec<usize> = FULL_ENC_WIDTHS[6 - m..].iter().map(|w| w / div).collect();
        let dec_w: Vec<usize> = FULL_DEC_WIDTHS[..m].iter().map(|w| w / div).collect();
        let enc: Vec<(usize, usize)> = (0..m).map(|i| (enc_w[i], r >> (i + 1))).collect();
        let dec = (0..m)
            .map(|j| {
                let cin = if j == 0 { enc_w[m - 1] } else { dec_w[j - 1] + enc_w[m - 1 - j] };
                (cin, dec_w[j], BOTTOM << (j + 1))
            })
            .collect();
        let enc_taps: Vec<Site> = if cfg.patch_taps.is_empty() {
            vec![Site::Enc(m - 1), Site::Enc(m)]
        } else {
            cfg.patch_taps.iter().map(|&t| Site::Enc(t)).collect()
        };
        let dec_taps = vec![Site::Dec(1), Site::Dec(2)];
        let patch_sites = match cfg.ms_placement {
            Placement::Enc => enc_taps,
            Placement::Dec => dec_taps,
            Placement::Both => [enc_taps, dec_taps].concat(),
            Placement::Off => Vec::new(),
        };
        let fm_enc: Vec<Site> = (2..=m).map(Site::Enc).collect();
        let fm_dec: Vec<Site> = (2..=m).map(Site::Dec).collect();
        let fm_sites = match cfg.fm_placement {
            Placement::Enc => fm_enc,
            Placement::Dec => fm_dec,
            Placement::Both => [fm_enc, fm_dec].concat(),
            Placement::Off => Vec::new(),
        };
        Ok(Self { resolution: r, num_classes: cfg.num_classes, enc, dec, patch_sites, fm_sites })
    }

    pub fn depth(&self) -> usize {
        self.enc.len()
    }

    /// `(channels, size)` of the activation at a site.
    pub fn site_shape(&self, site: Site) -> (usize, usize) {
        match site {
            Site::Enc(i) => self.enc[i - 1],
            Site::Dec(j) => (self.dec[j - 1].1, self.dec[j - 1].2),
        }
    }
}

/// conv -> ReLU -> batch norm, twice, then a 1x1 conv to one score per location.
#[derive(Clone, Debug)]
pub struct PatchHead {
    pub site: Site,
    pub convs: [Conv2d; 2],
    pub norms: [Affine; 2],
    pub score: Conv2d,
}

impl PatchHead {
    pub fn build<T: Float>(b: &mut Builder<'_, T>, name: &str, site: Site, cin: usize) -> Result<Self> {
        let hidden = (cin / 2).max(1);
        Ok(Self {
            site,
            convs: [
                b.conv(&format!("{name}.conv_0"), ConvSpec::new(cin, hidden, 3))?,
                b.conv(&format!("{name}.conv_1"), ConvSpec::new(hidden, hidden, 3))?,
            ],
            norms: [b.affine(&format!("{name}.norm_0"), hidden)?, b.affine(&format!("{name}.norm_1"), hidden)?],
            score: b.conv(&format!("{name}.score"), ConvSpec::new(hidden, 1, 1).no_bias())?,
        })
    }

    pub fn forward<T: Float>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(f, h)?;
            h = f.g.relu(h);
            h = f.g.batch_standardize(h, NORM_EPS)?;
            h = norm.forward(f, h)?;
        }
        self.score.forward(f, h)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub arch: DiscriminatorArch,
    pub down: Vec<ResBlockDown>,
    pub up: Vec<ResBlockUp>,
    pub classifier: Conv2d,
    pub heads: Vec<PatchHead>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    /// `[n, N + 1, R, R]` pre-softmax logits; channel `N` is "fake".
    pub logits: Var,
    /// One `[n, 1, s, s]` score map per patch head.
    pub patch_scores: Vec<Var>,
    /// Activations at the feature-matching sites.
    pub features: Vec<Var>,
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
}

impl Discriminator {
    pub fn build<T: Float>(cfg: &ModelConfig, b: &mut Builder<'_, T>) -> Result<Self> {
        let arch = DiscriminatorArch::new(cfg)?;
        b.spectral = cfg.d_spectral;
        let mut cin = 3;
        let mut down = Vec::new();
        for (i, &(cout, _)) in arch.enc.iter().enumerate() {
            down.push(ResBlockDown::build(b, &format!("enc.{}", i + 1), cin, cout, i == 0)?);
            cin = cout;
        }
        let up = arch
            .dec
            .iter()
            .enumerate()
            .map(|(j, &(cin, cout, _))| ResBlockUp::build(b, &format!("dec.{}", j + 1), cin, cout))
            .collect::<Result<Vec<_>>>()?;
        let last = arch.dec.last().map_or(0, |d| d.1);
        let classifier = b.conv("classifier", ConvSpec::new(last, cfg.num_classes + 1, 1))?;
        let heads = arch
            .patch_sites
            .iter()
            .map(|&site| {
                let name = match site {
                    Site::Enc(i) => format!("patch.enc_{i}"),
                    Site::Dec(j) => format!("patch.dec_{j}"),
                };
                PatchHead::build(b, &name, site, arch.site_shape(site).0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { arch, down, up, classifier, heads })
    }

    /// Records a pass over `[n, 3, R, R]` images.
    pub fn forward<T: Float>(&self, f: &mut Fwd<'_, T>, image: Var) -> Result<DiscriminatorOutput> {
        self.pass(f, image, true)
    }

    /// Like [`Self::forward`] without evaluating the patch heads.
    pub fn forward_backbone<T: Float>(&self, f: &mut Fwd<'_, T>, image: Var) -> Result<DiscriminatorOutput> {
        self.pass(f, image, false)
    }

    fn pass<T: Float>(&self, f: &mut Fwd<'_, T>, image: Var, heads: bool) -> Result<DiscriminatorOutput> {
        let r = self.arch.resolution;
        let s = f.g.shape(image);
        if s.len() != 4 || s[1..] != [3, r, r] {
            return Err(Error::Model(format!("discriminator input has shape {s:?}, expected [n, 3, {r}, {r}]")));
        }
        let mut encoder = Vec::with_capacity(self.down.len());
        let mut h = image;
        for block in &self.down {
            h = block.forward(f, h)?;
            encoder.push(h);
        }
        let m = encoder.len();
        let mut decoder = Vec::with_capacity(m);
        for (j, block) in self.up.iter().enumerate() {
            let input = if j == 0 { h } else { f.g.concat(&[h, encoder[m - 1 - j]], 1)? };
            h = block.forward(f, input)?;
            decoder.push(h);
        }
        let logits = self.classifier.forward(f, h)?;
        let at = |site: Site| match site {
            Site::Enc(i) => encoder[i - 1],
            Site::Dec(j) => decoder[j - 1],
        };
        let patch_scores = if heads {
            self.heads.iter().map(|head| head.forward(f, at(head.site))).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let features = self.arch.fm_sites.iter().map(|&site| at(site)).collect();
        Ok(DiscriminatorOutput { logits, patch_scores, features, encoder, decoder })
    }

    /// Untracked pixel logits.
    pub fn logits<T: Float>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, store, false);
        let mut f = Fwd::new(&mut g, &bound, store);
        let x = f.g.constant(images.clone());
        let out = self.forward_backbone(&mut f, x)?;
        Ok(g.value(out.logits).clone())
    }
}

/// Softmax over the class axis of `[n, C, h, w]` logits.
pub fn pixel_probabilities<T: Float>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = logits.dims4("pixel_probabilities")?;
    let hw = h * w;
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for p in 0..hw {
            let at = |k: usize| (b * c + k) * hw + p;
            let max = (0..c).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..c {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..c {
                out[at(k)] = out[at(k)] / sum;
            }
        }
    }
    Ok(Tensor::new(logits.shape(), out)?)
}
