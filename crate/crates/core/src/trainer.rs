//! Alternating adversarial training with Adam and an EMA generator.

use dpgan_autograd::{Bound, Float, Graph, ParamKind, ParamStore, Tensor};
use rand::seq::SliceRandom;

use crate::blocks::{refresh_spectral, Builder, Fwd};
use crate::config::{ClassWeighting, ModelConfig, TrainConfig};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{sample_noise, Generator};
use crate::losses::{
    discriminator_total_loss, feature_match_loss, generator_loss, labelmix_consistency_loss, labelmix_mask,
    mask_tensor, ms_patch_loss_d, ms_patch_loss_g, pixel_loss_fake, pixel_loss_real, LossReport, PixelTargets,
};
use crate::rng;
use crate::scene_data::{class_frequencies, image_batch, one_hot_batch, ClassWeights, Image, LabelMap};

/// Adam with bias correction; one moment pair per trainable entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.tensor.shape())).collect();
        Self { lr, beta1, beta2, eps, m: zeros(), v: zeros(), t: 0 }
    }

    /// Applies one update. `grads` is indexed like the store; entries
    /// without a gradient (and buffers) are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step = T::of(self.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if store.entry(id).kind != ParamKind::Trainable {
                continue;
            }
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + one_b1 * gk;
                v[k] = b2 * v[k] + one_b2 * gk * gk;
                p[k] -= step * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// `ema <- decay * ema + (1 - decay) * params` on trainable entries; buffers are copied.
pub fn ema_update<T: Float>(ema: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(Error::Model(format!("EMA has {} entries, parameters {}", ema.len(), params.len())));
    }
    let (d, one_d) = (T::of(decay), T::of(1.0 - decay));
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let src = params.entry(id);
        let dst = ema.get_mut(id);
        if dst.shape() != src.tensor.shape() {
            return Err(Error::Model(format!("EMA shape mismatch at {}", src.name)));
        }
        if src.kind == ParamKind::Buffer {
            dst.data_mut().copy_from_slice(src.tensor.data());
            continue;
        }
        for (e, &p) in dst.data_mut().iter_mut().zip(src.tensor.data()) {
            *e = d * *e + one_d * p;
        }
    }
    Ok(())
}

/// EMA decay used at step `t` (0-based).
pub fn ema_decay_at(cfg: &TrainConfig, t: u64) -> f64 {
    if cfg.ema_warmup {
        cfg.ema_decay.min((1.0 + t as f64) / (10.0 + t as f64))
    } else {
        cfg.ema_decay
    }
}

/// Dataset indices of the batch drawn at `step`: a fresh permutation per
/// epoch, consumed in order.
pub fn batch_indices(seed: u64, step: u64, batch: usize, len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in 0..batch as u64 {
        let flat = step * batch as u64 + k;
        let (epoch, pos) = (flat / len as u64, (flat % len as u64) as usize);
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..len).collect();
            perm.shuffle(&mut rng::stream(seed, &[rng::ORDER, epoch]));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[pos]);
    }
    out
}

/// Models and parameter sets built from a model config.
#[derive(Clone, Debug)]
pub struct Models {
    pub gen: Generator,
    pub dis: Discriminator,
    pub g: ParamStore<f32>,
    pub d: ParamStore<f32>,
}

impl Models {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut g = ParamStore::new();
        let gen = Generator::build(cfg, &mut Builder::new(&mut g, rng::stream(seed, &[rng::INIT, 0])))?;
        let mut d = ParamStore::new();
        let dis = Discriminator::build(cfg, &mut Builder::new(&mut d, rng::stream(seed, &[rng::INIT, 1])))?;
        Ok(Self { gen, dis, g, d })
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub gen: Generator,
    pub dis: Discriminator,
    pub g: ParamStore<f32>,
    pub d: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub step: u64,
    /// Class weights over the whole training set, used when
    /// `class_weights = dataset`.
    pub dataset_weights: Option<ClassWeights>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let Models { gen, dis, g, d } = Models::build(&cfg.model, cfg.seed)?;
        let opt_g = Adam::new(&g, cfg.lr_g, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let opt_d = Adam::new(&d, cfg.lr_d, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Self { cfg: cfg.clone(), gen, dis, ema: g.clone(), g, d, opt_g, opt_d, step: 0, dataset_weights: None })
    }

    fn weights(&self, labels: &[&LabelMap]) -> Result<ClassWeights> {
        match self.cfg.class_weights {
            ClassWeighting::Batch => Ok(class_frequencies(labels, self.cfg.model.num_classes)),
            ClassWeighting::Dataset => self
                .dataset_weights
                .clone()
                .ok_or_else(|| Error::Config("class_weights=dataset but no dataset weights were provided".into())),
        }
    }

    /// Noise for the current step; `slot` separates independent draws.
    pub fn noise(&self, slot: u64, n: usize) -> Tensor<f32> {
        let m = &self.cfg.model;
        let mut r = rng::stream(self.cfg.seed, &[rng::STEP, self.step, rng::NOISE, slot]);
        sample_noise(&mut r, n, m.z_dim, m.resolution, m.z_mode)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, labels: &[&LabelMap], images: &[&Image]) -> Result<LossReport> {
        let cfg = self.cfg.clone();
        let n = labels.len();
        if n != cfg.batch_size || images.len() != n {
            return Err(Error::Model(format!(
                "batch of {} labels and {} images, expected {}",
                n,
                images.len(),
                cfg.batch_size
            )));
        }
        let num_classes = cfg.model.num_classes;
        let weights = self.weights(labels)?;
        let targets = PixelTargets::new(labels, &weights);
        let onehot: Tensor<f32> = one_hot_batch(labels, num_classes)?;
        let real: Tensor<f32> = image_batch(images)?;
        let mut report = LossReport::default();

        // Discriminator.
        refresh_spectral(&mut self.d, cfg.sn_iters);
        let fake = self.gen.synthesize(&self.g, &self.noise(0, n), &onehot)?;
        {
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, &self.d, true);
            let mut f = Fwd::new(&mut g, &bound, &self.d);
            let both = f.g.constant(Tensor::stack_batch(&[&real, &fake])?);
            let out = self.dis.forward(&mut f, both)?;
            let logits_real = f.g.narrow(out.logits, 0, 0, n)?;
            let logits_fake = f.g.narrow(out.logits, 0, n, n)?;
            let l_real = pixel_loss_real(f.g, logits_real, &targets)?;
            let l_fake = pixel_loss_fake(f.g, logits_fake, num_classes)?;
            let pixel = f.g.add(l_real, l_fake)?;
            let ms = if out.patch_scores.is_empty() {
                None
            } else {
                let mut rs = Vec::new();
                let mut fs = Vec::new();
                for &s in &out.patch_scores {
                    rs.push(f.g.narrow(s, 0, 0, n)?);
                    fs.push(f.g.narrow(s, 0, n, n)?);
                }
                Some(ms_patch_loss_d(f.g, &rs, &fs)?)
            };
            let lm_weight = cfg.lm_weight();
            let lm = if lm_weight > 0.0 {
                let masks: Vec<Vec<u8>> = labels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        let mut r = rng::stream(cfg.seed, &[rng::STEP, self.step, rng::MASK, i as u64]);
                        labelmix_mask(l, cfg.lm_mask, &mut r)
                    })
                    .collect();
                let res = cfg.model.resolution;
                let mask = mask_tensor::<f32>(&masks, res, res)?;
                let (xr, xf) = (f.g.constant(real.clone()), f.g.constant(fake.clone()));
                let mixed = f.g.mask_mix(xr, xf, &mask)?;
                let mix_out = self.dis.forward_backbone(&mut f, mixed)?;
                Some(labelmix_consistency_loss(f.g, mix_out.logits, logits_real, logits_fake, &mask, cfg.lm_reduction)?)
            } else {
                None
            };
            let total = discriminator_total_loss(f.g, pixel, ms, lm, lm_weight)?;
            let val = |v: Option<dpgan_autograd::Var>, g: &Graph<f32>| v.map_or(0.0, |v| g.value(v).data()[0] as f64);
            report.l_pixel_real = val(Some(l_real), &g);
            report.l_pixel_fake = val(Some(l_fake), &g);
            report.l_ms_d = val(ms, &g);
            report.l_lm = val(lm, &g);
            report.l_d_total = val(Some(total), &g);
            report.check_finite()?;
            let mut grads = g.backward(total)?;
            let grads = bound.gradients(&mut grads);
            self.opt_d.step(&mut self.d, &grads);
        }

        // Generator.
        {
            let z = self.noise(1, n);
            let mut g = Graph::new();
            let gb = Bound::new(&mut g, &self.g, true);
            let db = Bound::new(&mut g, &self.d, false);
            let gen_out = {
                let mut f = Fwd::new(&mut g, &gb, &self.g);
                let z = f.g.constant(z);
                let y = f.g.constant(onehot.clone());
                self.gen.forward(&mut f, z, y)?
            };
            let mut f = Fwd::new(&mut g, &db, &self.d);
            let xr = f.g.constant(real.clone());
            let both = f.g.concat(&[xr, gen_out.image], 0)?;
            let out = self.dis.forward(&mut f, both)?;
            let logits_fake = f.g.narrow(out.logits, 0, n, n)?;
            let pixel = pixel_loss_real(f.g, logits_fake, &targets)?;
            let ms = if out.patch_scores.is_empty() {
                None
            } else {
                let fs = out.patch_scores.iter().map(|&s| f.g.narrow(s, 0, n, n)).collect::<Result<Vec<_>, _>>()?;
                Some(ms_patch_loss_g(f.g, &fs, cfg.nonsat_g_hinge)?)
            };
            let fm = if out.features.is_empty() {
                None
            } else {
                let mut rs = Vec::new();
                let mut fs = Vec::new();
                for &t in &out.features {
                    rs.push(f.g.narrow(t, 0, 0, n)?);
                    fs.push(f.g.narrow(t, 0, n, n)?);
                }
                Some(feature_match_loss(f.g, &rs, &fs)?)
            };
            let total = generator_loss(f.g, pixel, ms, fm)?;
            let val = |v: Option<dpgan_autograd::Var>, g: &Graph<f32>| v.map_or(0.0, |v| g.value(v).data()[0] as f64);
            report.l_pixel_g = val(Some(pixel), &g);
            report.l_ms_g = val(ms, &g);
            report.l_fm = val(fm, &g);
            report.l_g_total = val(Some(total), &g);
            report.check_finite()?;
            let mut grads = g.backward(total)?;
            let grads = gb.gradients(&mut grads);
            self.opt_g.step(&mut self.g, &grads);
        }

        ema_update(&mut self.ema, &self.g, ema_decay_at(&cfg, self.step))?;
        self.step += 1;
        Ok(report)
    }

    /// One step on the batch the data order assigns to the current step.
    pub fn step_on(&mut self, data: &[(LabelMap, Image)]) -> Result<LossReport> {
        if data.is_empty() {
            return Err(Error::Model("training set is empty".into()));
        }
        if self.cfg.class_weights == ClassWeighting::Dataset && self.dataset_weights.is_none() {
            let labels: Vec<&LabelMap> = data.iter().map(|d| &d.0).collect();
            self.dataset_weights = Some(class_frequencies(&labels, self.cfg.model.num_classes));
        }
        let idx = batch_indices(self.cfg.seed, self.step, self.cfg.batch_size, data.len());
        let labels: Vec<&LabelMap> = idx.iter().map(|&i| &data[i].0).collect();
        let images: Vec<&Image> = idx.iter().map(|&i| &data[i].1).collect();
        self.train_step(&labels, &images)
    }

    /// Trains until the step counter reaches `steps`, calling `on_step`
    /// after every update.
    pub fn train_until(
        &mut self,
        data: &[(LabelMap, Image)],
        steps: u64,
        mut on_step: impl FnMut(&TrainState, &LossReport) -> Result<()>,
    ) -> Result<()> {
        while self.step < steps {
            let report = self.step_on(data)?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    /// Synthesizes with the EMA generator.
    pub fn synthesize_ema(&self, z: &Tensor<f32>, onehot: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.gen.synthesize(&self.ema, z, onehot)
    }
}
