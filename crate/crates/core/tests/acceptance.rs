//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p dpgan-core --test acceptance -- 1 2 3`. Failures are
//! reported but do not change the exit status unless `DPGAN_STRICT=1`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{builder, input_gradcheck, param_gradcheck, project, random};
use dpgan::blocks::{Builder, Fwd, Spade};
use dpgan::config::{LmReduction, MaskGranularity, ModelConfig, TrainConfig, Variant};
use dpgan::discriminator::{pixel_probabilities, Discriminator, DiscriminatorArch, Site};
use dpgan::evaluation::*;
use dpgan::generator::{sample_noise, Generator, GeneratorArch};
use dpgan::losses::*;
use dpgan::rng;
use dpgan::scene_data::*;
use dpgan::trainer::{ema_update, TrainState};
use dpgan_autograd::{Bound, Graph, ParamKind, ParamStore, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

const TRAIN_SCENES: usize = 500;
const EVAL_SCENES: usize = 100;
const EVAL_START: u64 = 100_000;
const STEPS: u64 = 2000;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);

// ---------------------------------------------------------------- 1

fn spade_case() -> Result<(f64, f64), String> {
    let mut store = ParamStore::new();
    let spade = Spade::build(&mut builder(&mut store, 1), "s", 2, 3).map_err(fail)?;
    let x = random(&[2, 3, 4, 4], 2);
    let c = random(&[2, 2, 4, 4], 3);
    let params = param_gradcheck(&store, 16, |f| {
        let (xv, cv) = (f.g.constant(x.clone()), f.g.constant(c.clone()));
        let y = spade.forward(f, xv, cv).unwrap();
        project(f.g, y, 4)
    });
    let inputs = input_gradcheck(&[x.clone(), c.clone()], |g, v| {
        let bound = Bound::new(g, &store, false);
        let y = {
            let mut f = Fwd::new(g, &bound, &store);
            spade.forward(&mut f, v[0], v[1]).unwrap()
        };
        project(g, y, 4)
    });
    Ok((params, inputs))
}

fn criterion_1() -> Outcome {
    let mut errs: Vec<(&str, f64)> = Vec::new();
    let (p, i) = spade_case()?;
    errs.push(("spade params", p));
    errs.push(("spade inputs", i));

    let targets = PixelTargets { classes: vec![0, 2, 1, 1, 0, 0, 2, 1], alpha: vec![1.5, 3.0, 2.0, 2.0, 1.5, 1.5, 3.0, 2.0] };
    let logits = random(&[2, 4, 2, 2], 11);
    errs.push((
        "pixel",
        input_gradcheck(std::slice::from_ref(&logits), |g, v| {
            let r = pixel_loss_real(g, v[0], &targets).unwrap();
            let f = pixel_loss_fake(g, v[0], 3).unwrap();
            g.add(r, f).unwrap()
        }),
    ));

    let scores = [random(&[2, 1, 4, 4], 12).map(|v| 3.0 * v), random(&[2, 1, 2, 2], 13).map(|v| 3.0 * v)];
    let fakes = [random(&[2, 1, 4, 4], 14).map(|v| 3.0 * v), random(&[2, 1, 2, 2], 15).map(|v| 3.0 * v)];
    let both: Vec<Tensor<f64>> = scores.iter().chain(&fakes).cloned().collect();
    errs.push(("patch hinge", input_gradcheck(&both, |g, v| ms_patch_loss_d(g, &v[..2], &v[2..]).unwrap())));

    let real_feats = [random(&[2, 2, 4, 4], 16), random(&[2, 3, 2, 2], 17)];
    let fake_feats = [random(&[2, 2, 4, 4], 18), random(&[2, 3, 2, 2], 19)];
    let fm_of = |g: &mut Graph<f64>, fake: &[Var]| {
        let real: Vec<Var> = real_feats.iter().map(|t| g.constant(t.clone())).collect();
        feature_match_loss(g, &real, fake).unwrap()
    };
    errs.push(("feature matching", input_gradcheck(&fake_feats, |g, v| fm_of(g, v))));

    let mut g_inputs = vec![logits.clone()];
    g_inputs.extend(fakes.iter().cloned());
    g_inputs.extend(fake_feats.iter().cloned());
    errs.push((
        "generator total",
        input_gradcheck(&g_inputs, |g, v| {
            let pixel = pixel_loss_real(g, v[0], &targets).unwrap();
            let ms = ms_patch_loss_g(g, &v[1..3], false).unwrap();
            let fm = fm_of(g, &v[3..5]);
            generator_loss(g, pixel, Some(ms), Some(fm)).unwrap()
        }),
    ));

    let m = Tensor::from_fn(&[2, 1, 4, 4], |i| ((i / 3) % 2) as f64);
    let (a, b) = (random(&[2], 20).map(|v| 2.0 * v), random(&[2], 21));
    for reduction in [LmReduction::Sum, LmReduction::Mean] {
        let err = input_gradcheck(&[random(&[2, 2, 4, 4], 22), random(&[2, 2, 4, 4], 23)], |g, v| {
            let d = |g: &mut Graph<f64>, x: Var| {
                let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
                let y = g.channel_affine(x, av, bv).unwrap();
                g.tanh(y)
            };
            let mixed = labelmix(g, v[0], v[1], &m).unwrap();
            let (dm, dx, dh) = (d(g, mixed), d(g, v[0]), d(g, v[1]));
            labelmix_consistency_loss(g, dm, dx, dh, &m, reduction).unwrap()
        });
        errs.push((if reduction == LmReduction::Sum { "labelmix (sum)" } else { "labelmix (mean)" }, err));
    }

    let worst = errs.iter().cloned().fold(("", 0.0f64), |w, e| if e.1 > w.1 || !e.1.is_finite() { e } else { w });
    let detail = format!("worst relative error {:.2e} ({}) over {} checks", worst.1, worst.0, errs.len());
    ensure(worst.1 < 1e-4, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2

fn diag(mu: &[f64], var: &[f64]) -> GaussianStats {
    GaussianStats { mu: DVector::from_column_slice(mu), sigma: DMatrix::from_diagonal(&DVector::from_column_slice(var)) }
}

fn hinge_d(real: f64, fake: f64) -> f64 {
    let mut g = Graph::new();
    let r = g.constant(Tensor::full(&[1, 1, 1, 1], real));
    let f = g.constant(Tensor::full(&[1, 1, 1, 1], fake));
    let l = ms_patch_loss_d(&mut g, &[r], &[f]).unwrap();
    g.value(l).item().unwrap()
}

fn hinge_g(fake: f64) -> f64 {
    let mut g = Graph::new();
    let f = g.constant(Tensor::full(&[1, 1, 2, 2], fake));
    let l = ms_patch_loss_g(&mut g, &[f], false).unwrap();
    g.value(l).item().unwrap()
}

fn random_map(r: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| r.random_range(0..classes)).collect()).unwrap()
}

fn criterion_2() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut worst_1d = 0.0f64;
    for _ in 0..200 {
        let (ma, mb) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
        let (sa, sb): (f64, f64) = (r.random_range(0.01..3.0), r.random_range(0.01..3.0));
        let d = frechet_distance(&diag(&[ma], &[sa * sa]), &diag(&[mb], &[sb * sb])).map_err(fail)?;
        worst_1d = worst_1d.max((d - ((ma - mb).powi(2) + (sa - sb).powi(2))).abs());
    }
    ensure(worst_1d < 1e-6, format!("1-D Fréchet off by {worst_1d:.2e}"))?;

    let mut worst_self = 0.0f64;
    for (n, d) in [(100, 8), (16, 64), (200, 64)] {
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let s = fit_gaussian(&x).map_err(fail)?;
        worst_self = worst_self.max(frechet_distance(&s, &s).map_err(fail)?);
    }
    ensure(worst_self < 1e-6, format!("FID(a, a) = {worst_self:.2e}"))?;

    let hinge = [
        (hinge_d(2.0, -2.0), 0.0),
        (hinge_d(0.0, 0.0), 2.0),
        (hinge_d(-1.0, 1.0), 4.0),
        (hinge_g(1.0), 0.0),
        (hinge_g(0.0), 1.0),
        (hinge_g(-3.0), 4.0),
    ];
    ensure(hinge.iter().all(|(a, b)| a == b), format!("hinge cases {hinge:?}"))?;

    // alpha is the correctly rounded H*W/count, so the product is H*W up
    // to the final rounding of the multiplication
    let mut maps = 0;
    for (h, w) in [(8, 8), (5, 5), (16, 16), (7, 9), (64, 64)] {
        for _ in 0..20 {
            let classes = r.random_range(2..9u8);
            let l = random_map(&mut r, h, w, classes);
            let wts = class_frequencies(&[&l], 8);
            let hw = (h * w) as f64;
            for (c, &count) in l.class_counts(8).iter().enumerate() {
                if count == 0 {
                    ensure(wts.alpha[c] == 0.0, "absent class has a weight")?;
                    continue;
                }
                ensure(wts.alpha[c] == hw / count as f64, format!("alpha[{c}] is not H*W/count"))?;
                let prod = wts.alpha[c] * count as f64;
                ensure((prod - hw).abs() <= f64::EPSILON * hw, format!("alpha*count = {prod} vs {hw}"))?;
            }
            maps += 1;
        }
    }

    let single = |v: f64| {
        let mut s = ParamStore::<f64>::new();
        s.insert("p", Tensor::new(&[2], vec![v, -v]).unwrap(), ParamKind::Trainable).unwrap();
        s
    };
    // dyadic values keep every iterate exactly representable for these step counts
    for (e0, p, decay, steps) in [(0.0, 1.0, 0.5, 50), (3.0, -1.0, 0.75, 20), (-2.0, 6.0, 0.25, 20)] {
        let mut ema = single(e0);
        for k in 1..=steps {
            ema_update(&mut ema, &single(p), decay).map_err(fail)?;
            let gap = (ema.entries()[0].tensor.data()[0] - p).abs();
            ensure(gap == decay.powi(k) * (e0 - p).abs(), format!("EMA gap after {k} steps: {gap}"))?;
        }
    }

    let n = 6usize;
    for _ in 0..100 {
        let gt = random_map(&mut r, 8, 8, n as u8);
        let pred = random_map(&mut r, 8, 8, n as u8);
        let mut conf = vec![vec![0u64; n]; n];
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            conf[g as usize][p as usize] += 1;
        }
        let ious: Vec<f64> = (0..n)
            .filter_map(|c| {
                let tp = conf[c][c];
                let union = conf[c].iter().sum::<u64>() + (0..n).map(|k| conf[k][c]).sum::<u64>() - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let expect = ious.iter().sum::<f64>() / ious.len() as f64;
        let got = miou(&[pred], &[gt], n).map_err(fail)?.miou;
        ensure(got == expect, format!("mIoU {got} vs confusion matrix {expect}"))?;
    }
    Ok(format!(
        "1-D Fréchet err {worst_1d:.1e}, FID(a,a) {worst_self:.1e}, 6 hinge cases, {maps} weight maps, EMA law, 100 mIoU maps"
    ))
}

// ---------------------------------------------------------------- 3

fn build_gen(cfg: &ModelConfig, seed: u64) -> (Generator, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let gen = Generator::build(cfg, &mut Builder::new(&mut store, rng::stream(seed, &[rng::INIT]))).unwrap();
    (gen, store)
}

fn gen_inputs(cfg: &ModelConfig, n: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let spec = SceneSpec::new(seed, DatasetMeta::desk(cfg.resolution, cfg.num_classes).unwrap());
    let scenes = generate_scenes(&spec, 0, n).unwrap();
    let labels: Vec<&LabelMap> = scenes.iter().map(|s| &s.0).collect();
    let z = sample_noise(&mut rng::stream(seed, &[rng::NOISE]), n, cfg.z_dim, cfg.resolution, cfg.z_mode);
    (z, one_hot_batch(&labels, cfg.num_classes).unwrap())
}

fn gen_image(gen: &Generator, store: &ParamStore<f64>, z: &Tensor<f64>, y: &Tensor<f64>) -> (Vec<usize>, Vec<Vec<usize>>, Tensor<f64>) {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, store, false);
    let out = {
        let mut f = Fwd::new(&mut g, &bound, store);
        let (zv, yv) = (f.g.constant(z.clone()), f.g.constant(y.clone()));
        gen.forward(&mut f, zv, yv).unwrap()
    };
    let alphas = out.alphas.iter().map(|&a| g.shape(a).to_vec()).collect();
    (g.shape(out.image).to_vec(), alphas, g.value(out.image).clone())
}

fn criterion_3() -> Outcome {
    let full = ModelConfig::full(35);
    let ga = GeneratorArch::new(&full).map_err(fail)?;
    ensure(ga.input_channels == 64 + 35, "full generator input width")?;
    ensure(ga.sap == vec![(32, 256), (64, 256), (64, 128), (64, 64), (64, 32), (64, 16), (64, 8)], format!("full SAP {:?}", ga.sap))?;
    ensure(ga.isp[0] == (1024, 1024, 8), "full ISP head")?;
    ensure(
        ga.isp_outputs() == vec![(1024, 16), (512, 32), (256, 64), (128, 128), (64, 256)],
        format!("full ISP {:?}", ga.isp_outputs()),
    )?;
    let da = DiscriminatorArch::new(&full).map_err(fail)?;
    ensure(da.enc == vec![(128, 128), (128, 64), (256, 32), (256, 16), (512, 8), (512, 4)], format!("full D encoder {:?}", da.enc))?;
    ensure(
        da.dec == vec![(512, 512, 8), (1024, 256, 16), (512, 256, 32), (512, 128, 64), (256, 128, 128), (256, 64, 256)],
        format!("full D decoder {:?}", da.dec),
    )?;
    ensure(da.patch_sites == vec![Site::Enc(4), Site::Enc(6)], "full patch taps")?;

    let desk = ModelConfig::default();
    let ga = GeneratorArch::new(&desk).map_err(fail)?;
    ensure(ga.sap == vec![(4, 64), (8, 64), (8, 32), (8, 16), (8, 8)], format!("R=64 SAP {:?}", ga.sap))?;
    ensure(ga.isp_outputs() == vec![(128, 16), (64, 32), (32, 64)], format!("R=64 ISP {:?}", ga.isp_outputs()))?;
    let da = DiscriminatorArch::new(&desk).map_err(fail)?;
    ensure(da.enc == vec![(32, 32), (32, 16), (64, 8), (64, 4)], format!("R=64 D encoder {:?}", da.enc))?;
    ensure(da.dec == vec![(64, 64, 8), (128, 32, 16), (64, 32, 32), (64, 16, 64)], format!("R=64 D decoder {:?}", da.dec))?;

    // forward passes at both resolutions
    let (gen, store) = build_gen(&desk, 1);
    let (z, y) = gen_inputs(&desk, 2, 1);
    let (shape, alphas, _) = gen_image(&gen, &store, &z, &y);
    ensure(shape == [2, 3, 64, 64], format!("R=64 image {shape:?}"))?;
    let expect: Vec<Vec<usize>> = [8, 16, 32, 64].iter().map(|&s| vec![2, 8, s, s]).collect();
    ensure(alphas == expect, format!("R=64 alphas {alphas:?}"))?;
    let big = ModelConfig { resolution: 256, width_divisor: 16, z_dim: 4, num_classes: 3, ..ModelConfig::default() };
    let (gen, store) = build_gen(&big, 2);
    let (z, y) = gen_inputs(&big, 1, 2);
    let (shape, alphas, _) = gen_image(&gen, &store, &z, &y);
    ensure(shape == [1, 3, 256, 256], format!("R=256 image {shape:?}"))?;
    ensure(alphas.len() == 6 && alphas[5][2] == 256, format!("R=256 alphas {alphas:?}"))?;
    for (cfg, res) in [(desk.clone(), 64), (ModelConfig { patch_taps: vec![4, 6], ..big.clone() }, 256)] {
        let mut store = ParamStore::<f32>::new();
        let d = Discriminator::build(&cfg, &mut Builder::new(&mut store, rng::stream(3, &[]))).map_err(fail)?;
        let arch = DiscriminatorArch::new(&cfg).map_err(fail)?;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &store, false);
        let mut f = Fwd::new(&mut g, &bound, &store);
        let x = f.g.constant(Tensor::full(&[1, 3, res, res], 0.1));
        let out = d.forward(&mut f, x).map_err(fail)?;
        ensure(g.shape(out.logits) == [1, cfg.num_classes + 1, res, res], format!("R={res} D logits"))?;
        for (&s, &site) in out.patch_scores.iter().zip(&arch.patch_sites) {
            let (_, size) = arch.site_shape(site);
            ensure(g.shape(s) == [1, 1, size, size], format!("R={res} patch scores {:?}", g.shape(s)))?;
        }
    }

    let mut r = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let l = random_map(&mut r, h, w, 8);
        let oh = one_hot(&l, 8).map_err(fail)?;
        let hw = l.height() * l.width();
        for p in 0..hw {
            let s: f32 = (0..8).map(|c| oh.data[c * hw + p]).sum();
            ensure(s == 1.0 && oh.data[l.data()[p] as usize * hw + p] == 1.0, "one-hot is not a partition")?;
        }
    }

    let small = ModelConfig { resolution: 32, num_classes: 3, z_dim: 4, width_divisor: 8, ..ModelConfig::default() };
    let (gen, mut store) = build_gen(&small, 5);
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 4.0);
    }
    let (z, y) = gen_inputs(&small, 2, 6);
    let (_, _, image) = gen_image(&gen, &store, &z, &y);
    ensure(image.data().iter().all(|v| (-1.0..=1.0).contains(v)), "generator output leaves [-1, 1]")?;

    for seed in 0..20 {
        let logits = random(&[2, 9, 4, 4], seed).map(|v| v * 40.0);
        let p = pixel_probabilities(&logits).map_err(fail)?;
        for b in 0..2 {
            for px in 0..16 {
                let s: f64 = (0..9).map(|c| p.data()[(b * 9 + c) * 16 + px]).sum();
                ensure((s - 1.0).abs() < 1e-12, format!("softmax sums to {s}"))?;
            }
        }
        ensure(p.data().iter().all(|v| (0.0..=1.0).contains(v)), "softmax leaves [0, 1]")?;
    }

    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let a = random(&[2, 3, 4, 4], 100 + trial);
        let b = random(&[2, 3, 4, 4], 200 + trial);
        let x = random(&[2, 3, 4, 4], 300 + trial);
        let xhat = random(&[2, 3, 4, 4], 400 + trial);
        let label = random_map(&mut r, 4, 4, 3);
        let mask = labelmix_mask(&label, MaskGranularity::Component, &mut rng::stream(trial, &[rng::MASK]));
        let mut masks = vec![mask.clone(), mask];
        masks[1].iter_mut().for_each(|v| *v = 1 - *v);
        let m: Tensor<f64> = mask_tensor(&masks, 4, 4).map_err(fail)?;
        let mut g = Graph::new();
        let (xv, xh) = (g.constant(x), g.constant(xhat));
        let d = |g: &mut Graph<f64>, v: Var| {
            let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
            let s = g.mul(v, av).unwrap();
            g.add(s, bv).unwrap()
        };
        let mixed = labelmix(&mut g, xv, xh, &m).map_err(fail)?;
        let (dm, dx, dh) = (d(&mut g, mixed), d(&mut g, xv), d(&mut g, xh));
        let l = labelmix_consistency_loss(&mut g, dm, dx, dh, &m, LmReduction::Sum).map_err(fail)?;
        worst = worst.max(g.value(l).item().unwrap());
    }
    ensure(worst < 1e-10, format!("affine LabelMix consistency {worst:.2e}"))?;
    Ok(format!("ladders at R=256 and R=64, forward shapes, partitions and ranges; LabelMix consistency {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let cfg = TrainConfig::default();
    let spec = SceneSpec::new(0, DatasetMeta::desk(cfg.model.resolution, cfg.model.num_classes).map_err(fail)?);
    let scenes = generate_scenes(&spec, 0, 4).map_err(fail)?;
    let labels: Vec<&LabelMap> = scenes.iter().map(|s| &s.0).collect();
    let images: Vec<&Image> = scenes.iter().map(|s| &s.1).collect();
    let mut state = TrainState::new(&cfg).map_err(fail)?;
    let first = state.train_step(&labels, &images).map_err(fail)?.l_pixel_g;
    let mut last = first;
    for _ in 1..200 {
        last = state.train_step(&labels, &images).map_err(fail)?.l_pixel_g;
    }
    let drop = 1.0 - last / first;
    let detail = format!("generator pixel loss {first:.3} -> {last:.3} ({:.1}% lower, need 50%)", 100.0 * drop);
    ensure(drop >= 0.5, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 5 and 6

struct Fixture {
    train: Vec<(LabelMap, Image)>,
    eval: Vec<(LabelMap, Image)>,
    meta: DatasetMeta,
    seg: FrozenSegmenter,
}

fn segmenter_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/segmenter.dpgk")
}

impl Fixture {
    fn load() -> Result<Self, String> {
        let meta = DatasetMeta::desk(64, 8).map_err(fail)?;
        let spec = SceneSpec::new(0, meta.clone());
        // stored datasets are 8-bit PNG; train on the same values
        let quantize = |v: Vec<(LabelMap, Image)>| v.into_iter().map(|(l, i)| (l, i.quantized())).collect();
        let train = quantize(generate_scenes(&spec, 0, TRAIN_SCENES).map_err(fail)?);
        let eval = quantize(generate_scenes(&spec, EVAL_START, EVAL_SCENES).map_err(fail)?);
        let path = segmenter_path();
        let seg = FrozenSegmenter::load(&path).map_err(|e| format!("segmenter fixture {}: {e}", path.display()))?;
        Ok(Self { train, eval, meta, seg })
    }

    fn score(&self, state: &TrainState) -> Result<MetricReport, String> {
        let opts = EvalOptions { modes: 0, scales: vec![], ..EvalOptions::default() };
        evaluate(&Sampler::ema(state), &self.eval, &self.meta, &self.seg, &opts).map_err(fail)
    }

    fn run(&self, cfg: &TrainConfig) -> Result<(MetricReport, MetricReport, Duration), String> {
        let started = Instant::now();
        let mut state = TrainState::new(cfg).map_err(fail)?;
        let before = self.score(&state)?;
        state.train_until(&self.train, cfg.steps as u64, |_, _| Ok(())).map_err(fail)?;
        let after = self.score(&state)?;
        Ok((before, after, started.elapsed()))
    }
}

fn default_run(seed: u64) -> TrainConfig {
    TrainConfig { seed, steps: STEPS as usize, ..TrainConfig::default() }
}

fn criterion_5(fx: &Fixture, shared: &mut Option<(MetricReport, Duration)>) -> Outcome {
    let real: Vec<&Image> = fx.eval.iter().map(|d| &d.1).collect();
    let pred = fx.seg.segment(&image_batch::<f32>(&real).map_err(fail)?).map_err(fail)?;
    let gt: Vec<LabelMap> = fx.eval.iter().map(|d| d.0.clone()).collect();
    let real_miou = miou(&pred, &gt, fx.meta.num_classes).map_err(fail)?.miou;
    let (before, after, took) = fx.run(&default_run(0))?;
    *shared = Some((after.clone(), took));
    let ratio = after.toy_fid / before.toy_fid;
    let detail = format!(
        "toy-FID {:.3} -> {:.3} (ratio {ratio:.3}, need <= 0.5); mIoU on generated {:.3} (need >= 0.40, real {real_miou:.3}); {:.1} min (budget 30)",
        before.toy_fid,
        after.toy_fid,
        after.miou,
        took.as_secs_f64() / 60.0
    );
    ensure(ratio <= 0.5 && after.miou >= 0.40 && took <= TRAIN_BUDGET, detail.clone())?;
    Ok(detail)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn criterion_6(fx: &Fixture, shared: Option<(MetricReport, Duration)>) -> Outcome {
    let mut dp = default_run(0);
    dp.apply_variant(Variant::DpDp);
    let shared = shared.filter(|_| dp == default_run(0));
    let mut total = Duration::ZERO;
    let mut rows = Vec::new();
    for variant in [Variant::DpDp, Variant::OaOa] {
        let (mut fid, mut small) = (Vec::new(), Vec::new());
        for seed in 0..3 {
            let (report, took) = match (&shared, variant, seed) {
                // the default configuration is dp-dp, and seed 0 was already trained
                (Some((r, t)), Variant::DpDp, 0) => (r.clone(), *t),
                _ => {
                    let mut cfg = default_run(seed);
                    cfg.apply_variant(variant);
                    let (_, after, took) = fx.run(&cfg)?;
                    (after, took)
                }
            };
            total += took;
            fid.push(report.toy_fid);
            small.push(report.obj_fid_small.ok_or("too few small objects for a crop FID")?);
        }
        rows.push((variant, median(fid.clone()), median(small.clone()), fid, small));
    }
    let runs = |r: &(Variant, f64, f64, Vec<f64>, Vec<f64>)| {
        r.3.iter().zip(&r.4).map(|(a, b)| format!("{a:.2}/{b:.2}")).collect::<Vec<_>>().join(" ")
    };
    let (dp, oa) = (&rows[0], &rows[1]);
    let detail = format!(
        "median toy-FID dp-dp {:.3} vs oa-oa {:.3}; median small-object FID dp-dp {:.3} vs oa-oa {:.3}; per seed dp-dp [{}] oa-oa [{}]; {:.1} min (budget 180)",
        dp.1,
        oa.1,
        dp.2,
        oa.2,
        runs(dp),
        runs(oa),
        total.as_secs_f64() / 60.0
    );
    ensure(dp.1 <= oa.1 && dp.2 <= oa.2 && total <= 6 * TRAIN_BUDGET, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let cfg = TrainConfig::default();
    let meta = DatasetMeta::desk(cfg.model.resolution, cfg.model.num_classes).map_err(fail)?;
    let data = generate_scenes(&SceneSpec::new(4, meta.clone()), 0, 12).map_err(fail)?;
    let trace = |state: &mut TrainState, n: usize| -> Result<Vec<LossReport>, String> {
        (0..n).map(|_| state.step_on(&data).map_err(fail)).collect()
    };
    let a = trace(&mut TrainState::new(&cfg).map_err(fail)?, 6)?;
    let b = trace(&mut TrainState::new(&cfg).map_err(fail)?, 6)?;
    ensure(a == b, "identical seeds gave different loss traces")?;
    let other = trace(&mut TrainState::new(&TrainConfig { seed: 1, ..cfg.clone() }).map_err(fail)?, 1)?;
    ensure(other[0] != a[0], "a different seed gave the same first step")?;

    let dir = tempfile::tempdir().map_err(fail)?;
    let ckpt = dir.path().join("half.dpgk");
    let mut first = TrainState::new(&cfg).map_err(fail)?;
    let mut resumed_trace = trace(&mut first, 3)?;
    first.save(&ckpt).map_err(fail)?;
    let mut resumed = TrainState::load(&ckpt, None).map_err(fail)?;
    resumed_trace.extend(trace(&mut resumed, 3)?);
    ensure(resumed_trace == a, "resumed run diverged from the unbroken run")?;
    let mut whole = TrainState::new(&cfg).map_err(fail)?;
    trace(&mut whole, 6)?;
    ensure(
        resumed.g.entries() == whole.g.entries() && resumed.ema.entries() == whole.ema.entries() && resumed.d.entries() == whole.d.entries(),
        "resumed parameters differ from the unbroken run",
    )?;

    let (da, db) = (dir.path().join("a"), dir.path().join("b"));
    save_dataset(&da, &meta, &data).map_err(fail)?;
    let loaded = load_dataset(&da).map_err(fail)?;
    ensure(loaded.meta() == &meta, "metadata changed on reload")?;
    let back = loaded.load_all().map_err(fail)?;
    for ((l0, i0), (l1, i1)) in data.iter().zip(&back) {
        ensure(l0 == l1, "label map changed on reload")?;
        ensure(&i0.quantized() == i1, "image changed beyond 8-bit quantization")?;
    }
    save_dataset(&db, &meta, &back).map_err(fail)?;
    let reread = load_dataset(&db).map_err(fail)?.load_all().map_err(fail)?;
    ensure(reread == back, "second round trip is not lossless")?;
    Ok(format!("{} steps replayed, resume after 3 of 6 steps, {} scenes round-tripped", a.len(), data.len()))
}

// ----------------------------------------------------------------

fn run(number: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let result = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let took = started.elapsed();
    let result = match (result, budget) {
        (Ok(d), Some(b)) if took > b => Err(format!("{d}; over the {:.0} s budget", b.as_secs_f64())),
        (r, _) => r,
    };
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {number} {name}: {detail} [{:.1} s]", took.as_secs_f64());
    result.is_ok()
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut results = Vec::new();
    if on(1) {
        results.push(run(1, "gradient suite", Some(Duration::from_secs(120)), criterion_1));
    }
    if on(2) {
        results.push(run(2, "closed-form oracles", None, criterion_2));
    }
    if on(3) {
        results.push(run(3, "structural suite", None, criterion_3));
    }
    if on(4) {
        results.push(run(4, "overfit one batch", Some(Duration::from_secs(300)), criterion_4));
    }
    if on(5) || on(6) {
        match Fixture::load() {
            Ok(fx) => {
                let mut shared = None;
                if on(5) {
                    results.push(run(5, "training smoke", None, || criterion_5(&fx, &mut shared)));
                }
                if on(6) {
                    results.push(run(6, "ablation direction", None, || criterion_6(&fx, shared.take())));
                }
            }
            Err(e) => {
                for (n, name) in [(5, "training smoke"), (6, "ablation direction")] {
                    if on(n) {
                        println!("FAIL {n} {name}: {e}");
                        results.push(false);
                    }
                }
            }
        }
    }
    if on(7) {
        results.push(run(7, "determinism and persistence", None, criterion_7));
    }
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if std::env::var("DPGAN_STRICT").is_ok_and(|v| v == "1") && passed < results.len() {
        std::process::exit(1);
    }
}
