use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use dpgan::blocks::parameter_count;
use dpgan::config::{TrainConfig, Variant};
use dpgan::evaluation::{self, evaluate, EvalOptions, FrozenSegmenter, MetricReport, Sampler, SegmenterTraining};
use dpgan::scene_data::{
    generate_scenes, image_batch, load_dataset, read_label_png, save_dataset, write_rgb_png, DatasetMeta, Image,
    LabelMap, SceneSpec,
};
use dpgan::losses::LossReport;
use dpgan::trainer::{Models, TrainState};
use dpgan::{Error, Result};

use crate::run_config::RunConfig;

const CONFIG_FILE: &str = "config.txt";
const CHECKPOINT_FILE: &str = "checkpoint.dpgk";
const LOSS_FILE: &str = "losses.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn require_exists(what: &str, p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", p.display())))
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn load_scenes(dir: &Path) -> Result<(DatasetMeta, Vec<(LabelMap, Image)>)> {
    require_exists("dataset", dir)?;
    let reader = load_dataset(dir)?;
    let scenes = reader.load_all()?;
    if scenes.is_empty() {
        return Err(Error::Dataset { path: dir.to_path_buf(), message: "dataset has no scenes".into() });
    }
    Ok((reader.meta().clone(), scenes))
}

fn check_meta(cfg: &TrainConfig, meta: &DatasetMeta, dir: &Path) -> Result<()> {
    let m = &cfg.model;
    if meta.num_classes != m.num_classes {
        return Err(Error::Config(format!(
            "num_classes={} but dataset {} has {} classes",
            m.num_classes,
            dir.display(),
            meta.num_classes
        )));
    }
    if meta.height != m.resolution || meta.width != m.resolution {
        return Err(Error::Config(format!(
            "resolution={} but dataset {} is {}x{}",
            m.resolution,
            dir.display(),
            meta.height,
            meta.width
        )));
    }
    Ok(())
}

pub fn generate_data(out: &Path, count: usize, resolution: usize, classes: usize, seed: u64, start: u64) -> Result<()> {
    let spec = SceneSpec::new(seed, DatasetMeta::desk(resolution, classes)?);
    spec.validate()?;
    let scenes = generate_scenes(&spec, start, count)?;
    save_dataset(out, &spec.meta, &scenes)?;
    println!("wrote {count} scenes ({resolution}x{resolution}, {classes} classes) to {}", out.display());
    Ok(())
}

fn palette(class: u8) -> [f32; 3] {
    const BASE: [[f32; 3]; 8] = [
        [-1.0, -1.0, -1.0],
        [0.6, -0.6, -0.6],
        [-0.6, 0.6, -0.6],
        [-0.6, -0.6, 0.6],
        [0.8, 0.8, -0.8],
        [1.0, 1.0, 1.0],
        [0.8, -0.6, 0.8],
        [-0.6, 0.8, 0.8],
    ];
    if let Some(&c) = BASE.get(class as usize) {
        return c;
    }
    let h = (class as f32 * 0.618_034).fract() * std::f32::consts::TAU;
    [h.cos(), (h + 2.094).cos(), (h + 4.189).cos()]
}

fn colorize(label: &LabelMap) -> Image {
    let hw = label.height() * label.width();
    let mut data = vec![0.0; 3 * hw];
    for (p, &c) in label.data().iter().enumerate() {
        let rgb = palette(c);
        for k in 0..3 {
            data[k * hw + p] = rgb[k];
        }
    }
    Image::new(label.height(), label.width(), data).expect("consistent size")
}

/// Rows of equally sized images laid side by side.
fn grid(rows: &[Vec<Image>]) -> Result<Image> {
    let first = rows.first().and_then(|r| r.first()).ok_or_else(|| Error::Model("empty grid".into()))?;
    let (h, w) = (first.height(), first.width());
    let cols = rows[0].len();
    let (gh, gw) = (h * rows.len(), w * cols);
    let mut data = vec![0.0; 3 * gh * gw];
    for (r, row) in rows.iter().enumerate() {
        for (c, im) in row.iter().enumerate() {
            for k in 0..3 {
                for y in 0..h {
                    let src = &im.data()[k * h * w + y * w..k * h * w + (y + 1) * w];
                    let dst = k * gh * gw + (r * h + y) * gw + c * w;
                    data[dst..dst + w].copy_from_slice(src);
                }
            }
        }
    }
    Image::new(gh, gw, data)
}

fn write_grid(path: &Path, state: &TrainState, scenes: &[(LabelMap, Image)]) -> Result<()> {
    let labels: Vec<&LabelMap> = scenes.iter().map(|s| &s.0).collect();
    let fakes = Sampler::ema(state).generate(&labels, 0)?;
    let rows: Vec<Vec<Image>> =
        scenes.iter().zip(fakes).map(|((l, real), fake)| vec![colorize(l), real.clone(), fake]).collect();
    write_rgb_png(path, &grid(&rows)?)
}

fn write_metrics(dir: &Path, stem: &str, report: &MetricReport) -> Result<()> {
    write_file(&dir.join(format!("{stem}.txt")), &report.to_key_value())?;
    write_file(&dir.join(format!("{stem}.csv")), &report.to_csv()?)
}

struct EvalSetup {
    meta: DatasetMeta,
    scenes: Vec<(LabelMap, Image)>,
    seg: FrozenSegmenter,
}

fn eval_setup(run: &RunConfig) -> Result<Option<EvalSetup>> {
    let (Some(dir), Some(seg_path)) = (&run.eval_data, &run.segmenter) else {
        if run.eval_data.is_some() || run.eval_every > 0 {
            return Err(Error::Config("evaluation needs both eval_data and segmenter".into()));
        }
        return Ok(None);
    };
    require_exists("segmenter", seg_path)?;
    let (meta, mut scenes) = load_scenes(dir)?;
    check_meta(&run.train, &meta, dir)?;
    if run.eval_samples > 0 {
        scenes.truncate(run.eval_samples);
    }
    let seg = FrozenSegmenter::load(seg_path)?;
    if seg.num_classes() != meta.num_classes {
        return Err(Error::Config(format!(
            "segmenter has {} classes, dataset {} has {}",
            seg.num_classes(),
            dir.display(),
            meta.num_classes
        )));
    }
    Ok(Some(EvalSetup { meta, scenes, seg }))
}

/// Evaluation settings used during and after training: no multi-modal or
/// multi-resolution passes.
fn quick_eval() -> EvalOptions {
    EvalOptions { modes: 0, scales: Vec::new(), ..EvalOptions::default() }
}

/// Trains per `run`, writing outputs under `out`. Returns the final state and
/// the final evaluation, if evaluation is configured.
fn train_run(
    run: &RunConfig,
    out: &Path,
    data: &[(LabelMap, Image)],
    eval: Option<&EvalSetup>,
    resume: Option<&Path>,
) -> Result<(TrainState, Option<MetricReport>)> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join(CONFIG_FILE), &run.to_text())?;
    let mut state = match resume {
        Some(p) => {
            require_exists("checkpoint", p)?;
            TrainState::load(p, Some(&run.train))?
        }
        None => TrainState::new(&run.train)?,
    };
    let loss_path = out.join(LOSS_FILE);
    let fresh = resume.is_none() || !loss_path.exists();
    let mut losses = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&loss_path)
        .map_err(io_err(&loss_path))?;
    if fresh {
        writeln!(losses, "step,{}", LossReport::FIELDS.join(",")).map_err(io_err(&loss_path))?;
    }
    let grid_scenes: Vec<(LabelMap, Image)> = eval
        .map_or(data, |e| e.scenes.as_slice())
        .iter()
        .take(run.grid_count.max(1))
        .cloned()
        .collect();
    let total = run.train.steps as u64;
    let started = std::time::Instant::now();
    state.train_until(data, total, |s, r| {
        let step = s.step as usize;
        let row: Vec<String> = r.values().iter().map(|v| format!("{v:.6}")).collect();
        writeln!(losses, "{},{}", step, row.join(",")).map_err(io_err(&loss_path))?;
        if run.log_every > 0 && (step.is_multiple_of(run.log_every) || step == 1) {
            eprintln!(
                "step {step}/{total}  d {:.4}  g {:.4}  pixel_g {:.4}  lm {:.4}  {:.1}s",
                r.l_d_total,
                r.l_g_total,
                r.l_pixel_g,
                r.l_lm,
                started.elapsed().as_secs_f64()
            );
        }
        if run.checkpoint_every > 0 && step.is_multiple_of(run.checkpoint_every) {
            s.save(&out.join(CHECKPOINT_FILE))?;
        }
        if run.grid_every > 0 && step.is_multiple_of(run.grid_every) {
            write_grid(&out.join(format!("grid_{step:06}.png")), s, &grid_scenes)?;
        }
        if let Some(e) = eval {
            if run.eval_every > 0 && step.is_multiple_of(run.eval_every) && step as u64 != total {
                let report = evaluate(&Sampler::ema(s), &e.scenes, &e.meta, &e.seg, &quick_eval())?;
                eprintln!("step {step}: toy_fid {:.4}  miou {:.4}", report.toy_fid, report.miou);
                write_metrics(out, &format!("metrics_{step:06}"), &report)?;
            }
        }
        Ok(())
    })?;
    state.save(&out.join(CHECKPOINT_FILE))?;
    let report = match eval {
        Some(e) => {
            let report = evaluate(&Sampler::ema(&state), &e.scenes, &e.meta, &e.seg, &quick_eval())?;
            write_metrics(out, "metrics", &report)?;
            Some(report)
        }
        None => None,
    };
    Ok((state, report))
}

fn resolve_paths(run: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let data = run.data.clone().ok_or_else(|| Error::Config("no training data: pass --data or set data=".into()))?;
    let out = run.out.clone().ok_or_else(|| Error::Config("no output directory: pass --out or set out=".into()))?;
    Ok((data, out))
}

pub fn train(config: Option<&Path>, overrides: &[String], resume: Option<&Path>) -> Result<()> {
    let run = RunConfig::resolve(config, overrides)?;
    let (data_dir, out) = resolve_paths(&run)?;
    let (meta, data) = load_scenes(&data_dir)?;
    check_meta(&run.train, &meta, &data_dir)?;
    let eval = eval_setup(&run)?;
    let (state, report) = train_run(&run, &out, &data, eval.as_ref(), resume)?;
    println!("trained {} steps; checkpoint {}", state.step, out.join(CHECKPOINT_FILE).display());
    if let Some(r) = report {
        print!("{}", r.to_key_value());
    }
    Ok(())
}

pub fn synthesize(checkpoint: &Path, label: &Path, out: &Path, seed: u64, live: bool) -> Result<()> {
    require_exists("checkpoint", checkpoint)?;
    require_exists("label map", label)?;
    let state = TrainState::load(checkpoint, None)?;
    let m = &state.cfg.model;
    let l = read_label_png(label, m.num_classes)?;
    if l.height() != m.resolution || l.width() != m.resolution {
        return Err(Error::Config(format!(
            "label map is {}x{} but the model resolution is {}",
            l.height(),
            l.width(),
            m.resolution
        )));
    }
    let sampler = if live { Sampler::live(&state) } else { Sampler::ema(&state) };
    let image = sampler.generate(&[&l], seed)?.remove(0);
    write_rgb_png(out, &image)?;
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    segmenter: &Path,
    out: Option<&Path>,
    opts: &EvalOptions,
    samples: usize,
    live: bool,
) -> Result<()> {
    require_exists("checkpoint", checkpoint)?;
    require_exists("segmenter", segmenter)?;
    let state = TrainState::load(checkpoint, None)?;
    let (meta, mut scenes) = load_scenes(data)?;
    check_meta(&state.cfg, &meta, data)?;
    if samples > 0 {
        scenes.truncate(samples);
    }
    let seg = FrozenSegmenter::load(segmenter)?;
    let sampler = if live { Sampler::live(&state) } else { Sampler::ema(&state) };
    let report = evaluate(&sampler, &scenes, &meta, &seg, opts)?;
    print!("{}", report.to_key_value());
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let scales: Vec<String> = opts.scales.iter().map(|s| s.to_string()).collect();
        let settings = format!(
            "checkpoint={}\ndata={}\nsegmenter={}\nseed={}\nmodes={}\nscales={}\nsamples={}\nlive={}\n",
            checkpoint.display(),
            data.display(),
            segmenter.display(),
            opts.noise_seed,
            opts.modes,
            scales.join(","),
            samples,
            live
        );
        write_file(&dir.join(CONFIG_FILE), &settings)?;
        write_metrics(dir, "metrics", &report)?;
    }
    Ok(())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn ablate(config: Option<&Path>, overrides: &[String], variants: &[Variant], seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("--seeds is empty".into()));
    }
    let base = RunConfig::resolve(config, overrides)?;
    let (data_dir, out) = resolve_paths(&base)?;
    if base.eval_data.is_none() || base.segmenter.is_none() {
        return Err(Error::Config("ablate needs --eval-data and --segmenter".into()));
    }
    let (meta, data) = load_scenes(&data_dir)?;
    check_meta(&base.train, &meta, &data_dir)?;
    let eval = eval_setup(&base)?.expect("evaluation configured");
    let table_path = out.join("ablation.csv");
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let mut table = csv::Writer::from_path(&table_path).map_err(|e| Error::Config(format!("{}: {e}", table_path.display())))?;
    let csv_err = |e: csv::Error| Error::Metric(format!("ablation table: {e}"));
    table.write_record(["variant", "seed", "toy_fid", "miou", "obj_miou", "obj_fid_small", "obj_fid_all"]).map_err(csv_err)?;
    let mut summary = Vec::new();
    for &variant in variants {
        let mut fids = Vec::new();
        let mut smalls = Vec::new();
        let mut mious = Vec::new();
        for &seed in seeds {
            let mut run = base.clone();
            run.train.apply_variant(variant);
            run.train.seed = seed;
            run.train.validate()?;
            let dir = out.join(variant.as_str()).join(format!("seed{seed}"));
            run.out = Some(dir.clone());
            eprintln!("== {variant} seed {seed}");
            let (_, report) = train_run(&run, &dir, &data, Some(&eval), None)?;
            let r = report.expect("evaluation configured");
            let small = r.obj_fid_small.unwrap_or(f64::NAN);
            table
                .write_record([
                    variant.to_string(),
                    seed.to_string(),
                    format!("{:.6}", r.toy_fid),
                    format!("{:.6}", r.miou),
                    format!("{:.6}", r.obj_miou),
                    format!("{small:.6}"),
                    format!("{:.6}", r.obj_fid_all.unwrap_or(f64::NAN)),
                ])
                .map_err(csv_err)?;
            table.flush().map_err(io_err(&table_path))?;
            fids.push(r.toy_fid);
            smalls.push(small);
            mious.push(r.miou);
        }
        summary.push((variant, median(&mut fids), median(&mut smalls), median(&mut mious)));
    }
    println!("{:<10} {:>14} {:>20} {:>12}", "variant", "median_fid", "median_small_fid", "median_miou");
    for (v, fid, small, miou) in summary {
        println!("{:<10} {fid:>14.4} {small:>20.4} {miou:>12.4}", v.as_str());
    }
    println!("per-run results: {}", table_path.display());
    Ok(())
}

pub fn report_params(config: Option<&Path>, overrides: &[String]) -> Result<()> {
    let run = RunConfig::resolve(config, overrides)?;
    let models = Models::build(&run.train.model, run.train.seed)?;
    let (g, d) = (parameter_count(&models.g), parameter_count(&models.d));
    println!("generator={g}");
    println!("discriminator={d}");
    println!("total={}", g + d);
    Ok(())
}

pub fn train_segmenter(data: &Path, out: &Path, heldout: Option<&Path>, opts: &SegmenterTraining) -> Result<()> {
    let (meta, scenes) = load_scenes(data)?;
    let held = heldout.map(load_scenes).transpose()?;
    let seg = evaluation::train_segmenter(&scenes, meta.num_classes, opts, |step, loss| {
        if step % 100 == 0 || step + 1 == opts.steps {
            eprintln!("step {step}/{}  loss {loss:.4}", opts.steps);
        }
    })?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    seg.save(out)?;
    if let Some((hmeta, hscenes)) = held {
        if hmeta.num_classes != meta.num_classes {
            return Err(Error::Config("held-out and training datasets have different class counts".into()));
        }
        let images: Vec<&Image> = hscenes.iter().map(|s| &s.1).collect();
        let pred = seg.segment(&image_batch(&images)?)?;
        let gt: Vec<LabelMap> = hscenes.iter().map(|s| s.0.clone()).collect();
        let m = evaluation::miou(&pred, &gt, meta.num_classes)?;
        println!("heldout_miou={:.6}", m.miou);
        for (c, v) in m.per_class.iter().enumerate() {
            println!("iou_{c}={}", v.map_or("nan".into(), |v| format!("{v:.6}")));
        }
    }
    println!("segmenter written to {}", out.display());
    Ok(())
}
