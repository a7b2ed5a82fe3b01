use std::path::{Path, PathBuf};

use dpgan::config::TrainConfig;
use dpgan::{Error, Result};

/// Training hyperparameters plus where data comes from, where outputs go,
/// and how often to evaluate and write sample grids.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub segmenter: Option<PathBuf>,
    /// Steps between evaluations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Held-out scenes used per evaluation; 0 uses all.
    pub eval_samples: usize,
    /// Steps between sample grids; 0 disables them.
    pub grid_every: usize,
    pub grid_count: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: None,
            out: None,
            eval_data: None,
            segmenter: None,
            eval_every: 0,
            eval_samples: 0,
            grid_every: 500,
            grid_count: 4,
            log_every: 50,
            checkpoint_every: 500,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}={v:?} is not a valid value")))
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data" => self.data = path(v),
            "out" => self.out = path(v),
            "eval_data" => self.eval_data = path(v),
            "segmenter" => self.segmenter = path(v),
            "eval_every" => self.eval_every = parse(key, v)?,
            "eval_samples" => self.eval_samples = parse(key, v)?,
            "grid_every" => self.grid_every = parse(key, v)?,
            "grid_count" => self.grid_count = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            k => self.train.set(k, v)?,
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies `--set key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the config file, then overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            let text = std::fs::read_to_string(f).map_err(|e| Error::Config(format!("{}: {e}", f.display())))?;
            cfg.apply_text(&text).map_err(|e| Error::Config(format!("{}: {e}", f.display())))?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        for (k, v) in [
            ("data", show(&self.data)),
            ("out", show(&self.out)),
            ("eval_data", show(&self.eval_data)),
            ("segmenter", show(&self.segmenter)),
            ("eval_every", self.eval_every.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
            ("grid_every", self.grid_every.to_string()),
            ("grid_count", self.grid_count.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ] {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&self.train.to_text());
        s
    }
}
