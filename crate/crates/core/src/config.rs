//! Model and training configuration, ablation variants, and the flat
//! `key=value` text form used on disk and on the command line.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} {s:?} (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum! {
    /// Generator conditioning: dual pyramid or label-only.
    GenVariant { Dp => "dp", Oa => "oa" }
}

keyword_enum! {
    /// Discriminator supervision: pixel + patch + feature, or pixel only.
    DisVariant { Dp => "dp", Oa => "oa" }
}

keyword_enum! {
    /// Where a discriminator-side loss taps features.
    Placement { Enc => "enc", Dec => "dec", Both => "both", Off => "off" }
}

keyword_enum! {
    ZMode { Tiled => "tiled", PerPixel => "per_pixel" }
}

keyword_enum! {
    /// Reduction of the squared LabelMix residual per sample.
    LmReduction { Sum => "sum", Mean => "mean" }
}

keyword_enum! {
    /// Regions that receive independent coin flips in the LabelMix mask.
    MaskGranularity { Component => "component", Class => "class" }
}

keyword_enum! {
    /// Scope over which class-balancing weights are computed.
    ClassWeighting { Batch => "batch", Dataset => "dataset" }
}

keyword_enum! {
    Variant {
        DpDp => "dp-dp", DpOa => "dp-oa", OaDp => "oa-dp", OaOa => "oa-oa",
        MsEnc => "ms-enc", MsDec => "ms-dec", MsBoth => "ms-both", MsOff => "ms-off",
        FmEnc => "fm-enc", FmDec => "fm-dec", FmBoth => "fm-both", FmOff => "fm-off",
        NoCat => "no-cat", NoLm => "no-lm",
    }
}

/// Architecture choices shared by synthesis, training and checkpoint loading.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub resolution: usize,
    pub num_classes: usize,
    pub width_divisor: usize,
    pub z_dim: usize,
    pub gen: GenVariant,
    pub dis: DisVariant,
    pub ms_placement: Placement,
    pub fm_placement: Placement,
    pub no_cat: bool,
    /// Feeds the full-resolution alpha into the final conv.
    pub route_top_alpha: bool,
    pub z_mode: ZMode,
    pub g_spectral: bool,
    pub d_spectral: bool,
    /// Encoder blocks (1-based) carrying patch heads; empty means the two deepest.
    pub patch_taps: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            num_classes: 8,
            width_divisor: 8,
            z_dim: 64,
            gen: GenVariant::Dp,
            dis: DisVariant::Dp,
            ms_placement: Placement::Enc,
            fm_placement: Placement::Dec,
            no_cat: false,
            route_top_alpha: false,
            z_mode: ZMode::Tiled,
            g_spectral: false,
            d_spectral: true,
            patch_taps: Vec::new(),
        }
    }
}

impl ModelConfig {
    /// The full-width 256x256 layout of the reference tables.
    pub fn full(num_classes: usize) -> Self {
        Self { resolution: 256, num_classes, width_divisor: 1, patch_taps: vec![4, 6], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(16..=256).contains(&self.resolution) || !self.resolution.is_power_of_two() {
            return bad(format!("resolution must be a power of two in 16..=256, got {}", self.resolution));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.width_divisor == 0 || 32 % self.width_divisor != 0 {
            return bad(format!("width_divisor must divide 32, got {}", self.width_divisor));
        }
        if self.z_dim == 0 {
            return bad("z_dim must be positive".into());
        }
        if self.dis == DisVariant::Oa {
            for (key, p) in [("ms_placement", self.ms_placement), ("fm_placement", self.fm_placement)] {
                if p != Placement::Off {
                    return bad(format!("dis=oa is a pixel-only discriminator and conflicts with {key}={p}"));
                }
            }
        }
        let depth = (self.resolution / 4).trailing_zeros() as usize;
        if let Some(&t) = self.patch_taps.iter().find(|&&t| t == 0 || t > depth) {
            return bad(format!("patch tap {t} is outside encoder blocks 1..={depth}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    /// Uses `min(decay, (1 + t) / (10 + t))` as the EMA decay at step `t`.
    pub ema_warmup: bool,
    pub lambda_lm: f64,
    pub no_lm: bool,
    pub lm_reduction: LmReduction,
    pub lm_mask: MaskGranularity,
    pub nonsat_g_hinge: bool,
    pub class_weights: ClassWeighting,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Power-iteration rounds before each discriminator update.
    pub sn_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr_g: 1e-4,
            lr_d: 4e-4,
            beta1: 0.0,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.9999,
            ema_warmup: true,
            lambda_lm: 5.0,
            no_lm: false,
            lm_reduction: LmReduction::Sum,
            lm_mask: MaskGranularity::Component,
            nonsat_g_hinge: false,
            class_weights: ClassWeighting::Batch,
            batch_size: 4,
            steps: 2000,
            seed: 0,
            sn_iters: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}={value:?} is not a valid value")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}={value:?} is not a boolean"))),
    }
}

impl TrainConfig {
    /// The LabelMix weight in effect.
    pub fn lm_weight(&self) -> f64 {
        if self.no_lm {
            0.0
        } else {
            self.lambda_lm
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        for (k, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("adam_eps", self.adam_eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay must be in (0, 1), got {}", self.ema_decay));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must be in [0, 1), got {v}"));
            }
        }
        if !(self.lambda_lm >= 0.0) {
            return bad(format!("lambda_lm must be non-negative, got {}", self.lambda_lm));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    /// Applies one of the named ablation variants on top of the current values.
    pub fn apply_variant(&mut self, variant: Variant) {
        let m = &mut self.model;
        let pixel_only = |m: &mut ModelConfig| {
            m.dis = DisVariant::Oa;
            m.ms_placement = Placement::Off;
            m.fm_placement = Placement::Off;
        };
        let full = |m: &mut ModelConfig| {
            m.dis = DisVariant::Dp;
            m.ms_placement = Placement::Enc;
            m.fm_placement = Placement::Dec;
        };
        match variant {
            Variant::DpDp => {
                m.gen = GenVariant::Dp;
                full(m);
            }
            Variant::DpOa => {
                m.gen = GenVariant::Dp;
                pixel_only(m);
            }
            Variant::OaDp => {
                m.gen = GenVariant::Oa;
                full(m);
            }
            Variant::OaOa => {
                m.gen = GenVariant::Oa;
                pixel_only(m);
            }
            Variant::MsEnc | Variant::MsDec | Variant::MsBoth | Variant::MsOff => {
                m.dis = DisVariant::Dp;
                m.ms_placement = match variant {
                    Variant::MsEnc => Placement::Enc,
                    Variant::MsDec => Placement::Dec,
                    Variant::MsBoth => Placement::Both,
                    _ => Placement::Off,
                };
            }
            Variant::FmEnc | Variant::FmDec | Variant::FmBoth | Variant::FmOff => {
                m.dis = DisVariant::Dp;
                m.fm_placement = match variant {
                    Variant::FmEnc => Placement::Enc,
                    Variant::FmDec => Placement::Dec,
                    Variant::FmBoth => Placement::Both,
                    _ => Placement::Off,
                };
            }
            Variant::NoCat => m.no_cat = true,
            Variant::NoLm => self.no_lm = true,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key.trim() {
            "resolution" => m.resolution = parse(key, v)?,
            "num_classes" => m.num_classes = parse(key, v)?,
            "width_divisor" => m.width_divisor = parse(key, v)?,
            "z_dim" => m.z_dim = parse(key, v)?,
            "gen" => m.gen = v.parse()?,
            "dis" => m.dis = v.parse()?,
            "ms_placement" => m.ms_placement = v.parse()?,
            "fm_placement" => m.fm_placement = v.parse()?,
            "no_cat" => m.no_cat = parse_bool(key, v)?,
            "route_top_alpha" => m.route_top_alpha = parse_bool(key, v)?,
            "z_mode" => m.z_mode = v.parse()?,
            "g_spectral" => m.g_spectral = parse_bool(key, v)?,
            "d_spectral" => m.d_spectral = parse_bool(key, v)?,
            "patch_taps" => {
                m.patch_taps = if v.is_empty() || v == "auto" {
                    Vec::new()
                } else {
                    v.split(',').map(|t| parse(key, t.trim())).collect::<Result<_>>()?
                }
            }
            "lr_g" => self.lr_g = parse(key, v)?,
            "lr_d" => self.lr_d = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "ema_decay" => self.ema_decay = parse(key, v)?,
            "ema_warmup" => self.ema_warmup = parse_bool(key, v)?,
            "lambda_lm" => self.lambda_lm = parse(key, v)?,
            "no_lm" => self.no_lm = parse_bool(key, v)?,
            "lm_reduction" => self.lm_reduction = v.parse()?,
            "lm_mask" => self.lm_mask = v.parse()?,
            "nonsat_g_hinge" => self.nonsat_g_hinge = parse_bool(key, v)?,
            "class_weights" => self.class_weights = v.parse()?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "sn_iters" => self.sn_iters = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let taps = if m.patch_taps.is_empty() {
            "auto".to_string()
        } else {
            m.patch_taps.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
        };
        vec![
            ("resolution", m.resolution.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("width_divisor", m.width_divisor.to_string()),
            ("z_dim", m.z_dim.to_string()),
            ("gen", m.gen.to_string()),
            ("dis", m.dis.to_string()),
            ("ms_placement", m.ms_placement.to_string()),
            ("fm_placement", m.fm_placement.to_string()),
            ("no_cat", m.no_cat.to_string()),
            ("route_top_alpha", m.route_top_alpha.to_string()),
            ("z_mode", m.z_mode.to_string()),
            ("g_spectral", m.g_spectral.to_string()),
            ("d_spectral", m.d_spectral.to_string()),
            ("patch_taps", taps),
            ("lr_g", self.lr_g.to_string()),
            ("lr_d", self.lr_d.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("ema_decay", self.ema_decay.to_string()),
            ("ema_warmup", self.ema_warmup.to_string()),
            ("lambda_lm", self.lambda_lm.to_string()),
            ("no_lm", self.no_lm.to_string()),
            ("lm_reduction", self.lm_reduction.to_string()),
            ("lm_mask", self.lm_mask.to_string()),
            ("nonsat_g_hinge", self.nonsat_g_hinge.to_string()),
            ("class_weights", self.class_weights.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("sn_iters", self.sn_iters.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies `key=value` lines (blank lines and `#` comments ignored) on
    /// top of the current values.
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

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.apply_variant(Variant::OaOa);
        cfg.model.patch_taps = vec![2, 3];
        cfg.lr_g = 3e-5;
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn oa_discriminator_conflict_is_named() {
        let mut cfg = TrainConfig::default();
        cfg.set("dis", "oa").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("ms_placement=enc"), "{msg}");
    }

    #[test]
    fn unknown_keys_and_values_are_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set("learning_rate", "1").is_err());
        assert!(cfg.set("ms_placement", "middle").is_err());
        assert!("dp-xx".parse::<Variant>().is_err());
        assert_eq!(Variant::ALL.len(), 14);
    }

    #[test]
    fn oa_oa_is_pixel_only_with_label_conditioning() {
        let mut cfg = TrainConfig::default();
        cfg.apply_variant(Variant::OaOa);
        assert_eq!(cfg.model.gen, GenVariant::Oa);
        assert_eq!((cfg.model.ms_placement, cfg.model.fm_placement), (Placement::Off, Placement::Off));
        cfg.validate().unwrap();
    }
}
