//! Flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::PixelNorm;
use crate::error::{Error, Result};
use crate::net::{ArchConfig, ArchitectureSpec, NetOptions, NormMode, Preset};
use crate::norm::{BnConfig, GammaPreset, PwsConfig};
use crate::optim::SgdConfig;

pub const DATA_DIR_ENV: &str = "PWS_DATA_DIR";
pub const RESOLVED_FILE: &str = "config.resolved";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision '{s}', expected f32|f64"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// How γ is chosen for PWS layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaSetting {
    /// From the learning rate.
    Auto,
    Value(f64),
    /// From each layer's fan-in.
    Rule(GammaPreset),
}

impl FromStr for GammaSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(GammaSetting::Auto),
            "sqrt-half-fan-in" => Ok(GammaSetting::Rule(GammaPreset::SqrtHalfFanIn)),
            "sqrt-two-over-fan-in" => Ok(GammaSetting::Rule(GammaPreset::SqrtTwoOverFanIn)),
            _ => match s.parse::<f64>() {
                Ok(v) if v >= 0.0 && v.is_finite() => Ok(GammaSetting::Value(v)),
                _ => Err(Error::Config(format!(
                    "gamma must be auto, sqrt-half-fan-in, sqrt-two-over-fan-in or a non-negative number, got '{s}'"
                ))),
            },
        }
    }
}

impl fmt::Display for GammaSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GammaSetting::Auto => f.write_str("auto"),
            GammaSetting::Value(v) => write!(f, "{v:e}"),
            GammaSetting::Rule(GammaPreset::SqrtHalfFanIn) => f.write_str("sqrt-half-fan-in"),
            GammaSetting::Rule(GammaPreset::SqrtTwoOverFanIn) => f.write_str("sqrt-two-over-fan-in"),
            GammaSetting::Rule(GammaPreset::LearningRate) => f.write_str("auto"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: Preset,
    pub width: f64,
    pub depth: usize,
    pub norm: NormMode,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: GammaSetting,
    pub g_init: f64,
    pub epochs: usize,
    /// Epochs at which the rate is multiplied by `lr_factor`.
    pub schedule: Vec<usize>,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub pixel_norm: PixelNorm,
    pub pws_scale_sqrt2nl: bool,
    pub pws_alpha: bool,
    pub gn_groups: usize,
    /// Probe every this many steps; 0 disables probing.
    pub probe_every: usize,
    pub precision: Precision,
    /// Use only the first this many training images; 0 keeps all.
    pub train_subset: usize,
    /// Use only the first this many test images; 0 keeps all.
    pub test_subset: usize,
    pub augment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Preset::PlainC,
            width: 1.0,
            depth: 20,
            norm: NormMode::Pws,
            lr: 5e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            gamma: GammaSetting::Auto,
            g_init: 1.0,
            epochs: 200,
            schedule: vec![100, 150, 180],
            lr_factor: 0.1,
            batch_size: 128,
            seed: 0,
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
            pixel_norm: PixelNorm::Standardize,
            pws_scale_sqrt2nl: true,
            pws_alpha: true,
            gn_groups: 16,
            probe_every: 0,
            precision: Precision::F32,
            train_subset: 0,
            test_subset: 0,
            augment: true,
        }
    }
}

pub const KEYS: [&str; 26] = [
    "preset",
    "arch",
    "width",
    "depth",
    "norm",
    "lr",
    "momentum",
    "weight_decay",
    "gamma",
    "g_init",
    "epochs",
    "schedule",
    "lr_factor",
    "batch_size",
    "seed",
    "data_dir",
    "out_dir",
    "pixel_norm",
    "pws_scale_sqrt2nl",
    "pws_alpha",
    "gn_groups",
    "probe_every",
    "precision",
    "train_subset",
    "test_subset",
    "augment",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} expects on|off, got '{value}'"))),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are
/// skipped; a key may appear once.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{raw}'", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// CI-scale preset: 5000 training images, 20 epochs, width-halved plain-c.
    pub fn smoke() -> Self {
        RunConfig {
            arch: Preset::PlainC,
            width: 0.5,
            epochs: 20,
            train_subset: 5000,
            out_dir: PathBuf::from("runs/smoke"),
            ..RunConfig::default()
        }
    }

    /// Builds a config from pairs; a `preset` pair picks the starting point
    /// and every other pair overrides it, whatever the order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            None => RunConfig::default(),
            Some((_, v)) if v == "default" => RunConfig::default(),
            Some((_, v)) if v == "smoke" => RunConfig::smoke(),
            Some((_, v)) => return Err(Error::Config(format!("unknown preset '{v}', expected default|smoke"))),
        };
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => {}
            "arch" => self.arch = value.parse()?,
            "width" => self.width = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "norm" => self.norm = value.parse()?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "gamma" => self.gamma = value.parse()?,
            "g_init" => self.g_init = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "schedule" => {
                self.schedule = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "lr_factor" => self.lr_factor = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "pixel_norm" => self.pixel_norm = value.parse()?,
            "pws_scale_sqrt2nl" => self.pws_scale_sqrt2nl = parse_bool(key, value)?,
            "pws_alpha" => self.pws_alpha = parse_bool(key, value)?,
            "gn_groups" => self.gn_groups = parse(key, value)?,
            "probe_every" => self.probe_every = parse(key, value)?,
            "precision" => self.precision = value.parse()?,
            "train_subset" => self.train_subset = parse(key, value)?,
            "test_subset" => self.test_subset = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'; known keys: {}", KEYS.join(", ")))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::Config(format!("width must be positive, got {}", self.width)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_factor > 0.0) {
            return Err(Error::Config(format!("lr_factor must be positive, got {}", self.lr_factor)));
        }
        if !(self.g_init.is_finite()) {
            return Err(Error::Config(format!("g_init must be finite, got {}", self.g_init)));
        }
        if self.gn_groups == 0 {
            return Err(Error::Config("gn_groups must be at least 1".into()));
        }
        self.sgd().validate()?;
        ArchitectureSpec::from_config(self.arch_config()).map(|_| ())
    }

    pub fn arch_config(&self) -> ArchConfig {
        ArchConfig {
            width: self.width,
            depth: self.depth,
            ..ArchConfig::new(self.arch)
        }
    }

    /// γ for layers that do not use a fan-in rule.
    pub fn resolved_gamma(&self) -> f64 {
        match self.gamma {
            GammaSetting::Value(v) => v,
            _ => GammaPreset::LearningRate.gamma(self.lr, 0),
        }
    }

    pub fn net_options(&self) -> NetOptions {
        NetOptions {
            pws: PwsConfig {
                gamma: self.resolved_gamma(),
                scale_sqrt2nl: self.pws_scale_sqrt2nl,
            },
            gamma_rule: match self.gamma {
                GammaSetting::Rule(r) => Some(r),
                _ => None,
            },
            pws_alpha: self.pws_alpha,
            g_init: self.g_init,
            gn_groups: self.gn_groups,
            bn: BnConfig::default(),
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            schedule: self.schedule.iter().map(|&b| (b, self.lr_factor)).collect(),
        }
    }

    /// The configured data directory, or the environment fallback.
    pub fn resolve_data_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.data_dir {
            return Ok(d.clone());
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(Error::Config(format!(
                "no data directory: set data_dir in the config, pass --data_dir, or export {DATA_DIR_ENV}"
            ))),
        }
    }

    /// Every key with its effective value; parsing the output reproduces
    /// this config.
    pub fn to_resolved_string(&self) -> String {
        let schedule: Vec<String> = self.schedule.iter().map(usize::to_string).collect();
        let lines = [
            ("arch", self.arch.to_string()),
            ("width", self.width.to_string()),
            ("depth", self.depth.to_string()),
            ("norm", self.norm.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("gamma", self.gamma.to_string()),
            ("g_init", self.g_init.to_string()),
            ("epochs", self.epochs.to_string()),
            ("schedule", schedule.join(",")),
            ("lr_factor", self.lr_factor.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            (
                "data_dir",
                self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("out_dir", self.out_dir.display().to_string()),
            ("pixel_norm", self.pixel_norm.to_string()),
            ("pws_scale_sqrt2nl", on_off(self.pws_scale_sqrt2nl).to_string()),
            ("pws_alpha", on_off(self.pws_alpha).to_string()),
            ("gn_groups", self.gn_groups.to_string()),
            ("probe_every", self.probe_every.to_string()),
            ("precision", self.precision.to_string()),
            ("train_subset", self.train_subset.to_string()),
            ("test_subset", self.test_subset.to_string()),
            ("augment", on_off(self.augment).to_string()),
        ];
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_FILE);
        std::fs::write(&path, self.to_resolved_string()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
