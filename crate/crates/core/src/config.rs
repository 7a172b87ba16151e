//! Flat `key = value` run configuration with dotted sections.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Every key has a default, unknown keys are rejected, and a key
//! may be given by its last component alone (`lambda` for `loss.lambda`)
//! when that is unambiguous.
//!
//! All randomness derives from the single `seed` key:
//! `derive_seed(seed, tag) = seed XOR fnv1a64(tag)` with the tags `data`,
//! `split`, `stem`, `model-init` and `train`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fan_stub::StemConfig;
use crate::model::{ModelConfig, Variant};
use crate::rng;
use crate::synth::SynthSpec;
use crate::training::TrainConfig;
use crate::transformer::DropMode;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: SynthSpec,
    pub train_frac: f64,
    pub stem: StemConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: SynthSpec::default(),
            train_frac: 0.75,
            stem: StemConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "out.dir",
    "data.n_au",
    "data.n_samples",
    "data.groups",
    "data.base_rates",
    "data.noise_rate",
    "data.image_size",
    "data.train_frac",
    "stem.d_lf",
    "stem.d_h",
    "stem.n_lmk",
    "stem.h_a",
    "model.d_c",
    "model.depth",
    "model.k",
    "model.drop",
    "model.variant",
    "model.mask_init_std",
    "loss.lambda",
    "train.epochs",
    "train.base_lr",
    "train.decay_factor",
    "train.decay_every",
    "train.batch_size",
    "train.hflip",
    "train.target_f1",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: invalid value '{value}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str, sep: char) -> Result<Vec<T>> {
    value.split(sep).map(|v| parse(key, v)).collect()
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn join<T: ToString>(items: &[T], sep: &str) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

/// Maps a bare key to its full dotted name when exactly one matches.
pub fn resolve_key(key: &str) -> Result<&'static str> {
    if let Some(k) = KEYS.iter().find(|k| **k == key) {
        return Ok(k);
    }
    let matches: Vec<&'static str> = KEYS
        .iter()
        .copied()
        .filter(|k| k.rsplit('.').next() == Some(key))
        .collect();
    match matches[..] {
        [k] => Ok(k),
        [] => Err(Error::config(format!("unknown config key '{key}'"))),
        _ => Err(Error::config(format!(
            "ambiguous config key '{key}' (could be {})",
            matches.join(", ")
        ))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = resolve_key(key.trim())?;
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out.dir" => self.out_dir = PathBuf::from(v),
            "data.n_au" => self.data.n_au = parse(key, v)?,
            "data.n_samples" => self.data.n_samples = parse(key, v)?,
            "data.groups" => {
                self.data.groups = v
                    .split(';')
                    .map(|g| parse_list(key, g, ','))
                    .collect::<Result<Vec<_>>>()?
            }
            "data.base_rates" => self.data.base_rates = parse_list(key, v, ',')?,
            "data.noise_rate" => self.data.noise_rate = parse(key, v)?,
            "data.image_size" => self.data.image_size = parse(key, v)?,
            "data.train_frac" => self.train_frac = parse(key, v)?,
            "stem.d_lf" => self.stem.d_lf = parse(key, v)?,
            "stem.d_h" => self.stem.d_h = parse(key, v)?,
            "stem.n_lmk" => self.stem.n_lmk = parse(key, v)?,
            "stem.h_a" => self.stem.h_a = parse(key, v)?,
            "model.d_c" => self.model.d_c = parse(key, v)?,
            "model.depth" => self.model.depth = parse(key, v)?,
            "model.k" => self.model.k = parse(key, v)?,
            "model.drop" => self.model.drop = v.parse().map_err(|e| Error::config(format!("{key}: {e}")))?,
            "model.variant" => self.model.variant = v.parse().map_err(|e| Error::config(format!("{key}: {e}")))?,
            "model.mask_init_std" => self.model.mask_init_std = parse(key, v)?,
            "loss.lambda" => self.model.lambda = parse(key, v)?,
            "train.epochs" => self.train.schedule.epochs = parse(key, v)?,
            "train.base_lr" => self.train.schedule.base_lr = parse(key, v)?,
            "train.decay_factor" => self.train.schedule.decay_factor = parse(key, v)?,
            "train.decay_every" => self.train.schedule.decay_every = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.hflip" => self.train.hflip = parse(key, v)?,
            "train.target_f1" => {
                self.train.target_f1 = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            _ => unreachable!("every key in KEYS is handled"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let key = resolve_key(key)?;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "out.dir" => self.out_dir.display().to_string(),
            "data.n_au" => self.data.n_au.to_string(),
            "data.n_samples" => self.data.n_samples.to_string(),
            "data.groups" => self.data.groups.iter().map(|g| join(g, ",")).collect::<Vec<_>>().join(";"),
            "data.base_rates" => self.data.base_rates.iter().map(|&r| fmt_f64(r)).collect::<Vec<_>>().join(","),
            "data.noise_rate" => fmt_f64(self.data.noise_rate),
            "data.image_size" => self.data.image_size.to_string(),
            "data.train_frac" => fmt_f64(self.train_frac),
            "stem.d_lf" => self.stem.d_lf.to_string(),
            "stem.d_h" => self.stem.d_h.to_string(),
            "stem.n_lmk" => self.stem.n_lmk.to_string(),
            "stem.h_a" => self.stem.h_a.to_string(),
            "model.d_c" => self.model.d_c.to_string(),
            "model.depth" => self.model.depth.to_string(),
            "model.k" => self.model.k.to_string(),
            "model.drop" => self.model.drop.to_string(),
            "model.variant" => self.model.variant.to_string(),
            "model.mask_init_std" => fmt_f64(self.model.mask_init_std),
            "loss.lambda" => fmt_f64(self.model.lambda),
            "train.epochs" => self.train.schedule.epochs.to_string(),
            "train.base_lr" => fmt_f64(self.train.schedule.base_lr),
            "train.decay_factor" => fmt_f64(self.train.schedule.decay_factor),
            "train.decay_every" => self.train.schedule.decay_every.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.hflip" => self.train.hflip.to_string(),
            "train.target_f1" => self.train.target_f1.map_or_else(|| "none".into(), fmt_f64),
            _ => unreachable!("every key in KEYS is handled"),
        })
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", ln + 1)))?;
            let key = resolve_key(k.trim()).map_err(|e| Error::config(format!("line {}: {e}", ln + 1)))?;
            if seen.contains(&key) {
                return Err(Error::config(format!("line {}: {key} given twice", ln + 1)));
            }
            seen.push(key);
            cfg.set(key, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `KEY=VAL` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override '{}' is not KEY=VAL", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("known key"));
        }
        s
    }

    pub fn data_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: rng::derive_seed(self.seed, "data"),
            ..self.data.clone()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.n_au = self.data.n_au;
        m.image_size = self.data.image_size;
        m.stem = StemConfig {
            w_a: self.stem.h_a,
            ..self.stem.clone()
        };
        m.with_root_seed(self.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: rng::derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn split_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "split")
    }

    pub fn validate(&self) -> Result<()> {
        self.data_spec().validate()?;
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::config("data.train_frac must lie in (0, 1)"));
        }
        self.model_config().validate()?;
        crate::fan_stub::FixedStem::new(&self.model_config().stem, self.data.image_size)?;
        self.train_config().validate()
    }
}

/// Key/value text for a [`ModelConfig`], including derived seeds. Used in
/// checkpoint headers.
pub fn model_config_text(m: &ModelConfig) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    put("model.n_au", m.n_au.to_string());
    put("model.image_size", m.image_size.to_string());
    put("model.d_c", m.d_c.to_string());
    put("model.depth", m.depth.to_string());
    put("model.k", m.k.to_string());
    put("model.lambda", fmt_f64(m.lambda));
    put("model.drop", m.drop.to_string());
    put("model.variant", m.variant.to_string());
    put("model.mask_init_std", fmt_f64(m.mask_init_std));
    put("model.init_seed", m.init_seed.to_string());
    put("stem.seed", m.stem.seed.to_string());
    put("stem.d_lf", m.stem.d_lf.to_string());
    put("stem.d_h", m.stem.d_h.to_string());
    put("stem.n_lmk", m.stem.n_lmk.to_string());
    put("stem.h_a", m.stem.h_a.to_string());
    put("stem.w_a", m.stem.w_a.to_string());
    s
}

fn field<T: FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::format(format!("{k}: invalid value '{v}'")))
}

pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    let mut seen = 0usize;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad model config line '{line}'")))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "model.n_au" => m.n_au = field(k, v)?,
            "model.image_size" => m.image_size = field(k, v)?,
            "model.d_c" => m.d_c = field(k, v)?,
            "model.depth" => m.depth = field(k, v)?,
            "model.k" => m.k = field(k, v)?,
            "model.lambda" => m.lambda = field(k, v)?,
            "model.drop" => m.drop = v.parse::<DropMode>().map_err(|e| Error::format(e.to_string()))?,
            "model.variant" => m.variant = v.parse::<Variant>().map_err(|e| Error::format(e.to_string()))?,
            "model.mask_init_std" => m.mask_init_std = field(k, v)?,
            "model.init_seed" => m.init_seed = field(k, v)?,
            "stem.seed" => m.stem.seed = field(k, v)?,
            "stem.d_lf" => m.stem.d_lf = field(k, v)?,
            "stem.d_h" => m.stem.d_h = field(k, v)?,
            "stem.n_lmk" => m.stem.n_lmk = field(k, v)?,
            "stem.h_a" => m.stem.h_a = field(k, v)?,
            "stem.w_a" => m.stem.w_a = field(k, v)?,
            _ => return Err(Error::format(format!("unknown model config key '{k}'"))),
        }
        seen += 1;
    }
    if seen != 16 {
        return Err(Error::format(format!("model config has {seen} keys, expected 16")));
    }
    Ok(m)
}
