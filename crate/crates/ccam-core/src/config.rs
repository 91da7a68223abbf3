//! Flat `key = value` text configuration. `#` starts a comment, unknown and
//! duplicate keys are rejected, and serialization emits a canonical form that
//! parses back to an identical config.

use crate::dataset::GenConfig;
use crate::error::{Error, Result};
use crate::model::{CamSource, OmegaScheme};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub image_size: usize,
    pub num_fg_classes: usize,
    pub num_bg_classes: usize,
    pub cooc_bias: f32,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub alpha: f32,
    pub use_counterfactual: bool,
    pub use_decouple: bool,
    pub beta: f32,
    pub delta: f32,
    pub temperature: f32,
    pub adapt_lr: f32,
    pub adapt_passes: usize,
    pub seg_threshold: f32,
    pub omega_scheme: OmegaScheme,
    pub cam_source: CamSource,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 42,
            image_size: 64,
            num_fg_classes: 4,
            num_bg_classes: 4,
            cooc_bias: 0.9,
            train_size: 2000,
            test_size: 500,
            epochs: 30,
            batch_size: 12,
            lr: 0.001,
            alpha: 0.001,
            use_counterfactual: true,
            use_decouple: true,
            beta: 0.2,
            delta: 0.012,
            temperature: 15.0,
            adapt_lr: 0.0001,
            adapt_passes: 1,
            seg_threshold: 0.15,
            omega_scheme: OmegaScheme::Top1,
            cam_source: CamSource::Foreground,
        }
    }
}

/// Hyperparameters consumed by the training loop.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub alpha: f32,
    pub use_counterfactual: bool,
    pub use_decouple: bool,
    /// Mean |cos(B_i, F_j)| over all batch pairs (the default) or only
    /// same-image pairs; kept for sensitivity analysis.
    pub decouple_all_pairs: bool,
}

/// Hyperparameters consumed by test-time adaptation.
#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub seed: u64,
    pub beta: f32,
    pub delta: f32,
    pub temperature: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub passes: usize,
    /// Reset parameters to the entry checkpoint after every batch instead of
    /// adapting online.
    pub episodic: bool,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub seg_threshold: f32,
    pub omega_scheme: OmegaScheme,
    pub cam_source: CamSource,
}

impl Config {
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            image_size: self.image_size,
            num_fg_classes: self.num_fg_classes,
            num_bg_classes: self.num_bg_classes,
            cooc_bias: self.cooc_bias,
            train_size: self.train_size,
            test_size: self.test_size,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            alpha: self.alpha,
            use_counterfactual: self.use_counterfactual,
            use_decouple: self.use_decouple,
            decouple_all_pairs: true,
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            seed: self.seed,
            beta: self.beta,
            delta: self.delta,
            temperature: self.temperature,
            lr: self.adapt_lr,
            batch_size: self.batch_size,
            passes: self.adapt_passes,
            episodic: false,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seg_threshold: self.seg_threshold,
            omega_scheme: self.omega_scheme,
            cam_source: self.cam_source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_size < 32 || self.image_size % 8 != 0 {
            return bad(format!(
                "image_size must be >= 32 and divisible by 8, got {}",
                self.image_size
            ));
        }
        if self.num_fg_classes < 2 || self.num_bg_classes < 2 {
            return bad("num_fg_classes and num_bg_classes must be >= 2".to_string());
        }
        let lo = 1.0 / self.num_bg_classes as f32;
        if !(self.cooc_bias >= lo && self.cooc_bias <= 1.0) {
            return bad(format!(
                "cooc_bias must lie in [{lo}, 1], got {}",
                self.cooc_bias
            ));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.alpha < 0.0 {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if self.delta < 0.0 {
            return bad(format!("delta must be >= 0, got {}", self.delta));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.seg_threshold > 0.0 && self.seg_threshold < 1.0) {
            return bad(format!(
                "seg_threshold must lie in (0, 1), got {}",
                self.seg_threshold
            ));
        }
        if self.epochs == 0 || self.train_size == 0 || self.test_size == 0 {
            return bad("epochs, train_size, and test_size must be positive".to_string());
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
            seen.push(key.to_string());
            cfg.set(key, value)
                .map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                    other => other,
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "num_fg_classes" => self.num_fg_classes = num(key, value)?,
            "num_bg_classes" => self.num_bg_classes = num(key, value)?,
            "cooc_bias" => self.cooc_bias = num(key, value)?,
            "train_size" => self.train_size = num(key, value)?,
            "test_size" => self.test_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "use_counterfactual" => self.use_counterfactual = num(key, value)?,
            "use_decouple" => self.use_decouple = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "adapt_lr" => self.adapt_lr = num(key, value)?,
            "adapt_passes" => self.adapt_passes = num(key, value)?,
            "seg_threshold" => self.seg_threshold = num(key, value)?,
            "omega_scheme" => self.omega_scheme = value.parse()?,
            "cam_source" => self.cam_source = value.parse()?,
            other => {
                return Err(Error::Config(format!("unknown key '{other}'")));
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it back yields an identical config (f32
    /// values print with their shortest round-trip representation).
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("image_size", self.image_size.to_string());
        kv("num_fg_classes", self.num_fg_classes.to_string());
        kv("num_bg_classes", self.num_bg_classes.to_string());
        kv("cooc_bias", self.cooc_bias.to_string());
        kv("train_size", self.train_size.to_string());
        kv("test_size", self.test_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("alpha", self.alpha.to_string());
        kv("use_counterfactual", self.use_counterfactual.to_string());
        kv("use_decouple", self.use_decouple.to_string());
        kv("beta", self.beta.to_string());
        kv("delta", self.delta.to_string());
        kv("temperature", self.temperature.to_string());
        kv("adapt_lr", self.adapt_lr.to_string());
        kv("adapt_passes", self.adapt_passes.to_string());
        kv("seg_threshold", self.seg_threshold.to_string());
        kv("omega_scheme", self.omega_scheme.to_string());
        kv("cam_source", self.cam_source.to_string());
        s
    }
}
