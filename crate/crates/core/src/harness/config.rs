//! Training configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! learning_rate = 1e-5
//! encoder.embed_dim = 64
//! encoder.tap_layers = 3,6,9,12
//! data_dir = data/train
//! ```
//!
//! Precedence: command-line overrides > file > defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub precision: Precision,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Log every n-th step.
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 4,
            epochs: 20,
            max_steps: 0,
            seed: 0,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            precision: Precision::F32,
            data_dir: PathBuf::from("data/train"),
            checkpoint_dir: PathBuf::from("runs/default"),
            log_interval: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key.trim() {
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "log_interval" => self.log_interval = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(v),
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision: {v:?} is not f32/f64"))),
                }
            }
            "adam.beta1" => self.adam.beta1 = parse(key, v)?,
            "adam.beta2" => self.adam.beta2 = parse(key, v)?,
            "adam.eps" => self.adam.eps = parse(key, v)?,
            "encoder.image_size" => m.encoder.image_size = parse(key, v)?,
            "encoder.patch_size" => m.encoder.patch_size = parse(key, v)?,
            "encoder.embed_dim" => m.encoder.embed_dim = parse(key, v)?,
            "encoder.num_blocks" => m.encoder.num_blocks = parse(key, v)?,
            "encoder.num_heads" => m.encoder.num_heads = parse(key, v)?,
            "encoder.mlp_ratio" => m.encoder.mlp_ratio = parse(key, v)?,
            "encoder.tap_layers" => {
                let taps = v
                    .split(',')
                    .map(|t| parse::<usize>(key, t.trim()))
                    .collect::<Result<Vec<_>>>()?;
                m.encoder.tap_layers = taps.try_into().map_err(|_| {
                    Error::Config(format!("{key}: expected exactly 4 layers, got {v:?}"))
                })?;
            }
            "decoder.channels" => m.decoder.channels = parse(key, v)?,
            "decoder.num_iterations" => m.decoder.num_iterations = parse(key, v)?,
            "decoder.num_classes" => m.decoder.num_classes = parse(key, v)?,
            "decoder.use_fusion" => m.decoder.use_fusion = parse_bool(key, v)?,
            "loss.w_d" => self.loss.w_d = parse(key, v)?,
            "loss.w_g" => self.loss.w_g = parse(key, v)?,
            "loss.w_n" => self.loss.w_n = parse(key, v)?,
            "loss.alpha" => self.loss.alpha = parse(key, v)?,
            "loss.beta" => self.loss.beta = parse(key, v)?,
            "loss.iteration_ramp" => self.loss.iteration_ramp = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Parses the flat text format on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse_str(&text)?;
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.log_interval == 0 {
            return Err(Error::Config(
                "batch_size, epochs and log_interval must be positive".into(),
            ));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || a.eps.is_nan()
            || a.eps <= 0.0
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1), eps > 0".into(),
            ));
        }
        self.model.validate()?;
        self.loss.validate()
    }

    /// Renders every key in the file format; `parse_str(render())` is the
    /// identity.
    pub fn render(&self) -> String {
        let m = &self.model;
        let e = &m.encoder;
        let d = &m.decoder;
        let l = &self.loss;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("learning_rate", format!("{:e}", self.learning_rate));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("seed", self.seed.to_string());
        kv("log_interval", self.log_interval.to_string());
        kv(
            "precision",
            match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
        );
        kv("data_dir", self.data_dir.display().to_string());
        kv("checkpoint_dir", self.checkpoint_dir.display().to_string());
        kv("adam.beta1", self.adam.beta1.to_string());
        kv("adam.beta2", self.adam.beta2.to_string());
        kv("adam.eps", format!("{:e}", self.adam.eps));
        kv("encoder.image_size", e.image_size.to_string());
        kv("encoder.patch_size", e.patch_size.to_string());
        kv("encoder.embed_dim", e.embed_dim.to_string());
        kv("encoder.num_blocks", e.num_blocks.to_string());
        kv("encoder.num_heads", e.num_heads.to_string());
        kv("encoder.mlp_ratio", e.mlp_ratio.to_string());
        kv(
            "encoder.tap_layers",
            e.tap_layers.map(|t| t.to_string()).join(","),
        );
        kv("decoder.channels", d.channels.to_string());
        kv("decoder.num_iterations", d.num_iterations.to_string());
        kv("decoder.num_classes", d.num_classes.to_string());
        kv("decoder.use_fusion", d.use_fusion.to_string());
        kv("loss.w_d", l.w_d.to_string());
        kv("loss.w_g", l.w_g.to_string());
        kv("loss.w_n", l.w_n.to_string());
        kv("loss.alpha", l.alpha.to_string());
        kv("loss.beta", l.beta.to_string());
        kv("loss.iteration_ramp", l.iteration_ramp.to_string());
        s
    }
}
