//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::ModelConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {value}")]
    Value {
        line: usize,
        key: String,
        value: String,
    },
    #[error("unknown preset `{0}`")]
    Preset(String),
    #[error("{0}")]
    Invalid(String),
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient norm cap; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            batch_size: 100,
            epochs: 10,
            seed: 0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError::Invalid(
                "learning_rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ConfigError::Invalid(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(ConfigError::Invalid("clip_norm must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Keys naming files rather than hyperparameters.
pub const PATH_KEYS: [&str; 8] = [
    "train_noisy",
    "train_clean",
    "dev_noisy",
    "dev_clean",
    "vocab",
    "checkpoint",
    "metric_log",
    "noise_model",
];

/// Everything a `train` run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            paths: BTreeMap::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl RunConfig {
    /// Parses `key=value` lines. `#` starts a comment. A `preset` line is
    /// applied first wherever it appears; later keys override it.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            entries.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        if let Some((_, _, name)) = entries.iter().find(|(_, k, _)| k == "preset") {
            cfg.model =
                ModelConfig::preset(name).ok_or_else(|| ConfigError::Preset(name.clone()))?;
            cfg.preset = Some(name.clone());
        }
        for (line, key, value) in entries {
            cfg.set(line, &key, &value)?;
        }
        Ok(cfg)
    }

    /// Applies one setting (also used for command-line overrides).
    pub fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "preset" => {}
            "hidden" => m.hidden = parse(line, key, value)?,
            "embed_dim" => m.embed_dim = parse(line, key, value)?,
            "filters" => m.filters = parse(line, key, value)?,
            "filter_widths" => {
                m.filter_widths = value
                    .split(',')
                    .map(|w| parse(line, key, w.trim()))
                    .collect::<Result<_, _>>()?
            }
            "char_window" => m.char_window = parse(line, key, value)?,
            "word_window" => m.word_window = parse(line, key, value)?,
            "word_vocab" => m.word_vocab = parse(line, key, value)?,
            "dropout" => m.dropout = parse(line, key, value)?,
            "learning_rate" => t.learning_rate = parse(line, key, value)?,
            "batch_size" => t.batch_size = parse(line, key, value)?,
            "epochs" => t.epochs = parse(line, key, value)?,
            "seed" => t.seed = parse(line, key, value)?,
            "clip_norm" => t.clip_norm = parse(line, key, value)?,
            k if PATH_KEYS.contains(&k) => {
                self.paths.insert(k.to_string(), value.to_string());
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate()
    }

    pub fn path(&self, key: &str) -> Option<&str> {
        self.paths.get(key).map(String::as_str)
    }

    /// Inverse of [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        if let Some(p) = &self.preset {
            let _ = writeln!(s, "preset={p}");
        }
        let widths: Vec<String> = m.filter_widths.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "hidden={}", m.hidden);
        let _ = writeln!(s, "embed_dim={}", m.embed_dim);
        let _ = writeln!(s, "filters={}", m.filters);
        let _ = writeln!(s, "filter_widths={}", widths.join(","));
        let _ = writeln!(s, "char_window={}", m.char_window);
        let _ = writeln!(s, "word_window={}", m.word_window);
        let _ = writeln!(s, "word_vocab={}", m.word_vocab);
        let _ = writeln!(s, "dropout={}", m.dropout);
        let _ = writeln!(s, "learning_rate={}", t.learning_rate);
        let _ = writeln!(s, "batch_size={}", t.batch_size);
        let _ = writeln!(s, "epochs={}", t.epochs);
        let _ = writeln!(s, "seed={}", t.seed);
        let _ = writeln!(s, "clip_norm={}", t.clip_norm);
        for (k, v) in &self.paths {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}
