//! Run configuration: one JSON document, optionally overridden from the
//! command line. Relative paths are resolved against the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateMode;
use crate::instruction::DEFAULT_MAX_INSTR_LEN;
use crate::model::ModelConfig;
use crate::schema::DEFAULT_MAX_LEN;
use crate::trainer::TrainConfig;

/// Architecture choices; vocabulary size and channel count come from data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub d: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub heads: usize,
    /// Defaults to `4 * d`.
    #[serde(default)]
    pub ffn: Option<usize>,
    pub max_len: usize,
    pub max_instr_len: usize,
    pub dropout: f64,
    #[serde(default)]
    pub residual_label_attention: bool,
    #[serde(default = "yes")]
    pub causal_decoder: bool,
}

fn yes() -> bool {
    true
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            d: 32,
            layers_enc: 1,
            layers_dec: 1,
            heads: 2,
            ffn: None,
            max_len: DEFAULT_MAX_LEN,
            max_instr_len: DEFAULT_MAX_INSTR_LEN,
            dropout: 0.0,
            residual_label_attention: false,
            causal_decoder: true,
        }
    }
}

impl ModelSpec {
    pub fn to_config(&self, vocab_size: usize, channels: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            layers_enc: self.layers_enc,
            layers_dec: self.layers_dec,
            heads: self.heads,
            ffn: self.ffn.unwrap_or(4 * self.d),
            max_len: self.max_len,
            max_instr_len: self.max_instr_len,
            dropout: self.dropout,
            vocab_size,
            channels,
            residual_label_attention: self.residual_label_attention,
            causal_decoder: self.causal_decoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub finetune: TrainConfig,
    /// Decoding threshold for evaluation and prediction.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Dataset manifests used for pretraining.
    #[serde(default)]
    pub sources: Vec<PathBuf>,
    /// Dataset manifest used for finetuning.
    #[serde(default)]
    pub target: Option<PathBuf>,
    #[serde(default)]
    pub instructions: Vec<PathBuf>,
    pub out: PathBuf,
    #[serde(default = "one")]
    pub min_count: usize,
    #[serde(default = "yes")]
    pub lowercase: bool,
    /// Start finetuning with fresh Adam moments.
    #[serde(default = "yes")]
    pub reset_optimizer: bool,
}

fn default_tau() -> f64 {
    crate::codec::DEFAULT_THRESHOLD
}

fn one() -> usize {
    1
}

/// Command-line overrides; `None` keeps the config value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub out: Option<PathBuf>,
    pub gate: Option<GateMode>,
}

impl RunConfig {
    /// Parses `path`. Errors name the offending field path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(if field == "." { "<root>".to_string() } else { field }, e.into_inner().to_string())
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.sources.iter_mut().for_each(fix);
        self.instructions.iter_mut().for_each(fix);
        if let Some(t) = self.target.as_mut() {
            fix(t);
        }
        fix(&mut self.out);
    }

    /// Applies overrides and keeps the per-phase thresholds in step with
    /// `tau`.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.tau {
            self.tau = t;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(g) = o.gate {
            self.pretrain.gate = g;
        }
        self.pretrain.tau = self.tau;
        self.finetune.tau = self.tau;
    }

    pub fn validate(&self) -> Result<()> {
        let within = |section: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config { field, message } => Error::Config {
                    field: format!("{section}.{field}"),
                    message,
                },
                other => other,
            })
        };
        within("model", self.model.to_config(1, 1).validate())?;
        within("pretrain", self.pretrain.validate())?;
        within("finetune", self.finetune.validate())?;
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("tau", "must lie strictly between 0 and 1"));
        }
        if self.min_count == 0 {
            return Err(Error::config("min_count", "must be at least 1"));
        }
        for (i, p) in self.sources.iter().enumerate() {
            exists(&format!("sources[{i}]"), p)?;
        }
        for (i, p) in self.instructions.iter().enumerate() {
            exists(&format!("instructions[{i}]"), p)?;
        }
        if let Some(t) = &self.target {
            exists("target", t)?;
        }
        Ok(())
    }
}

fn exists(field: &str, p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::config(field, format!("{} does not exist", p.display())))
    }
}
