//! Flat run configuration: every training hyper-parameter under the name of
//! its row in the hyper-parameter table, readable from a TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ScorerKind;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::text::DEFAULT_MAX_LEN;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" => Ok(Self::F32),
            "64" => Ok(Self::F64),
            other => Err(Error::invalid(format!("precision must be 32 or 64, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub emb_dim: usize,
    pub emb_dropout: f64,
    pub lstm_layers: usize,
    pub lstm_hidden_dim: usize,
    pub lstm_output_dim: usize,
    pub synonyms_count: usize,
    pub rep_dropout: f64,
    pub rdrop_weight: f64,
    pub epochs: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub clipping_grad: f64,
    pub scorer: ScorerKind,
    pub seed: u64,
    pub precision: Precision,
    pub threads: usize,
    pub max_len: usize,
    pub resample_synonyms: bool,
}

impl Default for RunConfig {
    /// The small single-machine setting used for synthetic corpora.
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Desk-scale setting: `h = 64`, one LSTM layer, `M = 4`, otherwise the
    /// optimization settings of the full-size runs.
    pub fn desk() -> Self {
        Self {
            emb_dim: 32,
            emb_dropout: 0.2,
            lstm_layers: 1,
            lstm_hidden_dim: 32,
            lstm_output_dim: 64,
            synonyms_count: 4,
            rep_dropout: 0.2,
            rdrop_weight: 5.0,
            epochs: 20,
            peak_lr: 5e-4,
            batch_size: 16,
            adam_epsilon: 1e-8,
            weight_decay: 0.01,
            clipping_grad: 1.0,
            scorer: ScorerKind::Biaffine,
            seed: 42,
            precision: Precision::F64,
            threads: 1,
            max_len: DEFAULT_MAX_LEN,
            resample_synonyms: false,
        }
    }

    /// Full code set setting.
    pub fn full() -> Self {
        Self {
            emb_dim: 100,
            lstm_layers: 2,
            lstm_hidden_dim: 256,
            lstm_output_dim: 512,
            synonyms_count: 4,
            ..Self::desk()
        }
    }

    /// Top-50 code setting.
    pub fn top50() -> Self {
        Self {
            emb_dim: 100,
            lstm_layers: 1,
            lstm_hidden_dim: 512,
            lstm_output_dim: 512,
            synonyms_count: 8,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "top50" => Ok(Self::top50()),
            other => Err(Error::invalid(format!("unknown preset `{other}` (desk|full|top50)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            msg: e.message().to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                emb_dim: self.emb_dim,
                lstm_layers: self.lstm_layers,
                lstm_hidden: self.lstm_hidden_dim,
                output_dim: self.lstm_output_dim,
                emb_dropout: self.emb_dropout,
            },
            synonyms: self.synonyms_count,
            scorer: self.scorer,
            rep_dropout: self.rep_dropout,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            peak_lr: self.peak_lr,
            batch_size: self.batch_size,
            adam_eps: self.adam_epsilon,
            weight_decay: self.weight_decay,
            clip_norm: self.clipping_grad,
            rdrop_weight: self.rdrop_weight,
            seed: self.seed,
            resample_synonyms: self.resample_synonyms,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()?;
        if self.threads == 0 || self.max_len == 0 {
            return Err(Error::invalid("threads and max_len must be positive"));
        }
        Ok(())
    }
}
