//! TOML experiment files with `model`, `moe`, `train`, `data` and `output`
//! sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MoEConfig, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    pub context_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_hidden: Option<usize>,
    pub dropout_p: f64,
    pub rmsnorm_eps: f64,
    pub rope_base: f64,
    pub tied_embeddings: bool,
    pub linear_bias: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerChoice {
    Byte,
    Vocab(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `train.bin` and `val.bin`.
    pub dir: PathBuf,
    #[serde(default = "default_window")]
    pub window_len: usize,
    #[serde(default = "default_ratio")]
    pub train_ratio: f64,
    #[serde(default = "default_shard_seed")]
    pub shard_seed: u64,
    #[serde(default = "default_tokenizer")]
    pub tokenizer: TokenizerChoice,
    #[serde(default = "default_true")]
    pub separate_documents: bool,
}

fn default_window() -> usize {
    512
}
fn default_ratio() -> f64 {
    0.95
}
fn default_shard_seed() -> u64 {
    1337
}
fn default_tokenizer() -> TokenizerChoice {
    TokenizerChoice::Byte
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    #[serde(default = "default_true")]
    pub collect_diagnostics: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoEConfig>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let fail = |message: String| Error::Parse { path: origin.into(), message };
        let de = toml::Deserializer::parse(text).map_err(|e| fail(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            fail(if at == "." { e.into_inner().to_string() } else { format!("at `{at}`: {}", e.into_inner()) })
        })?;
        cfg.validate().map_err(|e| Error::Parse { path: origin.into(), message: e.to_string() })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        if self.data.window_len > self.model.context_len {
            return Err(Error::Config(format!(
                "data.window_len ({}) exceeds model.context_len ({})",
                self.data.window_len, self.model.context_len
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size: m.vocab_size,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_query_heads: m.n_query_heads,
            n_kv_heads: m.n_kv_heads,
            head_dim: m.head_dim,
            context_len: m.context_len,
            ffn_hidden: m.ffn_hidden,
            moe: self.moe.clone(),
            dropout_p: m.dropout_p,
            rmsnorm_eps: m.rmsnorm_eps,
            rope_base: m.rope_base,
            tied_embeddings: m.tied_embeddings,
            linear_bias: m.linear_bias,
        }
    }
}

impl From<&ModelConfig> for ModelSection {
    fn from(c: &ModelConfig) -> Self {
        Self {
            vocab_size: c.vocab_size,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_query_heads: c.n_query_heads,
            n_kv_heads: c.n_kv_heads,
            head_dim: c.head_dim,
            context_len: c.context_len,
            ffn_hidden: c.ffn_hidden,
            dropout_p: c.dropout_p,
            rmsnorm_eps: c.rmsnorm_eps,
            rope_base: c.rope_base,
            tied_embeddings: c.tied_embeddings,
            linear_bias: c.linear_bias,
        }
    }
}
