use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How routed tokens are executed by the experts. All paths compute the same
/// function; they differ only in how work is batched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DispatchPath {
    /// One expert call per (token, slot).
    Naive,
    /// Tokens bucketed by expert; one matmul set per expert.
    Grouped,
    /// Expert-sorted tokens against an expert-stacked weight in one op.
    #[default]
    Stacked,
}

impl DispatchPath {
    pub const ALL: [DispatchPath; 3] = [Self::Naive, Self::Grouped, Self::Stacked];

    pub fn name(self) -> &'static str {
        match self {
            Self::Naive => "naive",
            Self::Grouped => "grouped",
            Self::Stacked => "stacked",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoEConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    #[serde(default = "default_lambda_bal")]
    pub lambda_bal: f64,
    #[serde(default = "default_lambda_z")]
    pub lambda_z: f64,
    #[serde(default)]
    pub dispatch_path: DispatchPath,
}

fn default_lambda_bal() -> f64 {
    1e-2
}

fn default_lambda_z() -> f64 {
    1e-3
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::Config("moe.n_experts must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "moe.top_k = {} must lie in 1..={} (n_experts)",
                self.top_k, self.n_experts
            )));
        }
        if self.expert_hidden == 0 {
            return Err(Error::Config("moe.expert_hidden must be positive".into()));
        }
        if !(self.lambda_bal >= 0.0 && self.lambda_z >= 0.0) {
            return Err(Error::Config(format!(
                "aux-loss weights must be non-negative (lambda_bal = {}, lambda_z = {})",
                self.lambda_bal, self.lambda_z
            )));
        }
        Ok(())
    }
}

/// Full architectural description of a dense or MoE decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    /// Defaults to `d_model / n_query_heads`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    pub context_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoEConfig>,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default = "default_eps")]
    pub rmsnorm_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_true")]
    pub tied_embeddings: bool,
    #[serde(default)]
    pub linear_bias: bool,
}

fn default_dropout() -> f64 {
    0.1
}

fn default_eps() -> f64 {
    1e-5
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_true() -> bool {
    true
}

pub const TINYSTORIES_VOCAB: usize = 30_008;

impl ModelConfig {
    fn tinystories_common(d_model: usize, n_query_heads: usize) -> Self {
        Self {
            vocab_size: TINYSTORIES_VOCAB,
            d_model,
            n_layers: 4,
            n_query_heads,
            n_kv_heads: 2,
            head_dim: None,
            context_len: 512,
            ffn_hidden: None,
            moe: None,
            dropout_p: 0.1,
            rmsnorm_eps: 1e-5,
            rope_base: 10_000.0,
            tied_embeddings: true,
            linear_bias: false,
        }
    }

    /// Dense baseline matched to the MoE's active parameter count.
    pub fn tinystories_dense_active() -> Self {
        Self { ffn_hidden: Some(1120), ..Self::tinystories_common(320, 10) }
    }

    /// Four experts, top-2, with balance and z-loss.
    pub fn tinystories_moe() -> Self {
        Self {
            moe: Some(MoEConfig {
                n_experts: 4,
                top_k: 2,
                expert_hidden: 1024,
                lambda_bal: 1e-2,
                lambda_z: 1e-3,
                dispatch_path: DispatchPath::default(),
            }),
            ..Self::tinystories_common(256, 4)
        }
    }

    /// Dense baseline matched to the MoE's total parameter count.
    pub fn tinystories_dense_total() -> Self {
        Self { ffn_hidden: Some(1728), ..Self::tinystories_common(384, 6) }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(if self.n_query_heads == 0 { 0 } else { self.d_model / self.n_query_heads })
    }

    pub fn is_moe(&self) -> bool {
        self.moe.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.context_len == 0 {
            return fail("vocab_size, d_model, n_layers and context_len must be positive".into());
        }
        if self.n_query_heads == 0 || self.n_kv_heads == 0 {
            return fail("head counts must be positive".into());
        }
        if self.n_query_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_query_heads ({}) must be divisible by n_kv_heads ({})",
                self.n_query_heads, self.n_kv_heads
            ));
        }
        let hd = self.head_dim();
        if hd == 0 || self.n_query_heads * hd != self.d_model {
            return fail(format!(
                "d_model ({}) must equal n_query_heads ({}) x head_dim ({hd})",
                self.d_model, self.n_query_heads
            ));
        }
        if hd % 2 != 0 {
            return fail(format!("rotary embeddings need an even head_dim, got {hd}"));
        }
        match (&self.ffn_hidden, &self.moe) {
            (Some(0), None) => return fail("ffn_hidden must be positive".into()),
            (Some(_), None) => {}
            (None, Some(moe)) => moe.validate()?,
            _ => return fail("exactly one of ffn_hidden and moe must be set".into()),
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p = {} outside [0, 1)", self.dropout_p));
        }
        if self.rmsnorm_eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return fail(format!("rmsnorm_eps = {} must be > 0", self.rmsnorm_eps));
        }
        if !self.tied_embeddings {
            return fail("untied embeddings are not supported".into());
        }
        if self.linear_bias {
            return fail("linear biases are not supported".into());
        }
        Ok(())
    }
}
