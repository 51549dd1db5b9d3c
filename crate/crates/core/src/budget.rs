//! Exact parameter accounting and width search for budget-matched baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embedding: u64,
    /// Attention projections, all norm gains, and the final norm.
    pub non_ffn_blocks: u64,
    pub ffn_or_expert_total: u64,
    pub router: u64,
    pub total: u64,
    /// Parameters exercised per token: everything but the unselected experts.
    pub active: u64,
}

/// Closed-form count. The tied output projection is not counted twice.
pub fn count_params(config: &ModelConfig) -> Result<ParamBreakdown> {
    config.validate()?;
    let d = config.d_model as u64;
    let layers = config.n_layers as u64;
    let hd = config.head_dim() as u64;
    let q = config.n_query_heads as u64 * hd;
    let kv = config.n_kv_heads as u64 * hd;
    let embedding = config.vocab_size as u64 * d;
    let attention = d * q + 2 * d * kv + q * d;
    let non_ffn_blocks = layers * (attention + 2 * d) + d;
    let (ffn, router, inactive) = match (&config.moe, config.ffn_hidden) {
        (Some(m), _) => {
            let per_expert = 3 * d * m.expert_hidden as u64;
            let e = m.n_experts as u64;
            (layers * e * per_expert, layers * d * e, layers * (e - m.top_k as u64) * per_expert)
        }
        (None, Some(f)) => (layers * 3 * d * f as u64, 0, 0),
        (None, None) => unreachable!("validated"),
    };
    let total = embedding + non_ffn_blocks + ffn + router;
    Ok(ParamBreakdown { embedding, non_ffn_blocks, ffn_or_expert_total: ffn, router, total, active: total - inactive })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetTarget {
    Active,
    Total,
}

impl std::str::FromStr for BudgetTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "active" => Ok(Self::Active),
            "total" => Ok(Self::Total),
            other => Err(Error::Config(format!("budget target must be 'active' or 'total', got '{other}'"))),
        }
    }
}

/// Search space for a dense baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetConstraints {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub head_dim: usize,
    pub n_kv_heads: usize,
    pub context_len: usize,
    pub ffn_ratio_min: f64,
    pub ffn_ratio_max: f64,
    pub d_model_granularity: usize,
    pub ffn_granularity: usize,
    pub d_model_max: usize,
}

impl BudgetConstraints {
    pub fn new(vocab_size: usize, n_layers: usize, head_dim: usize, n_kv_heads: usize) -> Self {
        Self {
            vocab_size,
            n_layers,
            head_dim,
            n_kv_heads,
            context_len: 512,
            ffn_ratio_min: 3.5,
            ffn_ratio_max: 4.5,
            d_model_granularity: 32,
            ffn_granularity: 32,
            d_model_max: 4096,
        }
    }

    /// Feasible widths, in search order.
    fn d_models(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.d_model_max / self.d_model_granularity.max(1))
            .map(|i| i * self.d_model_granularity)
            .filter(|&d| d % self.head_dim == 0 && (d / self.head_dim) % self.n_kv_heads == 0 && self.head_dim % 2 == 0)
    }

    fn ffn_range(&self, d: usize) -> impl Iterator<Item = usize> {
        let g = self.ffn_granularity;
        // small slack so ratio bounds like 3.5 x 320 are hit exactly
        let lo = (self.ffn_ratio_min * d as f64 - 1e-9).ceil().max(1.0) as usize;
        let hi = (self.ffn_ratio_max * d as f64 + 1e-9).floor() as usize;
        let first = lo.div_ceil(g) * g;
        (first..=hi).step_by(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetMatch {
    pub config: ModelConfig,
    pub count: u64,
    pub target_count: u64,
    pub relative_error: f64,
}

/// Grid search over (d_model, ffn_hidden) for the dense config whose
/// active or total count lies closest to `target_count`. Ties go to the
/// earliest grid point (smaller d_model, then smaller ffn_hidden).
pub fn match_budget(target: BudgetTarget, target_count: u64, c: &BudgetConstraints) -> Result<BudgetMatch> {
    let mut binding = Vec::new();
    if target_count == 0 {
        binding.push("target_count must be positive".to_string());
    }
    if c.head_dim == 0 || c.head_dim % 2 != 0 {
        binding.push(format!("head_dim = {} must be positive and even", c.head_dim));
    }
    if c.n_kv_heads == 0 || c.vocab_size == 0 || c.n_layers == 0 || c.d_model_granularity == 0 || c.ffn_granularity == 0 {
        binding.push("vocab, layers, n_kv_heads and granularities must be positive".to_string());
    }
    if !(c.ffn_ratio_min > 0.0 && c.ffn_ratio_min <= c.ffn_ratio_max) {
        binding.push(format!("ffn ratio bounds [{}, {}] are empty", c.ffn_ratio_min, c.ffn_ratio_max));
    }
    if !binding.is_empty() {
        return Err(Error::Infeasible(binding.join("; ")));
    }

    let mut best: Option<(u64, ModelConfig, u64)> = None;
    let mut n_candidates = 0usize;
    for d in c.d_models() {
        for f in c.ffn_range(d) {
            let cfg = ModelConfig {
                vocab_size: c.vocab_size,
                d_model: d,
                n_layers: c.n_layers,
                n_query_heads: d / c.head_dim,
                n_kv_heads: c.n_kv_heads,
                head_dim: None,
                context_len: c.context_len,
                ffn_hidden: Some(f),
                moe: None,
                ..ModelConfig::tinystories_dense_active()
            };
            let counts = count_params(&cfg)?;
            let count = match target {
                BudgetTarget::Active => counts.active,
                BudgetTarget::Total => counts.total,
            };
            n_candidates += 1;
            let diff = count.abs_diff(target_count);
            if best.as_ref().is_none_or(|b| diff < b.0) {
                best = Some((diff, cfg, count));
            }
        }
    }
    let Some((diff, config, count)) = best else {
        return Err(Error::Infeasible(format!(
            "no (d_model, ffn_hidden) satisfies: d_model a multiple of {} up to {}, divisible into {}-wide heads \
             in groups of {} kv heads, ffn_hidden a multiple of {} within [{}, {}] x d_model",
            c.d_model_granularity, c.d_model_max, c.head_dim, c.n_kv_heads, c.ffn_granularity, c.ffn_ratio_min, c.ffn_ratio_max
        )));
    };
    debug_assert!(n_candidates > 0);
    Ok(BudgetMatch { config, count, target_count, relative_error: diff as f64 / target_count as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    /// Dense active-match minus MoE; positive favors the MoE.
    pub active_gap: f64,
    /// MoE minus dense total-match; positive favors the larger dense model.
    pub total_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessGaps {
    pub per_checkpoint: Vec<GapPoint>,
    /// Gaps between the three families' best (lowest) validation losses.
    pub best: GapPoint,
}

fn best_of(series: &[f64]) -> f64 {
    series.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Gap curves for three validation-loss series evaluated at the same
/// checkpoints.
pub fn fairness_gaps(dense_active: &[f64], moe: &[f64], dense_total: &[f64]) -> Result<FairnessGaps> {
    if dense_active.len() != moe.len() || moe.len() != dense_total.len() {
        return Err(Error::Data(format!(
            "misaligned validation series: dense_active {}, moe {}, dense_total {} checkpoints",
            dense_active.len(),
            moe.len(),
            dense_total.len()
        )));
    }
    if moe.is_empty() {
        return Err(Error::Data("validation series are empty".into()));
    }
    let per_checkpoint = dense_active
        .iter()
        .zip(moe)
        .zip(dense_total)
        .map(|((a, m), t)| GapPoint { active_gap: a - m, total_gap: m - t })
        .collect();
    let (a, m, t) = (best_of(dense_active), best_of(moe), best_of(dense_total));
    Ok(FairnessGaps { per_checkpoint, best: GapPoint { active_gap: a - m, total_gap: m - t } })
}

/// Mean and sample standard deviation (n - 1 denominator).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
