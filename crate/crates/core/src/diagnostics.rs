//! Routing-health statistics per MoE layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::RouterDecision;

pub const DEFAULT_COLLAPSE_THRESHOLD: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    /// Largest share of (token, slot) assignments taken by a single expert.
    pub busiest_fraction: f64,
    /// Population variance of the per-expert assignment shares.
    pub usage_variance: f64,
    pub mean_entropy: f64,
    pub mean_logz: f64,
    /// Mean of each token's largest router probability.
    pub mean_top_gate: f64,
    pub mean_top1_top2_margin: f64,
    pub expert_fractions: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingDiagnostics {
    pub layers: Vec<LayerDiagnostics>,
}

fn layer(d: &RouterDecision) -> Result<LayerDiagnostics> {
    let n = d.n_tokens();
    if n == 0 {
        return Err(Error::Data("routing diagnostics need at least one token".into()));
    }
    let fractions = d.assignment_fractions();
    let e = fractions.len() as f64;
    let mean_f = 1.0 / e;
    let busiest_fraction = fractions.iter().copied().fold(0.0, f64::max);
    let usage_variance = fractions.iter().map(|f| (f - mean_f).powi(2)).sum::<f64>() / e;

    let (mut entropy, mut top, mut margin) = (0.0, 0.0, 0.0);
    for t in 0..n {
        let p = d.probs_row(t);
        entropy -= p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
        let (mut p1, mut p2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &q in p {
            if q > p1 {
                (p1, p2) = (q, p1);
            } else if q > p2 {
                p2 = q;
            }
        }
        top += p1;
        margin += if p2.is_finite() { p1 - p2 } else { p1 };
    }
    let nf = n as f64;
    Ok(LayerDiagnostics {
        busiest_fraction,
        usage_variance,
        mean_entropy: entropy / nf,
        mean_logz: d.logits_lse.iter().sum::<f64>() / nf,
        mean_top_gate: top / nf,
        mean_top1_top2_margin: margin / nf,
        expert_fractions: fractions,
    })
}

/// One entry per layer; each layer's decision may span several batches
/// (see [`RouterDecision::concat`]).
pub fn collect(per_layer: &[RouterDecision]) -> Result<RoutingDiagnostics> {
    Ok(RoutingDiagnostics { layers: per_layer.iter().map(layer).collect::<Result<_>>()? })
}

/// Per-layer verdicts at the latest point of `series`: collapsed when the
/// busiest expert takes more than `threshold` of the assignments.
pub fn collapse_detector(series: &[RoutingDiagnostics], threshold: f64) -> Vec<bool> {
    series
        .last()
        .map(|d| d.layers.iter().map(|l| l.busiest_fraction > threshold).collect())
        .unwrap_or_default()
}
