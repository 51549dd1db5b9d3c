use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{logsumexp_row, softmax_in_place, Scalar, Tape, Tensor, Var};

/// Per-token routing result for one MoE layer.
///
/// Gates are the selected probabilities renormalized over the top-k set.
/// With top-1 routing the gate is the raw top probability instead, so that
/// the router still receives a gradient from the language-model loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    pub n_experts: usize,
    pub top_k: usize,
    /// `[tokens, n_experts]`, row-major.
    pub probs: Vec<f64>,
    /// `[tokens, top_k]`, highest probability first.
    pub topk_indices: Vec<usize>,
    /// `[tokens, top_k]`, aligned with `topk_indices`.
    pub gates: Vec<f64>,
    /// Log-sum-exp of the raw router logits, per token.
    pub logits_lse: Vec<f64>,
}

impl RouterDecision {
    pub fn n_tokens(&self) -> usize {
        self.logits_lse.len()
    }

    pub fn probs_row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.n_experts..(t + 1) * self.n_experts]
    }

    pub fn experts(&self, t: usize) -> &[usize] {
        &self.topk_indices[t * self.top_k..(t + 1) * self.top_k]
    }

    pub fn token_gates(&self, t: usize) -> &[f64] {
        &self.gates[t * self.top_k..(t + 1) * self.top_k]
    }

    /// Share of routed (token, slot) assignments taken by each expert.
    pub fn assignment_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.n_experts];
        for &e in &self.topk_indices {
            counts[e] += 1;
        }
        let total = self.topk_indices.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / total).collect()
    }

    /// Mean router probability per expert.
    pub fn mean_probs(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.n_experts];
        for t in 0..self.n_tokens() {
            for (m, p) in mean.iter_mut().zip(self.probs_row(t)) {
                *m += p;
            }
        }
        let n = self.n_tokens().max(1) as f64;
        mean.into_iter().map(|m| m / n).collect()
    }

    /// Concatenates decisions over token batches of the same layer.
    pub fn concat(parts: &[RouterDecision]) -> Result<RouterDecision> {
        let first = parts.first().ok_or_else(|| Error::Data("no router decisions to merge".into()))?;
        let mut out = RouterDecision { probs: vec![], topk_indices: vec![], gates: vec![], logits_lse: vec![], ..first.clone() };
        for p in parts {
            if p.n_experts != first.n_experts || p.top_k != first.top_k {
                return Err(Error::Data("router decisions disagree on n_experts/top_k".into()));
            }
            out.probs.extend_from_slice(&p.probs);
            out.topk_indices.extend_from_slice(&p.topk_indices);
            out.gates.extend_from_slice(&p.gates);
            out.logits_lse.extend_from_slice(&p.logits_lse);
        }
        Ok(out)
    }
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k_indices(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn gates_for(selected: &[f64]) -> Vec<f64> {
    if selected.len() == 1 {
        return selected.to_vec();
    }
    let s: f64 = selected.iter().sum();
    selected.iter().map(|p| p / s).collect()
}

/// Routes tokens given raw router logits (`[tokens, n_experts]`).
pub fn route_logits(logits: &[f64], n_experts: usize, top_k: usize) -> Result<RouterDecision> {
    if top_k == 0 || top_k > n_experts {
        return Err(Error::Config(format!("top_k = {top_k} must lie in 1..={n_experts}")));
    }
    if logits.len() % n_experts != 0 {
        return Err(Error::shape("route", format!("{} logits for {n_experts} experts", logits.len())));
    }
    let mut probs = logits.to_vec();
    let mut logits_lse = Vec::with_capacity(logits.len() / n_experts);
    for (row, raw) in probs.chunks_mut(n_experts).zip(logits.chunks(n_experts)) {
        logits_lse.push(logsumexp_row(raw));
        softmax_in_place(row);
    }
    Ok(decide(probs, logits_lse, n_experts, top_k))
}

fn decide(probs: Vec<f64>, logits_lse: Vec<f64>, n_experts: usize, top_k: usize) -> RouterDecision {
    let mut topk_indices = Vec::with_capacity(logits_lse.len() * top_k);
    let mut gates = Vec::with_capacity(logits_lse.len() * top_k);
    for row in probs.chunks(n_experts) {
        let sel = top_k_indices(row, top_k);
        let picked: Vec<f64> = sel.iter().map(|&e| row[e]).collect();
        gates.extend(gates_for(&picked));
        topk_indices.extend(sel);
    }
    RouterDecision { n_experts, top_k, probs, topk_indices, gates, logits_lse }
}

/// Routes `x` (`[tokens, d_model]`) through a bias-free `router` (`[d_model, n_experts]`).
pub fn route(x: &Tensor<f64>, router: &Tensor<f64>, top_k: usize) -> Result<RouterDecision> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(router.clone());
    let logits = tape.matmul(xv, wv)?;
    route_logits(tape.value(logits).data(), router.shape()[1], top_k)
}

/// Router quantities recorded on a tape.
pub struct RouterVars {
    pub decision: RouterDecision,
    /// `[tokens, n_experts]` softmax probabilities.
    pub probs: Var,
    /// `[tokens]` log-sum-exp of the router logits.
    pub lse: Var,
    /// `[tokens, top_k]` differentiable gate weights.
    pub gates: Var,
}

/// Router forward on the tape. The discrete top-k choice is read off the
/// recorded probabilities; gradients flow through the gate values only.
pub fn route_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, router: Var, top_k: usize) -> Result<RouterVars> {
    let sr = tape.shape(router).to_vec();
    if sr.len() != 2 {
        return Err(Error::shape("route", format!("router weight must be 2-D, got {sr:?}")));
    }
    let n_experts = sr[1];
    if top_k == 0 || top_k > n_experts {
        return Err(Error::Config(format!("top_k = {top_k} must lie in 1..={n_experts}")));
    }
    let logits = tape.matmul(x, router)?;
    let probs = tape.softmax(logits)?;
    let lse = tape.logsumexp(logits)?;
    let n_tokens = tape.shape(logits)[0];

    let probs_vals = tape.value(probs).to_f64_vec();
    let lse_vals = tape.value(lse).to_f64_vec();
    let mut decision = decide(probs_vals, lse_vals, n_experts, top_k);

    let flat = tape.reshape(probs, &[n_tokens * n_experts])?;
    let picks: Vec<usize> =
        (0..n_tokens).flat_map(|t| decision.experts(t).iter().map(move |&e| t * n_experts + e).collect::<Vec<_>>()).collect();
    let selected = tape.index_select(flat, 0, &picks)?;
    let selected = tape.reshape(selected, &[n_tokens, top_k])?;
    let gates = if top_k == 1 {
        selected
    } else {
        let total = tape.sum(selected, 1, true)?;
        tape.div(selected, total)?
    };
    decision.gates = tape.value(gates).to_f64_vec();
    Ok(RouterVars { decision, probs, lse, gates })
}
