//! Dropless expert execution.
//!
//! Every (token, slot) pair chosen by the router is executed exactly once;
//! there is no capacity limit. The three paths compute identical math and
//! differ only in how tokens are batched onto the experts.

use crate::error::{Error, Result};
use crate::model::config::DispatchPath;
use crate::model::swiglu_ffn;
use crate::tensor::{Scalar, Tape, Var};

use super::RouterDecision;

/// Dispatch plan: for each expert, the tokens it serves and the flat gate
/// slot (`token * top_k + slot`) each one came from, in token order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertAssignment {
    pub n_tokens: usize,
    pub top_k: usize,
    pub tokens: Vec<Vec<usize>>,
    pub slots: Vec<Vec<usize>>,
}

impl ExpertAssignment {
    pub fn from_decision(decision: &RouterDecision) -> Result<Self> {
        let mut tokens = vec![Vec::new(); decision.n_experts];
        let mut slots = vec![Vec::new(); decision.n_experts];
        for t in 0..decision.n_tokens() {
            for (j, &e) in decision.experts(t).iter().enumerate() {
                if e >= decision.n_experts {
                    return Err(Error::Invariant(format!("token {t} routed to expert {e} of {}", decision.n_experts)));
                }
                tokens[e].push(t);
                slots[e].push(t * decision.top_k + j);
            }
        }
        let plan = Self { n_tokens: decision.n_tokens(), top_k: decision.top_k, tokens, slots };
        plan.verify()?;
        Ok(plan)
    }

    pub fn n_experts(&self) -> usize {
        self.tokens.len()
    }

    /// Checks droplessness: every slot appears exactly once, and no token is
    /// sent to the same expert twice.
    pub fn verify(&self) -> Result<()> {
        let total: usize = self.slots.iter().map(Vec::len).sum();
        if total != self.n_tokens * self.top_k {
            return Err(Error::Invariant(format!(
                "dispatch plan holds {total} assignments, expected {} tokens x {} slots",
                self.n_tokens, self.top_k
            )));
        }
        let mut seen = vec![false; self.n_tokens * self.top_k];
        for (e, (toks, slots)) in self.tokens.iter().zip(&self.slots).enumerate() {
            if toks.len() != slots.len() {
                return Err(Error::Invariant(format!("expert {e}: token and slot lists differ in length")));
            }
            for (&t, &s) in toks.iter().zip(slots) {
                if s >= seen.len() || s / self.top_k != t {
                    return Err(Error::Invariant(format!("expert {e}: slot {s} does not belong to token {t}")));
                }
                if std::mem::replace(&mut seen[s], true) {
                    return Err(Error::Invariant(format!("slot {s} assigned twice")));
                }
            }
            if toks.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Invariant(format!("expert {e}: token list not strictly increasing")));
            }
        }
        Ok(())
    }

    /// Concatenated (token, slot) order grouped by expert, plus group offsets.
    fn sorted(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut offsets = vec![0];
        let mut tokens = Vec::with_capacity(self.n_tokens * self.top_k);
        let mut slots = Vec::with_capacity(self.n_tokens * self.top_k);
        for (toks, sl) in self.tokens.iter().zip(&self.slots) {
            tokens.extend_from_slice(toks);
            slots.extend_from_slice(sl);
            offsets.push(tokens.len());
        }
        (tokens, slots, offsets)
    }
}

/// Expert-stacked SwiGLU weights on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ExpertWeights {
    /// `[n_experts, d_model, expert_hidden]`
    pub w_gate: Var,
    /// `[n_experts, d_model, expert_hidden]`
    pub w_up: Var,
    /// `[n_experts, expert_hidden, d_model]`
    pub w_down: Var,
}

struct ExpertSlices {
    w_gate: Var,
    w_up: Var,
    w_down: Var,
}

fn expert_slices<T: Scalar>(tape: &mut Tape<T>, w: &ExpertWeights, e: usize) -> Result<ExpertSlices> {
    let mut one = |v: Var| -> Result<Var> {
        let s = tape.shape(v).to_vec();
        let sl = tape.slice(v, 0, e, e + 1)?;
        tape.reshape(sl, &s[1..])
    };
    Ok(ExpertSlices { w_gate: one(w.w_gate)?, w_up: one(w.w_up)?, w_down: one(w.w_down)? })
}

/// Combines routed expert outputs: `y[t] = sum_j gate[t, j] * expert_{e(t,j)}(x[t])`.
pub fn dispatch<T: Scalar>(
    tape: &mut Tape<T>,
    path: DispatchPath,
    x: Var,
    gates: Var,
    plan: &ExpertAssignment,
    experts: &ExpertWeights,
) -> Result<Var> {
    plan.verify()?;
    let sx = tape.shape(x).to_vec();
    if sx.len() != 2 || sx[0] != plan.n_tokens {
        return Err(Error::shape("dispatch", format!("input {sx:?} for a plan over {} tokens", plan.n_tokens)));
    }
    if tape.shape(gates) != [plan.n_tokens, plan.top_k] {
        return Err(Error::shape("dispatch", format!("gates {:?} for {} x {}", tape.shape(gates), plan.n_tokens, plan.top_k)));
    }
    if tape.shape(experts.w_gate)[0] != plan.n_experts() {
        return Err(Error::shape("dispatch", "expert weight count does not match plan"));
    }
    let flat_gates = tape.reshape(gates, &[plan.n_tokens * plan.top_k])?;
    match path {
        DispatchPath::Naive => dispatch_naive(tape, x, flat_gates, plan, experts),
        DispatchPath::Grouped => dispatch_grouped(tape, x, flat_gates, plan, experts),
        DispatchPath::Stacked => dispatch_stacked(tape, x, flat_gates, plan, experts),
    }
}

fn gated<T: Scalar>(tape: &mut Tape<T>, y: Var, flat_gates: Var, slots: &[usize]) -> Result<Var> {
    let g = tape.index_select(flat_gates, 0, slots)?;
    let g = tape.reshape(g, &[slots.len(), 1])?;
    tape.mul(y, g)
}

fn dispatch_naive<T: Scalar>(tape: &mut Tape<T>, x: Var, flat_gates: Var, plan: &ExpertAssignment, w: &ExpertWeights) -> Result<Var> {
    let mut expert_of = vec![0usize; plan.n_tokens * plan.top_k];
    for (e, slots) in plan.slots.iter().enumerate() {
        for &s in slots {
            expert_of[s] = e;
        }
    }
    let mut cache: Vec<Option<ExpertSlices>> = (0..plan.n_experts()).map(|_| None).collect();
    let mut rows = Vec::with_capacity(expert_of.len());
    let mut targets = Vec::with_capacity(expert_of.len());
    for t in 0..plan.n_tokens {
        let xt = tape.index_select(x, 0, &[t])?;
        for j in 0..plan.top_k {
            let slot = t * plan.top_k + j;
            let e = expert_of[slot];
            if cache[e].is_none() {
                cache[e] = Some(expert_slices(tape, w, e)?);
            }
            let ws = cache[e].as_ref().unwrap();
            let (wg, wu, wd) = (ws.w_gate, ws.w_up, ws.w_down);
            let y = swiglu_ffn(tape, xt, wg, wu, wd)?;
            rows.push(gated(tape, y, flat_gates, &[slot])?);
            targets.push(t);
        }
    }
    let all = tape.concat(&rows, 0)?;
    tape.scatter_add(all, 0, &targets, plan.n_tokens)
}

fn dispatch_grouped<T: Scalar>(tape: &mut Tape<T>, x: Var, flat_gates: Var, plan: &ExpertAssignment, w: &ExpertWeights) -> Result<Var> {
    let mut parts = Vec::new();
    let mut targets = Vec::with_capacity(plan.n_tokens * plan.top_k);
    for e in 0..plan.n_experts() {
        let toks = &plan.tokens[e];
        if toks.is_empty() {
            continue;
        }
        let ws = expert_slices(tape, w, e)?;
        let xe = tape.index_select(x, 0, toks)?;
        let ye = swiglu_ffn(tape, xe, ws.w_gate, ws.w_up, ws.w_down)?;
        parts.push(gated(tape, ye, flat_gates, &plan.slots[e])?);
        targets.extend_from_slice(toks);
    }
    let all = tape.concat(&parts, 0)?;
    tape.scatter_add(all, 0, &targets, plan.n_tokens)
}

fn dispatch_stacked<T: Scalar>(tape: &mut Tape<T>, x: Var, flat_gates: Var, plan: &ExpertAssignment, w: &ExpertWeights) -> Result<Var> {
    let (tokens, slots, offsets) = plan.sorted();
    let xs = tape.index_select(x, 0, &tokens)?;
    let g = tape.grouped_matmul(xs, w.w_gate, &offsets)?;
    let g = tape.silu(g)?;
    let u = tape.grouped_matmul(xs, w.w_up, &offsets)?;
    let h = tape.mul(g, u)?;
    let y = tape.grouped_matmul(h, w.w_down, &offsets)?;
    let y = gated(tape, y, flat_gates, &slots)?;
    tape.scatter_add(y, 0, &tokens, plan.n_tokens)
}
