//! Routed feed-forward layer: router, dropless dispatch, auxiliary losses.

mod dispatch;
mod router;

pub use dispatch::{dispatch, ExpertAssignment, ExpertWeights};
pub use router::{route, route_logits, route_on_tape, top_k_indices, RouterDecision, RouterVars};

use crate::error::{Error, Result};
use crate::model::config::{DispatchPath, MoEConfig};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Switch-style load-balancing loss `n_experts * sum_e f_e * P_e`, where `f_e`
/// is expert e's share of routed assignments (each token contributes top_k
/// assignments of weight 1/top_k) and `P_e` its mean router probability.
pub fn balance_loss(decision: &RouterDecision) -> f64 {
    let f = decision.assignment_fractions();
    let p = decision.mean_probs();
    decision.n_experts as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

/// Router z-loss: mean over tokens of the squared log-sum-exp of router logits.
pub fn z_loss(logits_lse: &[f64]) -> f64 {
    if logits_lse.is_empty() {
        return 0.0;
    }
    logits_lse.iter().map(|z| z * z).sum::<f64>() / logits_lse.len() as f64
}

/// Balance loss on the tape; the assignment fractions are constants.
pub fn balance_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, probs: Var, decision: &RouterDecision) -> Result<Var> {
    let f = decision.assignment_fractions();
    let f = tape.constant(Tensor::from_f64(&[f.len()], &f)?);
    let mean_p = tape.mean(probs, 0, false)?;
    let prod = tape.mul(mean_p, f)?;
    let s = tape.sum_all(prod)?;
    tape.scale(s, decision.n_experts as f64)
}

pub fn z_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, lse: Var) -> Result<Var> {
    let sq = tape.square(lse)?;
    tape.mean_all(sq)
}

/// Output of one MoE feed-forward layer.
pub struct MoeLayerOutput {
    pub output: Var,
    pub decision: RouterDecision,
    pub balance: Var,
    pub z: Var,
}

/// Routes `x` (`[tokens, d_model]`), runs the selected experts through
/// `path`, and records both auxiliary losses.
pub fn moe_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    router: Var,
    experts: &ExpertWeights,
    config: &MoEConfig,
    path: DispatchPath,
) -> Result<MoeLayerOutput> {
    if tape.shape(x)[0] == 0 {
        return Err(Error::shape("moe", "empty token batch"));
    }
    let vars = route_on_tape(tape, x, router, config.top_k)?;
    let plan = ExpertAssignment::from_decision(&vars.decision)?;
    let output = dispatch(tape, path, x, vars.gates, &plan, experts)?;
    let balance = balance_loss_on_tape(tape, vars.probs, &vars.decision)?;
    let z = z_loss_on_tape(tape, vars.lse)?;
    Ok(MoeLayerOutput { output, decision: vars.decision, balance, z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_routing_gives_unit_balance_loss() {
        // four tokens, each picking a different expert, uniform probabilities
        let d = RouterDecision {
            n_experts: 4,
            top_k: 1,
            probs: vec![0.25; 16],
            topk_indices: vec![0, 1, 2, 3],
            gates: vec![0.25; 4],
            logits_lse: vec![4f64.ln(); 4],
        };
        assert!((balance_loss(&d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_collapse_gives_n_experts() {
        let mut probs = vec![0.0; 16];
        for t in 0..4 {
            probs[t * 4] = 1.0;
        }
        let d = RouterDecision { n_experts: 4, top_k: 1, probs, topk_indices: vec![0; 4], gates: vec![1.0; 4], logits_lse: vec![0.0; 4] };
        assert!((balance_loss(&d) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn balance_loss_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, e, k) = (64, 4, 2);
        let logits: Vec<f64> = (0..n * e).map(|_| rng.random_range(-2.0..2.0)).collect();
        let d = route_logits(&logits, e, k).unwrap();
        // brute force: per expert, count assignments token by token
        let mut total = 0.0;
        for ex in 0..e {
            let mut f = 0.0;
            let mut p = 0.0;
            for t in 0..n {
                for j in 0..k {
                    if d.topk_indices[t * k + j] == ex {
                        f += 1.0 / k as f64;
                    }
                }
                p += d.probs[t * e + ex];
            }
            total += (f / n as f64) * (p / n as f64);
        }
        assert!((balance_loss(&d) - e as f64 * total).abs() < 1e-12);
    }

    #[test]
    fn z_loss_examples() {
        assert!((z_loss(&[4f64.ln(); 3]) - 1.9218).abs() < 1e-4);
        let d = route_logits(&[1.0, 0.0, 0.0, 0.0], 4, 1).unwrap();
        let lse = (std::f64::consts::E + 3.0).ln();
        assert!((d.logits_lse[0] - lse).abs() < 1e-12 && (lse - 1.7438).abs() < 1e-3);
        assert!((z_loss(&d.logits_lse) - lse * lse).abs() < 1e-12);
        // 3.0409 is the square of the rounded lse; the exact value is 3.0404
        assert!((z_loss(&d.logits_lse) - 3.0409).abs() < 1e-3);
    }

    #[test]
    fn z_loss_grows_with_logit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let base: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z_at = |s: f64| {
            let scaled: Vec<f64> = base.iter().map(|v| v * s).collect();
            z_loss(&route_logits(&scaled, 4, 2).unwrap().logits_lse)
        };
        assert!(z_at(1.0) < z_at(2.0) && z_at(2.0) < z_at(4.0));
    }
}
