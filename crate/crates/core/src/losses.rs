//! Training objective and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MoEConfig;
use crate::tensor::{Scalar, Tape, Var};

/// Target value marking a position without a prediction target.
pub const IGNORE_INDEX: usize = usize::MAX;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub ce: f64,
    pub bal: f64,
    pub z: f64,
    pub total: f64,
    pub lambda_bal: f64,
    pub lambda_z: f64,
}

/// Prediction targets for a row-major `[batch, window]` token block: position
/// `t` predicts token `t + 1`; the last position of each row has no target.
pub fn next_token_targets(tokens: &[usize], batch: usize) -> Result<Vec<usize>> {
    if batch == 0 || tokens.len() % batch != 0 {
        return Err(Error::shape("next_token_ce", format!("{} tokens in {batch} rows", tokens.len())));
    }
    let window = tokens.len() / batch;
    if window < 2 {
        return Err(Error::shape("next_token_ce", format!("window length {window} leaves no prediction targets")));
    }
    Ok(tokens
        .chunks(window)
        .flat_map(|row| row[1..].iter().copied().chain(std::iter::once(IGNORE_INDEX)))
        .collect())
}

/// Number of loss-contributing positions in one window.
pub fn targets_per_window(window_len: usize) -> usize {
    window_len.saturating_sub(1)
}

/// Mean next-token cross-entropy over every position that has a target.
pub fn next_token_ce<T: Scalar>(tape: &mut Tape<T>, logits: Var, tokens: &[usize], batch: usize) -> Result<Var> {
    let targets = next_token_targets(tokens, batch)?;
    tape.cross_entropy(logits, &targets, Some(IGNORE_INDEX))
}

fn lambdas(moe: Option<&MoEConfig>) -> Result<(f64, f64)> {
    let Some(m) = moe else { return Ok((0.0, 0.0)) };
    if !(m.lambda_bal >= 0.0 && m.lambda_z >= 0.0) {
        return Err(Error::Config(format!("negative aux-loss weight (lambda_bal = {}, lambda_z = {})", m.lambda_bal, m.lambda_z)));
    }
    Ok((m.lambda_bal, m.lambda_z))
}

/// `total = ce + lambda_bal * bal + lambda_z * z`, where `bal` and `z` sum
/// the per-layer terms: every MoE layer carries its own auxiliary losses, as
/// in Switch. `aux` holds one `(bal, z)` pair per layer and is empty for
/// dense models.
pub fn total_objective(ce: f64, aux: &[(f64, f64)], moe: Option<&MoEConfig>) -> Result<ObjectiveBreakdown> {
    let (lambda_bal, lambda_z) = lambdas(moe)?;
    if moe.is_none() && !aux.is_empty() {
        return Err(Error::Config("auxiliary losses given for a dense model".into()));
    }
    let bal = aux.iter().map(|a| a.0).sum();
    let z = aux.iter().map(|a| a.1).sum();
    Ok(ObjectiveBreakdown { ce, bal, z, total: ce + lambda_bal * bal + lambda_z * z, lambda_bal, lambda_z })
}

/// Tape version of [`total_objective`]; returns the differentiable total.
pub fn total_objective_on_tape<T: Scalar>(tape: &mut Tape<T>, ce: Var, aux: &[(Var, Var)], moe: Option<&MoEConfig>) -> Result<Var> {
    let (lambda_bal, lambda_z) = lambdas(moe)?;
    let mut total = ce;
    for &(bal, z) in aux {
        if lambda_bal != 0.0 {
            let b = tape.scale(bal, lambda_bal)?;
            total = tape.add(total, b)?;
        }
        if lambda_z != 0.0 {
            let zz = tape.scale(z, lambda_z)?;
            total = tape.add(total, zz)?;
        }
    }
    Ok(total)
}

pub fn perplexity(ce: f64) -> f64 {
    ce.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DispatchPath;
    use crate::tensor::Tensor;

    fn moe_cfg(lb: f64, lz: f64) -> MoEConfig {
        MoEConfig { n_experts: 4, top_k: 2, expert_hidden: 8, lambda_bal: lb, lambda_z: lz, dispatch_path: DispatchPath::Stacked }
    }

    #[test]
    fn window_of_512_has_511_targets() {
        let tokens: Vec<usize> = (0..512).collect();
        let t = next_token_targets(&tokens, 1).unwrap();
        assert_eq!(t.iter().filter(|&&v| v != IGNORE_INDEX).count(), 511);
        assert_eq!(targets_per_window(512), 511);
        assert!(next_token_targets(&[1], 1).is_err());
    }

    #[test]
    fn ce_limits() {
        let vocab = 7;
        let tokens = [1usize, 4, 2, 6];
        // one-hot-ish logits on the true next token
        let mut peaked = vec![0.0f64; 4 * vocab];
        for (t, &next) in tokens[1..].iter().enumerate() {
            peaked[t * vocab + next] = 60.0;
        }
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(&[4, vocab], peaked).unwrap());
        let ce = next_token_ce(&mut tape, l, &tokens, 1).unwrap();
        assert!(tape.value(ce).item().unwrap() < 1e-20);

        let u = tape.constant(Tensor::zeros(&[4, vocab]));
        let ce = next_token_ce(&mut tape, u, &tokens, 1).unwrap();
        assert!((tape.value(ce).item().unwrap() - (vocab as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn total_objective_composition() {
        let cfg = moe_cfg(1e-2, 1e-3);
        let b = total_objective(2.0, &[(1.0, 1.9218)], Some(&cfg)).unwrap();
        assert!((b.total - 2.0119218).abs() < 1e-9);
        assert!((b.total - 2.0119).abs() < 1e-4);

        let dense = total_objective(2.0, &[], None).unwrap();
        assert_eq!((dense.total, dense.bal, dense.z), (2.0, 0.0, 0.0));

        let no_z = total_objective(2.0, &[(1.2, 3.0)], Some(&moe_cfg(1e-2, 0.0))).unwrap();
        assert!((no_z.total - (2.0 + 1e-2 * 1.2)).abs() < 1e-15);

        assert!(total_objective(2.0, &[], Some(&moe_cfg(-1.0, 0.0))).is_err());
    }

    #[test]
    fn layers_contribute_separately() {
        let b = total_objective(2.0, &[(1.0, 2.0), (1.5, 3.0)], Some(&moe_cfg(1e-2, 1e-3))).unwrap();
        assert_eq!((b.bal, b.z), (2.5, 5.0));
        assert!((b.total - (2.0 + 0.025 + 0.005)).abs() < 1e-15);
    }

    #[test]
    fn total_objective_is_linear_in_each_lambda() {
        let aux = [(1.3, 2.1), (1.1, 2.5)];
        let at = |lb: f64, lz: f64| total_objective(1.7, &aux, Some(&moe_cfg(lb, lz))).unwrap().total;
        for lz in [0.0, 1e-3, 1e-2] {
            let (a, b, c) = (at(0.0, lz), at(1e-3, lz), at(1e-2, lz));
            assert!(((c - a) - 10.0 * (b - a)).abs() < 1e-12);
        }
        for lb in [0.0, 1e-3, 1e-2] {
            let (a, b, c) = (at(lb, 0.0), at(lb, 1e-3), at(lb, 1e-2));
            assert!(((c - a) - 10.0 * (b - a)).abs() < 1e-12);
        }
    }

    #[test]
    fn perplexity_values() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(1.5788) - 4.849).abs() < 1e-3);
        assert!((perplexity(1.6545) - 5.231).abs() < 1e-3);
    }
}
