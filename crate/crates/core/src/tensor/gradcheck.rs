use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks the gradient of the scalar function `f` at `x` against central
/// finite differences with the given `step`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Autograd(format!(
            "finite-difference check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic = tape.grad(leaf).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false);
        let o = f(&mut t, v)?;
        t.value(o).item()
    };

    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > max_rel_error || err.is_nan() {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport { max_rel_error, worst_index, tolerance, passed: max_rel_error < tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::new(&[5], vec![0.3, -1.0, 2.5, 7.0, -0.1]).unwrap();
        let report = finite_difference_check(|t, v| t.sum_all(v), &x, 1e-4, 1e-9).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert!(report.passed);
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(finite_difference_check(|t, v| t.square(v), &x, 1e-4, 1e-6).is_err());
    }
}
