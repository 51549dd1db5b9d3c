use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

use super::TrainConfig;

/// AdamW moments, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected update with decoupled weight decay
    /// (`p *= 1 - lr * wd` for parameters flagged for decay).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64, c: &TrainConfig) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Invariant(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape("adamw", format!("{}: grad {:?} vs param {:?}", p.name, g.shape(), p.value.shape())));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let [b1, b2] = c.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.decay { 1.0 - lr * c.weight_decay } else { 1.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g.to_f64();
                let mj = b1 * m[j].to_f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].to_f64() + (1.0 - b2) * g * g;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let update = (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                *w = T::from_f64(w.to_f64() * decay - lr * update);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt()
}

/// Rescales all gradients together so their global norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Init;

    fn store(values: &[(&str, f64, bool)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        for (name, _, decay) in values {
            s.add(*name, &[1], Init::Ones, *decay, &mut rng);
        }
        for (p, (_, v, _)) in s.iter_mut().zip(values) {
            p.value.data_mut()[0] = *v;
        }
        s
    }

    fn cfg(wd: f64) -> TrainConfig {
        TrainConfig { weight_decay: wd, ..TrainConfig::with_steps(10) }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[("w", 1.0, false)]);
        let mut opt = AdamW::new(&s);
        opt.step(&mut s, &[Tensor::scalar(1.0).reshaped(&[1]).unwrap()], 0.1, &cfg(0.0)).unwrap();
        assert!((s.iter().next().unwrap().value.data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_grad_only_decays_flagged_params() {
        let mut s = store(&[("w", 2.0, true), ("norm", 2.0, false)]);
        let mut opt = AdamW::new(&s);
        let zero = vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])];
        for _ in 0..3 {
            opt.step(&mut s, &zero, 0.01, &cfg(0.1)).unwrap();
        }
        let v: Vec<f64> = s.iter().map(|p| p.value.data()[0]).collect();
        assert!((v[0] - 2.0 * (1.0 - 0.01 * 0.1f64).powi(3)).abs() < 1e-15);
        assert_eq!(v[1], 2.0);

        let mut s = store(&[("w", 2.0, true)]);
        AdamW::new(&s).step(&mut s, &[Tensor::zeros(&[1])], 0.01, &cfg(0.0)).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data()[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut s = store(&[("layers.0.attn.wq", 1.0, true)]);
        let err = AdamW::new(&s).step(&mut s, &[Tensor::new(&[1], vec![f64::NAN]).unwrap()], 0.1, &cfg(0.1)).unwrap_err();
        assert!(err.to_string().contains("layers.0.attn.wq"));
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::new(&[2], vec![3.0f64, 4.0]).unwrap()];
        assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[0].data()[1] - 0.8).abs() < 1e-15);

        let mut small = vec![Tensor::new(&[2], vec![0.3f64, 0.4]).unwrap()];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);

        let mut many = vec![Tensor::full(&[7], 3.0f64), Tensor::full(&[3, 2], -2.0)];
        clip_gradients(&mut many, 1.0);
        assert!(global_norm(&many) <= 1.0 + 1e-6);
    }
}
