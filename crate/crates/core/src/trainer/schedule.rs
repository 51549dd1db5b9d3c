use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d::lr_max")]
    pub lr_max: f64,
    #[serde(default = "d::lr_min")]
    pub lr_min: f64,
    #[serde(default = "d::warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "d::betas")]
    pub betas: [f64; 2],
    #[serde(default = "d::eps")]
    pub eps: f64,
    #[serde(default = "d::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d::clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    #[serde(default = "d::grad_accum")]
    pub grad_accum: usize,
    pub total_steps: usize,
    #[serde(default = "d::eval_every")]
    pub eval_every: usize,
    /// Cap on validation batches per evaluation; all batches when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_batches: Option<usize>,
    #[serde(default = "d::seed")]
    pub seed: u64,
}

mod d {
    pub fn lr_max() -> f64 {
        3e-4
    }
    pub fn lr_min() -> f64 {
        3e-5
    }
    pub fn warmup_frac() -> f64 {
        0.03
    }
    pub fn betas() -> [f64; 2] {
        [0.9, 0.95]
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn weight_decay() -> f64 {
        0.1
    }
    pub fn clip_norm() -> f64 {
        1.0
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn grad_accum() -> usize {
        2
    }
    pub fn eval_every() -> usize {
        250
    }
    pub fn seed() -> u64 {
        1337
    }
}

/// Optimizer steps of the full-data schedule.
pub const FULL_DATA_STEPS: usize = 26_073;

impl TrainConfig {
    pub fn with_steps(total_steps: usize) -> Self {
        Self {
            lr_max: d::lr_max(),
            lr_min: d::lr_min(),
            warmup_frac: d::warmup_frac(),
            betas: d::betas(),
            eps: d::eps(),
            weight_decay: d::weight_decay(),
            clip_norm: d::clip_norm(),
            batch_size: d::batch_size(),
            grad_accum: d::grad_accum(),
            total_steps,
            eval_every: d::eval_every(),
            eval_batches: None,
            seed: d::seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return fail(format!("need 0 < lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return fail(format!("warmup_frac = {} outside [0, 1)", self.warmup_frac));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return fail(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return fail("eps and clip_norm must be positive, weight_decay non-negative".into());
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.grad_accum == 0 || self.eval_every == 0 {
            return fail("total_steps, batch_size, grad_accum and eval_every must be positive".into());
        }
        Ok(())
    }

    /// Warmup length in optimizer steps (3% of 26,073 is 782).
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.total_steps as f64).round() as usize
    }
}

/// Linear warmup from 0 to `lr_max`, then cosine decay reaching `lr_min` at
/// `total_steps`. Optimizer update number `s` (1-based) uses `lr_at(s)`.
pub fn lr_at(step: usize, c: &TrainConfig) -> Result<f64> {
    if step > c.total_steps {
        return Err(Error::Config(format!("step {step} beyond schedule of {} steps", c.total_steps)));
    }
    let warm = c.warmup_steps();
    if step < warm {
        return Ok(c.lr_max * step as f64 / warm as f64);
    }
    let span = c.total_steps - warm;
    if span == 0 {
        return Ok(c.lr_max);
    }
    let progress = (step - warm) as f64 / span as f64;
    Ok(c.lr_min + 0.5 * (c.lr_max - c.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
