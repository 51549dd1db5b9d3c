//! Throughput comparison of the three dispatch paths on one routed layer
//! (forward and backward).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DispatchPath;
use crate::moe::{dispatch, route_logits, ExpertAssignment, ExpertWeights};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchShape {
    pub tokens: usize,
    pub d_model: usize,
    pub n_experts: usize,
    pub expert_hidden: usize,
    pub top_k: usize,
}

impl Default for BenchShape {
    fn default() -> Self {
        Self { tokens: 4096, d_model: 256, n_experts: 4, expert_hidden: 1024, top_k: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathTiming {
    pub path: DispatchPath,
    /// Median over the timed repeats.
    pub tokens_per_s: f64,
    pub seconds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub shape: BenchShape,
    pub repeats: usize,
    pub paths: Vec<PathTiming>,
    /// Largest elementwise `|a - b| / max(1, |b|)` between any path and naive.
    pub max_deviation: f64,
    /// Paths sorted from fastest to slowest.
    pub ordering: Vec<DispatchPath>,
}

impl BenchReport {
    pub fn tokens_per_s(&self, path: DispatchPath) -> f64 {
        self.paths.iter().find(|p| p.path == path).map_or(0.0, |p| p.tokens_per_s)
    }
}

struct Workload {
    x: Tensor<f32>,
    gates: Tensor<f32>,
    plan: ExpertAssignment,
    w_gate: Tensor<f32>,
    w_up: Tensor<f32>,
    w_down: Tensor<f32>,
}

fn workload(s: &BenchShape, seed: u64) -> Result<Workload> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut sample = |n: usize, std: f64| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng) * std).collect() };
    let (n, d, e, h) = (s.tokens, s.d_model, s.n_experts, s.expert_hidden);
    let x = Tensor::from_f64(&[n, d], &sample(n * d, 1.0))?;
    let w_gate = Tensor::from_f64(&[e, d, h], &sample(e * d * h, 0.02))?;
    let w_up = Tensor::from_f64(&[e, d, h], &sample(e * d * h, 0.02))?;
    let w_down = Tensor::from_f64(&[e, h, d], &sample(e * h * d, 0.02))?;
    // mildly skewed router so buckets have unequal sizes
    let logits: Vec<f64> = (0..n * e).map(|i| rng.random_range(-1.0..1.0) + 0.3 * (i % e) as f64).collect();
    let decision = route_logits(&logits, e, s.top_k)?;
    let gates = Tensor::from_f64(&[n, s.top_k], &decision.gates)?;
    let plan = ExpertAssignment::from_decision(&decision)?;
    Ok(Workload { x, gates, plan, w_gate, w_up, w_down })
}

fn run_once(w: &Workload, path: DispatchPath) -> Result<(f64, Tensor<f32>)> {
    let started = Instant::now();
    let mut tape = Tape::new();
    let x = tape.leaf(w.x.clone(), true);
    let gates = tape.leaf(w.gates.clone(), true);
    let experts = ExpertWeights { w_gate: tape.leaf(w.w_gate.clone(), true), w_up: tape.leaf(w.w_up.clone(), true), w_down: tape.leaf(w.w_down.clone(), true) };
    let y = dispatch(&mut tape, path, x, gates, &w.plan, &experts)?;
    let loss = tape.sum_all(y)?;
    tape.backward(loss)?;
    let secs = started.elapsed().as_secs_f64();
    Ok((secs, tape.value(y).clone()))
}

/// Times each path `repeats` times after one untimed warmup pass.
pub fn bench_dispatch(shape: &BenchShape, repeats: usize, seed: u64) -> Result<BenchReport> {
    if shape.tokens == 0 || shape.d_model == 0 || shape.expert_hidden == 0 || shape.top_k == 0 || shape.top_k > shape.n_experts {
        return Err(Error::Config(format!("invalid bench shape {shape:?}")));
    }
    let repeats = repeats.max(1);
    let w = workload(shape, seed)?;
    let mut paths = Vec::new();
    let mut outputs = Vec::new();
    for path in DispatchPath::ALL {
        let (_, out) = run_once(&w, path)?;
        let secs: Vec<f64> = (0..repeats).map(|_| run_once(&w, path).map(|r| r.0)).collect::<Result<_>>()?;
        let mut sorted = secs.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        paths.push(PathTiming { path, tokens_per_s: shape.tokens as f64 / median, seconds: secs });
        outputs.push(out);
    }
    let reference = &outputs[0];
    let max_deviation = outputs[1..]
        .iter()
        .flat_map(|o| o.data().iter().zip(reference.data()).map(|(&a, &b)| ((a - b).abs() / b.abs().max(1.0)) as f64))
        .fold(0.0, f64::max);
    let mut ordering: Vec<_> = paths.iter().map(|p| (p.path, p.tokens_per_s)).collect();
    ordering.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(BenchReport { shape: shape.clone(), repeats, paths, max_deviation, ordering: ordering.into_iter().map(|p| p.0).collect() })
}
