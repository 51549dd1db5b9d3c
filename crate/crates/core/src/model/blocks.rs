//! Decoder building blocks recorded on a tape.

use crate::error::{Error, Result};
use crate::tensor::{rng_key, Scalar, Tape, Var};

/// y = x / sqrt(mean(x^2) + eps) * gain, over the last axis.
pub fn rmsnorm<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let last = shape.len().checked_sub(1).ok_or_else(|| Error::shape("rmsnorm", "scalar input"))?;
    if tape.shape(gain) != [shape[last]] {
        return Err(Error::shape("rmsnorm", format!("gain {:?} for input {shape:?}", tape.shape(gain))));
    }
    let sq = tape.square(x)?;
    let ms = tape.mean(sq, last, true)?;
    let ms = tape.add_scalar(ms, eps)?;
    let inv = tape.rsqrt(ms)?;
    let normed = tape.mul(x, inv)?;
    tape.mul(normed, gain)
}

/// Rotates `x` (`[..., seq, head_dim]`) by absolute positions.
pub fn apply_rope<T: Scalar>(tape: &mut Tape<T>, x: Var, positions: &[usize], base: f64) -> Result<Var> {
    tape.rope(x, positions, base)
}

/// y = W_down (silu(x W_gate) * (x W_up)); no biases.
pub fn swiglu_ffn<T: Scalar>(tape: &mut Tape<T>, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let g = tape.matmul(x, w_gate)?;
    let g = tape.silu(g)?;
    let u = tape.matmul(x, w_up)?;
    let h = tape.mul(g, u)?;
    tape.matmul(h, w_down)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    /// `[d_model, n_query_heads * head_dim]`
    pub wq: Var,
    /// `[d_model, n_kv_heads * head_dim]`
    pub wk: Var,
    pub wv: Var,
    /// `[n_query_heads * head_dim, d_model]`
    pub wo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub context_len: usize,
    pub rope_base: f64,
}

/// Dropout settings for one call site.
#[derive(Clone, Copy, Debug)]
pub struct DropoutSite {
    pub p: f64,
    pub train: bool,
    pub key: u64,
}

impl DropoutSite {
    pub fn off() -> Self {
        Self { p: 0.0, train: false, key: 0 }
    }

    pub fn child(self, parts: &[u64]) -> Self {
        let mut all = vec![self.key];
        all.extend_from_slice(parts);
        Self { key: rng_key(&all), ..self }
    }
}

/// Causal grouped-query attention on `x` of shape `[batch * seq, d_model]`.
/// Each key/value head serves `n_query_heads / n_kv_heads` consecutive query heads.
pub fn gqa_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttentionWeights,
    s: &AttentionShape,
    dropout: DropoutSite,
) -> Result<Var> {
    if s.seq > s.context_len {
        return Err(Error::shape("attention", format!("sequence of {} exceeds context length {}", s.seq, s.context_len)));
    }
    if s.n_kv_heads == 0 || s.n_query_heads % s.n_kv_heads != 0 {
        return Err(Error::Config(format!("{} query heads cannot share {} kv heads", s.n_query_heads, s.n_kv_heads)));
    }
    let (b, t, hd) = (s.batch, s.seq, s.head_dim);
    let positions: Vec<usize> = (0..t).collect();

    let heads = |tape: &mut Tape<T>, w: Var, n: usize, rotate: bool| -> Result<Var> {
        let p = tape.matmul(x, w)?;
        let p = tape.reshape(p, &[b, t, n, hd])?;
        let p = tape.transpose(p, 1, 2)?;
        if rotate {
            tape.rope(p, &positions, s.rope_base)
        } else {
            Ok(p)
        }
    };
    let q = heads(tape, w.wq, s.n_query_heads, true)?;
    let mut k = heads(tape, w.wk, s.n_kv_heads, true)?;
    let mut v = heads(tape, w.wv, s.n_kv_heads, false)?;
    let group = s.n_query_heads / s.n_kv_heads;
    if group > 1 {
        let map: Vec<usize> = (0..s.n_query_heads).map(|h| h / group).collect();
        k = tape.index_select(k, 1, &map)?;
        v = tape.index_select(v, 1, &map)?;
    }

    let kt = tape.transpose(k, 2, 3)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
    let mask: Vec<bool> = (0..t * t).map(|i| i % t > i / t).collect();
    let scores = tape.masked_fill(scores, &mask, f64::NEG_INFINITY)?;
    let probs = tape.softmax(scores)?;
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.transpose(ctx, 1, 2)?;
    let ctx = tape.reshape(ctx, &[b * t, s.n_query_heads * hd])?;
    let out = tape.matmul(ctx, w.wo)?;
    tape.dropout(out, dropout.p, dropout.train, dropout.key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()).unwrap()
    }

    fn norm_of(tape: &mut Tape<f64>, x: Tensor<f64>, gain: Tensor<f64>, eps: f64) -> Vec<f64> {
        let x = tape.constant(x);
        let g = tape.constant(gain);
        let y = rmsnorm(tape, x, g, eps).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn rmsnorm_examples() {
        let mut tape = Tape::new();
        let ones = norm_of(&mut tape, Tensor::full(&[1, 4], 1.0), Tensor::full(&[4], 1.0), 1e-12);
        ones.iter().for_each(|v| assert!((v - 1.0).abs() < 1e-9));
        let twos = norm_of(&mut tape, Tensor::full(&[1, 4], 2.0), Tensor::full(&[4], 1.0), 1e-5);
        twos.iter().for_each(|v| assert!((v - 1.0).abs() < 1e-5));
        // rms([3, 4]) = sqrt(12.5)
        let y = norm_of(&mut tape, Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap(), Tensor::full(&[2], 1.0), 0.0);
        let rms = 12.5f64.sqrt();
        assert!((y[0] - 3.0 / rms).abs() < 1e-12 && (y[0] - 0.8485).abs() < 1e-4);
        assert!((y[1] - 4.0 / rms).abs() < 1e-12 && (y[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn rmsnorm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 8], &mut rng, 1.0);
        let gain = random(&[8], &mut rng, 1.0);
        let report = finite_difference_check(
            |t, v| {
                let g = t.constant(gain.clone());
                let y = rmsnorm(t, v, g, 1e-5)?;
                t.sum_all(y)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn rope_vec(x: &[f64], pos: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(&[1, x.len()], x.to_vec()).unwrap());
        let r = apply_rope(&mut tape, v, &[pos], 10_000.0).unwrap();
        tape.value(r).data().to_vec()
    }

    #[test]
    fn rope_identity_at_zero_and_norm_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[16], &mut rng, 1.0).into_data();
        assert_eq!(rope_vec(&x, 0), x);
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for pos in [1, 5, 511] {
            assert!((norm(&rope_vec(&x, pos)) - norm(&x)).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_scores_depend_only_on_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(&[16], &mut rng, 1.0).into_data();
        let k = random(&[16], &mut rng, 1.0).into_data();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let delta = 3;
        let at = |p: usize| dot(&rope_vec(&q, p + delta), &rope_vec(&k, p));
        let reference = at(0);
        for p in [7, 100] {
            assert!((at(p) - reference).abs() < 1e-5);
        }
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(apply_rope(&mut tape, v, &[0], 10_000.0), Err(Error::Config(_))));
    }

    #[test]
    fn swiglu_of_zero_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 8]));
        let wg = tape.constant(random(&[8, 12], &mut rng, 1.0));
        let wu = tape.constant(random(&[8, 12], &mut rng, 1.0));
        let wd = tape.constant(random(&[12, 8], &mut rng, 1.0));
        let y = swiglu_ffn(&mut tape, x, wg, wu, wd).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    fn shape(seq: usize, hq: usize, hkv: usize, hd: usize) -> AttentionShape {
        AttentionShape { batch: 1, seq, n_query_heads: hq, n_kv_heads: hkv, head_dim: hd, context_len: 64, rope_base: 10_000.0 }
    }

    fn attention_out(x: &Tensor<f64>, ws: &[Tensor<f64>; 4], s: &AttentionShape) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let [wq, wk, wv, wo] = ws.clone().map(|w| tape.constant(w));
        let y = gqa_attention(&mut tape, xv, &AttentionWeights { wq, wk, wv, wo }, s, DropoutSite::off()).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 8;
        let s = shape(1, 4, 2, 2);
        let x = random(&[1, d], &mut rng, 1.0);
        let ws = [random(&[d, 8], &mut rng, 1.0), random(&[d, 4], &mut rng, 1.0), random(&[d, 4], &mut rng, 1.0), random(&[8, d], &mut rng, 1.0)];
        let y = attention_out(&x, &ws, &s);
        // ctx head h = v of kv head h / 2
        let v: Vec<f64> = (0..4).map(|j| (0..d).map(|i| x.data()[i] * ws[2].data()[i * 4 + j]).sum()).collect();
        let ctx: Vec<f64> = (0..4).flat_map(|h| [v[(h / 2) * 2], v[(h / 2) * 2 + 1]]).collect();
        for (j, yj) in y.iter().enumerate() {
            let expect: f64 = (0..8).map(|i| ctx[i] * ws[3].data()[i * d + j]).sum();
            assert!((yj - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (t, d) = (6, 8);
        let s = shape(t, 4, 2, 2);
        let ws = [random(&[d, 8], &mut rng, 1.0), random(&[d, 4], &mut rng, 1.0), random(&[d, 4], &mut rng, 1.0), random(&[8, d], &mut rng, 1.0)];
        let x = random(&[t, d], &mut rng, 1.0);
        let base = attention_out(&x, &ws, &s);
        let mut perturbed = x.clone();
        for v in &mut perturbed.data_mut()[4 * d..] {
            *v += 0.7;
        }
        let moved = attention_out(&perturbed, &ws, &s);
        assert_eq!(&base[..4 * d], &moved[..4 * d]);
        assert_ne!(&base[4 * d..], &moved[4 * d..]);
    }

    /// Plain multi-head attention with one loop per head, RoPE applied by hand.
    fn reference_mha(x: &Tensor<f64>, ws: &[Tensor<f64>; 4], t: usize, heads: usize, hd: usize) -> Vec<f64> {
        let d = x.shape()[1];
        let inner = heads * hd;
        let proj = |w: &Tensor<f64>| -> Vec<f64> {
            (0..t).flat_map(|r| (0..inner).map(move |c| (0..d).map(|i| x.data()[r * d + i] * w.data()[i * inner + c]).sum::<f64>())).collect()
        };
        let rot = |mut v: Vec<f64>| {
            for r in 0..t {
                for h in 0..heads {
                    for i in 0..hd / 2 {
                        let ang = r as f64 * 10_000f64.powf(-2.0 * i as f64 / hd as f64);
                        let o = r * inner + h * hd + 2 * i;
                        let (a, b) = (v[o], v[o + 1]);
                        v[o] = a * ang.cos() - b * ang.sin();
                        v[o + 1] = a * ang.sin() + b * ang.cos();
                    }
                }
            }
            v
        };
        let (q, k, v) = (rot(proj(&ws[0])), rot(proj(&ws[1])), proj(&ws[2]));
        let mut ctx = vec![0.0; t * inner];
        for h in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..hd).map(|c| q[i * inner + h * hd + c] * k[j * inner + h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let p = (s - m).exp() / z;
                    for c in 0..hd {
                        ctx[i * inner + h * hd + c] += p * v[j * inner + h * hd + c];
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(t * d);
        for r in 0..t {
            for c in 0..d {
                out.push((0..inner).map(|i| ctx[r * inner + i] * ws[3].data()[i * d + c]).sum::<f64>());
            }
        }
        out
    }

    #[test]
    fn ungrouped_attention_matches_reference_mha() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (t, d, heads, hd) = (5, 8, 2, 4);
        let s = shape(t, heads, heads, hd);
        let ws = [random(&[d, 8], &mut rng, 1.0), random(&[d, 8], &mut rng, 1.0), random(&[d, 8], &mut rng, 1.0), random(&[8, d], &mut rng, 1.0)];
        let x = random(&[t, d], &mut rng, 1.0);
        let got = attention_out(&x, &ws, &s);
        let want = reference_mha(&x, &ws, t, heads, hd);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn context_overflow_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[65, 8]));
        let w = tape.constant(Tensor::zeros(&[8, 8]));
        let s = AttentionShape { seq: 65, ..shape(65, 2, 2, 4) };
        let ws = AttentionWeights { wq: w, wk: w, wv: w, wo: w };
        assert!(gqa_attention(&mut tape, x, &ws, &s, DropoutSite::off()).is_err());
    }
}
