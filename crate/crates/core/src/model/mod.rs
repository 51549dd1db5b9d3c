//! LLaMA-style decoder: RMSNorm, RoPE, grouped-query attention, SwiGLU or
//! routed-expert feed-forward, tied input/output embeddings, no biases.

mod blocks;
pub mod config;
mod params;

pub use blocks::{apply_rope, gqa_attention, rmsnorm, swiglu_ffn, AttentionShape, AttentionWeights, DropoutSite};
pub use config::{DispatchPath, MoEConfig, ModelConfig};
pub use params::{Init, Param, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::moe::{moe_forward, ExpertWeights, RouterDecision};
use crate::tensor::{Scalar, Tape, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
enum FfnParams {
    Dense { w_gate: ParamId, w_up: ParamId, w_down: ParamId },
    Moe { router: ParamId, w_gate: ParamId, w_up: ParamId, w_down: ParamId },
}

#[derive(Clone, Debug)]
struct LayerParams {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ffn_norm: ParamId,
    ffn: FfnParams,
}

/// Decoder-only language model. The output projection reuses the embedding
/// matrix (transposed).
#[derive(Clone, Debug)]
pub struct DecoderModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    embedding: ParamId,
    layers: Vec<LayerParams>,
    final_norm: ParamId,
}

/// Per-MoE-layer routing outputs of one forward pass.
pub struct MoeAux {
    pub decision: RouterDecision,
    pub balance: Var,
    pub z: Var,
}

pub struct ForwardOutput {
    /// `[batch * seq, vocab]`
    pub logits: Var,
    /// One entry per layer for MoE models, empty for dense models.
    pub moe: Vec<MoeAux>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub train: bool,
    /// Base key for the dropout streams of this forward pass.
    pub dropout_key: u64,
    /// Overrides the configured dispatch path.
    pub dispatch: Option<DispatchPath>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self { train: false, dropout_key: 0, dispatch: None }
    }

    pub fn train(dropout_key: u64) -> Self {
        Self { train: true, dropout_key, dispatch: None }
    }
}

impl<T: Scalar> DecoderModel<T> {
    /// Builds a freshly initialized model: N(0, 0.02) matrices, output-path
    /// matrices (Wo, W_down) at 0.02 / sqrt(2 n_layers), unit norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = params::init_rng(seed);
        let mut ps = ParamStore::new();
        let d = config.d_model;
        let hd = config.head_dim();
        let out_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let embedding = ps.add("embedding", &[config.vocab_size, d], Init::Normal(INIT_STD), false, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let attn_norm = ps.add(p("attn_norm"), &[d], Init::Ones, false, &mut rng);
            let wq = ps.add(p("attn.wq"), &[d, config.n_query_heads * hd], Init::Normal(INIT_STD), true, &mut rng);
            let wk = ps.add(p("attn.wk"), &[d, config.n_kv_heads * hd], Init::Normal(INIT_STD), true, &mut rng);
            let wv = ps.add(p("attn.wv"), &[d, config.n_kv_heads * hd], Init::Normal(INIT_STD), true, &mut rng);
            let wo = ps.add(p("attn.wo"), &[config.n_query_heads * hd, d], Init::Normal(out_std), true, &mut rng);
            let ffn_norm = ps.add(p("ffn_norm"), &[d], Init::Ones, false, &mut rng);
            let ffn = match (&config.moe, config.ffn_hidden) {
                (Some(moe), _) => {
                    let (e, h) = (moe.n_experts, moe.expert_hidden);
                    FfnParams::Moe {
                        router: ps.add(p("moe.router"), &[d, e], Init::Normal(INIT_STD), true, &mut rng),
                        w_gate: ps.add(p("moe.w_gate"), &[e, d, h], Init::Normal(INIT_STD), true, &mut rng),
                        w_up: ps.add(p("moe.w_up"), &[e, d, h], Init::Normal(INIT_STD), true, &mut rng),
                        w_down: ps.add(p("moe.w_down"), &[e, h, d], Init::Normal(out_std), true, &mut rng),
                    }
                }
                (None, Some(f)) => FfnParams::Dense {
                    w_gate: ps.add(p("ffn.w_gate"), &[d, f], Init::Normal(INIT_STD), true, &mut rng),
                    w_up: ps.add(p("ffn.w_up"), &[d, f], Init::Normal(INIT_STD), true, &mut rng),
                    w_down: ps.add(p("ffn.w_down"), &[f, d], Init::Normal(out_std), true, &mut rng),
                },
                (None, None) => unreachable!("validated"),
            };
            layers.push(LayerParams { attn_norm, wq, wk, wv, wo, ffn_norm, ffn });
        }
        let final_norm = ps.add("final_norm", &[d], Init::Ones, false, &mut rng);
        Ok(Self { config, params: ps, embedding, layers, final_norm })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params.bind(tape, requires_grad)
    }

    /// Logits for `tokens`, a row-major `[batch, seq]` window batch.
    /// Blocks are pre-norm: `x += attn(norm(x))`, then `x += ffn(norm(x))`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &[Var], tokens: &[usize], batch: usize, opts: ForwardOptions) -> Result<ForwardOutput> {
        let c = &self.config;
        if bound.len() != self.params.len() {
            return Err(Error::Invariant("bound parameter list does not match the model".into()));
        }
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::shape("model", format!("{} tokens do not split into {batch} rows", tokens.len())));
        }
        let seq = tokens.len() / batch;
        if seq > c.context_len {
            return Err(Error::shape("model", format!("window of {seq} exceeds context length {}", c.context_len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Data(format!("token id {bad} out of range for vocab {}", c.vocab_size)));
        }
        let v = |id: ParamId| bound[id.0];
        let shape = AttentionShape {
            batch,
            seq,
            n_query_heads: c.n_query_heads,
            n_kv_heads: c.n_kv_heads,
            head_dim: c.head_dim(),
            context_len: c.context_len,
            rope_base: c.rope_base,
        };
        let site = DropoutSite { p: c.dropout_p, train: opts.train, key: opts.dropout_key };

        let mut x = tape.embedding(v(self.embedding), tokens)?;
        let mut moe = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let h = rmsnorm(tape, x, v(layer.attn_norm), c.rmsnorm_eps)?;
            let w = AttentionWeights { wq: v(layer.wq), wk: v(layer.wk), wv: v(layer.wv), wo: v(layer.wo) };
            let a = gqa_attention(tape, h, &w, &shape, site.child(&[l as u64, 0]))?;
            x = tape.add(x, a)?;

            let h = rmsnorm(tape, x, v(layer.ffn_norm), c.rmsnorm_eps)?;
            let f = match &layer.ffn {
                FfnParams::Dense { w_gate, w_up, w_down } => swiglu_ffn(tape, h, v(*w_gate), v(*w_up), v(*w_down))?,
                FfnParams::Moe { router, w_gate, w_up, w_down } => {
                    let cfg = c.moe.as_ref().expect("moe layer without moe config");
                    let experts = ExpertWeights { w_gate: v(*w_gate), w_up: v(*w_up), w_down: v(*w_down) };
                    let path = opts.dispatch.unwrap_or(cfg.dispatch_path);
                    let out = moe_forward(tape, h, v(*router), &experts, cfg, path)?;
                    moe.push(MoeAux { decision: out.decision, balance: out.balance, z: out.z });
                    out.output
                }
            };
            let ds = site.child(&[l as u64, 1]);
            let f = tape.dropout(f, ds.p, ds.train, ds.key)?;
            x = tape.add(x, f)?;
        }
        let h = rmsnorm(tape, x, v(self.final_norm), c.rmsnorm_eps)?;
        let out_proj = tape.transpose(v(self.embedding), 0, 1)?;
        let logits = tape.matmul(h, out_proj)?;
        Ok(ForwardOutput { logits, moe })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn micro(moe: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 50,
            d_model: 16,
            n_layers: 2,
            n_query_heads: 4,
            n_kv_heads: 2,
            head_dim: None,
            context_len: 16,
            ffn_hidden: if moe { None } else { Some(24) },
            moe: moe.then(|| MoEConfig { n_experts: 4, top_k: 2, expert_hidden: 12, lambda_bal: 1e-2, lambda_z: 1e-3, dispatch_path: DispatchPath::Stacked }),
            dropout_p: 0.1,
            rmsnorm_eps: 1e-5,
            rope_base: 10_000.0,
            tied_embeddings: true,
            linear_bias: false,
        }
    }

    fn logits(model: &DecoderModel<f64>, tokens: &[usize], opts: ForwardOptions) -> Tensor<f64> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let out = model.forward(&mut tape, &bound, tokens, 1, opts).unwrap();
        tape.value(out.logits).clone()
    }

    #[test]
    fn logits_shape_and_moe_aux_per_layer() {
        let model = DecoderModel::<f32>::new(micro(true), 1).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let out = model.forward(&mut tape, &bound, &[1, 2, 3, 4, 5, 6], 2, ForwardOptions::eval()).unwrap();
        assert_eq!(tape.shape(out.logits), &[6, 50]);
        assert_eq!(out.moe.len(), 2);
        assert_eq!(out.moe[0].decision.n_tokens(), 6);
    }

    #[test]
    fn causal_perturbation_leaves_prefix_logits_unchanged() {
        for moe in [false, true] {
            let model = DecoderModel::<f64>::new(micro(moe), 2).unwrap();
            let a = logits(&model, &[3, 9, 14, 1, 7, 7, 2], ForwardOptions::eval());
            let b = logits(&model, &[3, 9, 14, 1, 40, 0, 33], ForwardOptions::eval());
            assert_eq!(a.data()[..4 * 50], b.data()[..4 * 50]);
            assert_ne!(a.data()[4 * 50..], b.data()[4 * 50..]);
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_dropout_only_in_train() {
        let model = DecoderModel::<f64>::new(micro(false), 3).unwrap();
        let toks = [4, 8, 15, 16, 23, 42];
        assert_eq!(logits(&model, &toks, ForwardOptions::eval()), logits(&model, &toks, ForwardOptions::eval()));
        let t1 = logits(&model, &toks, ForwardOptions::train(99));
        assert_eq!(t1, logits(&model, &toks, ForwardOptions::train(99)));
        assert_ne!(t1, logits(&model, &toks, ForwardOptions::eval()));
    }

    #[test]
    fn out_of_vocab_and_overlong_windows_are_rejected() {
        let model = DecoderModel::<f32>::new(micro(false), 4).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        assert!(model.forward(&mut tape, &bound, &[1, 50], 1, ForwardOptions::eval()).is_err());
        let long: Vec<usize> = (0..17).collect();
        assert!(model.forward(&mut tape, &bound, &long, 1, ForwardOptions::eval()).is_err());
    }

    #[test]
    fn no_parameter_is_a_bias() {
        let model = DecoderModel::<f32>::new(micro(true), 5).unwrap();
        for p in model.params().iter() {
            let is_gain = p.name.ends_with("norm");
            assert!(is_gain || p.value.ndim() >= 2, "{} looks like a bias", p.name);
        }
    }
}
