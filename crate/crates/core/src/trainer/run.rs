use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iterator, TokenWindowDataset};
use crate::diagnostics::{collect, RoutingDiagnostics};
use crate::error::{Error, Result};
use crate::losses::{next_token_ce, perplexity, total_objective, total_objective_on_tape, ObjectiveBreakdown};
use crate::model::{DecoderModel, ForwardOptions, ModelConfig};
use crate::moe::RouterDecision;
use crate::tensor::{rng_key, Scalar, Tape, Tensor};

use super::checkpoint::{load_checkpoint, save_checkpoint, BestVal, TrainState};
use super::{clip_gradients, lr_at, AdamW, TrainConfig};

const INIT_TAG: u64 = 0x494e_4954;
const DROPOUT_TAG: u64 = 0x4452_4f50;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const RECORD_FILE: &str = "record.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: ObjectiveBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub epoch: u64,
    /// Loss-contributing tokens consumed so far.
    pub tokens: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub epoch_end: bool,
    /// Mean training objective over the steps since the previous point.
    pub train: ObjectiveBreakdown,
    pub val_ce: f64,
    pub val_ppl: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<RoutingDiagnostics>,
    pub tok_per_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalPoint>,
    pub best: Option<BestVal>,
    pub tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<usize>,
}

impl RunRecord {
    /// Bit patterns of every recorded loss; wall-clock fields are excluded.
    pub fn loss_bits(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for s in &self.steps {
            out.extend([s.loss.ce, s.loss.bal, s.loss.z, s.loss.total, s.grad_norm].map(f64::to_bits));
        }
        for e in &self.evals {
            out.extend([e.val_ce, e.train.total].map(f64::to_bits));
        }
        out
    }

    /// Running minimum of validation CE at each eval point.
    pub fn best_val_series(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.evals.iter().map(|e| { best = best.min(e.val_ce); best }).collect()
    }

    pub fn val_series(&self) -> Vec<(usize, f64)> {
        self.evals.iter().map(|e| (e.step, e.val_ce)).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.into(), message: e.to_string() })
    }
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    step: usize,
    tokens: u64,
    split: &'static str,
    ce: f64,
    ppl: f64,
    lr: f64,
    grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    bal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    routing: Option<&'a RoutingDiagnostics>,
    epoch_end: bool,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where metrics, the run record and checkpoints go; nothing is written
    /// when unset.
    pub out_dir: Option<PathBuf>,
    pub collect_diagnostics: bool,
    pub resume: Option<PathBuf>,
    /// Stop (and write `last.ckpt`) once this many optimizer steps are done.
    pub stop_after: Option<usize>,
}

pub struct RunOutcome<T> {
    pub record: RunRecord,
    pub model: DecoderModel<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub ce: f64,
    pub ppl: f64,
    pub targets: u64,
    pub routing: Option<RoutingDiagnostics>,
}

/// Validation cross-entropy with dropout off and no auxiliary terms, pooled
/// over every target position. Windows are read in stored order.
pub fn evaluate<T: Scalar>(
    model: &DecoderModel<T>,
    ds: &TokenWindowDataset,
    batch_size: usize,
    max_batches: Option<usize>,
    with_routing: bool,
) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let n_batches = ds.len().div_ceil(batch_size.max(1)).min(max_batches.unwrap_or(usize::MAX)).max(1);
    let mut sum = 0.0;
    let mut targets = 0u64;
    let mut per_layer: Vec<Vec<RouterDecision>> = Vec::new();
    for b in 0..n_batches {
        let idx: Vec<usize> = (b * batch_size..((b + 1) * batch_size).min(ds.len())).collect();
        let tokens = ds.gather(&idx);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let out = model.forward(&mut tape, &bound, &tokens, idx.len(), ForwardOptions::eval())?;
        let ce = next_token_ce(&mut tape, out.logits, &tokens, idx.len())?;
        let n = (idx.len() * (ds.window_len - 1)) as u64;
        sum += tape.value(ce).item()?.to_f64() * n as f64;
        targets += n;
        if with_routing {
            per_layer.resize_with(out.moe.len(), Vec::new);
            for (l, aux) in out.moe.into_iter().enumerate() {
                per_layer[l].push(aux.decision);
            }
        }
    }
    let routing = if with_routing && !per_layer.is_empty() {
        let merged = per_layer.iter().map(|parts| RouterDecision::concat(parts)).collect::<Result<Vec<_>>>()?;
        Some(collect(&merged)?)
    } else {
        None
    };
    let ce = sum / targets as f64;
    Ok(EvalResult { ce, ppl: perplexity(ce), targets, routing })
}

struct MicroResult<T> {
    grads: Vec<Tensor<T>>,
    loss: ObjectiveBreakdown,
}

fn micro_step<T: Scalar>(model: &DecoderModel<T>, tokens: &[usize], batch: usize, scale: f64, dropout_key: u64) -> Result<MicroResult<T>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let out = model.forward(&mut tape, &bound, tokens, batch, ForwardOptions::train(dropout_key))?;
    let ce = next_token_ce(&mut tape, out.logits, tokens, batch)?;
    let aux_vars: Vec<_> = out.moe.iter().map(|a| (a.balance, a.z)).collect();
    let total = total_objective_on_tape(&mut tape, ce, &aux_vars, model.config().moe.as_ref())?;
    let aux_vals = aux_vars
        .iter()
        .map(|&(b, z)| Ok((tape.value(b).item()?.to_f64(), tape.value(z).item()?.to_f64())))
        .collect::<Result<Vec<_>>>()?;
    let loss = total_objective(tape.value(ce).item()?.to_f64(), &aux_vals, model.config().moe.as_ref())?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss ({:?})", loss)));
    }
    let scaled = tape.scale(total, scale)?;
    tape.backward(scaled)?;
    let grads = bound
        .iter()
        .zip(model.params().iter())
        .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    Ok(MicroResult { grads, loss })
}

fn mean_breakdown(items: &[ObjectiveBreakdown]) -> ObjectiveBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = items.first().copied().unwrap_or_default();
    m.ce = items.iter().map(|b| b.ce).sum::<f64>() / n;
    m.bal = items.iter().map(|b| b.bal).sum::<f64>() / n;
    m.z = items.iter().map(|b| b.z).sum::<f64>() / n;
    m.total = items.iter().map(|b| b.total).sum::<f64>() / n;
    m
}

fn append_metrics(dir: &Path, p: &EvalPoint) -> Result<()> {
    let path = dir.join(METRICS_FILE);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    let train = MetricsLine {
        step: p.step,
        tokens: p.tokens,
        split: "train",
        ce: p.train.ce,
        ppl: perplexity(p.train.ce),
        lr: p.lr,
        grad_norm: p.grad_norm,
        bal: Some(p.train.bal),
        z: Some(p.train.z),
        total: Some(p.train.total),
        routing: None,
        epoch_end: p.epoch_end,
    };
    let val = MetricsLine { split: "val", ce: p.val_ce, ppl: p.val_ppl, bal: None, z: None, total: None, routing: p.routing.as_ref(), ..train };
    for line in [&train, &val] {
        let s = serde_json::to_string(line)?;
        writeln!(f, "{s}").map_err(|e| Error::io(&path, e))?;
    }
    // wall-clock numbers live apart so metrics files replay bit for bit
    let path = dir.join(TIMING_FILE);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{}", serde_json::json!({ "step": p.step, "tokens": p.tokens, "tok_per_s": p.tok_per_s })).map_err(|e| Error::io(&path, e))
}

/// Starts a run directory afresh, or on resume trims metrics and the previous
/// record back to the resumed step so the finished directory matches an
/// uninterrupted run.
fn reset_outputs(dir: &Path, resumed_from: Option<usize>) -> Result<(Vec<StepLog>, Vec<EvalPoint>)> {
    let Some(step) = resumed_from else {
        for name in [METRICS_FILE, TIMING_FILE, RECORD_FILE] {
            let path = dir.join(name);
            if path.exists() {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        return Ok((Vec::new(), Vec::new()));
    };
    #[derive(Deserialize)]
    struct StepOnly {
        step: usize,
    }
    for name in [METRICS_FILE, TIMING_FILE] {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut kept = String::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row: StepOnly = serde_json::from_str(line).map_err(|e| Error::Parse { path: path.clone(), message: e.to_string() })?;
            if row.step <= step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        std::fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(RECORD_FILE);
    if !path.exists() {
        return Ok((Vec::new(), Vec::new()));
    }
    let prev = RunRecord::load(&path)?;
    Ok((
        prev.steps.into_iter().filter(|s| s.step <= step).collect(),
        prev.evals.into_iter().filter(|e| e.step <= step).collect(),
    ))
}

/// Runs the optimization loop: `grad_accum` micro-batches per optimizer
/// step, global-norm clipping, AdamW on the warmup+cosine schedule, and
/// evaluation every `eval_every` steps, at each epoch end, and at the last
/// step. `on_eval` sees every evaluation point as it is recorded.
pub fn train_run<T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &TokenWindowDataset,
    val: &TokenWindowDataset,
    opts: &RunOptions,
    on_eval: &mut dyn FnMut(&EvalPoint),
) -> Result<RunOutcome<T>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    for ds in [train, val] {
        if ds.vocab_size > model_cfg.vocab_size {
            return Err(Error::Config(format!("dataset vocab {} exceeds model vocab {}", ds.vocab_size, model_cfg.vocab_size)));
        }
        if ds.window_len > model_cfg.context_len || ds.window_len < 2 {
            return Err(Error::Config(format!("window length {} must lie in 2..={}", ds.window_len, model_cfg.context_len)));
        }
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let (mut model, mut opt, mut state, resumed_from) = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint::<T>(path)?;
            if ck.model.config() != model_cfg {
                return Err(Error::Config("checkpoint model config differs from the requested one".into()));
            }
            if ck.train != *cfg {
                return Err(Error::Config("checkpoint train config differs from the requested one".into()));
            }
            let step = ck.state.step;
            (ck.model, ck.optimizer, ck.state, Some(step))
        }
        None => {
            let model = DecoderModel::<T>::new(model_cfg.clone(), rng_key(&[cfg.seed, INIT_TAG]))?;
            let opt = AdamW::new(model.params());
            (model, opt, TrainState::default(), None)
        }
    };

    let (steps, evals) = match &opts.out_dir {
        Some(dir) => reset_outputs(dir, resumed_from)?,
        None => (Vec::new(), Vec::new()),
    };
    let mut record = RunRecord {
        model: model_cfg.clone(),
        train: cfg.clone(),
        steps,
        evals,
        best: state.best,
        tokens: state.tokens,
        resumed_from,
    };
    let window_targets = (train.window_len - 1) as u64;
    let mut batches: Vec<Vec<usize>> = batch_iterator(train.len(), cfg.batch_size, cfg.seed, state.epoch).collect();
    let mut train_secs = 0.0;
    let mut tokens_since_eval = 0u64;
    let stop = opts.stop_after.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let checkpoint_ref = |dir: &Option<PathBuf>, best: &Option<BestVal>| match (dir, best) {
        (Some(d), Some(_)) => d.join(BEST_CHECKPOINT).display().to_string(),
        _ => "none".to_string(),
    };

    while state.step < stop {
        let started = Instant::now();
        let mut acc: Option<Vec<Tensor<T>>> = None;
        for micro in 0..cfg.grad_accum {
            let idx = &batches[state.batch_in_epoch];
            let tokens = train.gather(idx);
            let key = rng_key(&[cfg.seed, DROPOUT_TAG, state.step as u64, micro as u64]);
            let r = micro_step(&model, &tokens, idx.len(), 1.0 / cfg.grad_accum as f64, key).map_err(|e| match e {
                Error::NonFinite(reason) => Error::TrainingAborted {
                    step: state.step + 1,
                    reason: format!("non-finite {reason}"),
                    checkpoint: checkpoint_ref(&opts.out_dir, &state.best),
                },
                other => other,
            })?;
            state.pending.push(r.loss);
            let n = idx.len() as u64 * window_targets;
            state.tokens += n;
            tokens_since_eval += n;
            match acc.as_mut() {
                None => acc = Some(r.grads),
                Some(a) => {
                    for (x, g) in a.iter_mut().zip(&r.grads) {
                        x.data_mut().iter_mut().zip(g.data()).for_each(|(x, &g)| *x += g);
                    }
                }
            }
            state.batch_in_epoch += 1;
            if state.batch_in_epoch == batches.len() {
                state.epoch_end = true;
                state.epoch += 1;
                state.batch_in_epoch = 0;
                batches = batch_iterator(train.len(), cfg.batch_size, cfg.seed, state.epoch).collect();
            }
        }
        let mut grads = acc.expect("grad_accum >= 1");
        let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::TrainingAborted {
                step: state.step + 1,
                reason: "non-finite gradient norm".into(),
                checkpoint: checkpoint_ref(&opts.out_dir, &state.best),
            });
        }
        let lr = lr_at(state.step + 1, cfg)?;
        opt.step(model.params_mut(), &grads, lr, cfg)?;
        state.step += 1;
        train_secs += started.elapsed().as_secs_f64();
        record.steps.push(StepLog { step: state.step, lr, grad_norm, loss: mean_breakdown(&state.pending[state.pending.len() - cfg.grad_accum..]) });

        if state.step % cfg.eval_every == 0 || state.epoch_end || state.step == cfg.total_steps {
            let ev = evaluate(&model, val, cfg.batch_size, cfg.eval_batches, opts.collect_diagnostics)?;
            let point = EvalPoint {
                step: state.step,
                epoch: state.epoch,
                tokens: state.tokens,
                lr,
                grad_norm,
                epoch_end: state.epoch_end,
                train: mean_breakdown(&state.pending),
                val_ce: ev.ce,
                val_ppl: ev.ppl,
                routing: ev.routing,
                tok_per_s: if train_secs > 0.0 { tokens_since_eval as f64 / train_secs } else { 0.0 },
            };
            if !point.val_ce.is_finite() {
                return Err(Error::TrainingAborted {
                    step: state.step,
                    reason: "non-finite validation loss".into(),
                    checkpoint: checkpoint_ref(&opts.out_dir, &state.best),
                });
            }
            if state.best.is_none_or(|b| point.val_ce < b.val_ce) {
                state.best = Some(BestVal { step: state.step, val_ce: point.val_ce, val_ppl: point.val_ppl });
                if let Some(dir) = &opts.out_dir {
                    save_checkpoint(&dir.join(BEST_CHECKPOINT), &model, &opt, cfg, &state)?;
                }
            }
            if let Some(dir) = &opts.out_dir {
                append_metrics(dir, &point)?;
            }
            on_eval(&point);
            record.evals.push(point);
            state.pending.clear();
            train_secs = 0.0;
            tokens_since_eval = 0;
            state.epoch_end = false;
        }
    }
    record.best = state.best;
    record.tokens = state.tokens;
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&dir.join(LAST_CHECKPOINT), &model, &opt, cfg, &state)?;
        let path = dir.join(RECORD_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(RunOutcome { record, model })
}
