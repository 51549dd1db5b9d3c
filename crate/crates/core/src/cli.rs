//! Command-line entry points. Every command prints a human-readable report on
//! stdout; `--json` switches to a machine-readable one where offered.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bench::{bench_dispatch, BenchShape};
use crate::budget::{count_params, match_budget, BudgetConstraints, BudgetTarget, ParamBreakdown};
use crate::config::{ExperimentConfig, ModelSection, TokenizerChoice};
use crate::data::{build_windows, split_train_val, synthetic_stories, token_stream, ByteTokenizer, Tokenizer, TokenWindowDataset, VocabTokenizer};
use crate::error::{Error, Result};
use crate::report::{export_curves, load_record, render_summary, routing_table, summarize_runs, ValSeries};
use crate::trainer::{evaluate, load_checkpoint, train_run, EvalPoint, RunOptions};

pub const TRAIN_FILE: &str = "train.bin";
pub const VAL_FILE: &str = "val.bin";
pub const DATA_INFO_FILE: &str = "data.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "tinymoe", version, about = "Small dense and mixture-of-experts language models: training, accounting and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize text files (or a generated corpus) into train/val window files.
    PrepareData(PrepareDataArgs),
    /// Train one run from an experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a window file.
    Eval(EvalArgs),
    /// Parameter breakdown of one or more configs.
    CountParams(CountParamsArgs),
    /// Find the dense width matching an MoE config's active or total count.
    MatchBudget(MatchBudgetArgs),
    /// Time naive, grouped and stacked expert dispatch.
    BenchDispatch(BenchDispatchArgs),
    /// Per-layer routing table of a finished run.
    Diagnose(DiagnoseArgs),
    /// Aligned validation curves and fairness gaps for the three model families.
    ExportCurves(ExportCurvesArgs),
    /// Mean and std of best validation loss over seeds, grouped by model.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Args)]
pub struct PrepareDataArgs {
    /// Experiment config whose `data` section provides defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input text files.
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    /// Generate this many synthetic stories instead of reading inputs.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub synthetic_seed: u64,
    /// Output directory (defaults to the config's data.dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub window_len: Option<usize>,
    #[arg(long)]
    pub train_ratio: Option<f64>,
    #[arg(long)]
    pub shard_seed: Option<u64>,
    /// `byte`, or a path to a vocabulary file.
    #[arg(long)]
    pub tokenizer: Option<String>,
    /// String separating documents inside an input file.
    #[arg(long, default_value = "<|endoftext|>")]
    pub doc_delimiter: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory (defaults to `<output.dir>/seed-<seed>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps without changing the schedule.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Skip routing diagnostics at evaluation time.
    #[arg(long)]
    pub no_diagnostics: bool,
    /// Suppress per-evaluation progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Window file to evaluate on.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long)]
    pub max_batches: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct CountParamsArgs {
    #[arg(long = "config", required = true)]
    pub configs: Vec<PathBuf>,
    /// Replace every config's vocabulary size.
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct MatchBudgetArgs {
    /// MoE experiment config to match against.
    #[arg(long)]
    pub config: PathBuf,
    /// `active` or `total`.
    #[arg(long)]
    pub target: BudgetTarget,
    /// Candidate head widths; the closest match over all of them wins,
    /// earlier values first on ties.
    #[arg(long = "head-dim", num_args = 1.., default_values_t = [32, 64])]
    pub head_dims: Vec<usize>,
    #[arg(long)]
    pub n_kv_heads: Option<usize>,
    #[arg(long, default_value_t = 3.5)]
    pub ffn_ratio_min: f64,
    #[arg(long, default_value_t = 4.5)]
    pub ffn_ratio_max: f64,
    #[arg(long, default_value_t = 32)]
    pub granularity: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchDispatchArgs {
    #[arg(long, default_value_t = 4096)]
    pub tokens: usize,
    #[arg(long, default_value_t = 256)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub experts: usize,
    #[arg(long, default_value_t = 1024)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub top_k: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Run directory containing record.json.
    #[arg(long)]
    pub run: PathBuf,
    /// Busiest-expert share above which a layer counts as collapsed.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExportCurvesArgs {
    /// Run directories of the dense active-match family.
    #[arg(long = "dense-active", required = true, num_args = 1..)]
    pub dense_active: Vec<PathBuf>,
    #[arg(long = "moe", required = true, num_args = 1..)]
    pub moe: Vec<PathBuf>,
    #[arg(long = "dense-total", required = true, num_args = 1..)]
    pub dense_total: Vec<PathBuf>,
    /// CSV destination; stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the full export (curves and per-run gaps) as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Run directories containing record.json.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    let out = match cli.command {
        Command::PrepareData(a) => prepare_data(&a)?,
        Command::Train(a) => train(&a)?,
        Command::Eval(a) => eval(&a)?,
        Command::CountParams(a) => count(&a)?,
        Command::MatchBudget(a) => matching(&a)?,
        Command::BenchDispatch(a) => bench(&a)?,
        Command::Diagnose(a) => routing_table(&load_record(&a.run)?, a.threshold)?,
        Command::ExportCurves(a) => curves(&a)?,
        Command::Summarize(a) => summarize(&a)?,
    };
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(out.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<S: Serialize>(v: &S) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn make_tokenizer(choice: &TokenizerChoice) -> Result<Box<dyn Tokenizer>> {
    Ok(match choice {
        TokenizerChoice::Byte => Box::new(ByteTokenizer),
        TokenizerChoice::Vocab(path) => Box::new(VocabTokenizer::from_file(path)?),
    })
}

#[derive(Serialize)]
struct DataInfo {
    source: String,
    tokenizer: TokenizerChoice,
    vocab_size: usize,
    window_len: usize,
    train_ratio: f64,
    shard_seed: u64,
    documents: usize,
    stream_tokens: usize,
    train_windows: usize,
    val_windows: usize,
    train_loss_tokens: u64,
    val_loss_tokens: u64,
}

fn prepare_data(a: &PrepareDataArgs) -> Result<String> {
    let cfg = a.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let data = cfg.as_ref().map(|c| &c.data);
    let out = a.out.clone().or_else(|| data.map(|d| d.dir.clone())).ok_or_else(|| Error::Config("--out or --config is required".into()))?;
    let window_len = a.window_len.or(data.map(|d| d.window_len)).unwrap_or(512);
    let ratio = a.train_ratio.or(data.map(|d| d.train_ratio)).unwrap_or(0.95);
    let shard_seed = a.shard_seed.or(data.map(|d| d.shard_seed)).unwrap_or(1337);
    let separate = data.is_none_or(|d| d.separate_documents);
    let choice = match a.tokenizer.as_deref() {
        Some("byte") => TokenizerChoice::Byte,
        Some(path) => TokenizerChoice::Vocab(path.into()),
        None => data.map_or(TokenizerChoice::Byte, |d| d.tokenizer.clone()),
    };
    let tokenizer = make_tokenizer(&choice)?;

    let (docs, source) = match (a.synthetic, a.inputs.is_empty()) {
        (Some(n), true) => (synthetic_stories(n, a.synthetic_seed), format!("synthetic:{n}:{}", a.synthetic_seed)),
        (None, false) => {
            let mut docs = Vec::new();
            for path in &a.inputs {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                docs.extend(text.split(a.doc_delimiter.as_str()).map(str::trim).filter(|d| !d.is_empty()).map(String::from));
            }
            (docs, a.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","))
        }
        (Some(_), false) => return Err(Error::Config("--synthetic and --input are mutually exclusive".into())),
        (None, true) => return Err(Error::Config("give --input files or --synthetic N".into())),
    };
    let stream = token_stream(&docs, tokenizer.as_ref(), separate);
    let all = build_windows(&stream, window_len, tokenizer.vocab_size())?;
    let (train, val) = split_train_val(&all, ratio, shard_seed)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    train.save(&out.join(TRAIN_FILE))?;
    val.save(&out.join(VAL_FILE))?;
    let info = DataInfo {
        source,
        tokenizer: choice,
        vocab_size: tokenizer.vocab_size(),
        window_len,
        train_ratio: ratio,
        shard_seed,
        documents: docs.len(),
        stream_tokens: stream.len(),
        train_windows: train.len(),
        val_windows: val.len(),
        train_loss_tokens: train.loss_tokens(),
        val_loss_tokens: val.loss_tokens(),
    };
    let json = to_json(&info)?;
    write_file(&out.join(DATA_INFO_FILE), json.as_bytes())?;
    Ok(json)
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    steps: usize,
    tokens: u64,
    best_step: Option<usize>,
    best_val_ce: Option<f64>,
    best_val_ppl: Option<f64>,
    evals: usize,
}

fn train(a: &TrainArgs) -> Result<String> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let out = a.out.clone().unwrap_or_else(|| cfg.output.dir.join(format!("seed-{}", cfg.train.seed)));
    let train_ds = TokenWindowDataset::load(&cfg.data.dir.join(TRAIN_FILE))?;
    let val_ds = TokenWindowDataset::load(&cfg.data.dir.join(VAL_FILE))?;
    let model_cfg = cfg.model_config();
    if train_ds.vocab_size != model_cfg.vocab_size {
        return Err(Error::Config(format!(
            "dataset vocabulary ({}) does not match model.vocab_size ({})",
            train_ds.vocab_size, model_cfg.vocab_size
        )));
    }
    if train_ds.window_len != cfg.data.window_len {
        return Err(Error::Config(format!("dataset windows hold {} tokens, data.window_len is {}", train_ds.window_len, cfg.data.window_len)));
    }
    write_file(&out.join(CONFIG_ECHO_FILE), cfg.to_toml()?.as_bytes())?;

    let opts = RunOptions {
        out_dir: Some(out.clone()),
        collect_diagnostics: cfg.output.collect_diagnostics && !a.no_diagnostics,
        resume: a.resume.clone(),
        stop_after: a.stop_after,
    };
    let quiet = a.quiet;
    let mut progress = |p: &EvalPoint| {
        if !quiet {
            eprintln!(
                "step {:>6}  tokens {:>11}  train {:.4}  val {:.4}  ppl {:.3}  lr {:.3e}{}",
                p.step,
                p.tokens,
                p.train.total,
                p.val_ce,
                p.val_ppl,
                p.lr,
                if p.epoch_end { "  (epoch end)" } else { "" }
            );
        }
    };
    let started = Instant::now();
    let outcome = train_run::<f32>(&model_cfg, &cfg.train, &train_ds, &val_ds, &opts, &mut progress)?;
    let r = &outcome.record;
    let summary = TrainSummary {
        seed: cfg.train.seed,
        steps: r.steps.len(),
        tokens: r.tokens,
        best_step: r.best.map(|b| b.step),
        best_val_ce: r.best.map(|b| b.val_ce),
        best_val_ppl: r.best.map(|b| b.val_ppl),
        evals: r.evals.len(),
    };
    let json = to_json(&summary)?;
    write_file(&out.join(SUMMARY_FILE), json.as_bytes())?;
    let mut s = String::new();
    let _ = writeln!(s, "run directory: {}", out.display());
    if let Some(b) = r.best {
        let _ = writeln!(s, "best val CE {:.4} (ppl {:.3}) at step {}", b.val_ce, b.val_ppl, b.step);
    }
    let _ = writeln!(s, "loss tokens {}, wall time {:.1}s", r.tokens, started.elapsed().as_secs_f64());
    Ok(s)
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    step: usize,
    data: String,
    val_ce: f64,
    val_ppl: f64,
    targets: u64,
    routing: Option<crate::diagnostics::RoutingDiagnostics>,
}

fn eval(a: &EvalArgs) -> Result<String> {
    let ck = load_checkpoint::<f32>(&a.checkpoint)?;
    let ds = TokenWindowDataset::load(&a.data)?;
    if ds.vocab_size != ck.model.config().vocab_size {
        return Err(Error::Config(format!("dataset vocabulary ({}) does not match the checkpoint's ({})", ds.vocab_size, ck.model.config().vocab_size)));
    }
    let res = evaluate(&ck.model, &ds, a.batch_size.max(1), a.max_batches, ck.model.config().is_moe())?;
    let report = EvalReport {
        checkpoint: a.checkpoint.display().to_string(),
        step: ck.state.step,
        data: a.data.display().to_string(),
        val_ce: res.ce,
        val_ppl: res.ppl,
        targets: res.targets,
        routing: res.routing,
    };
    if a.json {
        return to_json(&report);
    }
    let mut s = format!("step {}: CE {:.4}, perplexity {:.3} over {} targets\n", report.step, report.val_ce, report.val_ppl, report.targets);
    if let Some(r) = &report.routing {
        for (i, l) in r.layers.iter().enumerate() {
            let _ = writeln!(s, "L{i}: busiest {:.3}, entropy {:.3}, gate {:.3}, logz {:.3}", l.busiest_fraction, l.mean_entropy, l.mean_top_gate, l.mean_logz);
        }
    }
    Ok(s)
}

#[derive(Serialize)]
struct CountRow {
    config: String,
    #[serde(flatten)]
    counts: ParamBreakdown,
}

fn millions(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn count(a: &CountParamsArgs) -> Result<String> {
    let mut rows = Vec::new();
    for path in &a.configs {
        let mut m = ExperimentConfig::load(path)?.model_config();
        if let Some(v) = a.vocab {
            m.vocab_size = v;
        }
        rows.push(CountRow { config: path.display().to_string(), counts: count_params(&m)? });
    }
    if a.json {
        return to_json(&rows);
    }
    let mut s = String::new();
    let _ = writeln!(s, "{:<40} {:>10} {:>10} {:>10} {:>9} {:>10} {:>10}", "config", "embedding", "non-ffn", "ffn/expert", "router", "total", "active");
    for r in &rows {
        let c = &r.counts;
        let _ = writeln!(
            s,
            "{:<40} {:>10} {:>10} {:>10} {:>9} {:>10} {:>10}",
            r.config,
            millions(c.embedding),
            millions(c.non_ffn_blocks),
            millions(c.ffn_or_expert_total),
            c.router,
            millions(c.total),
            millions(c.active)
        );
    }
    for r in &rows {
        let c = &r.counts;
        let _ = writeln!(s, "{}: total {} active {}", r.config, c.total, c.active);
    }
    Ok(s)
}

#[derive(Serialize)]
struct MatchReport {
    target: BudgetTarget,
    target_count: u64,
    count: u64,
    relative_error: f64,
    model: ModelSection,
}

fn matching(a: &MatchBudgetArgs) -> Result<String> {
    let moe = ExperimentConfig::load(&a.config)?.model_config();
    if !moe.is_moe() {
        return Err(Error::Config(format!("{} is not an MoE config", a.config.display())));
    }
    let counts = count_params(&moe)?;
    let target_count = match a.target {
        BudgetTarget::Active => counts.active,
        BudgetTarget::Total => counts.total,
    };
    let mut best: Option<crate::budget::BudgetMatch> = None;
    let mut last_err = None;
    for &hd in &a.head_dims {
        let mut c = BudgetConstraints::new(moe.vocab_size, moe.n_layers, hd, a.n_kv_heads.unwrap_or(moe.n_kv_heads));
        c.context_len = moe.context_len;
        c.ffn_ratio_min = a.ffn_ratio_min;
        c.ffn_ratio_max = a.ffn_ratio_max;
        c.d_model_granularity = a.granularity;
        c.ffn_granularity = a.granularity;
        match match_budget(a.target, target_count, &c) {
            Ok(m) if best.as_ref().is_none_or(|b| m.relative_error < b.relative_error) => best = Some(m),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    let Some(mut m) = best else {
        return Err(last_err.unwrap_or_else(|| Error::Config("no head widths given".into())));
    };
    m.config.dropout_p = moe.dropout_p;
    m.config.rmsnorm_eps = moe.rmsnorm_eps;
    m.config.rope_base = moe.rope_base;
    m.config.tied_embeddings = moe.tied_embeddings;
    m.config.linear_bias = moe.linear_bias;
    let report = MatchReport { target: a.target, target_count, count: m.count, relative_error: m.relative_error, model: ModelSection::from(&m.config) };
    if a.json {
        return to_json(&report);
    }
    #[derive(Serialize)]
    struct Snippet<'a> {
        model: &'a ModelSection,
    }
    let toml = toml::to_string_pretty(&Snippet { model: &report.model }).map_err(|e| Error::Config(e.to_string()))?;
    Ok(format!(
        "target {:?} count {}: d_model {}, ffn_hidden {}, {} query heads -> {} ({:+.4}%)\n\n{toml}",
        a.target,
        target_count,
        m.config.d_model,
        m.config.ffn_hidden.unwrap_or(0),
        m.config.n_query_heads,
        m.count,
        100.0 * (m.count as f64 - target_count as f64) / target_count as f64
    ))
}

fn bench(a: &BenchDispatchArgs) -> Result<String> {
    let shape = BenchShape { tokens: a.tokens, d_model: a.d_model, n_experts: a.experts, expert_hidden: a.hidden, top_k: a.top_k };
    let r = bench_dispatch(&shape, a.repeats, a.seed)?;
    if a.json {
        return to_json(&r);
    }
    let mut s = format!(
        "{} tokens, d_model {}, {} experts x {}, top-{}, forward+backward, median of {}\n",
        shape.tokens, shape.d_model, shape.n_experts, shape.expert_hidden, shape.top_k, r.repeats
    );
    for p in &r.paths {
        let _ = writeln!(s, "{:<8} {:>10.0} tok/s", p.path.name(), p.tokens_per_s);
    }
    let _ = writeln!(s, "max deviation from naive {:.2e}", r.max_deviation);
    let _ = writeln!(s, "ordering: {}", r.ordering.iter().map(|p| p.name()).collect::<Vec<_>>().join(" > "));
    Ok(s)
}

fn curves(a: &ExportCurvesArgs) -> Result<String> {
    let load = |dirs: &[PathBuf]| dirs.iter().map(|d| ValSeries::from_run_dir(d)).collect::<Result<Vec<_>>>();
    let (da, moe, dt) = (load(&a.dense_active)?, load(&a.moe)?, load(&a.dense_total)?);
    let ex = export_curves([&da, &moe, &dt])?;
    if let Some(path) = &a.json {
        write_file(path, to_json(&ex)?.as_bytes())?;
    }
    match &a.out {
        Some(path) => {
            write_file(path, ex.to_csv().as_bytes())?;
            Ok(ex.render_gaps())
        }
        None => {
            eprint!("{}", ex.render_gaps());
            Ok(ex.to_csv())
        }
    }
}

fn summarize(a: &SummarizeArgs) -> Result<String> {
    let records = a.runs.iter().map(|d| load_record(d).map(|r| (d.clone(), r))).collect::<Result<Vec<_>>>()?;
    let rows = summarize_runs(&records)?;
    if a.json {
        to_json(&rows)
    } else {
        Ok(render_summary(&rows))
    }
}

