//! Acceptance report: one PASS/FAIL line per criterion, then a hard assert.
//!
//! The behavioral criteria (5 to 8) train the bundled byte-level micro
//! configs on the built-in synthetic story corpus; expect a few minutes in
//! an optimized build.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinymoe::bench::{bench_dispatch, BenchShape};
use tinymoe::budget::{count_params, match_budget, BudgetConstraints, BudgetTarget};
use tinymoe::config::ExperimentConfig;
use tinymoe::data::{build_windows, split_train_val, synthetic_stories, token_stream, ByteTokenizer, Tokenizer, TokenWindowDataset};
use tinymoe::losses::{targets_per_window, total_objective};
use tinymoe::model::{DispatchPath, MoEConfig};
use tinymoe::moe::{dispatch, route_logits, ExpertAssignment, ExpertWeights};
use tinymoe::report::{export_curves, ValSeries};
use tinymoe::tensor::{Tape, Tensor};
use tinymoe::trainer::{lr_at, train_run, RunOptions, RunRecord, TrainConfig, FULL_DATA_STEPS, METRICS_FILE};


const SEEDS: [u64; 3] = [1337, 1338, 1339];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn bundled(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

struct Micro {
    train: TokenWindowDataset,
    val: TokenWindowDataset,
}

impl Micro {
    fn new(cfg: &ExperimentConfig) -> Self {
        let tok = ByteTokenizer;
        let stream = token_stream(&synthetic_stories(3000, 7), &tok, cfg.data.separate_documents);
        let all = build_windows(&stream, cfg.data.window_len, tok.vocab_size()).unwrap();
        let (train, val) = split_train_val(&all, cfg.data.train_ratio, cfg.data.shard_seed).unwrap();
        Self { train, val }
    }

    fn run(&self, cfg: &ExperimentConfig, seed: u64, out_dir: Option<PathBuf>) -> RunRecord {
        let mut train = cfg.train.clone();
        train.seed = seed;
        let opts = RunOptions { out_dir, collect_diagnostics: true, ..RunOptions::default() };
        train_run::<f32>(&cfg.model_config(), &train, &self.train, &self.val, &opts, &mut |_| {}).unwrap().record
    }
}

fn with_lambdas(mut cfg: ExperimentConfig, bal: f64, z: f64) -> ExperimentConfig {
    let moe = cfg.moe.as_mut().unwrap();
    moe.lambda_bal = bal;
    moe.lambda_z = z;
    cfg
}

fn final_layers(r: &RunRecord, f: impl Fn(&tinymoe::diagnostics::LayerDiagnostics) -> f64) -> Vec<f64> {
    r.evals.last().unwrap().routing.as_ref().unwrap().layers.iter().map(f).collect()
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn accounting() -> Verdict {
    let expect = [
        ["9.60", "0.99", "4.30", "14.89", "14.89"],
        ["7.68", "0.79", "12.58", "21.06", "14.77"],
        ["11.52", "1.58", "7.96", "21.06", "21.06"],
    ];
    let mut rows = Vec::new();
    for (name, e) in ["tinystories_dense_active.toml", "tinystories_moe.toml", "tinystories_dense_total.toml"].iter().zip(expect) {
        let c = count_params(&bundled(name).model_config()).unwrap();
        let cells = [c.embedding, c.non_ffn_blocks, c.ffn_or_expert_total, c.total, c.active].map(|n| format!("{:.2}", n as f64 / 1e6));
        if cells != e.map(String::from) {
            return verdict(false, format!("{name}: {cells:?}, expected {e:?}"));
        }
        rows.push(format!("{}/{}", cells[3], cells[4]));
    }
    verdict(true, format!("total/active {}", rows.join(", ")))
}

fn budget_recovery() -> Verdict {
    let moe = bundled("tinystories_moe.toml").model_config();
    let counts = count_params(&moe).unwrap();
    let search = |target, count, head_dim| {
        let mut c = BudgetConstraints::new(moe.vocab_size, moe.n_layers, head_dim, moe.n_kv_heads);
        c.context_len = moe.context_len;
        match_budget(target, count, &c).unwrap()
    };
    let a = search(BudgetTarget::Active, counts.active, 32);
    let t = search(BudgetTarget::Total, counts.total, 64);
    let got = [a.config.d_model, a.config.ffn_hidden.unwrap(), t.config.d_model, t.config.ffn_hidden.unwrap()];
    let pass = got == [320, 1120, 384, 1728] && a.relative_error < 0.01 && t.relative_error < 0.001;
    verdict(
        pass,
        format!(
            "active {}/{} ({:.2}%), total {}/{} ({:.3}%)",
            got[0],
            got[1],
            100.0 * a.relative_error,
            got[2],
            got[3],
            100.0 * t.relative_error
        ),
    )
}

fn dispatch_equivalence() -> Verdict {
    const TRIPLES: usize = 128;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut empty_buckets, mut skewed) = (0.0f64, 0, 0);
    for i in 0..TRIPLES {
        let (n, d, e, h) = (rng.random_range(1..64), rng.random_range(1..12), rng.random_range(1..8), rng.random_range(1..12));
        let k = rng.random_range(1..=e);
        // every fourth triple drives all tokens toward the last experts
        let skew = if i % 4 == 0 { 6.0 } else { rng.random_range(0.0..2.0) };
        let logits: Vec<f64> = (0..n * e).map(|j| rng.random_range(-1.0..1.0) + skew * (j % e) as f64).collect();
        let mut sample = |len: usize, scale: f64| -> Vec<f64> { (0..len).map(|_| rng.random_range(-scale..scale)).collect() };
        let x = sample(n * d, 1.0);
        let w = [sample(e * d * h, 0.5), sample(e * d * h, 0.5), sample(e * h * d, 0.5)];

        let decision = route_logits(&logits, e, k).unwrap();
        let plan = ExpertAssignment::from_decision(&decision).unwrap();
        empty_buckets += plan.tokens.iter().any(Vec::is_empty) as usize;
        skewed += (skew > 5.0) as usize;
        let outputs: Vec<Vec<f32>> = DispatchPath::ALL
            .iter()
            .map(|&path| {
                let mut t = Tape::<f32>::new();
                let xv = t.leaf(Tensor::from_f64(&[n, d], &x).unwrap(), false);
                let g = t.leaf(Tensor::from_f64(&[n, k], &decision.gates).unwrap(), false);
                let w_gate = t.leaf(Tensor::from_f64(&[e, d, h], &w[0]).unwrap(), false);
                let w_up = t.leaf(Tensor::from_f64(&[e, d, h], &w[1]).unwrap(), false);
                let w_down = t.leaf(Tensor::from_f64(&[e, h, d], &w[2]).unwrap(), false);
                let y = dispatch(&mut t, path, xv, g, &plan, &ExpertWeights { w_gate, w_up, w_down }).unwrap();
                t.value(y).data().to_vec()
            })
            .collect();
        for other in &outputs[1..] {
            let dev = other.iter().zip(&outputs[0]).map(|(&a, &b)| (a as f64 - b as f64).abs() / (b as f64).abs().max(1.0)).fold(0.0, f64::max);
            worst = worst.max(dev);
        }
    }
    verdict(
        worst < 1e-5,
        format!("{TRIPLES} triples ({skewed} skewed, {empty_buckets} with empty buckets), max rel deviation {worst:.2e}"),
    )
}

fn gradient_suite() -> Verdict {
    let suite: [(&str, fn()); 13] = [
        ("matmul", gradients::matmul_both_operands_and_broadcast),
        ("grouped_matmul", gradients::grouped_matmul_with_an_empty_group),
        ("binary", gradients::elementwise_binary_ops_with_broadcast),
        ("unary", gradients::unary_ops),
        ("reductions", gradients::reductions),
        ("indexing", gradients::indexing_ops),
        ("shape", gradients::shape_ops),
        ("model ops", gradients::model_specific_ops),
        ("rmsnorm", gradients::rmsnorm_block),
        ("rope+gqa", gradients::rope_gqa_attention_block),
        ("swiglu", gradients::swiglu_block),
        ("moe layer", gradients::moe_layer_with_stable_top_k),
        ("total objective", gradients::total_objective_through_the_whole_model),
    ];
    let failed: Vec<&str> = suite.iter().filter(|(_, f)| catch_unwind(AssertUnwindSafe(f)).is_err()).map(|(name, _)| *name).collect();
    if failed.is_empty() {
        verdict(true, format!("{} groups within 1e-5 relative (f64)", suite.len()))
    } else {
        verdict(false, format!("failed: {}", failed.join(", ")))
    }
}

fn objective_and_schedule() -> Verdict {
    let moe = MoEConfig { n_experts: 4, top_k: 2, expert_hidden: 8, lambda_bal: 1e-2, lambda_z: 1e-3, dispatch_path: DispatchPath::Grouped };
    let o = total_objective(2.5, &[(1.3, 4.2), (1.1, 3.9)], Some(&moe)).unwrap();
    let objective_ok = (o.total - (2.5 + 1e-2 * 2.4 + 1e-3 * 8.1)).abs() < 1e-6;

    let full = TrainConfig::with_steps(FULL_DATA_STEPS);
    let warm = full.warmup_steps();
    let lr_ok = lr_at(warm, &full).unwrap() == 3e-4 && lr_at(FULL_DATA_STEPS, &full).unwrap() == 3e-5;

    let per_step = 2 * 16 * targets_per_window(512) as u64;
    let corpus_ok = 834_322 * targets_per_window(512) as u64 == 426_338_542;
    verdict(
        objective_ok && lr_ok && corpus_ok && per_step == 16_352,
        format!("objective {objective_ok}, lr warmup end {warm} / final exact {lr_ok}, tokens/step {per_step}, corpus 834,322 windows -> {corpus_ok}"),
    )
}

/// Token counters of a real run at the full-scale batch, accumulation and window.
fn token_bookkeeping() -> Verdict {
    let tok = ByteTokenizer;
    let stream = token_stream(&synthetic_stories(300, 11), &tok, true);
    let all = build_windows(&stream, 512, tok.vocab_size()).unwrap();
    let (train, val) = split_train_val(&all, 0.9, 1337).unwrap();
    let mut model = bundled("micro_dense.toml").model_config();
    model.context_len = 512;
    model.d_model = 16;
    model.n_query_heads = 2;
    model.n_kv_heads = 1;
    model.ffn_hidden = Some(32);
    model.n_layers = 1;
    let mut c = TrainConfig::with_steps(3);
    c.eval_every = 3;
    c.eval_batches = Some(1);
    let r = train_run::<f32>(&model, &c, &train, &val, &RunOptions::default(), &mut |_| {}).unwrap().record;
    let ok = r.tokens == 3 * 2 * 16 * 511 && r.evals.iter().all(|e| e.tokens == e.step as u64 * 2 * 16 * 511);
    verdict(ok, format!("3 steps -> {} tokens", r.tokens))
}

/// Published gaps were computed before rounding the losses to four decimals,
/// so gaps recomputed from the rounded table can sit exactly 1e-4 away.
const GAP_TOL: f64 = 1e-4 + 1e-9;

fn gap_pipeline() -> Verdict {
    // best validation CE per family and seed: dense active, MoE, dense total
    let table = [(1337, [1.6554, 1.5774, 1.5615]), (1338, [1.6532, 1.5779, 1.5580]), (1339, [1.6551, 1.5811, 1.5629])];
    let expected_seed_gaps = [(0.0780, 0.0159), (0.0753, 0.0199), (0.0740, 0.0183)];
    let root = tempfile::tempdir().unwrap();
    let mut families: [Vec<ValSeries>; 3] = Default::default();
    for (seed, best) in table {
        for (f, &b) in best.iter().enumerate() {
            let dir = root.path().join(format!("f{f}-{seed}"));
            std::fs::create_dir_all(&dir).unwrap();
            let rows: Vec<String> = [(250, b + 0.9), (500, b + 0.05), (750, b), (1000, b + 0.002)]
                .iter()
                .map(|&(step, ce)| format!(r#"{{"step":{step},"tokens":{},"split":"val","ce":{ce}}}"#, step * 16352))
                .collect();
            std::fs::write(dir.join(METRICS_FILE), rows.join("\n") + "\n").unwrap();
            families[f].push(ValSeries::from_run_dir(&dir).unwrap());
        }
    }
    let ex = export_curves([&families[0], &families[1], &families[2]]).unwrap();
    let seeds_ok = ex.per_seed.len() == 3
        && ex.per_seed.iter().zip(expected_seed_gaps).all(|(s, (a, t))| (s.gap.active_gap - a).abs() < GAP_TOL && (s.gap.total_gap - t).abs() < GAP_TOL);
    let (m, s) = (ex.gap_mean.unwrap(), ex.gap_std.unwrap());
    let stats_ok = (m.active_gap - 0.0758).abs() < GAP_TOL
        && (s.active_gap - 0.0021).abs() < GAP_TOL
        && (m.total_gap - 0.0180).abs() < GAP_TOL
        && (s.total_gap - 0.0020).abs() < GAP_TOL;
    verdict(
        seeds_ok && stats_ok,
        format!(
            "seed 1337 {:.4}/{:.4}; active {:.4}±{:.4}, total {:.4}±{:.4}",
            ex.per_seed[0].gap.active_gap, ex.per_seed[0].gap.total_gap, m.active_gap, s.active_gap, m.total_gap, s.total_gap
        ),
    )
}

fn bench_ordering() -> Verdict {
    let r = bench_dispatch(&BenchShape::default(), 1, 0).unwrap();
    let [naive, grouped, stacked] = DispatchPath::ALL.map(|p| r.tokens_per_s(p));
    verdict(
        grouped >= naive && stacked >= naive && r.max_deviation < 1e-5,
        format!("tok/s naive {naive:.0}, grouped {grouped:.0}, stacked {stacked:.0}; deviation {:.1e}", r.max_deviation),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, Verdict)> = vec![
        (1, accounting()),
        (2, budget_recovery()),
        (3, dispatch_equivalence()),
        (4, gradient_suite()),
    ];

    let unbalanced = bundled("micro_top1_unbalanced.toml");
    let micro = Micro::new(&unbalanced);
    let ln_v = (unbalanced.model.vocab_size as f64).ln();
    let collapse: Vec<RunRecord> = SEEDS.iter().map(|&s| micro.run(&unbalanced, s, None)).collect();
    let stabilized_cfg = with_lambdas(unbalanced.clone(), 1e-2, 0.0);
    let stabilized: Vec<RunRecord> = SEEDS.iter().map(|&s| micro.run(&stabilized_cfg, s, None)).collect();

    let busiest: Vec<Vec<f64>> = collapse.iter().map(|r| final_layers(r, |l| l.busiest_fraction)).collect();
    let collapsed_seeds = busiest.iter().filter(|b| 2 * b.iter().filter(|&&f| f > 0.9).count() > b.len()).count();
    let detail: Vec<String> = busiest.iter().map(|b| fmt(b)).collect();
    results.push((5, verdict(collapsed_seeds >= 2, format!("busiest per layer {}; collapsed in {collapsed_seeds}/3 seeds", detail.join(" ")))));

    let busiest: Vec<Vec<f64>> = stabilized.iter().map(|r| final_layers(r, |l| l.busiest_fraction)).collect();
    let balanced_seeds = busiest.iter().filter(|b| b.iter().all(|&f| f <= 0.6)).count();
    let detail: Vec<String> = busiest.iter().map(|b| fmt(b)).collect();
    results.push((6, verdict(balanced_seeds == 3, format!("busiest per layer {}; balanced in {balanced_seeds}/3 seeds", detail.join(" ")))));

    let z_cfg = with_lambdas(unbalanced.clone(), 1e-2, 1e-3);
    let run_dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let with_z = micro.run(&z_cfg, SEEDS[0], Some(run_dirs[0].path().to_path_buf()));
    let twin = &stabilized[0];
    let (lz, lz0) = (final_layers(&with_z, |l| l.mean_logz), final_layers(twin, |l| l.mean_logz));
    let val = |r: &RunRecord| r.evals.last().unwrap().val_ce;
    let val_diff = (val(&with_z) - val(twin)).abs();
    results.push((
        7,
        verdict(
            lz.iter().zip(&lz0).all(|(a, b)| a < b) && val_diff < 0.05,
            format!("final logz {} vs {} without z-loss; val CE diff {val_diff:.4}", fmt(&lz), fmt(&lz0)),
        ),
    ));

    let again = micro.run(&z_cfg, SEEDS[0], Some(run_dirs[1].path().to_path_buf()));
    let metrics = |d: &tempfile::TempDir| std::fs::read(d.path().join(METRICS_FILE)).unwrap();
    let identical = metrics(&run_dirs[0]) == metrics(&run_dirs[1]) && with_z.loss_bits() == again.loss_bits();
    let all_runs: Vec<&RunRecord> = collapse.iter().chain(&stabilized).chain([&with_z]).collect();
    let start = all_runs.iter().map(|r| r.steps[0].loss.ce).fold(f64::NEG_INFINITY, f64::max);
    let worst_best = all_runs.iter().map(|r| r.best.unwrap().val_ce).fold(f64::NEG_INFINITY, f64::max);
    let descent = 1.0 - worst_best / ln_v;
    results.push((
        8,
        verdict(
            identical && descent >= 0.3 && (start - ln_v).abs() < 0.5,
            format!(
                "first-step CE <= {start:.3} (ln V = {ln_v:.3}), worst best val {worst_best:.3} ({:.0}% below ln V); metrics identical {identical}",
                100.0 * descent
            ),
        ),
    ));

    let objective = objective_and_schedule();
    let tokens = token_bookkeeping();
    let runs_ok = all_runs
        .iter()
        .flat_map(|r| &r.steps)
        .all(|s| (s.loss.total - (s.loss.ce + s.loss.lambda_bal * s.loss.bal + s.loss.lambda_z * s.loss.z)).abs() < 1e-6);
    results.push((
        9,
        verdict(objective.pass && tokens.pass && runs_ok, format!("{}; {}; logged totals consistent {runs_ok}", objective.detail, tokens.detail)),
    ));
    results.push((10, gap_pipeline()));
    results.push((11, bench_ordering()));

    // straight to the stdout handle: the harness only captures print! output,
    // so the report shows up in a plain `cargo test` log
    let mut out = std::io::stdout().lock();
    writeln!(out).unwrap();
    for (n, v) in &results {
        writeln!(out, "criterion {n:>2}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail).unwrap();
    }
    drop(out);
    let failed: Vec<usize> = results.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
