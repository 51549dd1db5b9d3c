//! Post-hoc reporting over finished runs: aligned validation curves with
//! fairness gaps, seed summaries and per-layer routing tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::budget::{fairness_gaps, mean_std, GapPoint};
use crate::diagnostics::{collapse_detector, DEFAULT_COLLAPSE_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{RunRecord, METRICS_FILE, RECORD_FILE};

/// Validation losses of one run at its evaluation checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValSeries {
    pub label: String,
    pub steps: Vec<usize>,
    pub tokens: Vec<u64>,
    pub val_ce: Vec<f64>,
}

#[derive(Deserialize)]
struct MetricsRow {
    step: usize,
    tokens: u64,
    split: String,
    ce: f64,
}

impl ValSeries {
    pub fn best(&self) -> f64 {
        self.val_ce.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Reads the `val` rows of a run directory's metrics file.
    pub fn from_run_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut s = ValSeries { label: dir.display().to_string(), steps: vec![], tokens: vec![], val_ce: vec![] };
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: MetricsRow =
                serde_json::from_str(line).map_err(|e| Error::Parse { path: path.clone(), message: format!("line {}: {e}", i + 1) })?;
            if row.split == "val" {
                s.steps.push(row.step);
                s.tokens.push(row.tokens);
                s.val_ce.push(row.ce);
            }
        }
        if s.steps.is_empty() {
            return Err(Error::Data(format!("{} has no validation rows", path.display())));
        }
        Ok(s)
    }
}

pub const FAMILIES: [&str; 3] = ["dense_active", "moe", "dense_total"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub tokens: u64,
    /// Per family, in `FAMILIES` order.
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub gap: GapPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedGap {
    pub label: String,
    pub best: [f64; 3],
    pub gap: GapPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveExport {
    pub runs_per_family: [usize; 3],
    pub rows: Vec<CurveRow>,
    /// Gaps between the families' mean best-validation losses.
    pub best_mean: [f64; 3],
    pub final_gap: GapPoint,
    /// Runs paired by position within each family; empty if counts differ.
    pub per_seed: Vec<SeedGap>,
    pub gap_mean: Option<GapPoint>,
    pub gap_std: Option<GapPoint>,
}

fn check_cadence(reference: &ValSeries, other: &ValSeries) -> Result<()> {
    if reference.steps != other.steps {
        let at = reference.steps.iter().zip(&other.steps).position(|(a, b)| a != b).unwrap_or(reference.steps.len().min(other.steps.len()));
        return Err(Error::Data(format!(
            "eval cadence mismatch between {} ({} evals) and {} ({} evals), first difference at eval {at}",
            reference.label,
            reference.steps.len(),
            other.label,
            other.steps.len()
        )));
    }
    Ok(())
}

/// Aligns the three families on their shared checkpoints and computes mean
/// and std curves, gap curves and per-seed best-value gaps.
pub fn export_curves(families: [&[ValSeries]; 3]) -> Result<CurveExport> {
    for (name, runs) in FAMILIES.iter().zip(families) {
        if runs.is_empty() {
            return Err(Error::Data(format!("no runs given for {name}")));
        }
    }
    let reference = &families[0][0];
    for run in families.iter().flat_map(|f| f.iter()) {
        check_cadence(reference, run)?;
    }
    let n = reference.steps.len();
    let stats = |f: &[ValSeries], i: usize| mean_std(&f.iter().map(|r| r.val_ce[i]).collect::<Vec<_>>());
    let mut mean = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut std = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (k, f) in families.iter().enumerate() {
        for i in 0..n {
            (mean[k][i], std[k][i]) = stats(f, i);
        }
    }
    let gaps = fairness_gaps(&mean[0], &mean[1], &mean[2])?;
    let rows = (0..n)
        .map(|i| CurveRow {
            step: reference.steps[i],
            tokens: reference.tokens[i],
            mean: [mean[0][i], mean[1][i], mean[2][i]],
            std: [std[0][i], std[1][i], std[2][i]],
            gap: gaps.per_checkpoint[i],
        })
        .collect();

    let best_mean = families.map(|f| mean_std(&f.iter().map(ValSeries::best).collect::<Vec<_>>()).0);
    let final_gap = GapPoint { active_gap: best_mean[0] - best_mean[1], total_gap: best_mean[1] - best_mean[2] };

    let paired = families[0].len() == families[1].len() && families[1].len() == families[2].len();
    let per_seed: Vec<SeedGap> = if paired {
        (0..families[0].len())
            .map(|i| {
                let best = families.map(|f| f[i].best());
                SeedGap { label: families[1][i].label.clone(), best, gap: GapPoint { active_gap: best[0] - best[1], total_gap: best[1] - best[2] } }
            })
            .collect()
    } else {
        Vec::new()
    };
    let (gap_mean, gap_std) = if per_seed.is_empty() {
        (None, None)
    } else {
        let a = mean_std(&per_seed.iter().map(|s| s.gap.active_gap).collect::<Vec<_>>());
        let t = mean_std(&per_seed.iter().map(|s| s.gap.total_gap).collect::<Vec<_>>());
        (Some(GapPoint { active_gap: a.0, total_gap: t.0 }), Some(GapPoint { active_gap: a.1, total_gap: t.1 }))
    };
    Ok(CurveExport { runs_per_family: families.map(|f| f.len()), rows, best_mean, final_gap, per_seed, gap_mean, gap_std })
}

impl CurveExport {
    /// CSV with one row per checkpoint. Std columns are left out when every
    /// family has a single run.
    pub fn to_csv(&self) -> String {
        let with_std = self.runs_per_family.iter().any(|&n| n > 1);
        let mut header = vec!["step".to_string(), "tokens".to_string()];
        for f in FAMILIES {
            header.push(format!("{f}_mean"));
            if with_std {
                header.push(format!("{f}_std"));
            }
        }
        header.extend(["active_gap".into(), "total_gap".into()]);
        let mut out = header.join(",");
        out.push('\n');
        for r in &self.rows {
            let mut cells = vec![r.step.to_string(), r.tokens.to_string()];
            for k in 0..3 {
                cells.push(format!("{:.6}", r.mean[k]));
                if with_std {
                    cells.push(format!("{:.6}", r.std[k]));
                }
            }
            cells.push(format!("{:.6}", r.gap.active_gap));
            cells.push(format!("{:.6}", r.gap.total_gap));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn render_gaps(&self) -> String {
        let mut s = String::new();
        if !self.per_seed.is_empty() {
            let _ = writeln!(s, "{:<28} {:>12} {:>12} {:>12} {:>11} {:>11}", "run", "dense_active", "moe", "dense_total", "active_gap", "total_gap");
            for p in &self.per_seed {
                let _ = writeln!(
                    s,
                    "{:<28} {:>12.4} {:>12.4} {:>12.4} {:>11.4} {:>11.4}",
                    short_label(&p.label),
                    p.best[0],
                    p.best[1],
                    p.best[2],
                    p.gap.active_gap,
                    p.gap.total_gap
                );
            }
        }
        let _ = writeln!(
            s,
            "best-val means: dense_active {:.4}, moe {:.4}, dense_total {:.4}",
            self.best_mean[0], self.best_mean[1], self.best_mean[2]
        );
        match (self.gap_mean, self.gap_std) {
            (Some(m), Some(sd)) if self.per_seed.len() > 1 => {
                let _ = writeln!(s, "active gap {:.4} ± {:.4}, total gap {:.4} ± {:.4}", m.active_gap, sd.active_gap, m.total_gap, sd.total_gap);
            }
            _ => {
                let _ = writeln!(s, "active gap {:.4}, total gap {:.4}", self.final_gap.active_gap, self.final_gap.total_gap);
            }
        }
        s
    }
}

fn short_label(label: &str) -> &str {
    let n = label.len();
    if n > 28 {
        &label[label.ceil_char_boundary(n - 28)..]
    } else {
        label
    }
}

/// One row of the seed summary: a model configuration and its runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub seeds: Vec<u64>,
    pub best_val: (f64, f64),
    pub perplexity: (f64, f64),
    pub tokens: u64,
}

pub fn describe_model(c: &ModelConfig) -> String {
    match &c.moe {
        Some(m) => format!(
            "moe d{} {}x{} top-{} (bal {:e}, z {:e})",
            c.d_model, m.n_experts, m.expert_hidden, m.top_k, m.lambda_bal, m.lambda_z
        ),
        None => format!("dense d{} ffn {}", c.d_model, c.ffn_hidden.unwrap_or(0)),
    }
}

/// Groups runs with identical model configurations and reports the mean and
/// sample std of their best validation loss and perplexity.
pub fn summarize_runs(records: &[(PathBuf, RunRecord)]) -> Result<Vec<SummaryRow>> {
    let mut groups: Vec<(ModelConfig, Vec<&(PathBuf, RunRecord)>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|g| g.0 == r.1.model) {
            Some(g) => g.1.push(r),
            None => groups.push((r.1.model.clone(), vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(model, runs)| {
            let best = runs
                .iter()
                .map(|(p, r)| r.best.map(|b| b.val_ce).ok_or_else(|| Error::Data(format!("{} has no evaluation", p.display()))))
                .collect::<Result<Vec<_>>>()?;
            let ppl: Vec<f64> = best.iter().map(|b| b.exp()).collect();
            Ok(SummaryRow {
                model: describe_model(&model),
                seeds: runs.iter().map(|r| r.1.train.seed).collect(),
                best_val: mean_std(&best),
                perplexity: mean_std(&ppl),
                tokens: runs.iter().map(|r| r.1.tokens).max().unwrap_or(0),
            })
        })
        .collect()
}

pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<44} {:>6} {:>20} {:>18} {:>14}", "model", "seeds", "best val loss", "perplexity", "tokens");
    for r in rows {
        let (loss, ppl) = if r.seeds.len() > 1 {
            (format!("{:.4} ± {:.4}", r.best_val.0, r.best_val.1), format!("{:.3} ± {:.3}", r.perplexity.0, r.perplexity.1))
        } else {
            (format!("{:.4}", r.best_val.0), format!("{:.3}", r.perplexity.0))
        };
        let _ = writeln!(s, "{:<44} {:>6} {:>20} {:>18} {:>14}", r.model, r.seeds.len(), loss, ppl, r.tokens);
    }
    s
}

pub fn load_record(dir: &Path) -> Result<RunRecord> {
    RunRecord::load(&dir.join(RECORD_FILE))
}

/// Per-layer routing table from a run's evaluations: last-eval entropy, top
/// gate, margin, busiest share and usage variance, plus the first-to-last
/// mean log-z trend and a collapse verdict.
pub fn routing_table(record: &RunRecord, threshold: Option<f64>) -> Result<String> {
    let series: Vec<_> = record.evals.iter().filter_map(|e| e.routing.clone().map(|r| (e.step, r))).collect();
    let (Some(first), Some(last)) = (series.first(), series.last()) else {
        return Err(Error::Data("run has no routing diagnostics (dense model or collection disabled)".into()));
    };
    let diags: Vec<_> = series.iter().map(|s| s.1.clone()).collect();
    let collapsed = collapse_detector(&diags[diags.len() - 1..], threshold.unwrap_or(DEFAULT_COLLAPSE_THRESHOLD));
    let mut s = String::new();
    let _ = writeln!(s, "routing at step {} (log-z trend from step {})", last.0, first.0);
    let _ = writeln!(
        s,
        "{:<6} {:>8} {:>7} {:>9} {:>8} {:>10} {:>18} {:>9}",
        "layer", "entropy", "gate", "margin", "busiest", "variance", "logz trend", "collapsed"
    );
    for (i, l) in last.1.layers.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:<6} {:>8.3} {:>7.3} {:>9.3} {:>8.3} {:>10.5} {:>18} {:>9}",
            format!("L{i}"),
            l.mean_entropy,
            l.mean_top_gate,
            l.mean_top1_top2_margin,
            l.busiest_fraction,
            l.usage_variance,
            format!("{:.3} -> {:.3}", first.1.layers[i].mean_logz, l.mean_logz),
            if collapsed[i] { "yes" } else { "no" }
        );
    }
    Ok(s)
}
