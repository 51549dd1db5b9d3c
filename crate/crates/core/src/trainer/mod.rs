//! Optimization loop: AdamW, warmup + cosine schedule, gradient accumulation
//! and clipping, periodic evaluation, best-validation checkpoints.

mod checkpoint;
mod optim;
mod run;
mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, BestVal, Checkpoint, TrainState, FORMAT_VERSION};
pub use optim::{clip_gradients, global_norm, AdamW};
pub use run::{
    evaluate, train_run, EvalPoint, EvalResult, RunOptions, RunOutcome, RunRecord, StepLog, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE,
    RECORD_FILE, TIMING_FILE,
};
pub use schedule::{lr_at, TrainConfig, FULL_DATA_STEPS};

use serde::{Deserialize, Serialize};

use crate::budget::mean_std;
use crate::error::{Error, Result};

/// Per-seed best validation losses with their mean and sample std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize_seeds(records: &[RunRecord]) -> Result<SeedSummary> {
    let per_seed = records
        .iter()
        .map(|r| r.best.map(|b| (r.train.seed, b.val_ce)).ok_or_else(|| Error::Data(format!("run with seed {} has no evaluation", r.train.seed))))
        .collect::<Result<Vec<_>>>()?;
    if per_seed.is_empty() {
        return Err(Error::Data("no runs to summarize".into()));
    }
    let (mean, std) = mean_std(&per_seed.iter().map(|p| p.1).collect::<Vec<_>>());
    Ok(SeedSummary { per_seed, mean, std })
}
