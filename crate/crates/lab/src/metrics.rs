//! Run metrics and curve tables as plain JSON and CSV.

use std::path::Path;

use anyhow::{bail, Context, Result};
use comve_core::models::Task;
use comve_core::train::{CurveRow, EvalRecord, RunHistory};
use serde::Serialize;

use crate::io::write_json;

#[derive(Serialize)]
struct Metrics<'a> {
    task: Task,
    seed: u64,
    best_step: u64,
    best_dev_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_test_accuracy: Option<f64>,
    evals: &'a [EvalRecord],
}

/// Writes `metrics.json` and `history.csv` (one row per dev evaluation)
/// into `dir`.
pub fn emit_metrics(history: &RunHistory, task: Task, seed: u64, dir: &Path) -> Result<()> {
    if history.records.is_empty() {
        bail!(comve_core::Error::Input("run history has no evaluations".into()));
    }
    write_json(
        &dir.join("metrics.json"),
        &Metrics {
            task,
            seed,
            best_step: history.best_step,
            best_dev_accuracy: history.best_dev_accuracy,
            final_test_accuracy: history.final_test_accuracy,
            evals: &history.records,
        },
    )?;
    let path = dir.join("history.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["step", "train_loss", "dev_accuracy"])?;
    for r in &history.records {
        w.write_record([r.step.to_string(), r.train_loss.to_string(), r.dev_accuracy.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Learning-curve table with header `fraction,seed,variant,dev_accuracy`.
pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["fraction", "seed", "variant", "dev_accuracy"])?;
    for r in rows {
        w.write_record([
            r.fraction.to_string(),
            r.seed.to_string(),
            r.variant.as_str().to_string(),
            r.dev_accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
