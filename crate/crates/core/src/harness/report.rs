use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::shared::BaseRecord;
use super::{PipelineResult, SubjectAccuracy};
use crate::error::{Error, Result};

/// First epoch (0-based) whose validation accuracy reaches `frac` times the
/// best accuracy in the history; `None` if never reached.
pub fn convergence_epochs(val_acc: &[f64], frac: f64) -> Result<Option<usize>> {
    if val_acc.is_empty() {
        return Err(Error::invalid("empty history"));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::invalid(format!("threshold fraction {frac} outside (0, 1]")));
    }
    let best = val_acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let target = frac * best;
    Ok(val_acc.iter().position(|&a| a >= target))
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    pipeline: String,
    subject: u32,
    accuracy: f64,
}

/// Long format: one `pipeline,subject,accuracy` row per result entry.
pub fn write_results_csv(results: &[PipelineResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    for r in results {
        for s in &r.per_subject {
            w.serialize(CsvRow {
                pipeline: r.pipeline.clone(),
                subject: s.subject,
                accuracy: s.accuracy,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Inverse of [`write_results_csv`]; pipelines keep first-appearance order.
pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<PipelineResult>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    let mut out: Vec<PipelineResult> = Vec::new();
    for row in rdr.deserialize() {
        let row: CsvRow = row?;
        if !(0.0..=1.0).contains(&row.accuracy) {
            return Err(Error::Format(format!(
                "accuracy {} for {} / {} outside [0, 1]",
                row.accuracy, row.pipeline, row.subject
            )));
        }
        let idx = match out.iter().position(|r| r.pipeline == row.pipeline) {
            Some(i) => i,
            None => {
                out.push(PipelineResult {
                    pipeline: row.pipeline.clone(),
                    dataset: String::new(),
                    seed: 0,
                    config_hash: String::new(),
                    per_subject: Vec::new(),
                    missing: Vec::new(),
                });
                out.len() - 1
            }
        };
        if out[idx].per_subject.iter().any(|s| s.subject == row.subject) {
            return Err(Error::Format(format!("duplicate row for {} / {}", row.pipeline, row.subject)));
        }
        out[idx].per_subject.push(SubjectAccuracy {
            subject: row.subject,
            accuracy: row.accuracy,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub pipeline: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single subject.
    pub std: f64,
}

pub fn summarize(results: &[PipelineResult]) -> Vec<PipelineSummary> {
    results
        .iter()
        .filter(|r| !r.per_subject.is_empty())
        .map(|r| {
            let a = r.accuracies();
            let n = a.len();
            let mean = a.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            PipelineSummary {
                pipeline: r.pipeline.clone(),
                n,
                mean,
                std,
            }
        })
        .collect()
}

/// `target,source,epoch,train_loss,val_loss,val_acc` rows.
pub fn learning_curves_csv(bases: &[BaseRecord]) -> String {
    let mut s = String::from("target,source,epoch,train_loss,val_loss,val_acc\n");
    for b in bases {
        let h = &b.history;
        for e in 0..h.epochs_run() {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                b.target,
                b.source.name(),
                e,
                h.train_loss[e],
                h.val_loss[e],
                h.val_acc[e]
            )
            .expect("writing to a String");
        }
    }
    s
}
