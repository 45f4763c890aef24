use std::path::Path;

use serde::Serialize;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::harness::RunMetrics;

/// Column order of `metrics.csv`.
pub const METRICS_COLUMNS: [&str; 9] = [
    "step",
    "phase",
    "arm",
    "seed",
    "train_loss",
    "eval_loss",
    "lr",
    "max_load_ratio",
    "replica_divergence",
];

/// One `metrics.csv` line. Empty cells are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: String,
    pub arm: String,
    pub seed: u64,
    pub train_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub lr: Option<f64>,
    pub max_load_ratio: Option<f64>,
    pub replica_divergence: Option<f64>,
}

impl MetricsRow {
    fn bare(step: u64, phase: &str, m: &RunMetrics) -> Self {
        Self {
            step,
            phase: phase.to_string(),
            arm: m.label.clone(),
            seed: m.seed,
            train_loss: None,
            eval_loss: None,
            lr: None,
            max_load_ratio: None,
            replica_divergence: None,
        }
    }
}

/// Flattens a run into rows sorted by step.
///
/// Training rows carry the loss and learning rate of update `step`; `eval`
/// rows hold the eval loss after `step` updates; `pre_expand` and
/// `post_expand` hold the full eval loss around the expansion; `probe` rows
/// hold replica divergence after `step` updates.
pub fn metrics_rows(m: &RunMetrics) -> Vec<MetricsRow> {
    let mut rows = Vec::with_capacity(m.steps.len() + m.evals.len() + m.divergence.len() + 1);
    for s in &m.steps {
        rows.push(MetricsRow {
            train_loss: Some(s.loss),
            lr: Some(s.lr),
            max_load_ratio: Some(s.max_load_ratio),
            ..MetricsRow::bare(s.step, m.phase_of(s.step), m)
        });
    }
    if let Some(pre) = m.loss_pre {
        rows.push(MetricsRow {
            eval_loss: Some(pre),
            ..MetricsRow::bare(m.tau, "pre_expand", m)
        });
    }
    for e in &m.evals {
        let phase = if m.loss_post.is_some() && e.step == m.tau {
            "post_expand"
        } else {
            "eval"
        };
        rows.push(MetricsRow {
            eval_loss: Some(e.loss),
            ..MetricsRow::bare(e.step, phase, m)
        });
    }
    for p in &m.divergence {
        rows.push(MetricsRow {
            replica_divergence: Some(p.param_distance),
            ..MetricsRow::bare(p.step, "probe", m)
        });
    }
    rows.sort_by_key(|r| r.step);
    rows
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn metrics_csv<'a>(runs: impl IntoIterator<Item = &'a RunMetrics>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRICS_COLUMNS).map_err(csv_err)?;
    for m in runs {
        for row in metrics_rows(m) {
            w.serialize(row).map_err(csv_err)?;
        }
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

pub fn read_metrics_csv(bytes: &[u8]) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::InvalidInput(format!("unexpected metrics header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_metrics<'a>(path: &Path, runs: impl IntoIterator<Item = &'a RunMetrics>) -> Result<()> {
    write_atomic(path, &metrics_csv(runs)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}
