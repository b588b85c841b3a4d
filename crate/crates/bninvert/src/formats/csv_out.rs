//! CSV emitters for training metrics and synthesis loss traces.

use std::path::Path;

use bninvert_core::synthesis::LossBreakdown;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// `NaN` when no evaluation split was given.
    pub test_acc: f64,
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    })
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["epoch", "train_loss", "test_acc"])?;
    for r in rows {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.test_acc.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = || Error::format(path, format!("bad metrics row {:?}", rec));
        rows.push(MetricsRow {
            epoch: field(0).parse().map_err(|_| bad())?,
            train_loss: field(1).parse().map_err(|_| bad())?,
            test_acc: field(2).parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// One row per (batch, step); `traces` is indexed by batch.
pub fn write_trace(path: &Path, traces: &[Vec<LossBreakdown>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["batch", "step", "bn_mean", "bn_var", "ce", "total"])?;
    for (b, trace) in traces.iter().enumerate() {
        for (s, t) in trace.iter().enumerate() {
            w.write_record([
                b.to_string(),
                s.to_string(),
                t.bn_mean.to_string(),
                t.bn_var.to_string(),
                t.ce.to_string(),
                t.total.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
