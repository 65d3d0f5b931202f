//! Training metrics rows and their CSV serialization.

use crate::error::Result;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,phase,loss,accuracy,lr";

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.8}",
            row.epoch, row.phase, row.loss, row.accuracy, row.lr
        )
        .expect("writing to string cannot fail");
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_to_csv(rows))?;
    Ok(())
}
