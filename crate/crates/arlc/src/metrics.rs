//! Metrics rows and their CSV serialization. One row per (epoch, iteration);
//! fields never contain commas, so no escaping is needed.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::TrainReport;

pub const METRICS_HEADER: &str = "run,phase,epoch,iter,loss,kaizen,acc,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run: String,
    pub phase: u8,
    pub epoch: usize,
    pub iter: usize,
    pub loss: f64,
    pub kaizen: f64,
    pub acc: f64,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.4},{:.3}",
            self.run, self.phase, self.epoch, self.iter, self.loss, self.kaizen, self.acc,
            self.seconds
        )
    }
}

/// Expand a training report into rows. Unless `timing` is set the seconds
/// column is written as zero, keeping identically seeded runs byte-identical.
pub fn rows_from_report(run: &str, report: &TrainReport, timing: bool) -> Result<Vec<MetricsRow>> {
    if run.contains(',') {
        return Err(Error::Validation(format!(
            "run id {run:?} must not contain commas"
        )));
    }
    let mut rows = Vec::new();
    for epoch in &report.epochs {
        for (i, (&loss, &acc)) in epoch
            .mean_losses
            .iter()
            .zip(&epoch.test_accuracy)
            .enumerate()
        {
            rows.push(MetricsRow {
                run: run.to_string(),
                phase: epoch.phase,
                epoch: epoch.epoch,
                iter: i + 1,
                loss,
                kaizen: epoch.kaizen,
                acc,
                seconds: if timing { epoch.seconds } else { 0.0 },
            });
        }
    }
    Ok(rows)
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut body = String::from(METRICS_HEADER);
    body.push('\n');
    for row in rows {
        body.push_str(&row.to_csv());
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::EpochStats;

    #[test]
    fn rows_cover_every_epoch_iteration_pair() {
        let report = TrainReport {
            phase: 2,
            seed: 0,
            epochs: vec![EpochStats {
                phase: 2,
                epoch: 0,
                mean_losses: vec![0.5, 0.4],
                kaizen: 0.01,
                test_accuracy: vec![91.0, 92.5],
                seconds: 3.25,
            }],
        };
        let rows = rows_from_report("r1", &report, false).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].to_csv(), "r1,2,0,1,0.500000,0.010000,91.0000,0.000");
        assert_eq!(rows[1].iter, 2);
        let timed = rows_from_report("r1", &report, true).unwrap();
        assert!(timed[0].seconds > 0.0);
    }

    #[test]
    fn comma_in_run_id_is_rejected() {
        let report = TrainReport {
            phase: 1,
            seed: 0,
            epochs: vec![],
        };
        assert!(rows_from_report("a,b", &report, false).is_err());
    }
}
