//! CSV output for run logs and ablation tables.

use std::path::Path;

use gfmn_core::trainer::{AblationReport, RunLog};

use crate::error::{write_atomic, IoError, Result};

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| IoError::Csv(e.into_error().into()))
}

pub fn runlog_csv(log: &RunLog) -> Result<Vec<u8>> {
    let mut w = writer();
    w.write_record(["step", "mean_term", "cov_term", "heldout_loss", "frechet", "wall_ms"])?;
    for r in &log.records {
        w.write_record([
            r.step.to_string(),
            r.mean_term.to_string(),
            r.cov_term.to_string(),
            cell(r.heldout_loss),
            cell(r.frechet),
            cell(r.wall_ms),
        ])?;
    }
    finish(w)
}

pub fn ablation_csv(report: &AblationReport) -> Result<Vec<u8>> {
    let mut w = writer();
    w.write_record(["layers", "final_loss", "frechet"])?;
    for r in &report.rows {
        w.write_record([r.layers.to_string(), r.final_loss.to_string(), cell(r.frechet)])?;
    }
    finish(w)
}

pub fn write_runlog(path: &Path, log: &RunLog) -> Result<()> {
    write_atomic(path, &runlog_csv(log)?)
}

pub fn write_ablation(path: &Path, report: &AblationReport) -> Result<()> {
    write_atomic(path, &ablation_csv(report)?)
}
