use std::path::Path;

use serde::Serialize;

use crate::bench::BenchReport;
use crate::error::{Error, Result};
use crate::nn::EpochRecord;

fn write_rows<S: Serialize>(path: &Path, rows: &[S], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    // explicit header so that an empty table still names its columns
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Columns `epoch,loss,train_acc,eval_acc`; `eval_acc` is empty when no
/// evaluation set was given.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_rows(path, history, &["epoch", "loss", "train_acc", "eval_acc"])
}

/// One row per report, columns in [`BenchReport`] field order.
pub fn write_reports(path: &Path, reports: &[BenchReport]) -> Result<()> {
    write_rows(path, reports, BenchReport::COLUMNS)
}
