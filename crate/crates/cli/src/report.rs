//! CSV reports. Floats use the shortest representation that parses back to
//! the same `f64`.

use std::path::Path;

use hoca_core::bench::{RankRow, RankSummary, SpaceReport};
use hoca_core::captioner::EpochRecord;
use hoca_core::verify::SuiteReport;
use hoca_core::{HocaError, Result};

pub const CAPPED: &str = "CAPPED";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn csv_err(e: csv::Error) -> HocaError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HocaError::Io(io),
        other => HocaError::Format(format!("{other:?}")),
    }
}

/// Writes a header and rows of already formatted fields.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(false).from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    write_csv(
        path,
        &["epoch", "train_loss", "val_loss", "val_token_acc"],
        curve.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                fmt_f64(r.train_loss),
                fmt_f64(r.val_loss),
                fmt_f64(r.val_token_acc),
            ]
        }),
    )
}

pub fn write_space(path: &Path, reports: &[SpaceReport]) -> Result<()> {
    write_csv(
        path,
        &["mechanism", "n", "t", "d", "k", "counted", "predicted", "wall_ns"],
        reports.iter().map(|r| {
            vec![
                r.mechanism.to_string(),
                r.n().to_string(),
                r.t().to_string(),
                r.d.to_string(),
                r.k.to_string(),
                r.counted.map_or_else(|| CAPPED.into(), |c| c.to_string()),
                r.predicted.to_string(),
                match (r.capped(), r.wall_ns) {
                    (true, _) => CAPPED.into(),
                    (false, Some(w)) => w.to_string(),
                    (false, None) => String::new(),
                },
            ]
        }),
    )
}

pub fn write_rank_rows(path: &Path, rows: &[RankRow]) -> Result<()> {
    write_csv(
        path,
        &["rank", "seed", "val_loss", "val_token_acc"],
        rows.iter().map(|r| vec![r.rank.to_string(), r.seed.to_string(), fmt_f64(r.val_loss), fmt_f64(r.val_token_acc)]),
    )
}

pub fn write_rank_summary(path: &Path, rows: &[RankSummary]) -> Result<()> {
    write_csv(
        path,
        &["rank", "runs", "mean_acc", "min_acc", "max_acc"],
        rows.iter().map(|r| {
            vec![
                r.rank.to_string(),
                r.runs.to_string(),
                fmt_f64(r.mean_acc),
                fmt_f64(r.min_acc),
                fmt_f64(r.max_acc),
            ]
        }),
    )
}

pub fn write_suites(path: &Path, reports: &[SuiteReport]) -> Result<()> {
    write_csv(
        path,
        &["suite", "cases", "max_error", "tolerance", "passed"],
        reports.iter().map(|r| {
            vec![
                r.suite.to_string(),
                r.cases.to_string(),
                fmt_f64(r.max_error),
                fmt_f64(r.tolerance),
                r.passed().to_string(),
            ]
        }),
    )
}
