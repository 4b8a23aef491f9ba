use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const METRICS_HEADER: &str = "# rsir-metrics v1";
pub const TIMING_HEADER: &str = "# rsir-timing v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// One epoch's result on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    pub lr: f64,
    /// Not reproducible, so kept out of metrics.csv and checkpoints.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Serialize)]
struct TimingRow {
    epoch: usize,
    split: Split,
    wall_seconds: f64,
}

fn write_csv<R: Serialize>(path: &Path, header: &str, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{header}")?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Write `metrics.csv` (deterministic columns) and `timing.csv` into `dir`.
pub fn write_metrics(dir: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_csv(&dir.join("metrics.csv"), METRICS_HEADER, rows)?;
    write_csv(
        &dir.join("timing.csv"),
        TIMING_HEADER,
        rows.iter().map(|r| TimingRow {
            epoch: r.epoch,
            split: r.split,
            wall_seconds: r.wall_seconds,
        }),
    )
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
