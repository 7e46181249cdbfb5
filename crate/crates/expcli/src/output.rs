//! Result files.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use outage_core::gaussmodel::CoordLayout;
use outage_core::localizer::{abs_corr_matrix, write_matrix_csv};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::runner::{FalseAlarmRow, MetricsRow, SweepRow};

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

/// Writes through a core writer into `dir/name` and returns the path.
pub fn write_with<F>(dir: &Path, name: &str, f: F) -> Result<PathBuf>
where
    F: FnOnce(&mut Vec<u8>) -> outage_core::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    let path = dir.join(name);
    write_bytes(&path, &buf)?;
    Ok(path)
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Invalid(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Invalid(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))
}

fn rows_from_csv<T: DeserializeOwned>(bytes: &[u8]) -> Result<Vec<T>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Invalid(format!("bad table: {e}")))
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    rows_to_csv(rows)
}

pub fn parse_metrics_csv(bytes: &[u8]) -> Result<Vec<MetricsRow>> {
    rows_from_csv(bytes)
}

pub fn false_alarm_csv(rows: &[FalseAlarmRow]) -> Result<Vec<u8>> {
    rows_to_csv(rows)
}

pub fn parse_false_alarm_csv(bytes: &[u8]) -> Result<Vec<FalseAlarmRow>> {
    rows_from_csv(bytes)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    rows_to_csv(rows)
}

pub fn parse_sweep_csv(bytes: &[u8]) -> Result<Vec<SweepRow>> {
    rows_from_csv(bytes)
}

/// Absolute-correlation heatmaps. Files are named `heatmap_<name>.csv`.
pub fn emit_heatmaps(
    dir: &Path,
    layout: &CoordLayout,
    floor: f64,
    matrices: &[(&str, &DMatrix<f64>)],
) -> Result<Vec<PathBuf>> {
    let buses = layout.buses();
    matrices
        .iter()
        .map(|(name, sigma)| {
            let m = abs_corr_matrix(sigma, layout, floor)?;
            write_with(dir, &format!("heatmap_{name}.csv"), |buf| write_matrix_csv(&m, &buses, buf))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use outage_core::detector::Mode;

    #[test]
    fn metrics_table_round_trips() {
        let rows = vec![
            MetricsRow {
                alpha: 1e-6,
                mode: Mode::KnownF,
                avg_delay: 0.25,
                delay_over_logalpha: 0.25 / 1e-6f64.ln().abs(),
                empirical_false_alarm: 0.0,
                bound: 0.4,
                bound_over_logalpha: 0.03,
                replications: 4,
                detected: 4,
                false_alarms: 0,
                missed: 0,
            },
            MetricsRow {
                alpha: 1e-2,
                mode: Mode::Adaptive,
                avg_delay: f64::NAN,
                delay_over_logalpha: f64::NAN,
                empirical_false_alarm: 0.5,
                bound: 1.0,
                bound_over_logalpha: 0.2,
                replications: 2,
                detected: 0,
                false_alarms: 1,
                missed: 1,
            },
        ];
        let bytes = metrics_csv(&rows).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("alpha,mode,avg_delay,"));
        assert!(text.contains("known_f") && text.contains("adaptive"));
        let back = parse_metrics_csv(&bytes).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].avg_delay.is_nan());
        assert_eq!(back[1].missed, 1);
    }
}
