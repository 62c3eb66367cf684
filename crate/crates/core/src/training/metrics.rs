use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One optimizer step of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub task: String,
    /// Total objective: cross-entropy plus the weighted penalty.
    pub loss: f64,
    /// Unweighted orthogonality penalty; 0 when the phase has none.
    pub penalty: f64,
    pub mean_abs_tanh_gate: f64,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        out.push(rec.map_err(|e| Error::Parse {
            // header is line 1
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    read_rows(path)
}

/// Mean of `values`; NaN when empty.
pub fn window_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            MetricRow {
                step: 0,
                task: "copy".into(),
                loss: 3.25,
                penalty: 0.0,
                mean_abs_tanh_gate: 0.0,
            },
            MetricRow {
                step: 1,
                task: "shift+5".into(),
                loss: 0.1 + 0.2,
                penalty: 512.5,
                mean_abs_tanh_gate: 1e-3,
            },
        ];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,task,loss,penalty,mean_abs_tanh_gate\n"));
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    }

    #[test]
    fn bad_row_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "step,task,loss,penalty,mean_abs_tanh_gate\n0,a,1,0,0\nx,a,1,0,0\n").unwrap();
        assert!(matches!(read_metrics_csv(&path), Err(Error::Parse { line: 3, .. })));
    }
}
