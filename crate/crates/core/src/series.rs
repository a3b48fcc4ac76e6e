//! Generic multivariate series ingestion: numeric CSV (rows = time,
//! columns = dimensions) cut into overlapping (input, target) windows by a
//! sliding stride. Window samples treat each column as a one-feature entity.

use std::path::Path;

use crate::data::{normalize_stats, Dataset, DatasetSource, Geometry, Sample};
use crate::error::{Error, Result};

/// Parsed series matrix plus column names.
#[derive(Debug, Clone)]
pub struct SeriesMatrix {
    pub columns: Vec<String>,
    /// Row-major [time][dimension].
    pub values: Vec<f64>,
}

impl SeriesMatrix {
    pub fn rows(&self) -> usize {
        if self.columns.is_empty() {
            0
        } else {
            self.values.len() / self.columns.len()
        }
    }

    pub fn at(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.columns.len() + d]
    }
}

/// Strict numeric CSV reader: first row headers, every later row the same
/// width, every cell a finite number. Errors carry row/column coordinates
/// (1-based, counting the header).
pub fn load_csv_series(path: &Path) -> Result<SeriesMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let columns: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if columns.is_empty() {
        return Err(Error::Data(format!("{}: no header row", path.display())));
    }
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let rec = rec.map_err(|e| Error::Data(format!("{} row {row}: {e}", path.display())))?;
        if rec.len() != columns.len() {
            return Err(Error::Data(format!(
                "{} row {row}: {} columns, header has {}",
                path.display(),
                rec.len(),
                columns.len()
            )));
        }
        for (c, field) in rec.iter().enumerate() {
            let trimmed = field.trim();
            if trimmed.is_empty() {
                return Err(Error::Data(format!(
                    "{} row {row} column {}: missing value",
                    path.display(),
                    c + 1
                )));
            }
            let v: f64 = trimmed.parse().map_err(|_| {
                Error::Data(format!(
                    "{} row {row} column {}: not a number: {trimmed:?}",
                    path.display(),
                    c + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{} row {row} column {}: non-finite value",
                    path.display(),
                    c + 1
                )));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok(SeriesMatrix { columns, values })
}

/// Write a series matrix back to CSV (full round-trip precision).
pub fn save_csv_series(series: &SeriesMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&series.columns.join(","));
    out.push('\n');
    for t in 0..series.rows() {
        let row: Vec<String> = (0..series.columns.len())
            .map(|d| format!("{}", series.at(t, d)))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Cut overlapping windows of length `input_len + pred_len` at the given
/// stride; each window splits at `input_len`.
pub fn window_sequences(
    series: &SeriesMatrix,
    input_len: usize,
    pred_len: usize,
    stride: usize,
) -> Result<Vec<Sample>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let window = input_len + pred_len;
    let rows = series.rows();
    if rows < window {
        return Err(Error::Data(format!(
            "series has {rows} rows, a window needs {window}"
        )));
    }
    let count = (rows - window) / stride + 1;
    let dims = series.columns.len();
    let mut samples = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        let mut frames = Vec::with_capacity(window * dims);
        for t in start..start + window {
            for d in 0..dims {
                frames.push(series.at(t, d));
            }
        }
        samples.push(Sample { frames });
    }
    Ok(samples)
}

/// Assemble a dataset from a series: windows split chronologically into
/// train/val/test by the given fractions; every column participates in the
/// metrics.
pub fn series_dataset(
    series: &SeriesMatrix,
    input_len: usize,
    pred_len: usize,
    stride: usize,
    val_fraction: f64,
    test_fraction: f64,
) -> Result<Dataset> {
    let samples = window_sequences(series, input_len, pred_len, stride)?;
    let n = samples.len();
    let n_test = ((n as f64 * test_fraction).round() as usize).min(n.saturating_sub(2));
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n - n_test - 1);
    let n_train = n - n_val - n_test;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Data(format!(
            "{n} windows cannot cover train/val/test (got {n_train}/{n_val}/{n_test}); \
             lower the stride or fractions"
        )));
    }
    let geometry = Geometry {
        input_len,
        pred_len,
        entities: series.columns.len(),
        features: 1,
    };
    let train: Vec<Sample> = samples[..n_train].to_vec();
    let scales = normalize_stats(&train, &geometry);
    Ok(Dataset {
        geometry,
        scales,
        metric_dims: vec![0],
        train,
        val: samples[n_train..n_train + n_val].to_vec(),
        test: samples[n_train + n_val..].to_vec(),
        source: DatasetSource::Series {
            columns: series.columns.clone(),
            stride,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_csv(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn loads_two_column_file() {
        let (_d, path) = write_csv("a,b\n1,2\n3,4\n5,6\n7,8\n9,10\n");
        let m = load_csv_series(&path).unwrap();
        assert_eq!(m.columns, vec!["a", "b"]);
        assert_eq!(m.rows(), 5);
        assert_eq!(m.at(4, 1), 10.0);
    }

    #[test]
    fn header_only_file_is_empty_dataset_error() {
        let (_d, path) = write_csv("a,b\n");
        let err = load_csv_series(&path).unwrap_err();
        assert!(err.to_string().contains("no data rows"));
    }

    #[test]
    fn ragged_and_non_numeric_rows_carry_coordinates() {
        let (_d, path) = write_csv("a,b\n1,2\n3\n");
        let err = load_csv_series(&path).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");

        let (_d, path) = write_csv("a,b\n1,2\n3,oops\n");
        let err = load_csv_series(&path).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("column 2"), "{err}");
    }

    #[test]
    fn roundtrip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let m = SeriesMatrix {
            columns: vec!["p".into(), "q".into()],
            values: vec![0.1, -1.0 / 3.0, 2.5e-13, 123456.789012345, 1.0, -0.0],
        };
        save_csv_series(&m, &path).unwrap();
        let back = load_csv_series(&path).unwrap();
        for (a, b) in m.values.iter().zip(&back.values) {
            let rel = (a - b).abs() / a.abs().max(1e-300);
            assert!(rel < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn window_counts() {
        let mk = |rows: usize| SeriesMatrix {
            columns: vec!["a".into()],
            values: (0..rows).map(|i| i as f64).collect(),
        };
        // 35 rows, U=10, V=25, stride 10: exactly one window
        assert_eq!(window_sequences(&mk(35), 10, 25, 10).unwrap().len(), 1);
        // 45 rows: two windows starting at 0 and 10
        let w = window_sequences(&mk(45), 10, 25, 10).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].frames[0], 0.0);
        assert_eq!(w[1].frames[0], 10.0);
        // too short
        assert!(window_sequences(&mk(30), 10, 25, 10).is_err());
    }

    /// Oracle: window contents equal direct slices of the source matrix.
    #[test]
    fn windows_match_direct_slicing() {
        let m = SeriesMatrix {
            columns: vec!["a".into(), "b".into()],
            values: (0..40).map(|i| (i as f64).sin()).collect(),
        };
        let samples = window_sequences(&m, 3, 4, 2).unwrap();
        for (w, s) in samples.iter().enumerate() {
            for t in 0..7 {
                for d in 0..2 {
                    assert_eq!(s.frames[t * 2 + d], m.at(w * 2 + t, d));
                }
            }
        }
    }

    #[test]
    fn dataset_split_is_chronological() {
        let m = SeriesMatrix {
            columns: vec!["a".into()],
            values: (0..100).map(|i| i as f64).collect(),
        };
        let ds = series_dataset(&m, 4, 4, 4, 0.2, 0.2).unwrap();
        assert!(!ds.train.is_empty() && !ds.val.is_empty() && !ds.test.is_empty());
        let last_train = ds.train.last().unwrap().frames[0];
        let first_val = ds.val[0].frames[0];
        assert!(last_train < first_val);
    }
}
