//! Datasets of (input window, target window) trajectory samples.
//!
//! Samples store raw (unnormalized) frames. Normalization uses per-dimension
//! max-absolute scales computed on the training split only; the entity axis
//! is zero-padded up to the squeeze factor when samples are tensorized for
//! the model. Metrics always run on real entities in raw coordinates.
//!
//! On disk a dataset is a directory: `manifest.json` plus one CSV per split
//! with the fixed column order `sample,frame,particle,<features...>`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub input_len: usize,
    pub pred_len: usize,
    pub entities: usize,
    pub features: usize,
}

impl Geometry {
    pub fn total_len(&self) -> usize {
        self.input_len + self.pred_len
    }

    pub fn frame_stride(&self) -> usize {
        self.entities * self.features
    }
}

/// One trajectory: `total_len` frames of `entities x features` raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Row-major [t][n][d].
    pub frames: Vec<f64>,
}

impl Sample {
    pub fn at(&self, geo: &Geometry, t: usize, n: usize, d: usize) -> f64 {
        self.frames[(t * geo.entities + n) * geo.features + d]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub geometry: Geometry,
    /// Per-(entity, feature) max-abs scale from the training split.
    pub scales: Vec<f64>,
    /// Feature indices entering the error metrics (e.g. positions only).
    pub metric_dims: Vec<usize>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Free-form provenance block copied into manifests.
    pub source: DatasetSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Simulation { config: crate::simulator::SimConfig },
    Series { columns: Vec<String>, stride: usize },
}

impl Dataset {
    pub fn split(&self, which: Split) -> &[Sample] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn scale(&self, n: usize, d: usize) -> f64 {
        self.scales[n * self.geometry.features + d]
    }

    pub fn normalize(&self, v: f64, n: usize, d: usize) -> f64 {
        v / self.scale(n, d)
    }

    pub fn denormalize(&self, v: f64, n: usize, d: usize) -> f64 {
        v * self.scale(n, d)
    }

    /// Model input tensor [D, U, M] (normalized, entity axis padded).
    pub fn input_tensor<T: Real>(&self, sample: &Sample, padded_entities: usize) -> Tensor<T> {
        let geo = &self.geometry;
        Tensor::from_fn(&[geo.features, geo.input_len, padded_entities], |i| {
            let n = i % padded_entities;
            let t = (i / padded_entities) % geo.input_len;
            let d = i / (padded_entities * geo.input_len);
            if n < geo.entities {
                T::from_f64(self.normalize(sample.at(geo, t, n, d), n, d))
            } else {
                T::zero()
            }
        })
    }

    /// Target frames, each [D, 1, M] (normalized, padded).
    pub fn target_frames<T: Real>(
        &self,
        sample: &Sample,
        padded_entities: usize,
    ) -> Vec<Tensor<T>> {
        let geo = &self.geometry;
        (0..geo.pred_len)
            .map(|t| {
                Tensor::from_fn(&[geo.features, 1, padded_entities], |i| {
                    let n = i % padded_entities;
                    let d = i / padded_entities;
                    if n < geo.entities {
                        T::from_f64(self.normalize(sample.at(geo, geo.input_len + t, n, d), n, d))
                    } else {
                        T::zero()
                    }
                })
            })
            .collect()
    }

    /// Map predicted frames [D, 1, M] back to raw [t][n][d] values, dropping
    /// the padding columns.
    pub fn denormalize_frames<T: Real>(&self, frames: &[Tensor<T>]) -> Vec<Vec<f64>> {
        let geo = &self.geometry;
        frames
            .iter()
            .map(|f| {
                let padded = f.shape()[2];
                let mut out = vec![0.0; geo.frame_stride()];
                for n in 0..geo.entities {
                    for d in 0..geo.features {
                        out[n * geo.features + d] =
                            self.denormalize(f.at(&[d, 0, n]).to_f64(), n, d);
                    }
                }
                debug_assert!(padded >= geo.entities);
                out
            })
            .collect()
    }
}

/// Per-(entity, feature) max-absolute-value scales, floored to avoid
/// division blow-ups on constant-zero dimensions.
pub fn normalize_stats(train: &[Sample], geo: &Geometry) -> Vec<f64> {
    let mut scales = vec![0.0f64; geo.entities * geo.features];
    for s in train {
        for t in 0..geo.total_len() {
            for n in 0..geo.entities {
                for d in 0..geo.features {
                    let v = s.at(geo, t, n, d).abs();
                    let slot = &mut scales[n * geo.features + d];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
    }
    for s in &mut scales {
        *s = s.max(SCALE_FLOOR);
    }
    scales
}

// ── on-disk format ──────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub counts: SplitCounts,
    pub geometry: Geometry,
    pub seed: u64,
    pub scales: Vec<f64>,
    pub metric_dims: Vec<usize>,
    pub columns: Vec<String>,
    pub source: DatasetSource,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

fn feature_columns(features: usize) -> Vec<String> {
    if features == 4 {
        vec!["x".into(), "y".into(), "vx".into(), "vy".into()]
    } else {
        (0..features).map(|d| format!("f{d}")).collect()
    }
}

pub fn save_dataset(dataset: &Dataset, seed: u64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let geo = dataset.geometry;
    let manifest = DatasetManifest {
        counts: SplitCounts {
            train: dataset.train.len(),
            val: dataset.val.len(),
            test: dataset.test.len(),
        },
        geometry: geo,
        seed,
        scales: dataset.scales.clone(),
        metric_dims: dataset.metric_dims.clone(),
        columns: ["sample", "frame", "particle"]
            .iter()
            .map(|s| s.to_string())
            .chain(feature_columns(geo.features))
            .collect(),
        source: dataset.source.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;

    for (name, samples) in [
        ("train", &dataset.train),
        ("val", &dataset.val),
        ("test", &dataset.test),
    ] {
        let mut out = String::new();
        out.push_str(&manifest.columns.join(","));
        out.push('\n');
        for (si, s) in samples.iter().enumerate() {
            for t in 0..geo.total_len() {
                for n in 0..geo.entities {
                    out.push_str(&format!("{si},{t},{n}"));
                    for d in 0..geo.features {
                        out.push_str(&format!(",{}", s.at(&geo, t, n, d)));
                    }
                    out.push('\n');
                }
            }
        }
        let mut f = std::fs::File::create(dir.join(format!("{name}.csv")))?;
        f.write_all(out.as_bytes())?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let json = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&json).map_err(|e| Error::Data(format!("manifest decode: {e}")))?;
    let geo = manifest.geometry;

    let read_split = |name: &str, count: usize| -> Result<Vec<Sample>> {
        let path = dir.join(format!("{name}.csv"));
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let stride = geo.frame_stride();
        let mut samples = vec![
            Sample {
                frames: vec![0.0; geo.total_len() * stride]
            };
            count
        ];
        for (row_idx, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("{name}.csv row {row_idx}: {e}")))?;
            if rec.len() != 3 + geo.features {
                return Err(Error::Data(format!(
                    "{name}.csv row {row_idx}: expected {} columns, found {}",
                    3 + geo.features,
                    rec.len()
                )));
            }
            let parse = |col: usize| -> Result<f64> {
                rec[col].trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "{name}.csv row {row_idx} column {col}: not a number: {:?}",
                        &rec[col]
                    ))
                })
            };
            let (si, t, n) = (parse(0)? as usize, parse(1)? as usize, parse(2)? as usize);
            if si >= count || t >= geo.total_len() || n >= geo.entities {
                return Err(Error::Data(format!(
                    "{name}.csv row {row_idx}: index out of range (sample {si}, frame {t}, particle {n})"
                )));
            }
            for d in 0..geo.features {
                samples[si].frames[(t * geo.entities + n) * geo.features + d] = parse(3 + d)?;
            }
        }
        Ok(samples)
    };

    Ok(Dataset {
        geometry: geo,
        scales: manifest.scales,
        metric_dims: manifest.metric_dims,
        train: read_split("train", manifest.counts.train)?,
        val: read_split("val", manifest.counts.val)?,
        test: read_split("test", manifest.counts.test)?,
        source: manifest.source,
    })
}
