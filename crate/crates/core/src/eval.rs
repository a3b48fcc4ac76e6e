//! Prediction-error evaluation: mean squared error over the metric feature
//! dimensions at chosen horizons, in raw (denormalized) and normalized
//! coordinates, plus a constant-velocity extrapolation baseline for
//! position/velocity data.

use std::collections::BTreeMap;

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::model::{Model, PredictMode};
use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct MseReport {
    /// horizon (1-based predicted step) -> MSE in raw coordinates.
    pub raw: BTreeMap<usize, f64>,
    /// horizon -> MSE in normalized coordinates.
    pub normalized: BTreeMap<usize, f64>,
    pub samples: usize,
}

/// Accumulate squared errors of `predicted` (raw [t][n][d] rows) against a
/// sample's target frames.
struct MseAccum {
    raw: Vec<f64>,
    norm: Vec<f64>,
    count: Vec<f64>,
}

impl MseAccum {
    fn new(h: usize) -> Self {
        MseAccum {
            raw: vec![0.0; h],
            norm: vec![0.0; h],
            count: vec![0.0; h],
        }
    }

    fn add(
        &mut self,
        dataset: &Dataset,
        sample: &Sample,
        predicted: &[Vec<f64>],
        horizons: &[usize],
    ) {
        let geo = &dataset.geometry;
        for (hi, &h) in horizons.iter().enumerate() {
            let t = geo.input_len + h - 1;
            for n in 0..geo.entities {
                for &d in &dataset.metric_dims {
                    let truth = sample.at(geo, t, n, d);
                    let pred = predicted[h - 1][n * geo.features + d];
                    let err = pred - truth;
                    self.raw[hi] += err * err;
                    let s = dataset.scale(n, d);
                    self.norm[hi] += (err / s) * (err / s);
                    self.count[hi] += 1.0;
                }
            }
        }
    }
}

/// Evaluate the model's prediction MSE on a split at the given horizons.
pub fn evaluate_mse<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    split: Split,
    horizons: &[usize],
    mode: PredictMode,
) -> Result<MseReport> {
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    if horizons.is_empty() {
        return Err(Error::InvalidArgument("need at least one horizon".into()));
    }
    for &h in horizons {
        if h == 0 || h > dataset.geometry.pred_len {
            return Err(Error::InvalidArgument(format!(
                "horizon {h} outside 1..={}",
                dataset.geometry.pred_len
            )));
        }
    }
    let padded = model.cfg.padded_entities();
    let mut acc = MseAccum::new(horizons.len());
    for sample in samples {
        let x = dataset.input_tensor::<T>(sample, padded);
        let frames = model.predict(&x, mode)?;
        let predicted = dataset.denormalize_frames(&frames);
        acc.add(dataset, sample, &predicted, horizons);
    }
    Ok(report_from(acc, horizons, samples.len()))
}

/// MSE of an arbitrary predictor closure (used for baselines).
pub fn evaluate_mse_of<F>(
    dataset: &Dataset,
    split: Split,
    horizons: &[usize],
    mut predictor: F,
) -> Result<MseReport>
where
    F: FnMut(&Sample) -> Vec<Vec<f64>>,
{
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut acc = MseAccum::new(horizons.len());
    for sample in samples {
        let predicted = predictor(sample);
        acc.add(dataset, sample, &predicted, horizons);
    }
    Ok(report_from(acc, horizons, samples.len()))
}

fn report_from(acc: MseAccum, horizons: &[usize], samples: usize) -> MseReport {
    let mut raw = BTreeMap::new();
    let mut normalized = BTreeMap::new();
    for (hi, &h) in horizons.iter().enumerate() {
        raw.insert(h, acc.raw[hi] / acc.count[hi]);
        normalized.insert(h, acc.norm[hi] / acc.count[hi]);
    }
    MseReport {
        raw,
        normalized,
        samples,
    }
}

/// Constant-velocity extrapolation from the last observed frame. Assumes
/// the 4-feature layout (x, y, vx, vy); velocities stay fixed, positions
/// integrate linearly, no wall handling.
pub fn constant_velocity_prediction(dataset: &Dataset, sample: &Sample, dt: f64) -> Vec<Vec<f64>> {
    let geo = &dataset.geometry;
    assert_eq!(
        geo.features, 4,
        "constant-velocity baseline needs (x,y,vx,vy)"
    );
    let t0 = geo.input_len - 1;
    (1..=geo.pred_len)
        .map(|h| {
            let mut row = vec![0.0; geo.frame_stride()];
            for n in 0..geo.entities {
                let (x, y) = (sample.at(geo, t0, n, 0), sample.at(geo, t0, n, 1));
                let (vx, vy) = (sample.at(geo, t0, n, 2), sample.at(geo, t0, n, 3));
                row[n * 4] = x + vx * dt * h as f64;
                row[n * 4 + 1] = y + vy * dt * h as f64;
                row[n * 4 + 2] = vx;
                row[n * 4 + 3] = vy;
            }
            row
        })
        .collect()
}
