//! Command implementations. Everything here is a thin orchestration layer
//! over the library: parse/validate configuration, dispatch on precision,
//! move files around, print tables.

use std::path::{Path, PathBuf};

use trajflow::checkpoint;
use trajflow::data::{load_dataset, save_dataset, Dataset, DatasetSource, Split};
use trajflow::error::{Error, Result};
use trajflow::eval::evaluate_mse;
use trajflow::model::{Model, PredictMode};
use trajflow::series::{load_csv_series, series_dataset};
use trajflow::simulator::generate_dataset;
use trajflow::train::{train, TrainOptions};
use trajflow::verify as vf;
use trajflow::{ModelConfig, Precision, Real};

use crate::plot::plot_svg;
use crate::run_config::RunConfig;

/// Reference magnitudes reported for the three-particle task in the
/// published comparison; printed for context next to measured numbers.
pub const REFERENCE_MSE: [(usize, f64); 3] = [(1, 1.55e-5), (15, 2.88e-4), (25, 4.32e-4)];

pub fn simulate(config: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let dataset = generate_dataset(
        &config.sim,
        config.model.input_len,
        config.model.pred_len,
        config.data.n_train,
        config.data.n_val,
        config.data.n_test,
        seed,
    )?;
    save_dataset(&dataset, seed, out)?;
    println!(
        "wrote {} train / {} val / {} test rollouts to {}",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        out.display()
    );
    Ok(())
}

/// Load either a simulator dataset directory or a raw series CSV file.
pub fn load_any_dataset(path: &Path, config: &RunConfig) -> Result<Dataset> {
    if path.is_dir() {
        load_dataset(path)
    } else {
        let series = load_csv_series(path)?;
        series_dataset(
            &series,
            config.model.input_len,
            config.model.pred_len,
            config.series.stride,
            config.series.val_fraction,
            config.series.test_fraction,
        )
    }
}

/// Adopt the dataset's geometry into the model configuration.
fn configured_for(
    dataset: &Dataset,
    config: &RunConfig,
    seed: u64,
    precision: Precision,
) -> ModelConfig {
    let geo = dataset.geometry;
    ModelConfig {
        input_len: geo.input_len,
        pred_len: geo.pred_len,
        entities: geo.entities,
        features: geo.features,
        seed,
        precision,
        ..config.model.clone()
    }
}

pub fn train_cmd(
    config: &RunConfig,
    data_path: &Path,
    out: &Path,
    seed: u64,
    precision: Precision,
) -> Result<()> {
    let dataset = load_any_dataset(data_path, config)?;
    let cfg = configured_for(&dataset, config, seed, precision);
    std::fs::create_dir_all(out)?;
    let opts = TrainOptions {
        checkpoint_path: out.join("model.ckpt"),
        metrics_path: Some(out.join("metrics.jsonl")),
        verbose: true,
    };
    let summary = match precision {
        Precision::F64 => {
            let mut model = Model::<f64>::new(cfg)?;
            train(&mut model, &dataset, &opts)?
        }
        Precision::F32 => {
            let mut model = Model::<f32>::new(cfg)?;
            train(&mut model, &dataset, &opts)?
        }
    };
    println!(
        "trained {} epochs; best val NLL {:.4} nats/dim at epoch {}; checkpoint {}",
        summary.epochs_run,
        summary.best_val,
        summary.best_epoch,
        summary.checkpoint.display()
    );
    Ok(())
}

fn parse_mode(mode: &str, temperature: f64, samples: usize, seed: u64) -> Result<PredictMode> {
    match mode {
        "mean" => Ok(PredictMode::Mean),
        "sample" => Ok(PredictMode::Sample { temperature, seed }),
        "average" => Ok(PredictMode::Average {
            samples,
            temperature,
            seed,
        }),
        other => Err(Error::InvalidArgument(format!(
            "mode must be mean|sample|average, got {other:?}"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn eval_cmd(
    checkpoint_path: &Path,
    data_path: &Path,
    config: &RunConfig,
    horizons: &[usize],
    mode: &str,
    temperature: f64,
    samples: usize,
    seed: u64,
) -> Result<()> {
    let manifest = checkpoint::read_manifest(checkpoint_path)?;
    let mode = parse_mode(mode, temperature, samples, seed)?;
    let dataset = load_any_dataset(data_path, config)?;
    let report = match manifest.config.precision {
        Precision::F64 => {
            let ck = checkpoint::load::<f64>(checkpoint_path)?;
            evaluate_mse(&ck.model, &dataset, Split::Test, horizons, mode)?
        }
        Precision::F32 => {
            let ck = checkpoint::load::<f32>(checkpoint_path)?;
            evaluate_mse(&ck.model, &dataset, Split::Test, horizons, mode)?
        }
    };
    println!(
        "test MSE over {} samples (metric dims {:?}):",
        report.samples, dataset.metric_dims
    );
    println!("{:>8}  {:>12}  {:>12}", "step", "raw", "normalized");
    for &h in horizons {
        println!(
            "{:>8}  {:>12.4e}  {:>12.4e}",
            h, report.raw[&h], report.normalized[&h]
        );
    }
    if matches!(dataset.source, DatasetSource::Simulation { .. }) {
        let ctx: Vec<String> = REFERENCE_MSE
            .iter()
            .map(|(h, v)| format!("step {h}: {v:.2e}"))
            .collect();
        println!(
            "reference magnitudes (comparable published setup): {}",
            ctx.join(", ")
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn predict_cmd(
    checkpoint_path: &Path,
    data_path: &Path,
    config: &RunConfig,
    split: Split,
    index: usize,
    mode: &str,
    temperature: f64,
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let manifest = checkpoint::read_manifest(checkpoint_path)?;
    let mode = parse_mode(mode, temperature, samples, seed)?;
    let dataset = load_any_dataset(data_path, config)?;
    let rows = match manifest.config.precision {
        Precision::F64 => predict_rows::<f64>(checkpoint_path, &dataset, split, index, mode)?,
        Precision::F32 => predict_rows::<f32>(checkpoint_path, &dataset, split, index, mode)?,
    };
    let geo = dataset.geometry;
    let mut out_text = String::from("frame,entity");
    for d in 0..geo.features {
        out_text.push_str(&format!(",f{d}"));
    }
    out_text.push('\n');
    for (t, row) in rows.iter().enumerate() {
        for n in 0..geo.entities {
            out_text.push_str(&format!("{},{}", geo.input_len + t, n));
            for d in 0..geo.features {
                out_text.push_str(&format!(",{}", row[n * geo.features + d]));
            }
            out_text.push('\n');
        }
    }
    std::fs::write(out, out_text)?;
    println!("wrote {} predicted frames to {}", rows.len(), out.display());
    Ok(())
}

fn predict_rows<T: Real>(
    checkpoint_path: &Path,
    dataset: &Dataset,
    split: Split,
    index: usize,
    mode: PredictMode,
) -> Result<Vec<Vec<f64>>> {
    let ck = checkpoint::load::<T>(checkpoint_path)?;
    let samples = dataset.split(split);
    let sample = samples.get(index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "sample index {index} out of range ({} samples in split)",
            samples.len()
        ))
    })?;
    let x = dataset.input_tensor::<T>(sample, ck.model.cfg.padded_entities());
    let frames = ck.model.predict(&x, mode)?;
    Ok(dataset.denormalize_frames(&frames))
}

#[allow(clippy::too_many_arguments)]
pub fn plot_cmd(
    checkpoint_path: &Path,
    data_path: &Path,
    config: &RunConfig,
    split: Split,
    index: usize,
    mode: &str,
    temperature: f64,
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let manifest = checkpoint::read_manifest(checkpoint_path)?;
    let mode = parse_mode(mode, temperature, samples, seed)?;
    let dataset = load_any_dataset(data_path, config)?;
    let geo = dataset.geometry;
    if geo.features < 2 {
        return Err(Error::InvalidArgument(
            "plotting needs at least two feature dimensions (x, y)".into(),
        ));
    }
    let rows = match manifest.config.precision {
        Precision::F64 => predict_rows::<f64>(checkpoint_path, &dataset, split, index, mode)?,
        Precision::F32 => predict_rows::<f32>(checkpoint_path, &dataset, split, index, mode)?,
    };
    let sample = &dataset.split(split)[index];
    let truth: Vec<Vec<(f64, f64)>> = (0..geo.entities)
        .map(|n| {
            (0..geo.total_len())
                .map(|t| (sample.at(&geo, t, n, 0), sample.at(&geo, t, n, 1)))
                .collect()
        })
        .collect();
    let pred: Vec<Vec<(f64, f64)>> = (0..geo.entities)
        .map(|n| {
            rows.iter()
                .map(|row| (row[n * geo.features], row[n * geo.features + 1]))
                .collect()
        })
        .collect();
    plot_svg(&truth, &pred, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn ablate_cmd(seed: u64, epochs: usize, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let results = trajflow::ablate::ablation_grid(seed, epochs, out, false)?;
    println!(
        "{:<6} {:>7} {:>7} {:>9} {:>12} {:>12}",
        "row", "masked", "prior", "residual", "final val", "best val"
    );
    for r in &results {
        println!(
            "{:<6} {:>7} {:>7} {:>9} {:>12.4} {:>12.4}",
            r.label, r.masked_conditioner, r.dynamic_prior, r.residual_net, r.final_val, r.best_val
        );
    }
    let full = results
        .iter()
        .find(|r| r.label == "ABC")
        .expect("grid includes ABC");
    let ok = results
        .iter()
        .all(|r| full.final_val <= r.final_val + 1e-12);
    println!(
        "full model {} the grid (final val NLL {:.4})",
        if ok { "leads" } else { "does not lead" },
        full.final_val
    );
    Ok(())
}

pub fn verify_cmd(seed: u64) -> Result<()> {
    let mut failures = Vec::new();

    let b32 = vf::bijectivity_suite::<f32>(seed, 9);
    let pass = b32.worst_abs_err < 1e-6;
    println!(
        "roundtrip f32: {} cases, worst abs err {:.3e} (< 1e-6): {}",
        b32.cases,
        b32.worst_abs_err,
        if pass { "ok" } else { "FAIL" }
    );
    if !pass {
        failures.push("roundtrip f32");
    }

    let b64 = vf::bijectivity_suite::<f64>(seed, 9);
    let pass = b64.worst_abs_err < 1e-10;
    println!(
        "roundtrip f64: {} cases, worst abs err {:.3e} (< 1e-10): {}",
        b64.cases,
        b64.worst_abs_err,
        if pass { "ok" } else { "FAIL" }
    );
    if !pass {
        failures.push("roundtrip f64");
    }

    let ld = vf::logdet_suite(seed, 20);
    let pass = ld.worst_rel_err < 1e-3;
    println!(
        "logdet vs finite-difference jacobian: {} draws, worst rel err {:.3e} (< 1e-3): {}",
        ld.draws,
        ld.worst_rel_err,
        if pass { "ok" } else { "FAIL" }
    );
    if !pass {
        failures.push("logdet");
    }

    let ar = vf::autoregressivity_suite(seed, 5);
    let pass = ar.violations == 0;
    println!(
        "autoregressivity: {} grids, {} ordered pairs, {} violations: {}",
        ar.grids,
        ar.checks,
        ar.violations,
        if pass { "ok" } else { "FAIL" }
    );
    if !pass {
        failures.push("autoregressivity");
    }

    let gc = vf::gradient_certification(seed, 200, 1e-3);
    println!(
        "gradient certification: {} coords, max rel err {:.3e} (< 1e-3): {}",
        gc.checked,
        gc.max_rel_err,
        if gc.passed() { "ok" } else { "FAIL" }
    );
    if !gc.passed() {
        failures.push("gradient certification");
    }

    if failures.is_empty() {
        println!("all verification suites passed");
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "verification failed: {}",
            failures.join(", ")
        )))
    }
}

/// Shared output-directory helper.
pub fn ensure_dir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path)?;
    Ok(path.to_path_buf())
}
