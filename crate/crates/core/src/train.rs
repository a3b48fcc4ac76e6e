//! Training loop: batched NLL with backward passes, Adam updates with
//! optional gradient clipping, per-epoch validation, early stopping on the
//! validation NLL, best-checkpoint retention and a JSONL metrics log.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub grad_norm: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub initial_val: f64,
    pub history: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
}

pub struct TrainOptions {
    pub checkpoint_path: PathBuf,
    pub metrics_path: Option<PathBuf>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

type Pair<T> = (Tensor<T>, Vec<Tensor<T>>);

fn tensorize<T: Real>(dataset: &Dataset, split: Split, padded: usize) -> Vec<Pair<T>> {
    dataset
        .split(split)
        .iter()
        .map(|s| {
            (
                dataset.input_tensor(s, padded),
                dataset.target_frames(s, padded),
            )
        })
        .collect()
}

/// Fit the model on the dataset's train split, validating each epoch.
/// The best checkpoint stays on disk even if a later epoch fails.
pub fn train<T: Real>(
    model: &mut Model<T>,
    dataset: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Data(
            "training needs non-empty train and val splits".into(),
        ));
    }
    if dataset.geometry.entities != model.cfg.entities
        || dataset.geometry.features != model.cfg.features
        || dataset.geometry.input_len != model.cfg.input_len
        || dataset.geometry.pred_len != model.cfg.pred_len
    {
        return Err(Error::Config(format!(
            "dataset geometry {:?} does not match the model config",
            dataset.geometry
        )));
    }
    let padded = model.cfg.padded_entities();
    let train_set: Vec<Pair<T>> = tensorize(dataset, Split::Train, padded);
    let val_set: Vec<Pair<T>> = tensorize(dataset, Split::Val, padded);

    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: model.cfg.learning_rate,
            weight_decay: model.cfg.weight_decay,
            beta1: model.cfg.beta1,
            beta2: model.cfg.beta2,
            ..AdamConfig::default()
        },
        &model.store,
    );

    let mut log: Option<std::io::BufWriter<std::fs::File>> = match &opts.metrics_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            Some(std::io::BufWriter::new(std::fs::File::create(p)?))
        }
        None => None,
    };

    let initial_val = model.batch_nll(&val_set)?;
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut history = Vec::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(model.cfg.seed ^ 0x5851_F42D_4C95_7F2D);

    let mut epochs_run = 0usize;
    for epoch in 1..=model.cfg.max_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        let mut grad_norm_acc = 0.0;
        for chunk in order.chunks(model.cfg.batch_size) {
            let batch: Vec<Pair<T>> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            model.store.zero_grads();
            let loss = model.batch_nll_backward(&batch)?;
            if let Some(max) = model.cfg.grad_clip {
                grad_norm_acc += clip_global_norm(&mut model.store, max);
            }
            adam.step(&mut model.store);
            epoch_loss += loss;
            batches += 1.0;
        }

        let val_nll = model.batch_nll(&val_set)?;
        let best = val_nll < best_val;
        if best {
            best_val = val_nll;
            best_epoch = epoch;
            checkpoint::save(
                &opts.checkpoint_path,
                model,
                Some(&adam),
                epoch,
                &history
                    .iter()
                    .map(|m: &EpochMetrics| m.val_nll)
                    .collect::<Vec<_>>(),
                Some(best_val),
                &dataset.scales,
                &dataset.metric_dims,
            )?;
        }
        let metrics = EpochMetrics {
            epoch,
            train_nll: epoch_loss / batches,
            val_nll,
            grad_norm: grad_norm_acc / batches,
            best,
        };
        if let Some(log) = log.as_mut() {
            let line = serde_json::to_string(&metrics)
                .map_err(|e| Error::Data(format!("metrics encode: {e}")))?;
            writeln!(log, "{line}")?;
            log.flush()?;
        }
        if opts.verbose {
            eprintln!(
                "epoch {epoch:4}  train {:.4}  val {:.4}{}",
                metrics.train_nll,
                metrics.val_nll,
                if best { "  *" } else { "" }
            );
        }
        history.push(metrics);

        if epoch - best_epoch > model.cfg.patience {
            break;
        }
    }

    Ok(TrainSummary {
        epochs_run,
        best_epoch,
        best_val,
        initial_val,
        history,
        checkpoint: opts.checkpoint_path.clone(),
    })
}

/// Convenience for tests and the ablation grid: train into a temp directory.
pub fn train_in_dir<T: Real>(
    model: &mut Model<T>,
    dataset: &Dataset,
    dir: &Path,
    verbose: bool,
) -> Result<TrainSummary> {
    train(
        model,
        dataset,
        &TrainOptions {
            checkpoint_path: dir.join("model.ckpt"),
            metrics_path: Some(dir.join("metrics.jsonl")),
            verbose,
        },
    )
}
