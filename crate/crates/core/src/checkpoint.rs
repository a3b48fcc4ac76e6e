//! Checkpoint container: a JSON manifest (config, epoch, metrics,
//! normalization stats, parameter table) followed by raw little-endian
//! 64-bit payloads for every parameter and, when present, the optimizer
//! moments. Byte-stable across platforms; round-trips bit-exactly at f64.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"TFCKPT01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamRecord {
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: ModelConfig,
    pub epoch: usize,
    pub val_history: Vec<f64>,
    pub best_val: Option<f64>,
    /// Per-(entity, feature) normalization scales of the training data.
    pub scales: Vec<f64>,
    pub metric_dims: Vec<usize>,
    pub params: Vec<ParamRecord>,
    pub adam: Option<AdamRecord>,
}

pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub adam: Option<Adam<T>>,
    pub manifest: CheckpointManifest,
}

fn write_tensor<T: Real>(out: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    for &v in t.data() {
        out.write_all(&v.to_f64().to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<T: Real>(inp: &mut impl Read, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    inp.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(Tensor::from_vec(shape, data))
}

#[allow(clippy::too_many_arguments)]
pub fn save<T: Real>(
    path: &Path,
    model: &Model<T>,
    adam: Option<&Adam<T>>,
    epoch: usize,
    val_history: &[f64],
    best_val: Option<f64>,
    scales: &[f64],
    metric_dims: &[usize],
) -> Result<()> {
    let manifest = CheckpointManifest {
        version: 1,
        config: model.cfg.clone(),
        epoch,
        val_history: val_history.to_vec(),
        best_val,
        scales: scales.to_vec(),
        metric_dims: metric_dims.to_vec(),
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        adam: adam.map(|a| AdamRecord { step: a.step }),
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, p) in model.store.iter() {
        write_tensor(&mut out, &p.value)?;
    }
    if let Some(a) = adam {
        for m in &a.m {
            write_tensor(&mut out, m)?;
        }
        for v in &a.v {
            write_tensor(&mut out, v)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Manifest alone (cheap peek for precision dispatch).
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    inp.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    inp.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    inp.read_exact(&mut json)?;
    serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    inp.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    inp.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    inp.read_exact(&mut json)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&json)
        .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;
    if manifest.config.precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "checkpoint is {:?}, loader instantiated at {:?}",
            manifest.config.precision,
            T::PRECISION
        )));
    }

    let mut model = Model::<T>::new(manifest.config.clone())?;
    if model.store.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter table mismatch: checkpoint has {}, rebuilt model has {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for (id, rec) in ids.iter().zip(&manifest.params) {
        let p = model.store.get(*id);
        if p.name != rec.name || p.value.shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} ({:?}) does not match checkpoint entry {} ({:?})",
                p.name,
                p.value.shape(),
                rec.name,
                rec.shape
            )));
        }
        let t = read_tensor(&mut inp, &rec.shape)?;
        model.store.set_value(*id, t);
    }
    let adam = if let Some(rec) = &manifest.adam {
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: manifest.config.learning_rate,
                weight_decay: manifest.config.weight_decay,
                beta1: manifest.config.beta1,
                beta2: manifest.config.beta2,
                ..AdamConfig::default()
            },
            &model.store,
        );
        for (i, rec) in manifest.params.iter().enumerate() {
            adam.m[i] = read_tensor(&mut inp, &rec.shape)?;
        }
        for (i, rec) in manifest.params.iter().enumerate() {
            adam.v[i] = read_tensor(&mut inp, &rec.shape)?;
        }
        adam.step = rec.step;
        Some(adam)
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        adam,
        manifest,
    })
}
