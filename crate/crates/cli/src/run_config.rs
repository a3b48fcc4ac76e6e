//! Run configuration file: one JSON document holding the model, simulator,
//! dataset-size and series-windowing settings. Unknown keys are rejected;
//! everything has a default, so `{}` is a valid config. Command-line flags
//! override file values, which override defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use trajflow::error::{Error, Result};
use trajflow::{ModelConfig, SimConfig};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sim: SimConfig,
    pub data: DataCounts,
    pub series: SeriesOptions,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataCounts {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataCounts {
    fn default() -> Self {
        DataCounts {
            n_train: 1000,
            n_val: 100,
            n_test: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeriesOptions {
    /// Sliding-window stride over generic CSV series.
    pub stride: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        SeriesOptions {
            stride: 10,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&mut self) -> Result<()> {
        self.model.validate()?;
        self.sim.validate()?;
        if self.series.stride == 0 {
            return Err(Error::Config("series.stride must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.series.val_fraction)
            || !(0.0..1.0).contains(&self.series.test_fraction)
        {
            return Err(Error::Config("series fractions must be in [0, 1)".into()));
        }
        if self.sim.steps != self.model.input_len + self.model.pred_len {
            return Err(Error::Config(format!(
                "sim.steps = {} must equal model.input_len + model.pred_len = {}",
                self.sim.steps,
                self.model.input_len + self.model.pred_len
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_uses_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, "{}").unwrap();
        let cfg = RunConfig::load(Some(&p)).unwrap();
        assert_eq!(cfg.model.flow_steps, 8);
        assert_eq!(cfg.data.n_train, 1000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"modle": {}}"#).unwrap();
        let err = RunConfig::load(Some(&p)).unwrap_err().to_string();
        assert!(err.contains("modle"), "{err}");

        std::fs::write(&p, r#"{"model": {"flowsteps": 4}}"#).unwrap();
        assert!(RunConfig::load(Some(&p)).is_err());
    }

    #[test]
    fn cross_field_validation_runs_before_work() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"sim": {"steps": 12}}"#).unwrap();
        let err = RunConfig::load(Some(&p)).unwrap_err().to_string();
        assert!(err.contains("sim.steps"), "{err}");
    }
}
