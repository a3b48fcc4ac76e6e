//! Model configuration: sequence geometry, channel widths, ablation flags
//! and optimizer settings, with validation ahead of any construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Precision;

/// Width-to-channel rearrangement factor of the flow's squeeze stage.
pub const SQUEEZE_FACTOR: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Observed input frames (U).
    pub input_len: usize,
    /// Predicted output frames (V).
    pub pred_len: usize,
    /// Entities per frame before padding (N).
    pub entities: usize,
    /// Feature dimensions per entity (D).
    pub features: usize,
    /// Flow steps per frame (K).
    pub flow_steps: usize,
    /// Widths of the first two convolutions in each autoregressive trunk.
    pub arn_channels: [usize; 2],
    /// Hidden width of the FC_1 / FC_2 heads.
    pub fc_hidden: usize,
    /// Width of the coupling network's hidden convolutions.
    pub coupling_width: usize,
    /// Width of the prior's residual blocks (reference table value: 512).
    pub residual_width: usize,
    /// Width of the plain-convolution conditioner used when the masked
    /// conditioner is ablated.
    pub plain_conditioner_width: usize,
    /// Ablation A: condition through locally masked convolutions.
    pub use_masked_conditioner: bool,
    /// Ablation B: time-factorized conditional prior (off = standard normal).
    pub use_dynamic_prior: bool,
    /// Ablation C: gated residual stack in the prior (off = single conv).
    /// Requires the dynamic prior.
    pub use_residual_net: bool,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stopping: stop after this many epochs without a new best
    /// validation NLL.
    pub patience: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Prediction averaging sample count.
    pub avg_samples: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_len: 10,
            pred_len: 25,
            entities: 3,
            features: 4,
            flow_steps: 8,
            arn_channels: [32, 16],
            fc_hidden: 64,
            coupling_width: 128,
            residual_width: 64,
            plain_conditioner_width: 256,
            use_masked_conditioner: true,
            use_dynamic_prior: true,
            use_residual_net: true,
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            grad_clip: Some(10.0),
            avg_samples: 10,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    /// Entity axis width after zero-padding to the squeeze factor.
    pub fn padded_entities(&self) -> usize {
        self.entities.div_ceil(SQUEEZE_FACTOR) * SQUEEZE_FACTOR
    }

    /// Conditioner input channels (C_x = D).
    pub fn in_channels(&self) -> usize {
        self.features
    }

    /// Latent frame channels after the squeeze (C_y = 4 D).
    pub fn latent_channels(&self) -> usize {
        SQUEEZE_FACTOR * self.features
    }

    /// Latent frame width after the squeeze (N_f).
    pub fn latent_width(&self) -> usize {
        self.padded_entities() / SQUEEZE_FACTOR
    }

    /// Scalars per latent frame.
    pub fn frame_dim(&self) -> usize {
        self.latent_channels() * self.latent_width()
    }

    /// Total latent dimension of one predicted sequence (V frames), the
    /// denominator of nats-per-dimension losses.
    pub fn sequence_dim(&self) -> usize {
        self.pred_len * self.frame_dim()
    }

    /// Flattened conditioner feature length feeding the FC heads.
    pub fn fc_input(&self) -> usize {
        self.in_channels() * self.input_len * self.padded_entities()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_len == 0 || self.pred_len == 0 {
            problems.push("input_len and pred_len must be >= 1".to_string());
        }
        if self.entities == 0 || self.features == 0 {
            problems.push("entities and features must be >= 1".to_string());
        }
        if self.flow_steps == 0 {
            problems.push("flow_steps must be >= 1".to_string());
        }
        if self.use_residual_net && !self.use_dynamic_prior {
            problems.push("use_residual_net requires use_dynamic_prior".to_string());
        }
        if self.learning_rate <= 0.0
            || self.weight_decay < 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            problems.push("optimizer rates must be positive and betas in [0,1)".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                problems.push("grad_clip must be positive".to_string());
            }
        }
        if self.avg_samples == 0 {
            problems.push("avg_samples must be >= 1".to_string());
        }
        // channel arithmetic of the coupling context: C_y / 4 = features,
        // always integral; C_y / 2 likewise. Nothing further to check.
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Small geometry for verification suites and the ablation grid:
    /// a one-feature stream over `4 * latent_width` entities.
    pub fn tiny(latent_width: usize, flow_steps: usize) -> Self {
        ModelConfig {
            input_len: 4,
            pred_len: 3,
            entities: SQUEEZE_FACTOR * latent_width,
            features: 1,
            flow_steps,
            arn_channels: [8, 8],
            fc_hidden: 16,
            coupling_width: 16,
            residual_width: 16,
            plain_conditioner_width: 16,
            ..ModelConfig::default()
        }
    }
}
