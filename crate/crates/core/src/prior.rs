//! Time-factorized conditional Gaussian prior over the latent frames.
//!
//! p(z) = prod_t p(z_t | z_{<t}) with per-step mean and log-std read off a
//! gated residual network over the two preceding latent frames. Zero
//! initialization of each block's output layer, of the final projection and
//! of the carry gate makes a fresh prior exactly standard normal for every
//! step, which pins the full model's NLL at initialization to a closed form.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::Conv2dLayer;
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Clamp range of the log-std head.
pub const LOG_SIGMA_CLAMP: f64 = 7.0;

/// Gain on the raw carry-gate parameter. The gate must travel from 0 (the
/// identity initialization) to about 1 (carry the previous latent); with a
/// unit parameterization Adam needs tens of thousands of steps at the
/// reference learning rate, and the prior meanwhile routes the carry
/// through its convolution weights, which starves the conditioner of
/// gradient. The gain only reparameterizes the same function class.
pub const CARRY_GATE_GAIN: f64 = 25.0;

struct ResidualBlock {
    conv_in: Conv2dLayer,
    gate_a: Conv2dLayer,
    gate_b: Conv2dLayer,
    conv_out: Conv2dLayer,
}

enum PriorBody {
    /// Gated residual stack with dilations {1, 2, 4} plus a 1x1 projection.
    Residual {
        blocks: Vec<ResidualBlock>,
        conv2: Conv2dLayer,
    },
    /// Ablation: a single zero-initialized 3x3 convolution.
    Single(Conv2dLayer),
}

pub struct PriorNet {
    /// Learned initial contexts h_0 and h_{-1} (zero-initialized).
    pub h_init: ParamId,
    pub h_init2: ParamId,
    conv1: Conv2dLayer,
    body: PriorBody,
    /// Per-channel gate on the carried previous latent; zero-initialized so
    /// a fresh prior has mean zero.
    carry_gate: ParamId,
    latent_channels: usize,
}

impl PriorNet {
    pub fn new<T: Real>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cy = cfg.latent_channels();
        let frame_shape = [cy, 1, cfg.latent_width()];
        let h_init = store.register("prior.h0", Tensor::zeros(&frame_shape));
        let h_init2 = store.register("prior.h_m1", Tensor::zeros(&frame_shape));
        let conv1 = Conv2dLayer::new(store, rng, "prior.conv1", cy, cy, 1, 1, Init::FanIn);
        let body = if cfg.use_residual_net {
            let blocks = [1usize, 2, 4]
                .iter()
                .enumerate()
                .map(|(i, &dil)| {
                    let p = format!("prior.block{i}");
                    ResidualBlock {
                        conv_in: Conv2dLayer::new(
                            store,
                            rng,
                            &format!("{p}.in"),
                            2 * cy,
                            cfg.residual_width,
                            3,
                            dil,
                            Init::FanIn,
                        ),
                        gate_a: Conv2dLayer::new(
                            store,
                            rng,
                            &format!("{p}.gate_a"),
                            cfg.residual_width,
                            cfg.residual_width,
                            1,
                            1,
                            Init::FanIn,
                        ),
                        gate_b: Conv2dLayer::new(
                            store,
                            rng,
                            &format!("{p}.gate_b"),
                            cfg.residual_width,
                            cfg.residual_width,
                            1,
                            1,
                            Init::FanIn,
                        ),
                        conv_out: Conv2dLayer::new(
                            store,
                            rng,
                            &format!("{p}.out"),
                            cfg.residual_width,
                            2 * cy,
                            3,
                            dil,
                            Init::Zero,
                        ),
                    }
                })
                .collect();
            let conv2 =
                Conv2dLayer::new(store, rng, "prior.conv2", 2 * cy, 2 * cy, 1, 1, Init::Zero);
            PriorBody::Residual { blocks, conv2 }
        } else {
            PriorBody::Single(Conv2dLayer::new(
                store,
                rng,
                "prior.single",
                2 * cy,
                2 * cy,
                3,
                1,
                Init::Zero,
            ))
        };
        let carry_gate = store.register("prior.carry_gate", Tensor::zeros(&[cy]));
        PriorNet {
            h_init,
            h_init2,
            conv1,
            body,
            carry_gate,
            latent_channels: cy,
        }
    }

    /// Mean and log-std of p(z_t | z_{<t}) from the two preceding latent
    /// frames (the learned initial contexts stand in at t = 1, 2).
    pub fn prior_params<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        h_prev2: Var<'g, T>,
        h_prev1: Var<'g, T>,
    ) -> (Var<'g, T>, Var<'g, T>) {
        let cy = self.latent_channels;
        assert_eq!(
            h_prev1.shape(),
            h_prev2.shape(),
            "prior context shapes differ"
        );
        assert_eq!(h_prev1.shape()[0], cy, "prior context channel count");
        let mut u = h_prev2.concat_channels(&self.conv1.forward(g, store, h_prev1));
        let out = match &self.body {
            PriorBody::Residual { blocks, conv2 } => {
                for b in blocks {
                    let v = b.conv_in.forward(g, store, u);
                    let gated = b
                        .gate_a
                        .forward(g, store, v)
                        .tanh()
                        .mul(&b.gate_b.forward(g, store, v).sigmoid());
                    u = u.add(&b.conv_out.forward(g, store, gated));
                }
                conv2.forward(g, store, u)
            }
            PriorBody::Single(conv) => conv.forward(g, store, u),
        };
        let bound = T::from_f64(LOG_SIGMA_CLAMP);
        let delta = out.slice_channels(0, cy);
        let log_sigma = out.slice_channels(cy, 2 * cy).clamp(-bound, bound);
        let gate = g
            .param(store, self.carry_gate)
            .mul_scalar(T::from_f64(CARRY_GATE_GAIN));
        (delta.add(&h_prev1.scale_channels(&gate)), log_sigma)
    }
}

/// Log-density of a diagonal Gaussian, summed over elements.
pub fn gaussian_log_prob<T: Real>(z: &Tensor<T>, mu: &Tensor<T>, sigma: &Tensor<T>) -> Result<T> {
    if z.shape() != mu.shape() || z.shape() != sigma.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gaussian_log_prob shapes {:?} / {:?} / {:?}",
            z.shape(),
            mu.shape(),
            sigma.shape()
        )));
    }
    if sigma.data().iter().any(|&s| s <= T::zero()) {
        return Err(Error::InvalidArgument(
            "gaussian_log_prob needs sigma > 0".into(),
        ));
    }
    let half = T::from_f64(0.5);
    let log_2pi = T::from_f64((2.0 * std::f64::consts::PI).ln());
    let mut acc = T::zero();
    for i in 0..z.numel() {
        let d = (z.data()[i] - mu.data()[i]) / sigma.data()[i];
        acc = acc - half * d * d - sigma.data()[i].ln() - half * log_2pi;
    }
    Ok(acc)
}

/// Recorded version, parameterized by log-std so gradients reach the prior.
pub fn gaussian_log_prob_var<'g, T: Real>(
    z: Var<'g, T>,
    mu: Var<'g, T>,
    log_sigma: Var<'g, T>,
) -> Var<'g, T> {
    let m = z.value().numel();
    let half = T::from_f64(0.5);
    let const_term = T::from_f64(m as f64 * 0.5 * (2.0 * std::f64::consts::PI).ln());
    let norm = z.sub(&mu).mul(&log_sigma.neg().exp());
    norm.mul(&norm)
        .sum()
        .mul_scalar(-half)
        .sub(&log_sigma.sum())
        .add_scalar(-const_term)
}

/// Draw z = mu + tau * sigma * eps with eps standard normal; tau = 0 is the
/// deterministic mean path.
pub fn sample_latent<T: Real>(
    mu: &Tensor<T>,
    sigma: &Tensor<T>,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    assert!(temperature >= 0.0, "temperature must be nonnegative");
    assert_eq!(mu.shape(), sigma.shape());
    let tau = T::from_f64(temperature);
    Tensor::from_fn(mu.shape(), |i| {
        let eps: f64 = StandardNormal.sample(rng);
        mu.data()[i] + tau * sigma.data()[i] * T::from_f64(eps)
    })
}
