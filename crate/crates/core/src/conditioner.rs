//! Spatio-temporal conditioner.
//!
//! Two autoregressive trunks over the (time x entity) input grid — one per
//! ordering — are fused into a context map `u`; per flow step, linear heads
//! read off actnorm scale/bias and the LU factors of the channel-mixing
//! matrix, and a small convolution stack produces the coupling context
//! aligned with the squeezed frame's entity axis. All heads end in
//! zero-initialized layers, so a fresh model conditions an identity flow.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, SQUEEZE_FACTOR};
use crate::layers::{Conv2dLayer, LinearStack, LmConvLayer};
use crate::masking::{build_mask_set, generate_ordering, OrderingKind};
use crate::params::{Init, ParamStore};
use crate::tape::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Bound of the soft range limiter on every log-scale output.
pub const SOFT_CLAMP: f64 = 1.9;
/// Epsilon guarding the positional-normalization denominator.
pub const PONO_EPS: f64 = 1e-6;

/// One autoregressive trunk: three locally masked convolutions
/// (initial/exclusive, undilated inclusive, dilated inclusive).
pub struct MaskedTrunk {
    conv_in: LmConvLayer,
    conv_mid: LmConvLayer,
    conv_out: LmConvLayer,
}

/// Ablation substitute: two plain 3x3 convolutions.
pub struct PlainTrunk {
    conv_in: Conv2dLayer,
    conv_out: Conv2dLayer,
}

pub enum Trunk {
    Masked(MaskedTrunk),
    Plain(PlainTrunk),
}

impl Trunk {
    fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Var<'g, T> {
        match self {
            Trunk::Masked(t) => {
                let h0 = t.conv_in.forward(g, store, x).elu();
                let h1 = t.conv_mid.forward(g, store, h0).elu();
                t.conv_out.forward(g, store, h1)
            }
            Trunk::Plain(t) => {
                let h0 = t.conv_in.forward(g, store, x).elu();
                t.conv_out.forward(g, store, h0)
            }
        }
    }
}

/// Per-flow-step heads reading the fused context.
pub struct StepHeads {
    pub fc1: LinearStack,
    pub fc2: LinearStack,
    pub cnn1: [Conv2dLayer; 3],
}

/// Conditional parameters of one flow step (values live on the graph).
pub struct StepConditioning<'g, T: Real> {
    /// log s, soft-clamped; s = exp(log s) is strictly positive.
    pub act_log_scale: Var<'g, T>,
    pub act_scale: Var<'g, T>,
    pub act_bias: Var<'g, T>,
    /// Strictly lower triangular factor of the mixing matrix.
    pub mix_lower: Var<'g, T>,
    /// Strictly upper triangular part (diagonal removed).
    pub mix_upper: Var<'g, T>,
    /// Log-diagonal, soft-clamped; the mixing determinant is its sum.
    pub mix_log_diag: Var<'g, T>,
    /// Assembled W = (I + L) (U + diag(exp(log d))).
    pub mix_w: Var<'g, T>,
    /// Coupling context map [C_y/4, 1, N_f].
    pub coupling_ctx: Var<'g, T>,
}

/// Everything the flow needs, computed once per input sequence.
pub struct ConditioningBundle<'g, T: Real> {
    /// Fused context u [C_x, U, M].
    pub context: Var<'g, T>,
    pub steps: Vec<StepConditioning<'g, T>>,
}

pub struct Conditioner<T: Real> {
    trunk1: Trunk,
    trunk2: Trunk,
    steps: Vec<StepHeads>,
    strict_lower: Tensor<T>,
    strict_upper: Tensor<T>,
    identity: Tensor<T>,
}

impl<T: Real> Conditioner<T> {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let cx = cfg.in_channels();
        let cy = cfg.latent_channels();
        let grid = (cfg.input_len, cfg.padded_entities());
        let build_masked = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, kind| {
            let ordering = generate_ordering(kind, grid.0, grid.1);
            let initial = Arc::new(build_mask_set(&ordering, 3, 1, false).expect("odd kernel"));
            let undilated = Arc::new(build_mask_set(&ordering, 3, 1, true).expect("odd kernel"));
            let dilated = Arc::new(build_mask_set(&ordering, 3, 2, true).expect("odd kernel"));
            Trunk::Masked(MaskedTrunk {
                conv_in: LmConvLayer::new(
                    store,
                    rng,
                    &format!("{name}.in"),
                    cx,
                    cfg.arn_channels[0],
                    initial,
                    Init::FanIn,
                ),
                conv_mid: LmConvLayer::new(
                    store,
                    rng,
                    &format!("{name}.mid"),
                    cfg.arn_channels[0],
                    cfg.arn_channels[1],
                    undilated,
                    Init::FanIn,
                ),
                conv_out: LmConvLayer::new(
                    store,
                    rng,
                    &format!("{name}.out"),
                    cfg.arn_channels[1],
                    2 * cx,
                    dilated,
                    Init::FanIn,
                ),
            })
        };
        let build_plain = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str| {
            Trunk::Plain(PlainTrunk {
                conv_in: Conv2dLayer::new(
                    store,
                    rng,
                    &format!("{name}.in"),
                    cx,
                    cfg.plain_conditioner_width,
                    3,
                    1,
                    Init::FanIn,
                ),
                conv_out: Conv2dLayer::new(
                    store,
                    rng,
                    &format!("{name}.out"),
                    cfg.plain_conditioner_width,
                    2 * cx,
                    3,
                    1,
                    Init::FanIn,
                ),
            })
        };
        let (trunk1, trunk2) = if cfg.use_masked_conditioner {
            (
                build_masked(store, rng, "cond.arn1", OrderingKind::TimeMajorSCurve),
                build_masked(store, rng, "cond.arn2", OrderingKind::EntityMajorSCurve),
            )
        } else {
            (
                build_plain(store, rng, "cond.plain1"),
                build_plain(store, rng, "cond.plain2"),
            )
        };

        let steps = (0..cfg.flow_steps)
            .map(|k| {
                let p = format!("cond.step{k}");
                StepHeads {
                    fc1: LinearStack::new(
                        store,
                        rng,
                        &format!("{p}.fc1"),
                        cfg.fc_input(),
                        cfg.fc_hidden,
                        2 * cy,
                    ),
                    fc2: LinearStack::new(
                        store,
                        rng,
                        &format!("{p}.fc2"),
                        cfg.fc_input(),
                        cfg.fc_hidden,
                        cy * cy,
                    ),
                    cnn1: [
                        Conv2dLayer::new(
                            store,
                            rng,
                            &format!("{p}.cnn1.l0"),
                            cx,
                            8,
                            3,
                            1,
                            Init::FanIn,
                        ),
                        Conv2dLayer::new(
                            store,
                            rng,
                            &format!("{p}.cnn1.l1"),
                            8,
                            cy / 2,
                            3,
                            1,
                            Init::FanIn,
                        ),
                        Conv2dLayer::new(
                            store,
                            rng,
                            &format!("{p}.cnn1.l2"),
                            cy / 2,
                            cy / 4,
                            3,
                            1,
                            Init::Zero,
                        ),
                    ],
                }
            })
            .collect();

        Conditioner {
            trunk1,
            trunk2,
            steps,
            strict_lower: Tensor::from_fn(&[cy, cy], |i| {
                if i / cy > i % cy {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            strict_upper: Tensor::from_fn(&[cy, cy], |i| {
                if i / cy < i % cy {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            identity: Tensor::eye(cy),
        }
    }

    /// Trunk output for one ordering (2 C_x channels over the input grid).
    pub fn trunk_forward<'g>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
        which: usize,
    ) -> Var<'g, T> {
        match which {
            1 => self.trunk1.forward(g, store, x),
            2 => self.trunk2.forward(g, store, x),
            _ => panic!("trunk index must be 1 or 2"),
        }
    }

    /// Compute every step's conditional parameters from the input sequence.
    pub fn build_bundle<'g>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> ConditioningBundle<'g, T> {
        let t1 = self.trunk1.forward(g, store, x);
        let t2 = self.trunk2.forward(g, store, x);
        let u = fuse_context(x, t1, t2);
        let fc_in = u.value().numel();
        let u_flat = u.reshape(&[fc_in]);
        let steps = (0..self.steps.len())
            .map(|k| self.step_conditioning(g, store, u, u_flat, k))
            .collect();
        ConditioningBundle { context: u, steps }
    }

    fn step_conditioning<'g>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        u: Var<'g, T>,
        u_flat: Var<'g, T>,
        k: usize,
    ) -> StepConditioning<'g, T> {
        let heads = &self.steps[k];
        let cy = self.identity.shape()[0];
        let bound = T::from_f64(SOFT_CLAMP);

        // actnorm head
        let raw1 = heads.fc1.forward(g, store, u_flat);
        let act_log_scale = raw1.slice_channels(0, cy).soft_clamp(bound);
        let act_scale = act_log_scale.exp();
        let act_bias = raw1.slice_channels(cy, 2 * cy);

        // mixing head: strictly-lower / strictly-upper / log-diagonal split
        let raw2 = heads.fc2.forward(g, store, u_flat).reshape(&[cy, cy]);
        let mix_lower = raw2.mul_const(&self.strict_lower);
        let mix_upper = raw2.mul_const(&self.strict_upper);
        let mix_log_diag = raw2.diag_part().soft_clamp(bound);
        let eye = g.constant(self.identity.clone());
        let mix_w = eye
            .add(&mix_lower)
            .matmul(&mix_upper.add(&mix_log_diag.exp().diag_embed()));

        // coupling context: conv stack over the input grid, mean over time,
        // then entity pooling onto the squeezed frame's width
        let c0 = heads.cnn1[0].forward(g, store, u).elu();
        let c1 = heads.cnn1[1].forward(g, store, c0).elu();
        let c2 = heads.cnn1[2].forward(g, store, c1);
        let coupling_ctx = c2.mean_time().mean_pool_width(SQUEEZE_FACTOR);

        StepConditioning {
            act_log_scale,
            act_scale,
            act_bias,
            mix_lower,
            mix_upper,
            mix_log_diag,
            mix_w,
            coupling_ctx,
        }
    }
}

/// Fuse the two trunk outputs with the input: split their product into two
/// halves, whiten the first positionally, gate it with the second, and add
/// the result onto x.
pub fn fuse_context<'g, T: Real>(
    x: Var<'g, T>,
    trunk1_out: Var<'g, T>,
    trunk2_out: Var<'g, T>,
) -> Var<'g, T> {
    let cx = x.shape()[0];
    let combined = trunk1_out.mul(&trunk2_out);
    assert_eq!(
        combined.shape()[0],
        2 * cx,
        "trunk outputs must carry 2*C_x channels"
    );
    let c1 = combined.slice_channels(0, cx);
    let c2 = combined.slice_channels(cx, 2 * cx);
    let c3 = c1.pono(T::from_f64(PONO_EPS)).mul(&c2.sigmoid());
    x.add(&c3)
}
