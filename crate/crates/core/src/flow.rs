//! The per-frame bijection: squeeze, then K steps of actnorm, LU-mixing and
//! affine coupling, each with a closed-form log-determinant. The forward
//! direction runs on the differentiation record; the inverse works on plain
//! tensors (it is only used for generation).

use rand_chacha::ChaCha8Rng;

use crate::conditioner::{ConditioningBundle, StepConditioning, SOFT_CLAMP};
use crate::config::{ModelConfig, SQUEEZE_FACTOR};
use crate::conv::conv2d_forward;
use crate::layers::Conv2dLayer;
use crate::params::{Init, ParamStore};
use crate::tape::{unsqueeze_width_plain, Graph, Var};
use crate::tensor::{concat_channels, slice_channels, Real, Tensor};

/// Per-step coupling network: two hidden convolutions and a zero-initialized
/// output so a fresh step is the identity.
pub struct StepParams {
    pub cnn2: [Conv2dLayer; 3],
}

pub struct Flow {
    pub steps: Vec<StepParams>,
    latent_channels: usize,
    latent_width: usize,
}

impl Flow {
    pub fn new<T: Real>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cy = cfg.latent_channels();
        let hidden = cfg.coupling_width;
        let coupling_in = cy / 2 + cy / 4;
        let steps = (0..cfg.flow_steps)
            .map(|k| StepParams {
                cnn2: [
                    Conv2dLayer::new(
                        store,
                        rng,
                        &format!("flow.step{k}.cnn2.l0"),
                        coupling_in,
                        hidden,
                        3,
                        1,
                        Init::FanIn,
                    ),
                    Conv2dLayer::new(
                        store,
                        rng,
                        &format!("flow.step{k}.cnn2.l1"),
                        hidden,
                        hidden,
                        1,
                        1,
                        Init::FanIn,
                    ),
                    Conv2dLayer::new(
                        store,
                        rng,
                        &format!("flow.step{k}.cnn2.l2"),
                        hidden,
                        cy,
                        3,
                        1,
                        Init::Zero,
                    ),
                ],
            })
            .collect();
        Flow {
            steps,
            latent_channels: cy,
            latent_width: cfg.latent_width(),
        }
    }

    /// Frame [D, 1, M] -> latent [C_y, 1, N_f] plus the total
    /// log-determinant of the map.
    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        frame: Var<'g, T>,
        bundle: &ConditioningBundle<'g, T>,
    ) -> (Var<'g, T>, Var<'g, T>) {
        let mut x = frame.squeeze_width(SQUEEZE_FACTOR);
        let hw = T::from_f64(self.latent_width as f64);
        let mut logdet = g.constant(Tensor::scalar(T::zero()));
        for k in 0..self.steps.len() {
            let cond = &bundle.steps[k];
            // actnorm
            x = x
                .scale_channels(&cond.act_scale)
                .shift_channels(&cond.act_bias);
            logdet = logdet.add(&cond.act_log_scale.sum().mul_scalar(hw));
            // invertible channel mixing, applied factor by factor:
            // (I + L)((U + D) x) — the inverse then runs the exact adjoint
            // substitutions, which keeps 32-bit round-trips tight.
            let flat = x.reshape(&[self.latent_channels, self.latent_width]);
            let upped = cond
                .mix_upper
                .add(&cond.mix_log_diag.exp().diag_embed())
                .matmul(&flat);
            x = upped.add(&cond.mix_lower.matmul(&upped)).reshape(&[
                self.latent_channels,
                1,
                self.latent_width,
            ]);
            logdet = logdet.add(&cond.mix_log_diag.sum().mul_scalar(hw));
            // affine coupling
            let (y, ld) = self.coupling_forward(g, store, x, cond, k);
            x = y;
            logdet = logdet.add(&ld);
        }
        (x, logdet)
    }

    fn coupling_forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
        cond: &StepConditioning<'g, T>,
        k: usize,
    ) -> (Var<'g, T>, Var<'g, T>) {
        let cy = self.latent_channels;
        let half = cy / 2;
        let a1 = x.slice_channels(0, half);
        let a2 = x.slice_channels(half, cy);
        let h = a1.concat_channels(&cond.coupling_ctx);
        let raw = self.coupling_net(g, store, h, k);
        let even: Vec<usize> = (0..cy).step_by(2).collect();
        let odd: Vec<usize> = (1..cy).step_by(2).collect();
        let log_s = raw
            .gather_channels(even)
            .soft_clamp(T::from_f64(SOFT_CLAMP));
        let shift = raw.gather_channels(odd);
        let b1 = a2.mul(&log_s.exp()).add(&shift);
        (a1.concat_channels(&b1), log_s.sum())
    }

    fn coupling_net<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        h: Var<'g, T>,
        k: usize,
    ) -> Var<'g, T> {
        let net = &self.steps[k].cnn2;
        let h0 = net[0].forward(g, store, h).elu();
        let h1 = net[1].forward(g, store, h0).elu();
        net[2].forward(g, store, h1)
    }

    /// Exact inverse: latent [C_y, 1, N_f] -> frame [D, 1, M]. Plain tensor
    /// math; conditioning values are read off the bundle.
    pub fn inverse<T: Real>(
        &self,
        store: &ParamStore<T>,
        z: &Tensor<T>,
        bundle: &ConditioningBundle<'_, T>,
    ) -> Tensor<T> {
        let cy = self.latent_channels;
        let mut x = z.clone();
        for (k, _) in self.steps.iter().enumerate().rev() {
            let cond = &bundle.steps[k];
            // coupling inverse: the first half is unchanged, recompute s, b
            let a1 = slice_channels(&x, 0, cy / 2);
            let b1 = slice_channels(&x, cy / 2, cy);
            let h = concat_channels(&a1, &cond.coupling_ctx.value());
            let raw = self.coupling_net_plain(store, &h, k);
            let (raw_s, shift) = crate::tensor::cross(&raw);
            // same expression as the forward scale, then divide
            let bound = T::from_f64(SOFT_CLAMP);
            let s = raw_s.map(|v| (bound * (v / bound).tanh()).exp());
            let a2 = b1.sub(&shift).zip(&s, |num, den| num / den);
            x = concat_channels(&a1, &a2);
            // mixing inverse: two triangular solves per spatial position
            x = mixing_inverse(
                &x,
                &cond.mix_lower.value(),
                &cond.mix_upper.value(),
                &cond.mix_log_diag.value(),
            );
            // actnorm inverse
            let s = cond.act_scale.value();
            let b = cond.act_bias.value();
            let rest = x.numel() / cy;
            x = Tensor::from_fn(x.shape(), |i| {
                (x.data()[i] - b.data()[i / rest]) / s.data()[i / rest]
            });
        }
        unsqueeze_width_plain(&x, SQUEEZE_FACTOR)
    }

    fn coupling_net_plain<T: Real>(
        &self,
        store: &ParamStore<T>,
        h: &Tensor<T>,
        k: usize,
    ) -> Tensor<T> {
        let net = &self.steps[k].cnn2;
        let elu = |t: Tensor<T>| t.map(|v| if v > T::zero() { v } else { v.exp() - T::one() });
        let h0 = elu(conv2d_forward(
            h,
            store.value(net[0].weight),
            store.value(net[0].bias),
            1,
        ));
        let h1 = elu(conv2d_forward(
            &h0,
            store.value(net[1].weight),
            store.value(net[1].bias),
            1,
        ));
        conv2d_forward(&h1, store.value(net[2].weight), store.value(net[2].bias), 1)
    }
}

/// Solve (I + L) (U + diag(exp(log_d))) a = b for every spatial position.
fn mixing_inverse<T: Real>(
    b: &Tensor<T>,
    lower: &Tensor<T>,
    upper: &Tensor<T>,
    log_diag: &Tensor<T>,
) -> Tensor<T> {
    let c = log_diag.numel();
    let rest = b.numel() / c;
    let diag: Vec<T> = log_diag.data().iter().map(|&v| v.exp()).collect();
    let mut out = vec![T::zero(); b.numel()];
    let mut y = vec![T::zero(); c];
    for p in 0..rest {
        // forward substitution with the unit lower factor
        for i in 0..c {
            let mut acc = b.data()[i * rest + p];
            for j in 0..i {
                acc = acc - lower.data()[i * c + j] * y[j];
            }
            y[i] = acc;
        }
        // back substitution with the upper factor (diagonal from log_d)
        for i in (0..c).rev() {
            let mut acc = y[i];
            for j in i + 1..c {
                acc = acc - upper.data()[i * c + j] * out[j * rest + p];
            }
            out[i * rest + p] = acc / diag[i];
        }
    }
    Tensor::from_vec(b.shape(), out)
}

/// Plain actnorm in both directions, exposed for the closed-form tests.
pub fn actnorm_plain<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    bias: &Tensor<T>,
    forward: bool,
) -> (Tensor<T>, T) {
    let c = scale.numel();
    let rest = x.numel() / c;
    let hw = T::from_f64(rest as f64);
    let logdet = scale.data().iter().fold(T::zero(), |acc, &s| acc + s.ln()) * hw;
    let out = if forward {
        Tensor::from_fn(x.shape(), |i| {
            x.data()[i] * scale.data()[i / rest] + bias.data()[i / rest]
        })
    } else {
        Tensor::from_fn(x.shape(), |i| {
            (x.data()[i] - bias.data()[i / rest]) / scale.data()[i / rest]
        })
    };
    (out, if forward { logdet } else { -logdet })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioner::Conditioner;
    use crate::tape::squeeze_width_plain;
    use rand::{Rng, SeedableRng};

    struct Fixture<T: Real> {
        cfg: ModelConfig,
        store: ParamStore<T>,
        cond: Conditioner<T>,
        flow: Flow,
    }

    /// Build conditioner + flow with all heads randomized (non-identity).
    fn fixture<T: Real>(latent_width: usize, k: usize, seed: u64) -> Fixture<T> {
        let cfg = ModelConfig::tiny(latent_width, k);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cond = Conditioner::new(&cfg, &mut store, &mut rng);
        let flow = Flow::new(&cfg, &mut store, &mut rng);
        crate::params::randomize_zero_params(&mut store, &mut rng, 0.05);
        Fixture {
            cfg,
            store,
            cond,
            flow,
        }
    }

    fn rand_x<T: Real>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor<T> {
        Tensor::from_fn(
            &[cfg.in_channels(), cfg.input_len, cfg.padded_entities()],
            |_| T::from_f64(rng.gen_range(-1.0..1.0)),
        )
    }

    fn rand_frame<T: Real>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor<T> {
        Tensor::from_fn(&[cfg.features, 1, cfg.padded_entities()], |_| {
            T::from_f64(rng.gen_range(-1.0..1.0))
        })
    }

    #[test]
    fn fresh_model_is_identity_with_zero_logdet() {
        let cfg = ModelConfig::tiny(2, 3);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cond = Conditioner::new(&cfg, &mut store, &mut rng);
        let flow = Flow::new(&cfg, &mut store, &mut rng);
        let g = Graph::inference();
        let bundle = cond.build_bundle(&g, &store, g.constant(rand_x::<f64>(&cfg, &mut rng)));
        let frame = rand_frame::<f64>(&cfg, &mut rng);
        let (z, ld) = flow.forward(&g, &store, g.constant(frame.clone()), &bundle);
        assert!(z.value().max_abs_diff(&squeeze_width_plain(&frame, 4)) < 1e-14);
        assert_eq!(ld.value().item(), 0.0);
    }

    #[test]
    fn squeeze_logdet_is_zero_and_roundtrip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame = Tensor::<f64>::from_fn(&[2, 1, 8], |_| rng.gen_range(-5.0..5.0));
        let s = squeeze_width_plain(&frame, 4);
        assert_eq!(unsqueeze_width_plain(&s, 4), frame);
    }

    #[test]
    fn actnorm_closed_forms() {
        // identity
        let x = Tensor::<f64>::from_fn(&[2, 1, 3], |i| i as f64);
        let (y, ld) = actnorm_plain(&x, &Tensor::filled(&[2], 1.0), &Tensor::zeros(&[2]), true);
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
        // c=2, spatial 1x3, s=(2,2): logdet = 3 * (ln2 + ln2) = 6 ln2
        let (_, ld) = actnorm_plain(&x, &Tensor::filled(&[2], 2.0), &Tensor::zeros(&[2]), true);
        assert!((ld - 6.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((ld - 4.15888).abs() < 1e-5);
        // round trip at 64-bit
        let s = Tensor::from_vec(&[2], vec![1.7, 0.4]);
        let b = Tensor::from_vec(&[2], vec![-0.3, 2.2]);
        let (fwd, ldf) = actnorm_plain(&x, &s, &b, true);
        let (back, ldb) = actnorm_plain(&fwd, &s, &b, false);
        assert!(back.max_abs_diff(&x) < 1e-10);
        assert_eq!(ldf, -ldb);
    }

    #[test]
    fn mixing_diag_2_and_half_has_zero_logdet() {
        // diag(2, 0.5): ln 2 + ln 0.5 = 0 per position
        let log_d = Tensor::from_vec(&[2], vec![2.0f64.ln(), 0.5f64.ln()]);
        assert!(log_d.sum().abs() < 1e-15);
    }

    #[test]
    fn mixing_inverse_solves_assembled_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 6;
        let lower = Tensor::<f64>::from_fn(&[c, c], |i| {
            if i / c > i % c {
                rng.gen_range(-0.8..0.8)
            } else {
                0.0
            }
        });
        let upper = Tensor::<f64>::from_fn(&[c, c], |i| {
            if i / c < i % c {
                rng.gen_range(-0.8..0.8)
            } else {
                0.0
            }
        });
        let log_d = Tensor::<f64>::from_fn(&[c], |_| rng.gen_range(-1.0..1.0));
        // assemble W = (I + L)(U + D) and push a vector through
        let d = Tensor::from_fn(&[c, c], |i| {
            if i / c == i % c {
                log_d.data()[i / c].exp()
            } else {
                0.0
            }
        });
        let il = Tensor::eye(c).add(&lower);
        let ud = upper.add(&d);
        let w = crate::tape::matmul_plain(&il, &ud);
        let a = Tensor::<f64>::from_fn(&[c, 1, 2], |_| rng.gen_range(-2.0..2.0));
        let b = crate::tape::matmul_plain(&w, &a.reshaped(&[c, 2])).reshaped(&[c, 1, 2]);
        let rec = mixing_inverse(&b, &lower, &upper, &log_d);
        assert!(rec.max_abs_diff(&a) < 1e-8);
    }

    /// If every coupling scale equals e, the step logdet equals the element
    /// count of the transformed half. Arranged by setting the final
    /// coupling-conv bias so the soft clamp emits exactly 1 on the even
    /// (scale) channels.
    #[test]
    fn coupling_logdet_counts_elements_when_scale_is_e() {
        let cfg = ModelConfig::tiny(2, 1); // C_y = 4, N_f = 2, one step
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cond = Conditioner::new(&cfg, &mut store, &mut rng);
        let flow = Flow::new(&cfg, &mut store, &mut rng);
        // soft_clamp(raw) = 1  <=>  raw = bound * atanh(1 / bound)
        let bound = SOFT_CLAMP;
        let raw = bound * (1.0f64 / bound).atanh();
        let bias_id = flow.steps[0].cnn2[2].bias;
        let cy = cfg.latent_channels();
        store.set_value(
            bias_id,
            Tensor::from_fn(&[cy], |c| if c % 2 == 0 { raw } else { 0.0 }),
        );
        let g = Graph::inference();
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let bundle = cond.build_bundle(&g, &store, g.constant(rand_x::<f64>(&cfg, &mut r2)));
        let frame = rand_frame::<f64>(&cfg, &mut r2);
        let (_, ld) = flow.forward(&g, &store, g.constant(frame), &bundle);
        // actnorm and mixing stay identity (zero heads), so the whole
        // logdet is the coupling's: one per element of the second half
        let m = (cy / 2) * cfg.latent_width();
        assert!((ld.value().item() - m as f64).abs() < 1e-12);
    }

    #[test]
    fn roundtrip_f64_tight() {
        for (lw, k, seed) in [(1, 1, 7), (1, 2, 8), (2, 2, 9), (1, 8, 10)] {
            let f = fixture::<f64>(lw, k, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let g = Graph::inference();
            let bundle = f
                .cond
                .build_bundle(&g, &f.store, g.constant(rand_x(&f.cfg, &mut rng)));
            let frame = rand_frame::<f64>(&f.cfg, &mut rng);
            let (z, _) = f
                .flow
                .forward(&g, &f.store, g.constant(frame.clone()), &bundle);
            let back = f.flow.inverse(&f.store, &z.value(), &bundle);
            assert!(back.max_abs_diff(&frame) < 1e-10, "lw={lw} k={k}");
        }
    }

    #[test]
    fn roundtrip_f32() {
        let f = fixture::<f32>(1, 2, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let g = Graph::inference();
        let bundle = f
            .cond
            .build_bundle(&g, &f.store, g.constant(rand_x(&f.cfg, &mut rng)));
        let frame = rand_frame::<f32>(&f.cfg, &mut rng);
        let (z, _) = f
            .flow
            .forward(&g, &f.store, g.constant(frame.clone()), &bundle);
        let back = f.flow.inverse(&f.store, &z.value(), &bundle);
        assert!(back.max_abs_diff(&frame) < 1e-6);
    }

    /// Oracle: assemble the full Jacobian of the flow by central differences
    /// and compare log |det J| with the claimed logdet.
    #[test]
    fn logdet_matches_finite_difference_jacobian() {
        let f = fixture::<f64>(2, 2, 31); // frame dim 4*2 = 8 -> z dim 8
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let g = Graph::inference();
        let bundle = f
            .cond
            .build_bundle(&g, &f.store, g.constant(rand_x(&f.cfg, &mut rng)));
        let frame = rand_frame::<f64>(&f.cfg, &mut rng);
        let n = frame.numel();
        let h = 1e-6;
        let eval = |fr: &Tensor<f64>| -> Tensor<f64> {
            let (z, _) = f
                .flow
                .forward(&g, &f.store, g.constant(fr.clone()), &bundle);
            z.value()
        };
        let mut jac = vec![0.0; n * n];
        for j in 0..n {
            let plus = eval(&frame.with_elem(j, frame.data()[j] + h));
            let minus = eval(&frame.with_elem(j, frame.data()[j] - h));
            for i in 0..n {
                jac[i * n + j] = (plus.data()[i] - minus.data()[i]) / (2.0 * h);
            }
        }
        // log |det| by Gaussian elimination with partial pivoting
        let mut a = jac;
        let mut log_abs = 0.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| {
                    a[i * n + col]
                        .abs()
                        .partial_cmp(&a[j * n + col].abs())
                        .unwrap()
                })
                .unwrap();
            if pivot != col {
                for j in 0..n {
                    a.swap(col * n + j, pivot * n + j);
                }
            }
            log_abs += a[col * n + col].abs().ln();
            for i in col + 1..n {
                let factor = a[i * n + col] / a[col * n + col];
                for j in col..n {
                    a[i * n + j] -= factor * a[col * n + j];
                }
            }
        }
        let (_, claimed) = f.flow.forward(&g, &f.store, g.constant(frame), &bundle);
        let claimed = claimed.value().item();
        assert!(
            (claimed - log_abs).abs() / log_abs.abs().max(1.0) < 1e-3,
            "flow logdet {claimed} vs jacobian {log_abs}"
        );
    }
}
