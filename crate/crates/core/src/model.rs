//! The full conditional flow model: exact negative log-likelihood in nats
//! per dimension, gradient accumulation over batches, and the three
//! prediction modes (mean path, single sample, sample average).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioner::{Conditioner, ConditioningBundle};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::params::ParamStore;
use crate::prior::{gaussian_log_prob_var, sample_latent, PriorNet};
use crate::tape::{Graph, Var};
use crate::tensor::{Real, Tensor};

pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub conditioner: Conditioner<T>,
    pub flow: Flow,
    /// Absent when the dynamic prior is ablated (standard normal instead).
    pub prior: Option<PriorNet>,
}

/// How `predict` turns the prior into concrete latents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictMode {
    /// Deterministic prior-mean path (temperature zero).
    Mean,
    /// One draw at the given temperature.
    Sample { temperature: f64, seed: u64 },
    /// Average of `samples` independent draws (temperature zero collapses
    /// onto the mean path).
    Average {
        samples: usize,
        temperature: f64,
        seed: u64,
    },
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.precision != T::PRECISION {
            return Err(Error::Config(format!(
                "config wants {:?} but the model is instantiated at {:?}",
                cfg.precision,
                T::PRECISION
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let conditioner = Conditioner::new(&cfg, &mut store, &mut rng);
        let flow = Flow::new(&cfg, &mut store, &mut rng);
        let prior = if cfg.use_dynamic_prior {
            Some(PriorNet::new(&cfg, &mut store, &mut rng))
        } else {
            None
        };
        Ok(Model {
            cfg,
            store,
            conditioner,
            flow,
            prior,
        })
    }

    fn check_shapes(&self, x: &Tensor<T>, y_frames: &[Tensor<T>]) -> Result<()> {
        let want_x = [
            self.cfg.in_channels(),
            self.cfg.input_len,
            self.cfg.padded_entities(),
        ];
        if x.shape() != want_x {
            return Err(Error::ShapeMismatch(format!(
                "input {:?}, model expects {:?}",
                x.shape(),
                want_x
            )));
        }
        if y_frames.len() != self.cfg.pred_len {
            return Err(Error::ShapeMismatch(format!(
                "{} target frames, model predicts {}",
                y_frames.len(),
                self.cfg.pred_len
            )));
        }
        Ok(())
    }

    /// Record the NLL (nats per dimension) of one (input, target) pair.
    pub fn nll_graph<'g>(
        &self,
        g: &'g Graph<T>,
        x: &Tensor<T>,
        y_frames: &[Tensor<T>],
    ) -> Result<Var<'g, T>> {
        self.nll_graph_with(g, &self.store, x, y_frames)
    }

    /// Same, reading parameter values from a caller-supplied store (the
    /// finite-difference checker perturbs a store copy between calls).
    pub fn nll_graph_with<'g>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        y_frames: &[Tensor<T>],
    ) -> Result<Var<'g, T>> {
        self.check_shapes(x, y_frames)?;
        let bundle = self
            .conditioner
            .build_bundle(g, store, g.constant(x.clone()));
        let mut total = g.constant(Tensor::scalar(T::zero()));
        let mut ctx2 = self.prior.as_ref().map(|p| g.param(store, p.h_init2));
        let mut ctx1 = self.prior.as_ref().map(|p| g.param(store, p.h_init));
        let frame_shape = [self.cfg.latent_channels(), 1, self.cfg.latent_width()];
        for frame in y_frames {
            let (z, logdet) = self
                .flow
                .forward(g, store, g.constant(frame.clone()), &bundle);
            let (mu, log_sigma) = match (&self.prior, ctx2, ctx1) {
                (Some(p), Some(c2), Some(c1)) => p.prior_params(g, store, c2, c1),
                _ => (
                    g.constant(Tensor::zeros(&frame_shape)),
                    g.constant(Tensor::zeros(&frame_shape)),
                ),
            };
            let lp = gaussian_log_prob_var(z, mu, log_sigma);
            total = total.add(&lp).add(&logdet);
            ctx2 = ctx1;
            ctx1 = Some(z);
        }
        let dim = T::from_f64(self.cfg.sequence_dim() as f64);
        Ok(total.neg().mul_scalar(T::one() / dim))
    }

    /// NLL of one pair without recording adjoints.
    pub fn nll_value(&self, x: &Tensor<T>, y_frames: &[Tensor<T>]) -> Result<f64> {
        let g = Graph::inference();
        Ok(self.nll_graph(&g, x, y_frames)?.value().item().to_f64())
    }

    /// Mean NLL over a batch; no gradients. Parallel over samples with an
    /// order-fixed reduction.
    pub fn batch_nll(&self, batch: &[(Tensor<T>, Vec<Tensor<T>>)]) -> Result<f64> {
        use rayon::prelude::*;
        let losses: Vec<Result<f64>> = batch
            .par_iter()
            .map(|(x, y)| self.nll_value(x, y))
            .collect();
        let mut acc = 0.0;
        for l in losses {
            acc += l?;
        }
        Ok(acc / batch.len() as f64)
    }

    /// Mean NLL over a batch with gradients accumulated into the store
    /// (scaled by 1/batch). Samples run in parallel; the reduction follows
    /// batch order, so results are bit-identical regardless of thread
    /// count. Aborts with a diagnostic if a forward pass produced a
    /// non-finite value anywhere.
    pub fn batch_nll_backward(&mut self, batch: &[(Tensor<T>, Vec<Tensor<T>>)]) -> Result<f64> {
        use rayon::prelude::*;
        type SampleGrads<T> = Vec<(crate::params::ParamId, Tensor<T>)>;
        let inv_b = T::one() / T::from_f64(batch.len() as f64);
        let mut acc = 0.0;
        // bounded chunks keep at most a few per-sample gradient sets alive
        let chunk = rayon::current_num_threads().max(1) * 2;
        for group in batch.chunks(chunk) {
            let results: Vec<Result<(f64, SampleGrads<T>)>> = group
                .par_iter()
                .map(|(x, y)| {
                    let g = Graph::recording();
                    let loss = self.nll_graph(&g, x, y)?;
                    let lv = loss.value().item();
                    if !lv.is_finite() {
                        let (node, label) = g
                            .find_nonfinite()
                            .map(|(i, l)| (i, l.to_string()))
                            .unwrap_or((0, "loss".to_string()));
                        return Err(Error::NonFinite(format!(
                            "loss is {lv}; first non-finite tensor: node {node} ({label})"
                        )));
                    }
                    Ok((lv.to_f64(), g.backward(loss, inv_b).into_param_grads()))
                })
                .collect();
            for r in results {
                let (lv, grads) = r?;
                acc += lv;
                for (pid, g) in grads {
                    self.store.accumulate_grad(pid, &g);
                }
            }
        }
        Ok(acc / batch.len() as f64)
    }

    /// Autoregressive generation. Returns `pred_len` frames of shape
    /// [D, 1, M] in normalized, padded coordinates.
    pub fn predict(&self, x: &Tensor<T>, mode: PredictMode) -> Result<Vec<Tensor<T>>> {
        let want_x = [
            self.cfg.in_channels(),
            self.cfg.input_len,
            self.cfg.padded_entities(),
        ];
        if x.shape() != want_x {
            return Err(Error::ShapeMismatch(format!(
                "input {:?}, model expects {:?}",
                x.shape(),
                want_x
            )));
        }
        match mode {
            PredictMode::Mean => self.rollout(x, 0.0, 0),
            PredictMode::Sample { temperature, seed } => self.rollout(x, temperature, seed),
            PredictMode::Average {
                samples,
                temperature,
                seed,
            } => {
                if samples == 0 {
                    return Err(Error::InvalidArgument("average needs samples >= 1".into()));
                }
                // zero temperature makes every draw the mean path exactly;
                // skip the averaging arithmetic so the result stays
                // bit-identical to mean mode
                if temperature == 0.0 {
                    return self.rollout(x, 0.0, seed);
                }
                let mut acc: Option<Vec<Tensor<T>>> = None;
                for i in 0..samples {
                    let stream = seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let frames = self.rollout(x, temperature, stream)?;
                    acc = Some(match acc {
                        None => frames,
                        Some(prev) => prev.iter().zip(&frames).map(|(a, b)| a.add(b)).collect(),
                    });
                }
                let inv = T::one() / T::from_f64(samples as f64);
                Ok(acc.unwrap().into_iter().map(|f| f.scale(inv)).collect())
            }
        }
    }

    fn rollout(&self, x: &Tensor<T>, temperature: f64, seed: u64) -> Result<Vec<Tensor<T>>> {
        let g = Graph::inference();
        let bundle = self
            .conditioner
            .build_bundle(&g, &self.store, g.constant(x.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame_shape = [self.cfg.latent_channels(), 1, self.cfg.latent_width()];
        let mut ctx2 = self.prior.as_ref().map(|p| g.param(&self.store, p.h_init2));
        let mut ctx1 = self.prior.as_ref().map(|p| g.param(&self.store, p.h_init));
        let mut frames = Vec::with_capacity(self.cfg.pred_len);
        for _ in 0..self.cfg.pred_len {
            let (mu, sigma) = match (&self.prior, ctx2, ctx1) {
                (Some(p), Some(c2), Some(c1)) => {
                    let (mu, log_sigma) = p.prior_params(&g, &self.store, c2, c1);
                    (mu.value(), log_sigma.value().map(|v| v.exp()))
                }
                _ => (
                    Tensor::zeros(&frame_shape),
                    Tensor::filled(&frame_shape, T::one()),
                ),
            };
            let z = sample_latent(&mu, &sigma, temperature, &mut rng);
            frames.push(self.flow.inverse(&self.store, &z, &bundle));
            ctx2 = ctx1;
            ctx1 = Some(g.constant(z));
        }
        Ok(frames)
    }

    /// Conditioning bundle on a caller-supplied graph (verification hook).
    pub fn bundle<'g>(&self, g: &'g Graph<T>, x: &Tensor<T>) -> ConditioningBundle<'g, T> {
        self.conditioner
            .build_bundle(g, &self.store, g.constant(x.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradient_check, CoordSelection};
    use crate::params::Init;
    use rand::Rng;

    pub(crate) fn tiny_model(seed: u64) -> Model<f64> {
        let cfg = ModelConfig {
            seed,
            ..ModelConfig::tiny(1, 2)
        };
        Model::new(cfg).unwrap()
    }

    pub(crate) fn random_pair(cfg: &ModelConfig, seed: u64) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(
            &[cfg.in_channels(), cfg.input_len, cfg.padded_entities()],
            |_| rng.gen_range(-1.0..1.0),
        );
        let y = (0..cfg.pred_len)
            .map(|_| {
                Tensor::from_fn(&[cfg.features, 1, cfg.padded_entities()], |_| {
                    rng.gen_range(-1.0..1.0)
                })
            })
            .collect();
        (x, y)
    }

    #[test]
    fn fresh_model_nll_is_standard_normal_closed_form() {
        let model = tiny_model(3);
        let (x, y) = random_pair(&model.cfg, 4);
        let nll = model.nll_value(&x, &y).unwrap();
        let mut sq = 0.0;
        let mut count = 0.0;
        for f in &y {
            for &v in f.data() {
                sq += v * v;
                count += 1.0;
            }
        }
        let expect = 0.5 * sq / count + 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!(
            (nll - expect).abs() < 1e-6,
            "nll {nll} vs closed form {expect}"
        );
    }

    #[test]
    fn nll_gradient_passes_finite_differences() {
        let mut model = tiny_model(5);
        // push the model off its identity initialization first
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        crate::params::randomize_zero_params(&mut model.store, &mut rng, 0.05);
        let (x, y) = random_pair(&model.cfg, 7);
        let mut store = model.store.clone();
        let report = gradient_check(
            &mut store,
            |g, s| model.nll_graph_with(g, s, &x, &y).unwrap(),
            1e-5,
            1e-3,
            CoordSelection::Sample {
                count: 120,
                seed: 8,
            },
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn prediction_modes_are_consistent() {
        let mut model = tiny_model(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        crate::params::randomize_zero_params(&mut model.store, &mut rng, 0.05);
        // open the carry gate a little so the prior actually moves
        if let Some(p) = &model.prior {
            let cy = model.cfg.latent_channels();
            model
                .store
                .set_value(p.h_init, Init::Normal(0.3).sample(&[cy, 1, 1], &mut rng));
        }
        let (x, _) = random_pair(&model.cfg, 11);

        let mean1 = model.predict(&x, PredictMode::Mean).unwrap();
        let mean2 = model.predict(&x, PredictMode::Mean).unwrap();
        for (a, b) in mean1.iter().zip(&mean2) {
            assert_eq!(a, b, "mean mode must be deterministic");
        }

        // average with S=1 equals sample with the same seed
        let s = model
            .predict(
                &x,
                PredictMode::Sample {
                    temperature: 0.7,
                    seed: 33,
                },
            )
            .unwrap();
        let a1 = model
            .predict(
                &x,
                PredictMode::Average {
                    samples: 1,
                    temperature: 0.7,
                    seed: 33,
                },
            )
            .unwrap();
        for (a, b) in s.iter().zip(&a1) {
            assert_eq!(a, b);
        }

        // temperature zero averaging equals the mean path for any S
        let a0 = model
            .predict(
                &x,
                PredictMode::Average {
                    samples: 4,
                    temperature: 0.0,
                    seed: 5,
                },
            )
            .unwrap();
        for (a, b) in a0.iter().zip(&mean1) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn predicted_frames_invert_back_to_their_latents() {
        let mut model = tiny_model(13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        crate::params::randomize_zero_params(&mut model.store, &mut rng, 0.05);
        let (x, _) = random_pair(&model.cfg, 15);
        let frames = model
            .predict(
                &x,
                PredictMode::Sample {
                    temperature: 0.9,
                    seed: 16,
                },
            )
            .unwrap();
        // rebuild the latents by running the flow forward over the output
        let g = Graph::inference();
        let bundle = model.bundle(&g, &x);
        let mut rng2 = ChaCha8Rng::seed_from_u64(16);
        let frame_shape = [model.cfg.latent_channels(), 1, model.cfg.latent_width()];
        let mut ctx2 = model
            .prior
            .as_ref()
            .map(|p| g.param(&model.store, p.h_init2));
        let mut ctx1 = model
            .prior
            .as_ref()
            .map(|p| g.param(&model.store, p.h_init));
        for frame in &frames {
            let p = model.prior.as_ref().unwrap();
            let (mu, log_sigma) = p.prior_params(&g, &model.store, ctx2.unwrap(), ctx1.unwrap());
            let sigma = log_sigma.value().map(|v| v.exp());
            let z = sample_latent(&mu.value(), &sigma, 0.9, &mut rng2);
            let (z_again, _) =
                model
                    .flow
                    .forward(&g, &model.store, g.constant(frame.clone()), &bundle);
            assert!(z_again.value().max_abs_diff(&z) < 1e-9);
            assert_eq!(z.shape(), frame_shape);
            ctx2 = ctx1;
            ctx1 = Some(g.constant(z));
        }
    }

    /// The prior for step t may depend only on earlier latents.
    #[test]
    fn prior_ignores_the_current_and_later_frames() {
        let mut model = tiny_model(17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        crate::params::randomize_zero_params(&mut model.store, &mut rng, 0.05);
        let (x, y) = random_pair(&model.cfg, 19);
        let t_probe = 1; // inspect (mu, sigma) of the second frame

        let params_at = |y_frames: &[Tensor<f64>]| -> (Tensor<f64>, Tensor<f64>) {
            let g = Graph::inference();
            let bundle = model.bundle(&g, &x);
            let p = model.prior.as_ref().unwrap();
            let mut ctx2 = g.param(&model.store, p.h_init2);
            let mut ctx1 = g.param(&model.store, p.h_init);
            for frame in y_frames.iter().take(t_probe) {
                let (z, _) =
                    model
                        .flow
                        .forward(&g, &model.store, g.constant(frame.clone()), &bundle);
                ctx2 = ctx1;
                ctx1 = z;
            }
            let (mu, ls) = p.prior_params(&g, &model.store, ctx2, ctx1);
            (mu.value(), ls.value())
        };

        let (mu_a, ls_a) = params_at(&y);
        let mut y_mut = y.clone();
        y_mut[t_probe] = y_mut[t_probe].map(|v| v + 10.0); // perturb current
        y_mut[2] = y_mut[2].map(|v| v - 3.0); // and a later frame
        let (mu_b, ls_b) = params_at(&y_mut);
        assert_eq!(mu_a, mu_b);
        assert_eq!(ls_a, ls_b);
    }

    #[test]
    fn ablated_prior_uses_standard_normal() {
        let cfg = ModelConfig {
            use_dynamic_prior: false,
            use_residual_net: false,
            ..ModelConfig::tiny(1, 2)
        };
        let model = Model::<f64>::new(cfg).unwrap();
        assert!(model.prior.is_none());
        let (x, y) = random_pair(&model.cfg, 20);
        // identical to the fresh full model at init: standard normal NLL
        let nll = model.nll_value(&x, &y).unwrap();
        let full = tiny_model(20).nll_value(&x, &y).unwrap();
        assert!((nll - full).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let model = tiny_model(21);
        let bad_x = Tensor::zeros(&[2, 3, 4]);
        let (_, y) = random_pair(&model.cfg, 22);
        assert!(matches!(
            model.nll_value(&bad_x, &y),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn non_finite_forward_aborts_with_diagnostic() {
        let mut model = tiny_model(23);
        // poison one conditioner weight
        let id = model
            .store
            .iter()
            .find(|(_, p)| p.name.contains("fc1.l0.w"))
            .map(|(id, _)| id)
            .unwrap();
        let shape = model.store.value(id).shape().to_vec();
        model.store.set_value(id, Tensor::filled(&shape, f64::NAN));
        let (x, y) = random_pair(&model.cfg, 24);
        let err = model.batch_nll_backward(&[(x, y)]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite"), "{msg}");
        assert!(
            msg.contains("node"),
            "diagnostic names the first bad tensor: {msg}"
        );
    }

    #[test]
    fn f32_training_step_runs() {
        let cfg = ModelConfig {
            precision: crate::tensor::Precision::F32,
            ..ModelConfig::tiny(1, 1)
        };
        let mut model = Model::<f32>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = Tensor::<f32>::from_fn(
            &[
                model.cfg.in_channels(),
                model.cfg.input_len,
                model.cfg.padded_entities(),
            ],
            |_| rng.gen_range(-1.0..1.0),
        );
        let y: Vec<Tensor<f32>> = (0..model.cfg.pred_len)
            .map(|_| {
                Tensor::from_fn(
                    &[model.cfg.features, 1, model.cfg.padded_entities()],
                    |_| rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        model.store.zero_grads();
        let before = model.batch_nll_backward(&[(x.clone(), y.clone())]).unwrap();
        let mut adam = crate::optim::Adam::new(
            crate::optim::AdamConfig {
                learning_rate: 1e-2,
                ..Default::default()
            },
            &model.store,
        );
        for _ in 0..10 {
            model.store.zero_grads();
            model.batch_nll_backward(&[(x.clone(), y.clone())]).unwrap();
            adam.step(&mut model.store);
        }
        let after = model.batch_nll(&[(x, y)]).unwrap();
        assert!(
            after < before,
            "f32 training made no progress: {before} -> {after}"
        );
    }
}
