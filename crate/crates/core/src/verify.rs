//! Runtime oracle suites: flow round-trips, log-determinant against a
//! finite-difference Jacobian, autoregressivity of the masked stacks, and
//! finite-difference certification of the full NLL gradient. The `verify`
//! CLI command runs these; the acceptance tests assert their reports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::config::ModelConfig;
use crate::gradcheck::{gradient_check, CoordSelection, GradCheckReport};
use crate::masking::{build_mask_set, generate_ordering, OrderingKind};
use crate::model::Model;
use crate::params::randomize_zero_params;
use crate::tape::Graph;
use crate::tensor::{Real, Tensor};

/// Standard deviation used when randomizing the zero-initialized heads for
/// verification. Large values saturate the scale clamps and blow up 32-bit
/// round-trip error; this keeps the flows non-trivial but well-conditioned.
pub const VERIFY_HEAD_SD: f64 = 0.04;

#[derive(Debug, Clone)]
pub struct BijectivityReport {
    pub cases: usize,
    pub worst_abs_err: f64,
}

/// Round-trips over latent widths {2, 4} and flow depths {1, 2, 8} with
/// randomized parameters: inverse(forward(frame)) against the frame.
pub fn bijectivity_suite<T: Real>(seed: u64, inputs_per_model: usize) -> BijectivityReport {
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for (ci, &(lw, k)) in [(2usize, 1usize), (2, 2), (2, 8), (4, 1), (4, 2), (4, 8)]
        .iter()
        .enumerate()
    {
        for draw in 0..2u64 {
            let cfg = ModelConfig {
                seed: seed ^ ((ci as u64) << 32) ^ draw,
                precision: T::PRECISION,
                ..ModelConfig::tiny(lw, k)
            };
            let mut model = Model::<T>::new(cfg).expect("tiny config is valid");
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB17 ^ ((ci as u64) << 8) ^ draw);
            randomize_zero_params(&mut model.store, &mut rng, VERIFY_HEAD_SD);
            for _ in 0..inputs_per_model {
                let x = random_input(&model.cfg, &mut rng);
                let g = Graph::inference();
                let bundle = model.bundle(&g, &x);
                let frame = random_frame(&model.cfg, &mut rng);
                let (z, _) =
                    model
                        .flow
                        .forward(&g, &model.store, g.constant(frame.clone()), &bundle);
                let back = model.flow.inverse(&model.store, &z.value(), &bundle);
                worst = worst.max(back.max_abs_diff(&frame).to_f64());
                cases += 1;
            }
        }
    }
    BijectivityReport {
        cases,
        worst_abs_err: worst,
    }
}

#[derive(Debug, Clone)]
pub struct LogDetReport {
    pub draws: usize,
    pub worst_rel_err: f64,
}

/// Compare the flow's claimed log-determinant with log |det J| of the full
/// Jacobian assembled by central differences (frame dimension <= 16, K <= 2).
pub fn logdet_suite(seed: u64, draws: usize) -> LogDetReport {
    let mut worst = 0.0f64;
    let combos = [(2usize, 1usize), (2, 2), (4, 1), (4, 2)];
    for draw in 0..draws {
        let (lw, k) = combos[draw % combos.len()];
        let cfg = ModelConfig {
            seed: seed ^ ((draw as u64) << 16),
            ..ModelConfig::tiny(lw, k)
        };
        let mut model = Model::<f64>::new(cfg).expect("tiny config is valid");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDE7 ^ (draw as u64));
        randomize_zero_params(&mut model.store, &mut rng, VERIFY_HEAD_SD);
        let x = random_input(&model.cfg, &mut rng);
        let g = Graph::inference();
        let bundle = model.bundle(&g, &x);
        let frame = random_frame(&model.cfg, &mut rng);
        let n = frame.numel();
        let h = 1e-6;
        let mut jac = vec![0.0f64; n * n];
        for j in 0..n {
            let plus = {
                let (z, _) = model.flow.forward(
                    &g,
                    &model.store,
                    g.constant(frame.with_elem(j, frame.data()[j] + h)),
                    &bundle,
                );
                z.value()
            };
            let minus = {
                let (z, _) = model.flow.forward(
                    &g,
                    &model.store,
                    g.constant(frame.with_elem(j, frame.data()[j] - h)),
                    &bundle,
                );
                z.value()
            };
            for i in 0..n {
                jac[i * n + j] = (plus.data()[i] - minus.data()[i]) / (2.0 * h);
            }
        }
        let oracle = log_abs_det(&jac, n);
        let (_, ld) = model
            .flow
            .forward(&g, &model.store, g.constant(frame), &bundle);
        let claimed = ld.value().item();
        let rel = (claimed - oracle).abs() / oracle.abs().max(1.0);
        worst = worst.max(rel);
    }
    LogDetReport {
        draws,
        worst_rel_err: worst,
    }
}

/// log |det| by Gaussian elimination with partial pivoting. Independent of
/// every code path that produces log-determinants analytically.
pub fn log_abs_det(matrix: &[f64], n: usize) -> f64 {
    let mut a = matrix.to_vec();
    let mut acc = 0.0f64;
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
        let p = a[col * n + col];
        acc += p.abs().ln();
        for i in col + 1..n {
            let f = a[i * n + col] / p;
            for j in col..n {
                a[i * n + j] -= f * a[col * n + j];
            }
        }
    }
    acc
}

#[derive(Debug, Clone)]
pub struct AutoregressivityReport {
    pub grids: usize,
    pub checks: usize,
    pub violations: usize,
}

/// Perturbation test over both orderings on grids up to `max_side` square:
/// a stack of one exclusive-mask convolution followed by inclusive
/// (undilated and dilated) ones may propagate a change from cell j to cell
/// i only if rank(j) < rank(i). Influence must otherwise be exactly zero.
pub fn autoregressivity_suite(seed: u64, max_side: usize) -> AutoregressivityReport {
    let mut grids = 0usize;
    let mut checks = 0usize;
    let mut violations = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for kind in [
        OrderingKind::TimeMajorSCurve,
        OrderingKind::EntityMajorSCurve,
    ] {
        for u in 1..=max_side {
            for n in 1..=max_side {
                grids += 1;
                let ordering = generate_ordering(kind, u, n);
                let initial = Arc::new(build_mask_set(&ordering, 3, 1, false).unwrap());
                let undilated = Arc::new(build_mask_set(&ordering, 3, 1, true).unwrap());
                let dilated = Arc::new(build_mask_set(&ordering, 3, 2, true).unwrap());
                let w0 = Tensor::<f64>::from_fn(&[4, 1, 3, 3], |_| rng.gen_range(-1.0..1.0));
                let w1 = Tensor::from_fn(&[4, 4, 3, 3], |_| rng.gen_range(-1.0..1.0));
                let w2 = Tensor::from_fn(&[2, 4, 3, 3], |_| rng.gen_range(-1.0..1.0));
                let b0 = Tensor::from_fn(&[4], |_| rng.gen_range(-0.5..0.5));
                let b1 = Tensor::from_fn(&[4], |_| rng.gen_range(-0.5..0.5));
                let b2 = Tensor::from_fn(&[2], |_| rng.gen_range(-0.5..0.5));
                let forward = |input: &Tensor<f64>| -> Tensor<f64> {
                    let g = Graph::inference();
                    let h0 = g.constant(input.clone()).lmconv(
                        &g.constant(w0.clone()),
                        &g.constant(b0.clone()),
                        &initial,
                    );
                    let h1 = h0.elu().lmconv(
                        &g.constant(w1.clone()),
                        &g.constant(b1.clone()),
                        &undilated,
                    );
                    h1.elu()
                        .lmconv(&g.constant(w2.clone()), &g.constant(b2.clone()), &dilated)
                        .value()
                };
                let base_in = Tensor::<f64>::from_fn(&[1, u, n], |_| rng.gen_range(-1.0..1.0));
                let base_out = forward(&base_in);
                for jt in 0..u {
                    for jn in 0..n {
                        let flat = base_in.offset(&[0, jt, jn]);
                        let bumped = base_in.with_elem(flat, base_in.data()[flat] + 0.731);
                        let out = forward(&bumped);
                        for it in 0..u {
                            for inn in 0..n {
                                if ordering.rank(jt, jn) >= ordering.rank(it, inn) {
                                    checks += 1;
                                    for c in 0..2 {
                                        if out.at(&[c, it, inn]) != base_out.at(&[c, it, inn]) {
                                            violations += 1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    AutoregressivityReport {
        grids,
        checks,
        violations,
    }
}

/// Finite-difference certification of the full-model NLL gradient on the
/// small frame-16 geometry (f64, step 1e-5).
pub fn gradient_certification(seed: u64, coords: usize, tolerance: f64) -> GradCheckReport {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::tiny(4, 2)
    };
    let mut model = Model::<f64>::new(cfg).expect("tiny config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C);
    randomize_zero_params(&mut model.store, &mut rng, VERIFY_HEAD_SD);
    let x = random_input(&model.cfg, &mut rng);
    let y: Vec<Tensor<f64>> = (0..model.cfg.pred_len)
        .map(|_| random_frame(&model.cfg, &mut rng))
        .collect();
    let mut store = model.store.clone();
    gradient_check(
        &mut store,
        |g, s| {
            model
                .nll_graph_with(g, s, &x, &y)
                .expect("shapes fixed by construction")
        },
        1e-5,
        tolerance,
        CoordSelection::Sample {
            count: coords,
            seed: seed ^ 0x51,
        },
    )
}

fn random_input<T: Real>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(
        &[cfg.in_channels(), cfg.input_len, cfg.padded_entities()],
        |_| T::from_f64(rng.gen_range(-1.0..1.0)),
    )
}

fn random_frame<T: Real>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(&[cfg.features, 1, cfg.padded_entities()], |_| {
        T::from_f64(rng.gen_range(-1.0..1.0))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_abs_det_on_known_matrix() {
        // det [[2, 1], [1, 2]] = 3
        let m = vec![2.0, 1.0, 1.0, 2.0];
        assert!((log_abs_det(&m, 2) - 3.0f64.ln()).abs() < 1e-12);
        // det of a permutation has absolute value 1
        let p = vec![0.0, 1.0, 1.0, 0.0];
        assert!(log_abs_det(&p, 2).abs() < 1e-12);
    }

    #[test]
    fn autoregressivity_on_small_grids() {
        let r = autoregressivity_suite(3, 3);
        assert_eq!(r.violations, 0, "{r:?}");
        assert!(r.checks > 0);
    }
}
