//! Benchmarks for the hot paths: locally masked convolution, the per-frame
//! flow in both directions, one NLL gradient step, and simulator rollouts.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use trajflow::config::ModelConfig;
use trajflow::masking::{build_mask_set, generate_ordering, OrderingKind};
use trajflow::model::Model;
use trajflow::params::randomize_zero_params;
use trajflow::simulator::{rollout, SimConfig};
use trajflow::tape::Graph;
use trajflow::tensor::Tensor;

fn default_model() -> Model<f64> {
    Model::new(ModelConfig {
        seed: 7,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn random_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(
        &[cfg.in_channels(), cfg.input_len, cfg.padded_entities()],
        |_| rng.gen_range(-1.0..1.0),
    )
}

fn bench_lmconv(c: &mut Criterion) {
    let ordering = generate_ordering(OrderingKind::TimeMajorSCurve, 10, 4);
    let masks = std::sync::Arc::new(build_mask_set(&ordering, 3, 1, true).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = Tensor::<f64>::from_fn(&[32, 10, 4], |_| rng.gen_range(-1.0..1.0));
    let weight = Tensor::<f64>::from_fn(&[16, 32, 3, 3], |_| rng.gen_range(-0.2..0.2));
    let bias = Tensor::<f64>::zeros(&[16]);
    c.bench_function("lmconv 32->16 on 10x4", |b| {
        b.iter(|| trajflow::conv::lmconv(black_box(&input), &weight, &bias, &masks).unwrap())
    });
}

fn bench_flow(c: &mut Criterion) {
    let mut model = default_model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    randomize_zero_params(&mut model.store, &mut rng, 0.04);
    let x = random_input(&model.cfg, &mut rng);
    let frame = Tensor::<f64>::from_fn(
        &[model.cfg.features, 1, model.cfg.padded_entities()],
        |_| rng.gen_range(-1.0..1.0),
    );
    let g = Graph::inference();
    let bundle = model.bundle(&g, &x);
    c.bench_function("flow forward (K=8)", |b| {
        b.iter(|| {
            model
                .flow
                .forward(
                    &g,
                    &model.store,
                    g.constant(black_box(frame.clone())),
                    &bundle,
                )
                .0
                .value()
        })
    });
    let (z, _) = model
        .flow
        .forward(&g, &model.store, g.constant(frame.clone()), &bundle);
    let z = z.value();
    c.bench_function("flow inverse (K=8)", |b| {
        b.iter(|| model.flow.inverse(&model.store, black_box(&z), &bundle))
    });
}

fn bench_nll_step(c: &mut Criterion) {
    let mut model = default_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_input(&model.cfg, &mut rng);
    let y: Vec<Tensor<f64>> = (0..model.cfg.pred_len)
        .map(|_| {
            Tensor::from_fn(
                &[model.cfg.features, 1, model.cfg.padded_entities()],
                |_| rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    let batch = vec![(x, y)];
    c.bench_function("nll forward+backward (1 sample)", |b| {
        b.iter(|| {
            model.store.zero_grads();
            model.batch_nll_backward(black_box(&batch)).unwrap()
        })
    });
}

fn bench_simulator(c: &mut Criterion) {
    let cfg = SimConfig::default();
    c.bench_function("simulator rollout (35 steps)", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        b.iter(|| rollout(black_box(&cfg), &mut rng))
    });
}

criterion_group!(
    benches,
    bench_lmconv,
    bench_flow,
    bench_nll_step,
    bench_simulator
);
criterion_main!(benches);
