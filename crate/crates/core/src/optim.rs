//! Adam with decoupled weight decay and optional global-norm clipping.

use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

pub struct Adam<T> {
    pub cfg: AdamConfig,
    /// First- and second-moment buffers, aligned with the store's entries.
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        let v = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Adam { cfg, m, v, step: 0 }
    }

    /// One update from the gradients currently held in the store. Weight
    /// decay is applied to the weights directly, before the adaptive step.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let lr = T::from_f64(self.cfg.learning_rate);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.epsilon);
        let decay = T::from_f64(1.0 - self.cfg.learning_rate * self.cfg.weight_decay);
        let corr1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let corr2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        let one = T::one();

        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get(id);
            if !p.trainable {
                continue;
            }
            let g = p.grad.clone();
            let m = self.m[id.0].zip(&g, |m, g| b1 * m + (one - b1) * g);
            let v = self.v[id.0].zip(&g, |v, g| b2 * v + (one - b2) * g * g);
            let value = p.value.map(|w| w * decay);
            let new_value = Tensor::from_fn(value.shape(), |i| {
                let mh = m.data()[i] / corr1;
                let vh = v.data()[i] / corr2;
                value.data()[i] - lr * mh / (vh.sqrt() + eps)
            });
            self.m[id.0] = m;
            self.v[id.0] = v;
            store.set_value(id, new_value);
        }
    }
}

/// Scale all gradients so their joint L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, p) in store.iter() {
        for &g in p.grad.data() {
            let g = g.to_f64();
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let scaled = store.get(id).grad.scale(scale);
            store.set_grad(id, scaled);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: Vec<f64>, g: Vec<f64>) -> (ParamStore<f64>, crate::params::ParamId) {
        let mut store = ParamStore::new();
        let n = v.len();
        let id = store.register("w", Tensor::from_vec(&[n], v));
        store.accumulate_grad(id, &Tensor::from_vec(&[n], g));
        (store, id)
    }

    #[test]
    fn first_step_with_unit_gradient() {
        // bias-corrected moments are both 1, so the update is
        // -lr / (1 + eps) per coordinate
        let (mut store, id) = store_with(vec![0.0, 0.0], vec![1.0, 1.0]);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        adam.step(&mut store);
        let expect = -0.1 / (1.0 + 1e-8);
        for &w in store.value(id).data() {
            assert!((w - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = store_with(vec![1.5, -2.5], vec![0.0, 0.0]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        adam.step(&mut store);
        assert_eq!(store.value(id).data(), &[1.5, -2.5]);
    }

    /// Convergence oracle: minimize (w - 5)^2.
    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::<f64>::scalar(0.0));
        let cfg = AdamConfig {
            learning_rate: 1e-2,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        for _ in 0..5000 {
            let w = store.value(id).item();
            store.zero_grads();
            store.accumulate_grad(id, &Tensor::scalar(2.0 * (w - 5.0)));
            adam.step(&mut store);
        }
        assert!((store.value(id).item() - 5.0).abs() < 1e-2);
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let (mut store, id) = store_with(vec![1.0], vec![0.0]);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        adam.step(&mut store);
        assert!((store.value(id).item() - (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn clipping_preserves_direction() {
        let (mut store, id) = store_with(vec![0.0, 0.0], vec![3.0, 4.0]);
        let norm = clip_global_norm(&mut store, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let g = store.get(id).grad.clone();
        assert!((g.data()[0] - 0.6).abs() < 1e-12);
        assert!((g.data()[1] - 0.8).abs() < 1e-12);
        // below the ceiling nothing changes
        let norm2 = clip_global_norm(&mut store, 10.0);
        assert!((norm2 - 1.0).abs() < 1e-9);
        assert!((store.get(id).grad.data()[0] - 0.6).abs() < 1e-12);
    }
}
