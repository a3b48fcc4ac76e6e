//! Named parameter registry with gradient buffers.
//!
//! All trainable state lives in one flat store so the optimizer, the
//! checkpoint writer and the finite-difference checker can walk every
//! coordinate without knowing the network structure.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Value plus gradient accumulator of one model parameter.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "parameter {} shape change",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        let p = &mut self.entries[id.0];
        p.grad = p.grad.add(g);
    }

    pub fn set_grad(&mut self, id: ParamId, g: Tensor<T>) {
        assert_eq!(self.entries[id.0].value.shape(), g.shape());
        self.entries[id.0].grad = g;
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn coordinate_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Map a global coordinate index to (param, flat offset within it).
    pub fn locate_coordinate(&self, mut coord: usize) -> (ParamId, usize) {
        for (i, p) in self.entries.iter().enumerate() {
            if coord < p.value.numel() {
                return (ParamId(i), coord);
            }
            coord -= p.value.numel();
        }
        panic!("coordinate index out of range");
    }

    pub fn perturb(&mut self, id: ParamId, flat: usize, delta: T) {
        let p = &mut self.entries[id.0];
        let old = p.value.data()[flat];
        p.value = p.value.with_elem(flat, old + delta);
    }
}

/// Weight initialisation used by the network builders.
pub enum Init {
    Zero,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian scaled by 1/sqrt(fan-in); fan-in is every axis but the
    /// first. Keeps hidden feature magnitudes comparable across layer
    /// shapes, which the zero-initialized readout layers need to receive
    /// usable gradients.
    FanIn,
}

impl Init {
    pub fn sample<T: Real>(&self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        match self {
            Init::Zero => Tensor::zeros(shape),
            Init::Normal(sd) => {
                let dist = Normal::new(0.0, *sd).expect("valid std dev");
                Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
            }
            Init::FanIn => {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std dev");
                Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
            }
        }
    }
}

/// Uniform sample in [lo, hi) as f64, converted on use.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Overwrite every all-zero parameter with Gaussian noise. The verification
/// suites use this to probe non-identity flows: freshly built models have
/// zero-initialized heads and would otherwise test the identity map only.
pub fn randomize_zero_params<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, sd: f64) {
    let ids: Vec<_> = store
        .iter()
        .map(|(id, p)| (id, p.value.shape().to_vec()))
        .collect();
    for (id, shape) in ids {
        if store.value(id).max_abs() == T::zero() {
            store.set_value(id, Init::Normal(sd).sample(&shape, rng));
        }
    }
}
