//! Layer descriptors: named parameter handles plus a forward method on the
//! differentiation record. Layers own no tensor data; values live in the
//! [`ParamStore`].

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::masking::LocalMaskSet;
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Graph, Var};
use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        init: Init,
    ) -> Self {
        let weight = store.register(
            format!("{name}.w"),
            init.sample(&[out_ch, in_ch, kernel, kernel], rng),
        );
        let bias = store.register(format!("{name}.b"), Init::Zero.sample(&[out_ch], rng));
        Conv2dLayer {
            weight,
            bias,
            dilation,
        }
    }

    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Var<'g, T> {
        x.conv2d(
            &g.param(store, self.weight),
            &g.param(store, self.bias),
            self.dilation,
        )
    }
}

#[derive(Debug, Clone)]
pub struct LmConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub masks: Arc<LocalMaskSet>,
}

impl LmConvLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        masks: Arc<LocalMaskSet>,
        init: Init,
    ) -> Self {
        let k = masks.kernel;
        let weight = store.register(
            format!("{name}.w"),
            init.sample(&[out_ch, in_ch, k, k], rng),
        );
        let bias = store.register(format!("{name}.b"), Init::Zero.sample(&[out_ch], rng));
        LmConvLayer {
            weight,
            bias,
            masks,
        }
    }

    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Var<'g, T> {
        x.lmconv(
            &g.param(store, self.weight),
            &g.param(store, self.bias),
            &self.masks,
        )
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Self {
        let weight = store.register(format!("{name}.w"), init.sample(&[out_dim, in_dim], rng));
        let bias = store.register(format!("{name}.b"), Init::Zero.sample(&[out_dim], rng));
        LinearLayer { weight, bias }
    }

    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Var<'g, T> {
        x.linear(&g.param(store, self.weight), &g.param(store, self.bias))
    }
}

/// Three linear layers with ELU between them (the FC_1 / FC_2 heads).
#[derive(Debug, Clone)]
pub struct LinearStack {
    pub layers: [LinearLayer; 3],
}

impl LinearStack {
    /// Hidden widths `hidden`, final width `out`, final layer zero-initialized.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out: usize,
    ) -> Self {
        let l0 = LinearLayer::new(
            store,
            rng,
            &format!("{name}.l0"),
            in_dim,
            hidden,
            Init::FanIn,
        );
        let l1 = LinearLayer::new(
            store,
            rng,
            &format!("{name}.l1"),
            hidden,
            hidden,
            Init::FanIn,
        );
        let l2 = LinearLayer::new(store, rng, &format!("{name}.l2"), hidden, out, Init::Zero);
        LinearStack {
            layers: [l0, l1, l2],
        }
    }

    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Var<'g, T> {
        let h0 = self.layers[0].forward(g, store, x).elu();
        let h1 = self.layers[1].forward(g, store, h0).elu();
        self.layers[2].forward(g, store, h1)
    }
}
