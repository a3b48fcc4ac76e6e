//! Reverse-mode differentiation over tensors.
//!
//! Every operation appends a node to a [`Graph`]: the produced value plus a
//! closure mapping the upstream gradient to contributions for each parent.
//! `Graph::backward` replays the record in reverse creation order. Tensors
//! are immutable once produced, so recorded values can be captured by
//! cheaply cloning their shared storage.
//!
//! Graphs built with [`Graph::inference`] skip the closures entirely; the
//! prediction path uses that mode.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::conv::{
    conv2d_forward, conv2d_vjp, lmconv_forward, lmconv_vjp, validate_conv, validate_lmconv,
};
use crate::error::{Error, Result};
use crate::masking::LocalMaskSet;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

type Vjp<T> = Box<dyn Fn(&Tensor<T>) -> Vec<(usize, Tensor<T>)>>;

struct Node<T> {
    value: Tensor<T>,
    vjp: Option<Vjp<T>>,
    param: Option<ParamId>,
    label: &'static str,
}

/// Recording of one forward computation.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    param_leaves: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
}

/// Handle to a tensor on a graph.
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> Graph<T> {
    /// Graph that records adjoints for a later backward pass.
    pub fn recording() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// Forward-only graph: values are tracked, adjoints are not.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(HashMap::new()),
            grad_enabled: false,
        }
    }

    fn push(&self, value: Tensor<T>, vjp: Option<Vjp<T>>, label: &'static str) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            vjp: if self.grad_enabled { vjp } else { None },
            param: None,
            label,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Constant leaf: participates in values, receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, None, "constant")
    }

    /// Parameter leaf. Repeated requests for the same parameter return the
    /// same node so gradient accumulation stays well-defined.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&nid) = self.param_leaves.borrow().get(&id) {
            return Var {
                graph: self,
                id: nid,
            };
        }
        let var = self.push(store.value(id).clone(), None, "param");
        self.nodes.borrow_mut()[var.id].param = Some(id);
        self.param_leaves.borrow_mut().insert(id, var.id);
        var
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First node (in creation order) holding a NaN/Inf, for diagnostics.
    pub fn find_nonfinite(&self) -> Option<(usize, &'static str)> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.label))
    }

    /// Reverse sweep from a scalar root. Seeds the root with `seed` and
    /// returns per-node adjoints.
    pub fn backward(&self, root: Var<'_, T>, seed: T) -> Gradients<T> {
        assert!(self.grad_enabled, "backward on an inference graph");
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.numel(),
            1,
            "backward root must be scalar"
        );
        let mut table: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        table[root.id] = Some(Tensor::scalar(seed));
        for id in (0..=root.id).rev() {
            let Some(up) = table[id].clone() else {
                continue;
            };
            if let Some(vjp) = &nodes[id].vjp {
                for (pid, contrib) in vjp(&up) {
                    match &mut table[pid] {
                        Some(acc) => *acc = acc.add(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Gradients { table, params }
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    table: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.table[var.id].as_ref()
    }

    /// Add each parameter's adjoint into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(nid, pid) in &self.params {
            if let Some(g) = &self.table[nid] {
                store.accumulate_grad(pid, g);
            }
        }
    }

    /// Detach the parameter adjoints (the per-sample result that batch
    /// workers hand back for an ordered reduction).
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out = Vec::with_capacity(self.params.len());
        for &(nid, pid) in &self.params {
            if let Some(g) = self.table[nid].take() {
                out.push((pid, g));
            }
        }
        out
    }
}

// ── var operations ──────────────────────────────────────────────────────

impl<'g, T: Real> Var<'g, T> {
    pub fn value(&self) -> Tensor<T> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(
        &self,
        out: Tensor<T>,
        label: &'static str,
        vjp: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> Var<'g, T> {
        let pid = self.id;
        self.graph
            .push(out, Some(Box::new(move |g| vec![(pid, vjp(g))])), label)
    }

    pub fn add(&self, other: &Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = a.add(&b);
        let (ia, ib) = (self.id, other.id);
        self.graph.push(
            out,
            Some(Box::new(move |g| vec![(ia, g.clone()), (ib, g.clone())])),
            "add",
        )
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Var<'g, T> {
        let out = self.value().sub(&other.value());
        let (ia, ib) = (self.id, other.id);
        self.graph.push(
            out,
            Some(Box::new(move |g| {
                vec![(ia, g.clone()), (ib, g.map(|v| -v))]
            })),
            "sub",
        )
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = a.mul(&b);
        let (ia, ib) = (self.id, other.id);
        self.graph.push(
            out,
            Some(Box::new(move |g| vec![(ia, g.mul(&b)), (ib, g.mul(&a))])),
            "mul",
        )
    }

    pub fn neg(&self) -> Var<'g, T> {
        self.unary(self.value().map(|v| -v), "neg", |g| g.map(|v| -v))
    }

    pub fn add_scalar(&self, c: T) -> Var<'g, T> {
        self.unary(self.value().map(|v| v + c), "add_scalar", |g| g.clone())
    }

    pub fn mul_scalar(&self, c: T) -> Var<'g, T> {
        self.unary(self.value().scale(c), "mul_scalar", move |g| g.scale(c))
    }

    /// Elementwise product with a constant tensor (no gradient to the mask).
    pub fn mul_const(&self, mask: &Tensor<T>) -> Var<'g, T> {
        let out = self.value().mul(mask);
        let m = mask.clone();
        self.unary(out, "mul_const", move |g| g.mul(&m))
    }

    pub fn exp(&self) -> Var<'g, T> {
        let out = self.value().map(|v| v.exp());
        let y = out.clone();
        self.unary(out, "exp", move |g| g.mul(&y))
    }

    pub fn tanh(&self) -> Var<'g, T> {
        let out = self.value().map(|v| v.tanh());
        let y = out.clone();
        self.unary(out, "tanh", move |g| {
            g.zip(&y, |gv, yv| gv * (T::one() - yv * yv))
        })
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        let out = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        let y = out.clone();
        self.unary(out, "sigmoid", move |g| {
            g.zip(&y, |gv, yv| gv * yv * (T::one() - yv))
        })
    }

    pub fn elu(&self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { v.exp() - T::one() });
        let xc = x.clone();
        self.unary(out, "elu", move |g| {
            g.zip(
                &xc,
                |gv, xv| if xv > T::zero() { gv } else { gv * xv.exp() },
            )
        })
    }

    pub fn clamp(&self, lo: T, hi: T) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v.max(lo).min(hi));
        let xc = x.clone();
        self.unary(out, "clamp", move |g| {
            g.zip(
                &xc,
                |gv, xv| if xv >= lo && xv <= hi { gv } else { T::zero() },
            )
        })
    }

    /// Smooth range limiter `bound * tanh(x / bound)`, used wherever a
    /// log-scale must stay bounded.
    pub fn soft_clamp(&self, bound: T) -> Var<'g, T> {
        self.mul_scalar(T::one() / bound).tanh().mul_scalar(bound)
    }

    pub fn sum(&self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), "sum", move |g| {
            Tensor::filled(&shape, g.item())
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        self.unary(x.reshaped(shape), "reshape", move |g| g.reshaped(&old))
    }

    /// Matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, other: &Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape().len(), 2, "matmul lhs must be 2-d");
        assert_eq!(b.shape().len(), 2, "matmul rhs must be 2-d");
        assert_eq!(
            a.shape()[1],
            b.shape()[0],
            "matmul inner dims {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let out = matmul_plain(&a, &b);
        let (ia, ib) = (self.id, other.id);
        self.graph.push(
            out,
            Some(Box::new(move |g| {
                vec![(ia, matmul_nt(g, &b)), (ib, matmul_tn(&a, g))]
            })),
            "matmul",
        )
    }

    /// Affine map weight[m,n] . self[n] + bias[m].
    pub fn linear(&self, weight: &Var<'g, T>, bias: &Var<'g, T>) -> Var<'g, T> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        assert_eq!(
            w.shape()[1],
            x.numel(),
            "linear weight {:?} against input {:?}",
            w.shape(),
            x.shape()
        );
        assert_eq!(w.shape()[0], b.numel(), "linear bias length");
        let m = w.shape()[0];
        let n = w.shape()[1];
        let mut out = vec![T::zero(); m];
        for i in 0..m {
            let mut acc = b.data()[i];
            for j in 0..n {
                acc = acc + w.data()[i * n + j] * x.data()[j];
            }
            out[i] = acc;
        }
        let (ix, iw, ib) = (self.id, weight.id, bias.id);
        self.graph.push(
            Tensor::from_vec(&[m], out),
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut dx = vec![T::zero(); n];
                let mut dw = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[j] = dx[j] + w.data()[i * n + j] * gd[i];
                        dw[i * n + j] = gd[i] * x.data()[j];
                    }
                }
                vec![
                    (ix, Tensor::from_vec(&[n], dx)),
                    (iw, Tensor::from_vec(&[m, n], dw)),
                    (ib, g.clone()),
                ]
            })),
            "linear",
        )
    }

    /// Same-padding 2-d cross-correlation (see [`crate::conv::conv2d`]).
    pub fn conv2d(&self, weight: &Var<'g, T>, bias: &Var<'g, T>, dilation: usize) -> Var<'g, T> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        validate_conv(&x, &w, &b, dilation).expect("conv2d shapes prevalidated by builder");
        let out = conv2d_forward(&x, &w, &b, dilation);
        let (ix, iw, ib) = (self.id, weight.id, bias.id);
        self.graph.push(
            out,
            Some(Box::new(move |g| {
                let (dx, dw, db) = conv2d_vjp(g, &x, &w, dilation);
                vec![(ix, dx), (iw, dw), (ib, db)]
            })),
            "conv2d",
        )
    }

    /// Locally masked convolution (see [`crate::conv::lmconv`]).
    pub fn lmconv(
        &self,
        weight: &Var<'g, T>,
        bias: &Var<'g, T>,
        masks: &Arc<LocalMaskSet>,
    ) -> Var<'g, T> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        validate_lmconv(&x, &w, &b, masks).expect("lmconv shapes prevalidated by builder");
        let out = lmconv_forward(&x, &w, &b, masks);
        let (ix, iw, ib) = (self.id, weight.id, bias.id);
        let ms = Arc::clone(masks);
        self.graph.push(
            out,
            Some(Box::new(move |g| {
                let (dx, dw, db) = lmconv_vjp(g, &x, &w, &ms);
                vec![(ix, dx), (iw, dw), (ib, db)]
            })),
            "lmconv",
        )
    }

    /// Per-channel scaling: out[c, ..] = self[c, ..] * s[c].
    pub fn scale_channels(&self, s: &Var<'g, T>) -> Var<'g, T> {
        let (x, sv) = (self.value(), s.value());
        let c = x.shape()[0];
        assert_eq!(
            sv.numel(),
            c,
            "scale_channels expects one factor per channel"
        );
        let rest = x.numel() / c;
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] * sv.data()[i / rest]);
        let (ix, is) = (self.id, s.id);
        let sshape = sv.shape().to_vec();
        self.graph.push(
            out,
            Some(Box::new(move |g| {
                let dx = Tensor::from_fn(x.shape(), |i| g.data()[i] * sv.data()[i / rest]);
                let mut ds = vec![T::zero(); c];
                for i in 0..x.numel() {
                    ds[i / rest] = ds[i / rest] + g.data()[i] * x.data()[i];
                }
                vec![(ix, dx), (is, Tensor::from_vec(&sshape, ds))]
            })),
            "scale_channels",
        )
    }

    /// Per-channel shift: out[c, ..] = self[c, ..] + b[c].
    pub fn shift_channels(&self, b: &Var<'g, T>) -> Var<'g, T> {
        let (x, bv) = (self.value(), b.value());
        let c = x.shape()[0];
        assert_eq!(
            bv.numel(),
            c,
            "shift_channels expects one offset per channel"
        );
        let rest = x.numel() / c;
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] + bv.data()[i / rest]);
        let (ix, ib) = (self.id, b.id);
        let bshape = bv.shape().to_vec();
        self.graph.push(
            out,
            Some(Box::new(move |g| {
                let mut db = vec![T::zero(); c];
                for i in 0..g.numel() {
                    db[i / rest] = db[i / rest] + g.data()[i];
                }
                vec![(ix, g.clone()), (ib, Tensor::from_vec(&bshape, db))]
            })),
            "shift_channels",
        )
    }

    pub fn slice_channels(&self, lo: usize, hi: usize) -> Var<'g, T> {
        let x = self.value();
        let out = crate::tensor::slice_channels(&x, lo, hi);
        let shape = x.shape().to_vec();
        let rest: usize = shape[1..].iter().product();
        self.unary(out, "slice_channels", move |g| {
            let mut dx = vec![T::zero(); shape.iter().product()];
            dx[lo * rest..hi * rest].copy_from_slice(g.data());
            Tensor::from_vec(&shape, dx)
        })
    }

    pub fn concat_channels(&self, other: &Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = crate::tensor::concat_channels(&a, &b);
        let ca = a.shape()[0];
        let cab = out.shape()[0];
        let (ia, ib) = (self.id, other.id);
        self.graph.push(
            out,
            Some(Box::new(move |g| {
                vec![
                    (ia, crate::tensor::slice_channels(g, 0, ca)),
                    (ib, crate::tensor::slice_channels(g, ca, cab)),
                ]
            })),
            "concat_channels",
        )
    }

    /// Reorder/select channels; used for the even/odd channel split.
    pub fn gather_channels(&self, idx: Vec<usize>) -> Var<'g, T> {
        let x = self.value();
        let c = x.shape()[0];
        let rest = x.numel() / c;
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * rest);
        for &ch in &idx {
            assert!(ch < c, "gather channel {ch} out of {c}");
            data.extend_from_slice(&x.data()[ch * rest..(ch + 1) * rest]);
        }
        let xshape = x.shape().to_vec();
        self.unary(
            Tensor::from_vec(&shape, data),
            "gather_channels",
            move |g| {
                let mut dx = vec![T::zero(); xshape.iter().product()];
                for (j, &ch) in idx.iter().enumerate() {
                    for r in 0..rest {
                        dx[ch * rest + r] = dx[ch * rest + r] + g.data()[j * rest + r];
                    }
                }
                Tensor::from_vec(&xshape, dx)
            },
        )
    }

    /// Positional normalization: at each spatial position, whiten the
    /// channel vector: (x - mean) / (std + eps), statistics over channels.
    pub fn pono(&self, eps: T) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.shape().len(), 3, "pono expects [C,H,W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hw = h * w;
        let cf = T::from_f64(c as f64);
        let mut out = vec![T::zero(); x.numel()];
        let mut stds = vec![T::zero(); hw];
        for p in 0..hw {
            let mut mean = T::zero();
            for ch in 0..c {
                mean = mean + x.data()[ch * hw + p];
            }
            mean = mean / cf;
            let mut var = T::zero();
            for ch in 0..c {
                let d = x.data()[ch * hw + p] - mean;
                var = var + d * d;
            }
            let std = (var / cf).sqrt();
            stds[p] = std;
            let denom = std + eps;
            for ch in 0..c {
                out[ch * hw + p] = (x.data()[ch * hw + p] - mean) / denom;
            }
        }
        let y = Tensor::from_vec(x.shape(), out);
        let yc = y.clone();
        let xshape = x.shape().to_vec();
        self.unary(y, "pono", move |g| {
            // dx_j = (g_j - mean(g)) / (s + eps) - y_j * <g, y> / (C * s)
            // with the second term dropped where the channel variance
            // vanishes (y is identically zero there).
            let mut dx = vec![T::zero(); g.numel()];
            for p in 0..hw {
                let mut gsum = T::zero();
                let mut gy = T::zero();
                for ch in 0..c {
                    gsum = gsum + g.data()[ch * hw + p];
                    gy = gy + g.data()[ch * hw + p] * yc.data()[ch * hw + p];
                }
                let gmean = gsum / cf;
                let denom = stds[p] + eps;
                let curv = if stds[p] > T::from_f64(1e-30) {
                    gy / (cf * stds[p])
                } else {
                    T::zero()
                };
                for ch in 0..c {
                    dx[ch * hw + p] =
                        (g.data()[ch * hw + p] - gmean) / denom - yc.data()[ch * hw + p] * curv;
                }
            }
            Tensor::from_vec(&xshape, dx)
        })
    }

    /// Mean over the time axis: [C,U,N] -> [C,1,N].
    pub fn mean_time(&self) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.shape().len(), 3, "mean_time expects [C,U,N]");
        let (c, u, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let uf = T::from_f64(u as f64);
        let out = Tensor::from_fn(&[c, 1, n], |i| {
            let (ch, col) = (i / n, i % n);
            let mut acc = T::zero();
            for t in 0..u {
                acc = acc + x.data()[(ch * u + t) * n + col];
            }
            acc / uf
        });
        self.unary(out, "mean_time", move |g| {
            Tensor::from_fn(&[c, u, n], |i| {
                let ch = i / (u * n);
                let col = i % n;
                g.data()[ch * n + col] / uf
            })
        })
    }

    /// Non-overlapping mean pooling along the width: [C,H,W] -> [C,H,W/f].
    pub fn mean_pool_width(&self, factor: usize) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(
            w % factor == 0,
            "width {w} not divisible by pool factor {factor}"
        );
        let wo = w / factor;
        let ff = T::from_f64(factor as f64);
        let out = Tensor::from_fn(&[c, h, wo], |i| {
            let q = i % wo;
            let row = i / wo; // c*h + y
            let mut acc = T::zero();
            for r in 0..factor {
                acc = acc + x.data()[row * w + q * factor + r];
            }
            acc / ff
        });
        self.unary(out, "mean_pool_width", move |g| {
            Tensor::from_fn(&[c, h, w], |i| {
                let col = i % w;
                let row = i / w;
                g.data()[row * wo + col / factor] / ff
            })
        })
    }

    /// Invertible width-to-channel rearrangement: [D,1,M] -> [f*D,1,M/f].
    pub fn squeeze_width(&self, factor: usize) -> Var<'g, T> {
        let x = self.value();
        let out = squeeze_width_plain(&x, factor);
        self.unary(out, "squeeze_width", move |g| {
            unsqueeze_width_plain(g, factor)
        })
    }

    /// Inverse of [`Var::squeeze_width`].
    pub fn unsqueeze_width(&self, factor: usize) -> Var<'g, T> {
        let x = self.value();
        let out = unsqueeze_width_plain(&x, factor);
        self.unary(out, "unsqueeze_width", move |g| {
            squeeze_width_plain(g, factor)
        })
    }

    /// Diagonal of a square matrix as a vector.
    pub fn diag_part(&self) -> Var<'g, T> {
        let x = self.value();
        let n = x.shape()[0];
        assert_eq!(x.shape(), &[n, n], "diag_part expects a square matrix");
        let out = Tensor::from_fn(&[n], |i| x.data()[i * n + i]);
        self.unary(out, "diag_part", move |g| {
            Tensor::from_fn(&[n, n], |i| {
                if i / n == i % n {
                    g.data()[i / n]
                } else {
                    T::zero()
                }
            })
        })
    }

    /// Vector to diagonal matrix.
    pub fn diag_embed(&self) -> Var<'g, T> {
        let x = self.value();
        let n = x.numel();
        let out = Tensor::from_fn(&[n, n], |i| {
            if i / n == i % n {
                x.data()[i / n]
            } else {
                T::zero()
            }
        });
        self.unary(out, "diag_embed", move |g| {
            Tensor::from_fn(&[n], |i| g.data()[i * n + i])
        })
    }
}

// ── plain kernels shared with the non-recorded paths ────────────────────

pub fn matmul_plain<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(k, b.shape()[0]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a.data()[i * k + kk];
            if av == T::zero() {
                continue;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + av * b.data()[kk * n + j];
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// a [m,n] . b^T where b is [k,n] -> [m,k]
fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let k = b.shape()[0];
    assert_eq!(n, b.shape()[1]);
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        for j in 0..k {
            let mut acc = T::zero();
            for c in 0..n {
                acc = acc + a.data()[i * n + c] * b.data()[j * n + c];
            }
            out[i * k + j] = acc;
        }
    }
    Tensor::from_vec(&[m, k], out)
}

/// a^T . b where a is [k,m], b is [k,n] -> [m,n]
fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(k, b.shape()[0]);
    let mut out = vec![T::zero(); m * n];
    for c in 0..k {
        for i in 0..m {
            let av = a.data()[c * m + i];
            if av == T::zero() {
                continue;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + av * b.data()[c * n + j];
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

pub fn squeeze_width_plain<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    assert_eq!(x.shape().len(), 3, "squeeze expects [D,1,M]");
    let (d, h, m) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert_eq!(h, 1, "squeeze expects a single row");
    assert!(
        m % factor == 0,
        "width {m} not divisible by squeeze factor {factor}"
    );
    let mo = m / factor;
    Tensor::from_fn(&[factor * d, 1, mo], |i| {
        let q = i % mo;
        let cq = i / mo; // r * d + dd
        let r = cq / d;
        let dd = cq % d;
        x.data()[dd * m + q * factor + r]
    })
}

pub fn unsqueeze_width_plain<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    assert_eq!(x.shape().len(), 3, "unsqueeze expects [C,1,W]");
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert_eq!(h, 1, "unsqueeze expects a single row");
    assert!(
        c % factor == 0,
        "channels {c} not divisible by squeeze factor {factor}"
    );
    let d = c / factor;
    Tensor::from_fn(&[d, 1, w * factor], |i| {
        let m = i % (w * factor);
        let dd = i / (w * factor);
        let q = m / factor;
        let r = m % factor;
        x.data()[(r * d + dd) * w + q]
    })
}

/// Checked standalone affine map; the differentiable version is
/// [`Var::linear`].
pub fn linear<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if weight.shape().len() != 2 || weight.shape()[1] != input.numel() {
        return Err(Error::ShapeMismatch(format!(
            "linear weight {:?} against input of {} elements",
            weight.shape(),
            input.numel()
        )));
    }
    if bias.numel() != weight.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "linear bias has {} elements, weight produces {}",
            bias.numel(),
            weight.shape()[0]
        )));
    }
    let (m, n) = (weight.shape()[0], weight.shape()[1]);
    Ok(Tensor::from_fn(&[m], |i| {
        let mut acc = bias.data()[i];
        for j in 0..n {
            acc = acc + weight.data()[i * n + j] * input.data()[j];
        }
        acc
    }))
}

/// Checked standalone positional normalization over the channel axis.
pub fn pono<T: Real>(input: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if input.shape().len() != 3 || input.shape()[0] == 0 {
        return Err(Error::ShapeMismatch(format!(
            "pono expects [C,H,W] with C >= 1, got {:?}",
            input.shape()
        )));
    }
    let g = Graph::inference();
    Ok(g.constant(input.clone()).pono(eps).value())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_linear_passes_through() {
        let g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let w = g.constant(Tensor::eye(3));
        let b = g.constant(Tensor::zeros(&[3]));
        assert_eq!(x.linear(&w, &b).value(), x.value());
    }

    #[test]
    fn zero_weight_linear_returns_bias() {
        let g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_vec(&[2], vec![5.0, 7.0]));
        let w = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.constant(Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]));
        assert_eq!(x.linear(&w, &b).value().data(), &[0.1, 0.2, 0.3]);
    }

    /// Oracle: explicit dot products, written independently of Var::linear.
    #[test]
    fn random_linear_matches_dot_product_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::from_fn(&[4], |_| rng.gen_range(-2.0..2.0));
        let w = Tensor::<f64>::from_fn(&[3, 4], |_| rng.gen_range(-2.0..2.0));
        let b = Tensor::<f64>::from_fn(&[3], |_| rng.gen_range(-2.0..2.0));
        let expected: Vec<f64> = (0..3)
            .map(|i| b.at(&[i]) + (0..4).map(|j| w.at(&[i, j]) * x.at(&[j])).sum::<f64>())
            .collect();
        let got = linear(&x, &w, &b).unwrap();
        for i in 0..3 {
            assert!((got.at(&[i]) - expected[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_dimension_mismatch_errors() {
        let x = Tensor::<f64>::zeros(&[4]);
        let w = Tensor::<f64>::zeros(&[3, 5]);
        let b = Tensor::<f64>::zeros(&[3]);
        assert!(linear(&x, &w, &b).is_err());
    }

    #[test]
    fn pono_two_channel_example() {
        // channel values (1,3) at a position: mean 2, std 1 -> (-1, 1)
        let x = Tensor::<f64>::from_vec(&[2, 1, 1], vec![1.0, 3.0]);
        let y = pono(&x, 1e-8).unwrap();
        assert!((y.at(&[0, 0, 0]) + 1.0).abs() < 1e-6);
        assert!((y.at(&[1, 0, 0]) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pono_zero_variance_guard() {
        let x = Tensor::<f64>::filled(&[3, 2, 2], 4.2);
        let y = pono(&x, 1e-8).unwrap();
        assert!(y.max_abs() < 1e-12);
        assert!(y.is_finite());
    }

    /// Oracle: recompute per-position statistics on the output.
    #[test]
    fn pono_output_statistics() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_fn(&[6, 3, 4], |_| rng.gen_range(-3.0..3.0));
        let y = pono(&x, 1e-8).unwrap();
        for p in 0..12 {
            let vals: Vec<f64> = (0..6).map(|c| y.data()[c * 12 + p]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 6.0;
            let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0).sqrt();
            assert!(mean.abs() < 1e-6, "mean {mean} at position {p}");
            assert!((std - 1.0).abs() < 1e-3, "std {std} at position {p}");
        }
    }

    #[test]
    fn squeeze_width_example_and_roundtrip() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 8], (1..=8).map(f64::from).collect());
        let s = squeeze_width_plain(&x, 4);
        assert_eq!(s.shape(), &[4, 1, 2]);
        let back = unsqueeze_width_plain(&s, 4);
        assert_eq!(back, x);
    }

    #[test]
    fn backward_through_simple_chain() {
        // f(a, b) = sum(a * b) + sum(a); df/da = b + 1, df/db = a
        let g = Graph::<f64>::recording();
        let a = g.constant(Tensor::from_vec(&[2], vec![2.0, 3.0]));
        let b = g.constant(Tensor::from_vec(&[2], vec![5.0, 7.0]));
        let loss = a.mul(&b).sum().add(&a.sum());
        assert_eq!(loss.value().item(), 10.0 + 21.0 + 5.0);
        let grads = g.backward(loss, 1.0);
        assert_eq!(grads.wrt(a).unwrap().data(), &[6.0, 8.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn param_leaves_are_cached() {
        let mut store = ParamStore::<f64>::new();
        let w = store.register("w", Tensor::scalar(3.0));
        let g = Graph::recording();
        let v1 = g.param(&store, w);
        let v2 = g.param(&store, w);
        assert_eq!(v1.id, v2.id);
        // f(w) = w^2 -> df/dw = 6 at w = 3
        let loss = v1.mul(&v2).sum();
        let grads = g.backward(loss, 1.0);
        grads.accumulate_into(&mut store);
        assert!((store.get(w).grad.item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_diagnostic_names_first_offender() {
        let g = Graph::<f64>::inference();
        let ok = g.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let _bad = ok.mul_scalar(f64::INFINITY);
        let (id, label) = g.find_nonfinite().unwrap();
        assert_eq!(id, 1);
        assert_eq!(label, "mul_scalar");
    }
}
