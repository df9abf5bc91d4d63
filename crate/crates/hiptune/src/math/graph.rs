//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] records one forward computation (typically a single sample's
//! pass); [`Graph::backward`] sweeps it once, seeding one or more output
//! nodes. Values are computed eagerly at build time, so a graph is also just
//! a forward evaluator when no backward pass is requested.
//!
//! All math is f64 and sequential within a graph; batch parallelism happens
//! one graph per sample, which keeps gradients bit-identical regardless of
//! thread count.

use super::conv;
use super::{matmul, softmax_slice, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add { a: NodeId, b: NodeId },
    AddRowBias { x: NodeId, bias: NodeId },
    AddChanBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, c: f64 },
    ConcatRows { a: NodeId, b: NodeId },
    SliceRows { x: NodeId, start: usize },
    Reshape { x: NodeId },
    MeanRows { x: NodeId },
    SoftmaxVec { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Gelu { x: NodeId },
    Mha { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<Tensor> },
    Cdc { x: NodeId, w: NodeId, theta: f64 },
    Dilated { x: NodeId, w: NodeId, map: Vec<u8> },
    Pick { x: NodeId, idx: usize },
    LnClamped { x: NodeId, floor: f64 },
    Neg { x: NodeId },
    StackScalars { parts: Vec<NodeId> },
    Blend { blocks: Vec<NodeId>, weights: NodeId },
    MaskRenorm { x: NodeId, keep: Vec<usize> },
    Cosine { a: NodeId, b: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }

    /// Gradient for `id`, or zeros of the given shape when the node was not
    /// reached by the backward sweep.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match &self.by_node[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Register an input or parameter tensor. Cheap: storage is shared.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let v = matmul(self.value(a), self.value(b), ta, tb);
        self.push(v, Op::Matmul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv), "add shape mismatch");
        let mut v = av.clone();
        v.add_scaled(bv, 1.0);
        self.push(v, Op::Add { a, b })
    }

    /// `x` is (n, d), `bias` is (d); adds the bias to every row.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(bv.len(), d, "row bias length mismatch");
        let mut out = xv.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += bv.data()[j];
            }
        }
        let v = Tensor::from_vec(xv.shape(), out);
        self.push(v, Op::AddRowBias { x, bias })
    }

    /// `x` is [H, W, C], `bias` is (C); adds the bias at every location.
    pub fn add_chan_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(bias);
        let c = *xv.shape().last().unwrap();
        assert_eq!(bv.len(), c, "channel bias length mismatch");
        let mut out = xv.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o += bv.data()[i % c];
        }
        let v = Tensor::from_vec(xv.shape(), out);
        self.push(v, Op::AddChanBias { x, bias })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut v = self.value(x).clone();
        v.scale_in_place(c);
        self.push(v, Op::Scale { x, c })
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape()[1], bv.shape()[1], "concat col mismatch");
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let v = Tensor::from_vec(&[av.shape()[0] + bv.shape()[0], av.shape()[1]], data);
        self.push(v, Op::ConcatRows { a, b })
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let d = xv.shape()[1];
        assert!(start + len <= xv.shape()[0], "slice out of range");
        let data = xv.data()[start * d..(start + len) * d].to_vec();
        let v = Tensor::from_vec(&[len, d], data);
        self.push(v, Op::SliceRows { x, start })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).reshaped(shape);
        self.push(v, Op::Reshape { x })
    }

    /// (n, d) -> (d): column means.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                out[j] += xv.data()[i * d + j];
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        let v = Tensor::from_vec(&[d], out);
        self.push(v, Op::MeanRows { x })
    }

    pub fn softmax_vec(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Tensor::from_vec(xv.shape(), softmax_slice(xv.data()));
        self.push(v, Op::SoftmaxVec { x })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = 1e-5;
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(gv.len(), d);
        assert_eq!(bv.len(), d);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = gv.data()[j] * (row[j] - mean) * inv + bv.data()[j];
            }
        }
        let v = Tensor::from_vec(xv.shape(), out);
        self.push(v, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| gelu_fwd(v)).collect();
        let v = Tensor::from_vec(xv.shape(), out);
        self.push(v, Op::Gelu { x })
    }

    /// Multi-head attention core on already-projected q, k, v (all n×D).
    pub fn mha(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (n, d) = (qv.shape()[0], qv.shape()[1]);
        assert!(d % heads == 0, "dim not divisible by head count");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = gather_head(qv, h, dh);
            let kh = gather_head(kv, h, dh);
            let vh = gather_head(vv, h, dh);
            let mut p = matmul(&qh, &kh, false, true);
            p.scale_in_place(scale);
            let pd = p.data_mut();
            for i in 0..n {
                let row = softmax_slice(&pd[i * n..(i + 1) * n]);
                pd[i * n..(i + 1) * n].copy_from_slice(&row);
            }
            let oh = matmul(&p, &vh, false, false);
            scatter_head(&oh, h, dh, d, &mut out);
            probs.push(p);
        }
        let val = Tensor::from_vec(&[n, d], out);
        self.push(val, Op::Mha { q, k, v, heads, probs })
    }

    pub fn cdc(&mut self, x: NodeId, w: NodeId, theta: f64) -> NodeId {
        let v = conv::cdc_forward(self.value(x), self.value(w), theta);
        self.push(v, Op::Cdc { x, w, theta })
    }

    pub fn dilated(&mut self, x: NodeId, w: NodeId, map: Vec<u8>) -> NodeId {
        let v = conv::dilated_forward(self.value(x), self.value(w), &map);
        self.push(v, Op::Dilated { x, w, map })
    }

    pub fn pick(&mut self, x: NodeId, idx: usize) -> NodeId {
        let v = Tensor::scalar(self.value(x).data()[idx]);
        self.push(v, Op::Pick { x, idx })
    }

    pub fn ln_clamped(&mut self, x: NodeId, floor: f64) -> NodeId {
        let v = Tensor::scalar(self.value(x).item().max(floor).ln());
        self.push(v, Op::LnClamped { x, floor })
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        v.scale_in_place(-1.0);
        self.push(v, Op::Neg { x })
    }

    pub fn stack_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let data: Vec<f64> = parts.iter().map(|&p| self.value(p).item()).collect();
        let v = Tensor::from_vec(&[parts.len()], data);
        self.push(v, Op::StackScalars { parts: parts.to_vec() })
    }

    /// Weighted sum of same-shaped blocks: `sum_i weights[i] * blocks[i]`.
    pub fn blend(&mut self, blocks: &[NodeId], weights: NodeId) -> NodeId {
        let wv = self.value(weights);
        assert_eq!(wv.len(), blocks.len(), "blend arity mismatch");
        let shape = self.value(blocks[0]).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        for (i, &b) in blocks.iter().enumerate() {
            let bv = self.value(b);
            assert!(bv.shape() == shape.as_slice(), "blend block shape mismatch");
            out.add_scaled(bv, wv.data()[i]);
        }
        self.push(out, Op::Blend { blocks: blocks.to_vec(), weights })
    }

    /// Restrict a probability vector to `keep` and renormalize. Equivalent to
    /// re-applying softmax to the kept logits.
    pub fn mask_renorm(&mut self, x: NodeId, keep: &[usize]) -> NodeId {
        let xv = self.value(x);
        let sum: f64 = keep.iter().map(|&i| xv.data()[i]).sum();
        let out: Vec<f64> = keep.iter().map(|&i| xv.data()[i] / sum).collect();
        let v = Tensor::from_vec(&[keep.len()], out);
        self.push(v, Op::MaskRenorm { x, keep: keep.to_vec() })
    }

    /// Cosine similarity of two vectors (scalar output).
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "cosine length mismatch");
        let dot: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        let na = l2(av.data());
        let nb = l2(bv.data());
        let v = Tensor::scalar(dot / (na * nb));
        self.push(v, Op::Cosine { a, b })
    }

    /// Reverse sweep from the given seeds. Multiple seeds accumulate, so one
    /// pass serves a loss composed of several scalar/vector heads.
    pub fn backward(&self, seeds: &[(NodeId, Tensor)]) -> Grads {
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            assert!(
                seed.same_shape(&self.nodes[id.0].value),
                "seed shape mismatch at node {}",
                id.0
            );
            acc(&mut g, *id, seed.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let grad = match g[idx].take() {
                Some(t) => t,
                None => continue,
            };
            self.backprop_node(idx, &grad, &mut g);
            g[idx] = Some(grad);
        }
        Grads { by_node: g }
    }

    fn backprop_node(&self, idx: usize, grad: &Tensor, g: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                // d(A B) rules for each transpose mode.
                let (da, db) = match (ta, tb) {
                    (false, false) => (matmul(grad, bv, false, true), matmul(av, grad, true, false)),
                    (false, true) => (matmul(grad, bv, false, false), matmul(grad, av, true, false)),
                    (true, false) => (matmul(bv, grad, false, true), matmul(av, grad, false, false)),
                    (true, true) => (matmul(bv, grad, true, true), matmul(grad, av, true, true)),
                };
                acc(g, *a, da);
                acc(g, *b, db);
            }
            Op::Add { a, b } => {
                acc(g, *a, grad.clone());
                acc(g, *b, grad.clone());
            }
            Op::AddRowBias { x, bias } => {
                acc(g, *x, grad.clone());
                let d = self.value(*bias).len();
                let n = grad.len() / d;
                let mut gb = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        gb[j] += grad.data()[i * d + j];
                    }
                }
                acc(g, *bias, Tensor::from_vec(&[d], gb));
            }
            Op::AddChanBias { x, bias } => {
                acc(g, *x, grad.clone());
                let c = self.value(*bias).len();
                let mut gb = vec![0.0; c];
                for (i, v) in grad.data().iter().enumerate() {
                    gb[i % c] += v;
                }
                acc(g, *bias, Tensor::from_vec(&[c], gb));
            }
            Op::Scale { x, c } => {
                let mut gx = grad.clone();
                gx.scale_in_place(*c);
                acc(g, *x, gx);
            }
            Op::ConcatRows { a, b } => {
                let na = self.value(*a).shape()[0];
                let d = self.value(*a).shape()[1];
                let ga = Tensor::from_vec(&[na, d], grad.data()[..na * d].to_vec());
                let nb = self.value(*b).shape()[0];
                let gb = Tensor::from_vec(&[nb, d], grad.data()[na * d..].to_vec());
                acc(g, *a, ga);
                acc(g, *b, gb);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let d = xv.shape()[1];
                let mut gx = Tensor::zeros(xv.shape());
                let len = grad.shape()[0];
                gx.data_mut()[start * d..(start + len) * d].copy_from_slice(grad.data());
                acc(g, *x, gx);
            }
            Op::Reshape { x } => {
                acc(g, *x, grad.reshaped(self.value(*x).shape()));
            }
            Op::MeanRows { x } => {
                let xv = self.value(*x);
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        gx[i * d + j] = grad.data()[j] / n as f64;
                    }
                }
                acc(g, *x, Tensor::from_vec(&[n, d], gx));
            }
            Op::SoftmaxVec { x } => {
                let p = &node.value;
                let dot: f64 = grad.data().iter().zip(p.data()).map(|(a, b)| a * b).sum();
                let gx: Vec<f64> = grad
                    .data()
                    .iter()
                    .zip(p.data())
                    .map(|(gy, pi)| pi * (gy - dot))
                    .collect();
                acc(g, *x, Tensor::from_vec(p.shape(), gx));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let mut gx = vec![0.0; n * d];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for i in 0..n {
                    let row = &xv.data()[i * d..(i + 1) * d];
                    let gy = &grad.data()[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        gy.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .zip(xhat.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for j in 0..d {
                        gg[j] += gy[j] * xhat[j];
                        gb[j] += gy[j];
                        gx[i * d + j] =
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                acc(g, *x, Tensor::from_vec(xv.shape(), gx));
                acc(g, *gamma, Tensor::from_vec(&[d], gg));
                acc(g, *beta, Tensor::from_vec(&[d], gb));
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let gx: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &gy)| gy * gelu_grad(v))
                    .collect();
                acc(g, *x, Tensor::from_vec(xv.shape(), gx));
            }
            Op::Mha { q, k, v, heads, probs } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let (n, d) = (qv.shape()[0], qv.shape()[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; n * d];
                let mut gv_ = vec![0.0; n * d];
                for h in 0..*heads {
                    let p = &probs[h];
                    let go = gather_head(grad, h, dh);
                    let qh = gather_head(qv, h, dh);
                    let kh = gather_head(kv, h, dh);
                    let vh = gather_head(vv, h, dh);
                    // dV = P^T dO ; dP = dO V^T
                    let dvh = matmul(p, &go, true, false);
                    scatter_head(&dvh, h, dh, d, &mut gv_);
                    let mut dp = matmul(&go, &vh, false, true);
                    // Softmax backward per row: dS = P (dP - <dP, P>) * scale.
                    let pd = p.data();
                    let dpd = dp.data_mut();
                    for i in 0..n {
                        let prow = &pd[i * n..(i + 1) * n];
                        let dprow = &mut dpd[i * n..(i + 1) * n];
                        let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                        for (ds, pij) in dprow.iter_mut().zip(prow) {
                            *ds = pij * (*ds - dot) * scale;
                        }
                    }
                    // dQ = dS K ; dK = dS^T Q.
                    let dqh = matmul(&dp, &kh, false, false);
                    scatter_head(&dqh, h, dh, d, &mut gq);
                    let dkh = matmul(&dp, &qh, true, false);
                    scatter_head(&dkh, h, dh, d, &mut gk);
                }
                acc(g, *q, Tensor::from_vec(&[n, d], gq));
                acc(g, *k, Tensor::from_vec(&[n, d], gk));
                acc(g, *v, Tensor::from_vec(&[n, d], gv_));
            }
            Op::Cdc { x, w, theta } => {
                let (gx, gw) = conv::cdc_backward(self.value(*x), self.value(*w), *theta, grad);
                acc(g, *x, gx);
                acc(g, *w, gw);
            }
            Op::Dilated { x, w, map } => {
                let (gx, gw) =
                    conv::dilated_backward(self.value(*x), self.value(*w), map, grad);
                acc(g, *x, gx);
                acc(g, *w, gw);
            }
            Op::Pick { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                gx.data_mut()[*idx] = grad.item();
                acc(g, *x, gx);
            }
            Op::LnClamped { x, floor } => {
                let xv = self.value(*x).item();
                let gx = if xv > *floor { grad.item() / xv } else { 0.0 };
                acc(g, *x, Tensor::scalar(gx));
            }
            Op::Neg { x } => {
                let mut gx = grad.clone();
                gx.scale_in_place(-1.0);
                acc(g, *x, gx);
            }
            Op::StackScalars { parts } => {
                for (i, &p) in parts.iter().enumerate() {
                    acc(g, p, Tensor::scalar(grad.data()[i]));
                }
            }
            Op::Blend { blocks, weights } => {
                let wv = self.value(*weights);
                let mut gw = vec![0.0; blocks.len()];
                for (i, &b) in blocks.iter().enumerate() {
                    let mut gb = grad.clone();
                    gb.scale_in_place(wv.data()[i]);
                    acc(g, b, gb);
                    gw[i] = self
                        .value(b)
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(x, y)| x * y)
                        .sum();
                }
                acc(g, *weights, Tensor::from_vec(&[blocks.len()], gw));
            }
            Op::MaskRenorm { x, keep } => {
                let xv = self.value(*x);
                let y = &node.value;
                let sum: f64 = keep.iter().map(|&i| xv.data()[i]).sum();
                let dot: f64 = grad.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                let mut gx = Tensor::zeros(xv.shape());
                for (j, &i) in keep.iter().enumerate() {
                    gx.data_mut()[i] = (grad.data()[j] - dot) / sum;
                }
                acc(g, *x, gx);
            }
            Op::Cosine { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let go = grad.item();
                let na = l2(av.data());
                let nb = l2(bv.data());
                let dot: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
                let c = dot / (na * nb);
                let ga: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| go * (y / (na * nb) - c * x / (na * na)))
                    .collect();
                let gb: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| go * (x / (na * nb) - c * y / (nb * nb)))
                    .collect();
                acc(g, *a, Tensor::from_vec(av.shape(), ga));
                acc(g, *b, Tensor::from_vec(bv.shape(), gb));
            }
        }
    }
}

fn acc(g: &mut Vec<Option<Tensor>>, id: NodeId, delta: Tensor) {
    match &mut g[id.0] {
        Some(t) => t.add_scaled(&delta, 1.0),
        slot => *slot = Some(delta),
    }
}

/// Copy one head's columns into a contiguous (n, dh) matrix.
fn gather_head(x: &Tensor, head: usize, dh: usize) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let col0 = head * dh;
    let xd = x.data();
    let mut out = vec![0.0; n * dh];
    for i in 0..n {
        out[i * dh..(i + 1) * dh].copy_from_slice(&xd[i * d + col0..i * d + col0 + dh]);
    }
    Tensor::from_vec(&[n, dh], out)
}

/// Add a contiguous (n, dh) head matrix back into full-width columns.
fn scatter_head(src: &Tensor, head: usize, dh: usize, d: usize, out: &mut [f64]) {
    let n = src.shape()[0];
    let col0 = head * dh;
    let sd = src.data();
    for i in 0..n {
        for c in 0..dh {
            out[i * d + col0 + c] += sd[i * dh + c];
        }
    }
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Central-difference check of a scalar-valued graph against its own
    /// backward pass, over every coordinate of every listed leaf.
    fn fd_check(build: impl Fn(&mut Graph, &[NodeId]) -> NodeId, leaves: &[Tensor], tol: f64) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids);
        assert_eq!(g.value(out).len(), 1, "fd_check needs scalar output");
        let grads = g.backward(&[(out, Tensor::scalar(1.0))]);

        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get_or_zeros(ids[li], leaf.shape());
            for ci in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Tensor> = leaves.to_vec();
                    let mut t = perturbed[li].clone();
                    t.data_mut()[ci] += delta;
                    perturbed[li] = t;
                    let mut g2 = Graph::new();
                    let ids2: Vec<NodeId> =
                        perturbed.iter().map(|t| g2.leaf(t.clone())).collect();
                    let o = build(&mut g2, &ids2);
                    g2.scalar_value(o)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.data()[ci];
                if fd.abs() < 5e-10 && an.abs() < 5e-10 {
                    // both are zero up to central-difference cancellation noise
                    continue;
                }
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "leaf {li} coord {ci}: fd={fd} analytic={an}"
                );
            }
        }
    }

    // Reduce an arbitrary tensor node to a scalar via a fixed weighted sum so
    // every op can be checked through a scalar head.
    fn spread(g: &mut Graph, x: NodeId) -> NodeId {
        let n = g.value(x).len();
        let weights: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7).sin() + 0.2).collect();
        let flat = g.reshape(x, &[1, n]);
        let w = g.leaf(Tensor::from_vec(&[n, 1], weights));
        let s = g.matmul(flat, w);
        g.reshape(s, &[1])
    }

    #[test]
    fn fd_matmul_chain() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        fd_check(
            |g, ls| {
                let c = g.matmul(ls[0], ls[1]);
                spread(g, c)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn fd_layernorm_gelu_bias() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let gamma = Tensor::randn(&[5], 0.3, &mut rng);
        let beta = Tensor::randn(&[5], 0.3, &mut rng);
        let bias = Tensor::randn(&[5], 0.5, &mut rng);
        fd_check(
            |g, ls| {
                let ln = g.layer_norm(ls[0], ls[1], ls[2]);
                let bi = ls[3];
                let wb = g.add_row_bias(ln, bi);
                let ge = g.gelu(wb);
                spread(g, ge)
            },
            &[x, gamma, beta, bias],
            1e-5,
        );
    }

    #[test]
    fn fd_mha() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let q = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let k = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let v = Tensor::randn(&[4, 6], 1.0, &mut rng);
        fd_check(
            |g, ls| {
                let o = g.mha(ls[0], ls[1], ls[2], 2);
                spread(g, o)
            },
            &[q, k, v],
            1e-5,
        );
    }

    #[test]
    fn fd_softmax_pick_ln() {
        let x = Tensor::from_vec(&[4], vec![0.3, -0.8, 1.2, 0.1]);
        fd_check(
            |g, ls| {
                let p = g.softmax_vec(ls[0]);
                let picked = g.pick(p, 2);
                let ln = g.ln_clamped(picked, 1e-12);
                g.neg(ln)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn fd_cdc_and_dilated() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let x = Tensor::randn(&[5, 5, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        fd_check(
            |g, ls| {
                let y = g.cdc(ls[0], ls[1], 0.7);
                spread(g, y)
            },
            &[x.clone(), w.clone()],
            1e-5,
        );
        let map: Vec<u8> = (0..25).map(|i| 1 + (i % 3) as u8).collect();
        fd_check(
            |g, ls| {
                let y = g.dilated(ls[0], ls[1], map.clone());
                spread(g, y)
            },
            &[x, w],
            1e-5,
        );
    }

    #[test]
    fn fd_blend_mask_renorm_cosine() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let b0 = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let b1 = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let logits = Tensor::from_vec(&[3], vec![0.2, 1.4, -0.3]);
        let refv = Tensor::randn(&[6], 1.0, &mut rng);
        fd_check(
            |g, ls| {
                let dist = g.softmax_vec(ls[2]);
                let masked = g.mask_renorm(dist, &[1, 2]);
                let blended = g.blend(&[ls[0], ls[1]], masked);
                let flat = g.reshape(blended, &[6]);
                g.cosine(flat, ls[3])
            },
            &[b0, b1, logits, refv],
            1e-5,
        );
    }

    #[test]
    fn fd_concat_slice_mean_chan_bias() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let cb = Tensor::randn(&[4], 1.0, &mut rng);
        fd_check(
            |g, ls| {
                let cat = g.concat_rows(ls[0], ls[1]);
                let cb = ls[2];
                let grid = g.reshape(cat, &[5, 1, 4]);
                let biased = g.add_chan_bias(grid, cb);
                let mat = g.reshape(biased, &[5, 4]);
                let sl = g.slice_rows(mat, 1, 3);
                let m = g.mean_rows(sl);
                let st = g.reshape(m, &[1, 4]);
                spread(g, st)
            },
            &[a, b, cb],
            1e-6,
        );
    }

    #[test]
    fn backward_multiple_seeds_accumulate() {
        // d/dx of (2*x[0] via seed on y0) + (x[1] via seed on y1)
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let mut g = Graph::new();
        let xid = g.leaf(x);
        let y0 = g.pick(xid, 0);
        let y1 = g.pick(xid, 1);
        let grads = g.backward(&[(y0, Tensor::scalar(2.0)), (y1, Tensor::scalar(1.0))]);
        let gx = grads.get(xid).unwrap();
        assert_eq!(gx.data(), &[2.0, 1.0]);
    }
}
