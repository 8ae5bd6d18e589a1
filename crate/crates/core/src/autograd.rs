//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Ops are coarse (a fused linear layer, fused multi-head attention, the
//! masked-RMSE and contrastive reductions) so the tape stays short and each
//! backward rule can be written and checked by hand.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::tensor::{log_sum_exp, matmul, matmul_a_bt, matmul_at_b, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward = Box<dyn Fn(&BackCtx<'_>) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<Backward>,
}

pub struct BackCtx<'a> {
    nodes: &'a [Node],
    out: &'a Tensor,
    grad: &'a Tensor,
}

impl BackCtx<'_> {
    fn value(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }
}

/// Gradients of a scalar with respect to the leaves that required them.
#[derive(Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var.0)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var.0)
    }
}

/// One contrastive row: the positive similarity index and its negatives.
#[derive(Clone, Debug)]
pub struct ContrastGroup {
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Plain (tape-free) GELU for inference helpers.
pub fn gelu_value(x: f64) -> f64 {
    gelu(x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: Backward) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return out;
        }
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.backward {
                Some(bw) => {
                    let ctx = BackCtx {
                        nodes: &self.nodes,
                        out: &node.value,
                        grad: &g,
                    };
                    for (p, gp) in bw(&ctx) {
                        if !self.nodes[p].requires_grad {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&gp),
                            slot @ None => *slot = Some(gp),
                        }
                    }
                }
                None => {
                    if node.requires_grad {
                        out.grads.insert(id, g);
                    }
                }
            }
        }
        out
    }

    /// `x[..., in] @ w[in, out] + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (fan_in, fan_out) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.last_dim(), fan_in, "linear: input width mismatch");
        let m = xv.rows();
        let mut data = matmul(xv.data(), wv.data(), m, fan_in, fan_out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in data.chunks_mut(fan_out) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let (xi, wi, bi) = (x.0, w.0, b.map(|b| b.0));
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            Tensor::from_parts(shape, data),
            &parents,
            Box::new(move |ctx| {
                let dy = ctx.grad.data();
                let xv = ctx.value(xi);
                let wv = ctx.value(wi);
                let mut out = Vec::with_capacity(3);
                if ctx.needs(xi) {
                    let dx = matmul_a_bt(dy, wv.data(), m, fan_out, fan_in);
                    out.push((xi, Tensor::from_parts(xv.shape().to_vec(), dx)));
                }
                if ctx.needs(wi) {
                    let dw = matmul_at_b(xv.data(), dy, m, fan_in, fan_out);
                    out.push((wi, Tensor::from_parts(vec![fan_in, fan_out], dw)));
                }
                if let Some(bi) = bi {
                    if ctx.needs(bi) {
                        let mut db = vec![0.0; fan_out];
                        for row in dy.chunks(fan_out) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        out.push((bi, Tensor::from_parts(vec![fan_out], db)));
                    }
                }
                out
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        let (ai, bi) = (a.0, b.0);
        self.push(
            Tensor::from_parts(shape, data),
            &[a, b],
            Box::new(move |ctx| vec![(ai, ctx.grad.clone()), (bi, ctx.grad.clone())]),
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let shape = xv.shape().to_vec();
        let xi = x.0;
        self.push(
            Tensor::from_parts(shape.clone(), data),
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data().iter().map(|v| v * c).collect();
                vec![(xi, Tensor::from_parts(shape.clone(), g))]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let xv = self.value(x);
        let old = xv.shape().to_vec();
        let t = xv.clone().reshape(shape).expect("reshape: element count");
        let xi = x.0;
        self.push(
            t,
            &[x],
            Box::new(move |ctx| {
                vec![(xi, Tensor::from_parts(old.clone(), ctx.grad.data().to_vec()))]
            }),
        )
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.rows();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let xr = &xv.data()[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        self.push(
            Tensor::from_parts(shape.clone(), out),
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let dy = ctx.grad.data();
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    let dyr = &dy[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dg[j] += dyr[j] * hr[j];
                        db[j] += dyr[j];
                        let dh = dyr[j] * g[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = dyr[j] * g[j];
                        dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![
                    (xi, Tensor::from_parts(shape.clone(), dx)),
                    (gi, Tensor::from_parts(vec![d], dg)),
                    (bi, Tensor::from_parts(vec![d], db)),
                ]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let shape = xv.shape().to_vec();
        let xi = x.0;
        self.push(
            Tensor::from_parts(shape.clone(), data),
            &[x],
            Box::new(move |ctx| {
                let xv = ctx.value(xi).data();
                let g = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                vec![(xi, Tensor::from_parts(shape.clone(), g))]
            }),
        )
    }

    /// Multi-head self-attention core over a fused `[B, T, 3D]` qkv tensor
    /// laid out as `[q | k | v]`; returns `[B, T, D]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let qv = self.value(qkv);
        let (batch, t, d3) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let d = d3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = qv.data();
        let mut out = vec![0.0; batch * t * d];
        let mut probs = vec![0.0; batch * heads * t * t];
        out.par_chunks_mut(t * d)
            .zip(probs.par_chunks_mut(heads * t * t))
            .enumerate()
            .for_each(|(b, (ob, pb))| {
                let base = &src[b * t * d3..(b + 1) * t * d3];
                for h in 0..heads {
                    let ph = &mut pb[h * t * t..(h + 1) * t * t];
                    for i in 0..t {
                        let q = &base[i * d3 + h * dh..i * d3 + (h + 1) * dh];
                        let row = &mut ph[i * t..(i + 1) * t];
                        for (j, r) in row.iter_mut().enumerate() {
                            let k = &base[j * d3 + d + h * dh..j * d3 + d + (h + 1) * dh];
                            *r = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                        }
                        softmax_in_place(row);
                        let o = &mut ob[i * d + h * dh..i * d + (h + 1) * dh];
                        for (j, &p) in row.iter().enumerate() {
                            let v = &base[j * d3 + 2 * d + h * dh..j * d3 + 2 * d + (h + 1) * dh];
                            for (oo, vv) in o.iter_mut().zip(v) {
                                *oo += p * vv;
                            }
                        }
                    }
                }
            });
        let qi = qkv.0;
        self.push(
            Tensor::from_parts(vec![batch, t, d], out),
            &[qkv],
            Box::new(move |ctx| {
                let src = ctx.value(qi).data();
                let dy = ctx.grad.data();
                let mut dqkv = vec![0.0; batch * t * d3];
                dqkv.par_chunks_mut(t * d3).enumerate().for_each(|(b, gb)| {
                    let base = &src[b * t * d3..(b + 1) * t * d3];
                    let dyb = &dy[b * t * d..(b + 1) * t * d];
                    let pb = &probs[b * heads * t * t..(b + 1) * heads * t * t];
                    let mut dp = vec![0.0; t];
                    for h in 0..heads {
                        let ph = &pb[h * t * t..(h + 1) * t * t];
                        for i in 0..t {
                            let p = &ph[i * t..(i + 1) * t];
                            let dyi = &dyb[i * d + h * dh..i * d + (h + 1) * dh];
                            // dV and dP
                            for j in 0..t {
                                let v = &base[j * d3 + 2 * d + h * dh..j * d3 + 2 * d + (h + 1) * dh];
                                dp[j] = dyi.iter().zip(v).map(|(a, b)| a * b).sum();
                                let dv = &mut gb[j * d3 + 2 * d + h * dh..j * d3 + 2 * d + (h + 1) * dh];
                                for (g, y) in dv.iter_mut().zip(dyi) {
                                    *g += p[j] * y;
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..t {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    let qc = base[i * d3 + h * dh + c];
                                    let kc = base[j * d3 + d + h * dh + c];
                                    gb[i * d3 + h * dh + c] += ds * kc;
                                    gb[j * d3 + d + h * dh + c] += ds * qc;
                                }
                            }
                        }
                    }
                });
                vec![(qi, Tensor::from_parts(vec![batch, t, d3], dqkv))]
            }),
        )
    }

    /// Broadcast a `[D]` token to `[B, 1, D]`.
    pub fn broadcast_token(&mut self, tok: Var, batch: usize) -> Var {
        let tv = self.value(tok);
        let d = tv.len();
        let mut data = Vec::with_capacity(batch * d);
        for _ in 0..batch {
            data.extend_from_slice(tv.data());
        }
        let ti = tok.0;
        self.push(
            Tensor::from_parts(vec![batch, 1, d], data),
            &[tok],
            Box::new(move |ctx| {
                let mut g = vec![0.0; d];
                for row in ctx.grad.data().chunks(d) {
                    for (a, b) in g.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                vec![(ti, Tensor::from_parts(vec![d], g))]
            }),
        )
    }

    /// Concatenate `[B, T1, D]` and `[B, T2, D]` along the token axis.
    pub fn concat_tokens(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (batch, t1, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let t2 = bv.shape()[1];
        assert_eq!(bv.shape()[0], batch, "concat_tokens: batch mismatch");
        assert_eq!(bv.shape()[2], d, "concat_tokens: width mismatch");
        let mut data = Vec::with_capacity(batch * (t1 + t2) * d);
        for i in 0..batch {
            data.extend_from_slice(&av.data()[i * t1 * d..(i + 1) * t1 * d]);
            data.extend_from_slice(&bv.data()[i * t2 * d..(i + 1) * t2 * d]);
        }
        let (ai, bi) = (a.0, b.0);
        self.push(
            Tensor::from_parts(vec![batch, t1 + t2, d], data),
            &[a, b],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut ga = Vec::with_capacity(batch * t1 * d);
                let mut gb = Vec::with_capacity(batch * t2 * d);
                for i in 0..batch {
                    let row = &g[i * (t1 + t2) * d..(i + 1) * (t1 + t2) * d];
                    ga.extend_from_slice(&row[..t1 * d]);
                    gb.extend_from_slice(&row[t1 * d..]);
                }
                vec![
                    (ai, Tensor::from_parts(vec![batch, t1, d], ga)),
                    (bi, Tensor::from_parts(vec![batch, t2, d], gb)),
                ]
            }),
        )
    }

    /// Tokens `start..start+len` of a `[B, T, D]` tensor.
    pub fn slice_tokens(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (batch, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(start + len <= t, "slice_tokens: out of range");
        let mut data = Vec::with_capacity(batch * len * d);
        for i in 0..batch {
            data.extend_from_slice(&xv.data()[(i * t + start) * d..(i * t + start + len) * d]);
        }
        let xi = x.0;
        self.push(
            Tensor::from_parts(vec![batch, len, d], data),
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; batch * t * d];
                for i in 0..batch {
                    g[(i * t + start) * d..(i * t + start + len) * d]
                        .copy_from_slice(&ctx.grad.data()[i * len * d..(i + 1) * len * d]);
                }
                vec![(xi, Tensor::from_parts(vec![batch, t, d], g))]
            }),
        )
    }

    /// Rebuild the full decoder sequence from `[B, 1 + K, D]` kept tokens.
    ///
    /// Output row 0 is the kept row 0 ([cls]); output row `1 + p` takes kept
    /// token `restore[b][p]` when that rank is below `len_keep`, otherwise the
    /// shared `mask_token`.
    pub fn scatter_with_mask_token(
        &mut self,
        x: Var,
        mask_token: Var,
        restore: &[Vec<usize>],
        len_keep: usize,
    ) -> Var {
        let xv = self.value(x);
        let (batch, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(t, 1 + len_keep, "scatter: token count must be 1 + len_keep");
        assert_eq!(restore.len(), batch, "scatter: restore rows must match batch");
        let l = restore.first().map_or(0, |r| r.len());
        let mt = self.value(mask_token).data().to_vec();
        let mut data = Vec::with_capacity(batch * (1 + l) * d);
        for (b, perm) in restore.iter().enumerate() {
            let xb = &xv.data()[b * t * d..(b + 1) * t * d];
            data.extend_from_slice(&xb[..d]);
            for &rank in perm {
                if rank < len_keep {
                    data.extend_from_slice(&xb[(1 + rank) * d..(2 + rank) * d]);
                } else {
                    data.extend_from_slice(&mt);
                }
            }
        }
        let restore = restore.to_vec();
        let (xi, mi) = (x.0, mask_token.0);
        self.push(
            Tensor::from_parts(vec![batch, 1 + l, d], data),
            &[x, mask_token],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0; batch * t * d];
                let mut gm = vec![0.0; d];
                for (b, perm) in restore.iter().enumerate() {
                    let gb = &g[b * (1 + l) * d..(b + 1) * (1 + l) * d];
                    let gxb = &mut gx[b * t * d..(b + 1) * t * d];
                    gxb[..d].copy_from_slice(&gb[..d]);
                    for (p, &rank) in perm.iter().enumerate() {
                        let src = &gb[(1 + p) * d..(2 + p) * d];
                        if rank < len_keep {
                            gxb[(1 + rank) * d..(2 + rank) * d].copy_from_slice(src);
                        } else {
                            for (a, s) in gm.iter_mut().zip(src) {
                                *a += s;
                            }
                        }
                    }
                }
                vec![
                    (xi, Tensor::from_parts(vec![batch, t, d], gx)),
                    (mi, Tensor::from_parts(vec![d], gm)),
                ]
            }),
        )
    }

    /// Select entries along the leading axis (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let n = xv.shape()[0];
        let inner: usize = xv.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            assert!(i < n, "gather_rows: index {i} out of range {n}");
            data.extend_from_slice(&xv.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = xv.shape().to_vec();
        let in_shape = shape.clone();
        shape[0] = idx.len();
        let idx = idx.to_vec();
        let xi = x.0;
        self.push(
            Tensor::from_parts(shape, data),
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; n * inner];
                for (k, &i) in idx.iter().enumerate() {
                    for (a, b) in g[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&ctx.grad.data()[k * inner..(k + 1) * inner])
                    {
                        *a += b;
                    }
                }
                vec![(xi, Tensor::from_parts(in_shape.clone(), g))]
            }),
        )
    }

    /// Per-row root-mean-square error over the listed patch positions.
    ///
    /// `pred` and `target` are `[N, L, P]`; returns `[N]`.
    pub fn masked_rmse(&mut self, pred: Var, target: &Tensor, positions: &[Vec<usize>]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "masked_rmse: shape mismatch");
        let (n, l, p) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
        assert_eq!(positions.len(), n, "masked_rmse: positions rows");
        let mut out = vec![0.0; n];
        for (i, pos) in positions.iter().enumerate() {
            let mut acc = 0.0;
            for &q in pos {
                let off = (i * l + q) * p;
                for c in 0..p {
                    let diff = pv.data()[off + c] - target.data()[off + c];
                    acc += diff * diff;
                }
            }
            out[i] = (acc / (pos.len() * p) as f64).sqrt();
        }
        let target = target.clone();
        let positions = positions.to_vec();
        let pi = pred.0;
        self.push(
            Tensor::from_parts(vec![n], out),
            &[pred],
            Box::new(move |ctx| {
                let pv = ctx.value(pi).data();
                let mut g = vec![0.0; n * l * p];
                for (i, pos) in positions.iter().enumerate() {
                    let rmse = ctx.out.data()[i];
                    if rmse == 0.0 {
                        continue;
                    }
                    let k = ctx.grad.data()[i] / ((pos.len() * p) as f64 * rmse);
                    for &q in pos {
                        let off = (i * l + q) * p;
                        for c in 0..p {
                            g[off + c] = k * (pv[off + c] - target.data()[off + c]);
                        }
                    }
                }
                vec![(pi, Tensor::from_parts(vec![n, l, p], g))]
            }),
        )
    }

    /// Elementwise `max(x - margin, 0)`.
    pub fn hinge(&mut self, x: Var, margin: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| (v - margin).max(0.0)).collect();
        let shape = xv.shape().to_vec();
        let xi = x.0;
        self.push(
            Tensor::from_parts(shape.clone(), data),
            &[x],
            Box::new(move |ctx| {
                let xv = ctx.value(xi).data();
                let g = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if v - margin > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(xi, Tensor::from_parts(shape.clone(), g))]
            }),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len();
        let shape = xv.shape().to_vec();
        let m = xv.data().iter().sum::<f64>() / n as f64;
        let xi = x.0;
        self.push(
            Tensor::scalar(m),
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.item() / n as f64;
                vec![(xi, Tensor::full(&shape, g))]
            }),
        )
    }

    /// `(1/N) Σ w_i x_i` with constant weights.
    pub fn weighted_mean(&mut self, x: Var, weights: &[f64]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len(), "weighted_mean: length mismatch");
        let n = xv.len();
        let m = xv.data().iter().zip(weights).map(|(a, w)| a * w).sum::<f64>() / n as f64;
        let weights = weights.to_vec();
        let shape = xv.shape().to_vec();
        let xi = x.0;
        self.push(
            Tensor::scalar(m),
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.item() / n as f64;
                let data = weights.iter().map(|w| w * g).collect();
                vec![(xi, Tensor::from_parts(shape.clone(), data))]
            }),
        )
    }

    /// Per-group InfoNCE over similarity entries of `sims`:
    /// `l = logsumexp(s_pos/τ, s_neg/τ ...) − s_pos/τ`.
    pub fn contrastive(&mut self, sims: Var, groups: &[ContrastGroup], tau: f64) -> Var {
        let sv = self.value(sims);
        let n = sv.len();
        let mut out = Vec::with_capacity(groups.len());
        let mut softmaxes = Vec::with_capacity(groups.len());
        for grp in groups {
            let mut logits = Vec::with_capacity(1 + grp.negatives.len());
            logits.push(sv.data()[grp.positive] / tau);
            logits.extend(grp.negatives.iter().map(|&j| sv.data()[j] / tau));
            out.push(log_sum_exp(&logits) - logits[0]);
            softmax_in_place(&mut logits);
            softmaxes.push(logits);
        }
        let groups = groups.to_vec();
        let si = sims.0;
        self.push(
            Tensor::from_parts(vec![groups.len()], out),
            &[sims],
            Box::new(move |ctx| {
                let mut g = vec![0.0; n];
                for (a, (grp, q)) in groups.iter().zip(&softmaxes).enumerate() {
                    let go = ctx.grad.data()[a] / tau;
                    g[grp.positive] += go * (q[0] - 1.0);
                    for (k, &j) in grp.negatives.iter().enumerate() {
                        g[j] += go * q[k + 1];
                    }
                }
                vec![(si, Tensor::from_parts(vec![n], g))]
            }),
        )
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let c = lv.last_dim();
        let b = lv.rows();
        assert_eq!(b, labels.len(), "cross_entropy: label count");
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv.data()[i * c..(i + 1) * c];
            loss += log_sum_exp(row) - row[y];
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        loss /= b as f64;
        let labels = labels.to_vec();
        let li = logits.0;
        let shape = lv.shape().to_vec();
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |ctx| {
                let k = ctx.grad.item() / b as f64;
                let mut g = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    g[i * c + y] -= 1.0;
                }
                for v in g.iter_mut() {
                    *v *= k;
                }
                vec![(li, Tensor::from_parts(shape.clone(), g))]
            }),
        )
    }
}
