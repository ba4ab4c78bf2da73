//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] with seed gradients for some outputs walks the tape in
//! reverse and returns [`Gradients`] for every node that depends on a
//! parameter or an input leaf. Constants never receive gradients, which is
//! how frozen backbone features stay frozen.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::dim_err;
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::{Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    Conv { x: Var, w: Var, b: Option<Var>, groups: usize },
    ConvTranspose { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Resize(Var),
    Crop(Var),
    AvgPool { x: Var, k: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of a node, `None` when the seeds do not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }

    /// Parameter gradients in parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }
}

/// `(B, C, H, W)` view of a 3-D or 4-D feature tensor.
fn bchw(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(dim_err!("expected [C, H, W] or [B, C, H, W], got {s:?}")),
    }
}

/// Leading (non-spatial) element count and spatial size.
fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(dim_err!("spatial op needs at least 2 axes, got {s:?}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((s[..s.len() - 2].iter().product(), h, w))
}

fn with_spatial(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let n = s.len();
    s[n - 2] = h;
    s[n - 1] = w;
    s
}

/// Per-axis bilinear taps `(i0, i1, w1)` with half-pixel centres.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (math::floor(pos) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Value computed for a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err!("add: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err!("mul: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| math::gelu(x)).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| math::sigmoid(x)).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Concatenate along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(dim_err!("concat: {:?} vs trailing {:?}", v.shape(), tail));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_vec(&shape, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Slice `[start, start + len)` along the first axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).channels(start, len)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Slice { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Same-padded, stride-1 convolution with an odd square kernel.
    ///
    /// `x` is `[Cin, H, W]` or `[B, Cin, H, W]`, `w` is
    /// `[Cout, Cin / groups, K, K]` and `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bn, cin, h, wd) = bchw(xv)?;
        let [cout, cin_g, k, k2] = *wv.shape() else {
            return Err(dim_err!("conv kernel must be 4-D, got {:?}", wv.shape()));
        };
        if k != k2 || k % 2 == 0 {
            return Err(dim_err!("conv kernel must be odd and square, got {k}x{k2}"));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(dim_err!("conv: input has {cin} channels, kernel expects {cin_g} x {groups} groups"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(dim_err!("conv bias must be [{cout}], got {:?}", self.value(b).shape()));
            }
        }
        let hw = h * wd;
        let cout_g = cout / groups;
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; bn * cout * hw];
        let xd = xv.data();
        let wdata = wv.data();
        for bi in 0..bn {
            for co in 0..cout {
                let plane = &mut out[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
                if let Some(b) = b {
                    plane.fill(self.nodes[b.0].value.data()[co]);
                }
                let g = co / cout_g;
                for cil in 0..cin_g {
                    let ci = g * cin_g + cil;
                    let inp = &xd[(bi * cin + ci) * hw..(bi * cin + ci + 1) * hw];
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        for kx in 0..k {
                            let dx = kx as isize - pad;
                            let wt = wdata[((co * cin_g + cil) * k + ky) * k + kx];
                            conv_tap(plane, inp, h, wd, dy, dx, |o, i| *o += wt * i);
                        }
                    }
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        let n = shape.len();
        shape[n - 3] = cout;
        let out = Tensor::from_vec(&shape, out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv { x, w, b, groups }, ng))
    }

    /// Transposed convolution with kernel size equal to stride (no overlap).
    ///
    /// `x` is `[Cin, H, W]`, `w` is `[Cin, Cout, K, K]`, output is
    /// `[Cout, H·K, W·K]`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (cin, h, wd) = xv.dims3()?;
        let [wcin, cout, k, k2] = *wv.shape() else {
            return Err(dim_err!("transposed kernel must be 4-D, got {:?}", wv.shape()));
        };
        if wcin != cin || k != k2 || k == 0 {
            return Err(dim_err!("transposed conv: input {cin} channels, kernel {:?}", wv.shape()));
        }
        let (oh, ow) = (h * k, wd * k);
        let mut out = vec![0.0; cout * oh * ow];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(dim_err!("transposed conv bias must be [{cout}]"));
            }
            for co in 0..cout {
                out[co * oh * ow..(co + 1) * oh * ow].fill(bv.data()[co]);
            }
        }
        let xd = xv.data();
        let wdata = wv.data();
        for ci in 0..cin {
            for co in 0..cout {
                let kern = &wdata[(ci * cout + co) * k * k..(ci * cout + co + 1) * k * k];
                for y in 0..h {
                    for x in 0..wd {
                        let v = xd[(ci * h + y) * wd + x];
                        for ky in 0..k {
                            let row = &mut out[(co * oh + y * k + ky) * ow + x * k..][..k];
                            for (o, wt) in row.iter_mut().zip(&kern[ky * k..(ky + 1) * k]) {
                                *o += v * wt;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[cout, oh, ow], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::ConvTranspose { x, w, b }, ng))
    }

    /// Layer normalisation across channels at every pixel of `[C, H, W]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3()?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(dim_err!("layer norm affine must be [{c}]"));
        }
        let hw = h * w;
        let xd = xv.data();
        let mut xhat = vec![0.0; c * hw];
        let mut rstd = vec![0.0; hw];
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let mean = (0..c).map(|ch| xd[ch * hw + p]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| { let d = xd[ch * hw + p] - mean; d * d }).sum::<f64>() / c as f64;
            let r = 1.0 / math::sqrt(var + LN_EPS);
            rstd[p] = r;
            for ch in 0..c {
                let xh = (xd[ch * hw + p] - mean) * r;
                xhat[ch * hw + p] = xh;
                out[ch * hw + p] = xh * gv.data()[ch] + bv.data()[ch];
            }
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Multi-head scaled dot-product attention over spatial positions.
    ///
    /// Queries come from `q` (`[C, Hq, Wq]`), keys and values from `k` and
    /// `v` (`[C, Hk, Wk]`). No positional encoding is added.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (c, hq, wq) = qv.dims3()?;
        let (ck, hk, wk) = kv.dims3()?;
        if kv.shape() != vv.shape() || ck != c {
            return Err(dim_err!("attention: q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()));
        }
        if heads == 0 || c % heads != 0 {
            return Err(dim_err!("attention: {c} channels not divisible into {heads} heads"));
        }
        let (nq, nk, dh) = (hq * wq, hk * wk, c / heads);
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; c * nq];
        let mut qt = vec![0.0; nq * dh];
        let mut kt = vec![0.0; nk * dh];
        let mut vt = vec![0.0; nk * dh];
        for hd in 0..heads {
            token_major(qv.data(), hd * dh, dh, nq, &mut qt);
            token_major(kv.data(), hd * dh, dh, nk, &mut kt);
            token_major(vv.data(), hd * dh, dh, nk, &mut vt);
            for i in 0..nq {
                let qi = &qt[i * dh..(i + 1) * dh];
                let row = &mut probs[(hd * nq + i) * nk..(hd * nq + i + 1) * nk];
                let mut max = f64::NEG_INFINITY;
                for (j, r) in row.iter_mut().enumerate() {
                    let s = scale * dot(qi, &kt[j * dh..(j + 1) * dh]);
                    *r = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = math::exp(*r - max);
                    z += *r;
                }
                let mut acc = vec![0.0; dh];
                for (j, r) in row.iter_mut().enumerate() {
                    *r /= z;
                    for (a, vj) in acc.iter_mut().zip(&vt[j * dh..(j + 1) * dh]) {
                        *a += *r * vj;
                    }
                }
                for (d, a) in acc.into_iter().enumerate() {
                    out[(hd * dh + d) * nq + i] = a;
                }
            }
        }
        let out = Tensor::from_vec(qv.shape(), out)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Bilinear resize of the last two axes (half-pixel centres).
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, h, w) = planes(xv)?;
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(dim_err!("resize to or from an empty grid"));
        }
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let xd = xv.data();
        let mut out = vec![0.0; n * oh * ow];
        for p in 0..n {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let out = Tensor::from_vec(&with_spatial(xv.shape(), oh, ow), out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Resize(x), ng))
    }

    /// Keep the top-left `oh × ow` window of the last two axes.
    pub fn crop(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, h, w) = planes(xv)?;
        if oh > h || ow > w {
            return Err(dim_err!("crop {oh}x{ow} exceeds {h}x{w}"));
        }
        let mut out = Vec::with_capacity(n * oh * ow);
        for p in 0..n {
            for y in 0..oh {
                out.extend_from_slice(&xv.data()[(p * h + y) * w..(p * h + y) * w + ow]);
            }
        }
        let out = Tensor::from_vec(&with_spatial(xv.shape(), oh, ow), out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Crop(x), ng))
    }

    /// Non-overlapping `k × k` average pooling of the last two axes.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, h, w) = planes(xv)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(dim_err!("avg pool {k} does not divide {h}x{w}"));
        }
        let (oh, ow) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * oh * ow];
        for p in 0..n {
            for y in 0..h {
                for x in 0..w {
                    out[(p * oh + y / k) * ow + x / k] += xv.data()[(p * h + y) * w + x] * norm;
                }
            }
        }
        let out = Tensor::from_vec(&with_spatial(xv.shape(), oh, ow), out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::AvgPool { x, k }, ng))
    }

    /// Back-propagate seed gradients `(node, d output)` through the tape.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(dim_err!("seed {:?} for node of shape {:?}", g.shape(), self.value(*v).shape()));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, Tensor::from_vec(va.shape(), d)?);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, Tensor::from_vec(vb.shape(), d)?);
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let d = g.data().iter().zip(va.data()).map(|(g, &x)| g * math::gelu_grad(x)).collect();
                accumulate(grads, *a, Tensor::from_vec(va.shape(), d)?);
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(node.value.data()).map(|(g, &y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *a, Tensor::from_vec(node.value.shape(), d)?);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let lead = self.value(p).shape()[0];
                    if self.needs(p) {
                        accumulate(grads, p, g.channels(offset, lead)?);
                    }
                    offset += lead;
                }
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let plane: usize = xv.shape()[1..].iter().product();
                let mut d = Tensor::zeros(xv.shape());
                d.data_mut()[start * plane..start * plane + g.len()].copy_from_slice(g.data());
                accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, g.clone().reshape(self.value(*x).shape())?);
            }
            Op::Conv { x, w, b, groups } => self.conv_backward(*x, *w, *b, *groups, g, grads)?,
            Op::ConvTranspose { x, w, b } => self.conv_transpose_backward(*x, *w, *b, g, grads)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (c, h, w) = self.value(*x).dims3()?;
                let hw = h * w;
                let gam = self.value(*gamma).data();
                let gd = g.data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for ch in 0..c {
                        for p in 0..hw {
                            dg[ch] += gd[ch * hw + p] * xhat[ch * hw + p];
                            db[ch] += gd[ch * hw + p];
                        }
                    }
                    if self.needs(*gamma) {
                        accumulate(grads, *gamma, Tensor::from_vec(&[c], dg)?);
                    }
                    if self.needs(*beta) {
                        accumulate(grads, *beta, Tensor::from_vec(&[c], db)?);
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; c * hw];
                    for p in 0..hw {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for ch in 0..c {
                            let dxh = gd[ch * hw + p] * gam[ch];
                            mean_d += dxh;
                            mean_dx += dxh * xhat[ch * hw + p];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for ch in 0..c {
                            let dxh = gd[ch * hw + p] * gam[ch];
                            dx[ch * hw + p] = rstd[p] * (dxh - mean_d - xhat[ch * hw + p] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, Tensor::from_vec(&[c, h, w], dx)?);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads)?
            }
            Op::Resize(x) => {
                let xv = self.value(*x);
                let (n, h, w) = planes(xv)?;
                let (_, oh, ow) = planes(g)?;
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                let mut d = Tensor::zeros(xv.shape());
                let dd = d.data_mut();
                for p in 0..n {
                    let gsrc = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut dd[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = gsrc[oy * ow + ox];
                            dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dst[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Crop(x) => {
                let xv = self.value(*x);
                let (n, h, w) = planes(xv)?;
                let (_, oh, ow) = planes(g)?;
                let mut d = Tensor::zeros(xv.shape());
                for p in 0..n {
                    for y in 0..oh {
                        d.data_mut()[(p * h + y) * w..(p * h + y) * w + ow]
                            .copy_from_slice(&g.data()[(p * oh + y) * ow..(p * oh + y + 1) * ow]);
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::AvgPool { x, k } => {
                let xv = self.value(*x);
                let (n, h, w) = planes(xv)?;
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let mut d = Tensor::zeros(xv.shape());
                for p in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            d.data_mut()[(p * h + y) * w + xx] = g.data()[(p * oh + y / k) * ow + xx / k] * norm;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bn, cin, h, wd) = bchw(xv)?;
        let [cout, cin_g, k, _] = *wv.shape() else { unreachable!("validated in forward") };
        let hw = h * wd;
        let cout_g = cout / groups;
        let pad = (k / 2) as isize;
        let gd = g.data();
        if let Some(b) = b.filter(|&b| self.needs(b)) {
            let mut db = vec![0.0; cout];
            for bi in 0..bn {
                for (co, acc) in db.iter_mut().enumerate() {
                    *acc += gd[(bi * cout + co) * hw..(bi * cout + co + 1) * hw].iter().sum::<f64>();
                }
            }
            accumulate(grads, b, Tensor::from_vec(&[cout], db)?);
        }
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        if !need_x && !need_w {
            return Ok(());
        }
        let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0; wv.len()] } else { Vec::new() };
        let xd = xv.data();
        let wdata = wv.data();
        for bi in 0..bn {
            for co in 0..cout {
                let gplane = &gd[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
                let grp = co / cout_g;
                for cil in 0..cin_g {
                    let ci = grp * cin_g + cil;
                    let base = (bi * cin + ci) * hw;
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        for kx in 0..k {
                            let dx_off = kx as isize - pad;
                            let widx = ((co * cin_g + cil) * k + ky) * k + kx;
                            if need_w {
                                let inp = &xd[base..base + hw];
                                let mut acc = 0.0;
                                conv_tap_ref(gplane, inp, h, wd, dy, dx_off, |gv, i| acc += gv * i);
                                dw[widx] += acc;
                            }
                            if need_x {
                                let wt = wdata[widx];
                                let dplane = &mut dx[base..base + hw];
                                conv_tap_scatter(gplane, dplane, h, wd, dy, dx_off, wt);
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            accumulate(grads, x, Tensor::from_vec(xv.shape(), dx)?);
        }
        if need_w {
            accumulate(grads, w, Tensor::from_vec(wv.shape(), dw)?);
        }
        Ok(())
    }

    fn conv_transpose_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (cin, h, wd) = xv.dims3()?;
        let [_, cout, k, _] = *wv.shape() else { unreachable!("validated in forward") };
        let (oh, ow) = (h * k, wd * k);
        let gd = g.data();
        if let Some(b) = b.filter(|&b| self.needs(b)) {
            let db = (0..cout).map(|co| gd[co * oh * ow..(co + 1) * oh * ow].iter().sum()).collect();
            accumulate(grads, b, Tensor::from_vec(&[cout], db)?);
        }
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0; wv.len()] } else { Vec::new() };
        let xd = xv.data();
        let wdata = wv.data();
        for ci in 0..cin {
            for co in 0..cout {
                let kbase = (ci * cout + co) * k * k;
                for y in 0..h {
                    for xx in 0..wd {
                        let xval = xd[(ci * h + y) * wd + xx];
                        let mut acc = 0.0;
                        for ky in 0..k {
                            let grow = &gd[(co * oh + y * k + ky) * ow + xx * k..][..k];
                            for (kx, gv) in grow.iter().enumerate() {
                                acc += gv * wdata[kbase + ky * k + kx];
                                if need_w {
                                    dw[kbase + ky * k + kx] += gv * xval;
                                }
                            }
                        }
                        if need_x {
                            dx[(ci * h + y) * wd + xx] += acc;
                        }
                    }
                }
            }
        }
        if need_x {
            accumulate(grads, x, Tensor::from_vec(xv.shape(), dx)?);
        }
        if need_w {
            accumulate(grads, w, Tensor::from_vec(wv.shape(), dw)?);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (c, hq, wq) = qv.dims3()?;
        let (_, hk, wk) = kv.dims3()?;
        let (nq, nk, dh) = (hq * wq, hk * wk, c / heads);
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut dq = vec![0.0; c * nq];
        let mut dk = vec![0.0; c * nk];
        let mut dv = vec![0.0; c * nk];
        let mut qt = vec![0.0; nq * dh];
        let mut kt = vec![0.0; nk * dh];
        let mut vt = vec![0.0; nk * dh];
        let mut gt = vec![0.0; nq * dh];
        let mut dkt = vec![0.0; nk * dh];
        let mut dvt = vec![0.0; nk * dh];
        let mut dp = vec![0.0; nk];
        for hd in 0..heads {
            token_major(qv.data(), hd * dh, dh, nq, &mut qt);
            token_major(kv.data(), hd * dh, dh, nk, &mut kt);
            token_major(vv.data(), hd * dh, dh, nk, &mut vt);
            token_major(g.data(), hd * dh, dh, nq, &mut gt);
            dkt.fill(0.0);
            dvt.fill(0.0);
            for i in 0..nq {
                let row = &probs[(hd * nq + i) * nk..(hd * nq + i + 1) * nk];
                let gi = &gt[i * dh..(i + 1) * dh];
                let mut rowdot = 0.0;
                for j in 0..nk {
                    dp[j] = dot(gi, &vt[j * dh..(j + 1) * dh]);
                    rowdot += row[j] * dp[j];
                    for (dvv, gv) in dvt[j * dh..(j + 1) * dh].iter_mut().zip(gi) {
                        *dvv += row[j] * gv;
                    }
                }
                let qi = &qt[i * dh..(i + 1) * dh];
                for j in 0..nk {
                    let ds = row[j] * (dp[j] - rowdot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for d in 0..dh {
                        dq[(hd * dh + d) * nq + i] += ds * kt[j * dh + d];
                        dkt[j * dh + d] += ds * qi[d];
                    }
                }
            }
            for j in 0..nk {
                for d in 0..dh {
                    dk[(hd * dh + d) * nk + j] = dkt[j * dh + d];
                    dv[(hd * dh + d) * nk + j] = dvt[j * dh + d];
                }
            }
        }
        if self.needs(q) {
            accumulate(grads, q, Tensor::from_vec(qv.shape(), dq)?);
        }
        if self.needs(k) {
            accumulate(grads, k, Tensor::from_vec(kv.shape(), dk)?);
        }
        if self.needs(v) {
            accumulate(grads, v, Tensor::from_vec(vv.shape(), dv)?);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Copy channels `[c0, c0 + dh)` of a channel-major `[C, N]` buffer into a
/// token-major `[N, dh]` buffer.
fn token_major(src: &[f64], c0: usize, dh: usize, n: usize, dst: &mut [f64]) {
    for d in 0..dh {
        let plane = &src[(c0 + d) * n..(c0 + d + 1) * n];
        for (i, &v) in plane.iter().enumerate() {
            dst[i * dh + d] = v;
        }
    }
}

/// Valid output range for a tap offset `d` on an axis of length `n`.
#[inline]
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// For every output pixel whose shifted input `(y + dy, x + dx)` is in
/// bounds, call `f(out, in)`.
#[inline]
fn conv_tap(out: &mut [f64], inp: &[f64], h: usize, w: usize, dy: isize, dx: isize, mut f: impl FnMut(&mut f64, f64)) {
    let (y0, y1) = tap_range(h, dy);
    let (x0, x1) = tap_range(w, dx);
    for y in y0..y1 {
        let iy = (y as isize + dy) as usize;
        let orow = &mut out[y * w + x0..y * w + x1];
        let irow = &inp[iy * w + (x0 as isize + dx) as usize..][..x1 - x0];
        for (o, &i) in orow.iter_mut().zip(irow) {
            f(o, i);
        }
    }
}

#[inline]
fn conv_tap_ref(out: &[f64], inp: &[f64], h: usize, w: usize, dy: isize, dx: isize, mut f: impl FnMut(f64, f64)) {
    let (y0, y1) = tap_range(h, dy);
    let (x0, x1) = tap_range(w, dx);
    for y in y0..y1 {
        let iy = (y as isize + dy) as usize;
        let orow = &out[y * w + x0..y * w + x1];
        let irow = &inp[iy * w + (x0 as isize + dx) as usize..][..x1 - x0];
        for (&o, &i) in orow.iter().zip(irow) {
            f(o, i);
        }
    }
}

#[inline]
fn conv_tap_scatter(gout: &[f64], din: &mut [f64], h: usize, w: usize, dy: isize, dx: isize, wt: f64) {
    let (y0, y1) = tap_range(h, dy);
    let (x0, x1) = tap_range(w, dx);
    for y in y0..y1 {
        let iy = (y as isize + dy) as usize;
        let grow = &gout[y * w + x0..y * w + x1];
        let drow = &mut din[iy * w + (x0 as isize + dx) as usize..][..x1 - x0];
        for (d, &gv) in drow.iter_mut().zip(grow) {
            *d += wt * gv;
        }
    }
}
