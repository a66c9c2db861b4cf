//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the [`Graph`]; node order is a topological
//! order, so `backward` is a single reverse sweep. A graph is single-use:
//! after `backward` it must be rebuilt by re-running the forward pass.

use crate::error::{Error, Result};
use crate::kernels::{
    axis_extents, contiguous_strides, for_each_permuted, gemm_nn, gemm_nt, gemm_tn, BroadcastMap,
};
use crate::tensor::{numel, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-6;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, BroadcastMap),
    Sub(Var, Var, BroadcastMap),
    Mul(Var, Var, BroadcastMap),
    Scale(Var, f32),
    Gelu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var, BroadcastMap),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Ln(Var, f32),
    SmoothL1(Var, Var, f32),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    reached: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            reached: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a copy of `t` as a leaf; it receives a gradient iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        let mut value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        value.set_requires_grad(rg);
        self.push(value, Op::Leaf, rg)
    }

    /// Registers an owned tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    /// Whether any gradient actually flowed into `v` during backward.
    pub fn reached(&self, v: Var) -> bool {
        self.nodes[v.0].reached
    }

    // ---- ops -------------------------------------------------------------

    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]` with
    /// broadcast batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = MatMulPlan::new(&sa, &sb)?;
        let out = plan.forward(self.value(a).data(), self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(plan.out_shape, out), Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<(Tensor, BroadcastMap)> {
        let map = BroadcastMap::new(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; map.out_numel()];
        map.for_each(|o, i, j| out[o] = f(da[i], db[j]));
        Ok((Tensor::from_parts(map.out_shape.clone(), out), map))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b, map), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b, map), rg))
    }

    /// Elementwise (broadcasting) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, map) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b, map), rg))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let src = self.value(x);
        let t = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|v| v * s).collect());
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(
                op,
                format!("axis {} out of range for shape {:?}", axis, self.shape(x)),
            ));
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let src = self.value(x);
        let mut out = src.data().to_vec();
        let (outer, len, inner) = axis_extents(src.shape(), axis);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f32::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(out[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (out[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= sum;
                }
            }
        }
        let t = Tensor::from_parts(src.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let src = self.value(x);
        let mut out = src.data().to_vec();
        let (outer, len, inner) = axis_extents(src.shape(), axis);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f32::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(out[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    sum += (out[base + l * inner] - max).exp();
                }
                let lse = max + sum.ln();
                for l in 0..len {
                    out[base + l * inner] -= lse;
                }
            }
        }
        let t = Tensor::from_parts(src.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmax(x, axis), rg))
    }

    /// Normalizes over the last axis with ε = 1e-6, then applies the optional
    /// per-feature affine transform `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "cannot normalize a scalar"))?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine parameter shape {:?}, expected [{}]", self.shape(p), d),
                ));
            }
        }
        let src = self.value(x).data();
        let rows = src.len() / d.max(1);
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gd = self.value(g).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o *= gd[i % d];
            }
        }
        if let Some(b) = beta {
            let bd = self.value(b).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o += bd[i % d];
            }
        }
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("{:?} is not a permutation of the axes of {:?}", axes, shape),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for_each_permuted(&shape, axes, |o, i| out[o] = src[i]);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Permute(x, axes.to_vec()), rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a >= rank || b >= rank {
            return Err(Error::shape(
                "transpose",
                format!("axes ({}, {}) out of range for rank {}", a, b, rank),
            ));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let map = BroadcastMap::new("broadcast_to", shape, self.shape(x))?;
        if map.out_shape != shape {
            return Err(Error::shape(
                "broadcast_to",
                format!("cannot expand {:?} to {:?}", self.shape(x), shape),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; map.out_numel()];
        map.for_each(|o, _, j| out[o] = src[j]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::BroadcastTo(x, map), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (p, q))| d != axis && p != q)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} along axis {}", s, base, axis),
                ));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_extents(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {}..{} exceeds axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Narrow { x, axis, start }, rg))
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let src = self.value(x);
        let t = match axis {
            None => {
                let s: f32 = src.data().iter().sum();
                let n = src.numel().max(1) as f32;
                Tensor::scalar(if mean { s / n } else { s })
            }
            Some(axis) => {
                if axis >= src.rank() {
                    return Err(Error::shape(
                        "reduce",
                        format!("axis {} out of range for {:?}", axis, src.shape()),
                    ));
                }
                let (outer, len, inner) = axis_extents(src.shape(), axis);
                let mut out = vec![0.0; outer * inner];
                let d = src.data();
                for o in 0..outer {
                    for l in 0..len {
                        let row = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f32);
                }
                let mut shape = src.shape().to_vec();
                shape.remove(axis);
                Tensor::from_parts(shape, out)
            }
        };
        let rg = self.rg(x);
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        Ok(self.push(t, op, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.reduce(x, None, false).expect("full reduction cannot fail")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.reduce(x, None, true).expect("full reduction cannot fail")
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), true)
    }

    /// `ln(max(x, floor))`; no gradient flows through clamped entries.
    pub fn ln_clamped(&mut self, x: Var, floor: f32) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v.max(floor).ln()).collect();
        let t = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Ln(x, floor), rg)
    }

    /// Mean smooth-L1 distance between equally shaped `a` and `b`.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: f32) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "smooth_l1",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let total: f32 = da
            .iter()
            .zip(db)
            .map(|(x, y)| {
                let d = (x - y).abs();
                if d <= beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let n = da.len().max(1) as f32;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(total / n), Op::SmoothL1(a, b, beta), rg))
    }

    // ---- backward --------------------------------------------------------

    /// Populates gradients on every leaf that requires them. A second call on
    /// the same graph is a contract error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward called twice; re-run the forward pass first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads.get_mut(i).and_then(Option::take);
                node.reached = g.is_some();
                let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(Some(g))?;
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        // Lazily allocated gradient accumulator for an input that needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let plan = MatMulPlan::new(ta.shape(), tb.shape()).expect("validated in forward");
                acc(*a, &mut |ga| plan.grad_a(g, tb.data(), ga));
                acc(*b, &mut |gb| plan.grad_b(g, ta.data(), gb));
            }
            Op::Add(a, b, map) => {
                acc(*a, &mut |ga| map.for_each(|o, ia, _| ga[ia] += g[o]));
                acc(*b, &mut |gb| map.for_each(|o, _, ib| gb[ib] += g[o]));
            }
            Op::Sub(a, b, map) => {
                acc(*a, &mut |ga| map.for_each(|o, ia, _| ga[ia] += g[o]));
                acc(*b, &mut |gb| map.for_each(|o, _, ib| gb[ib] -= g[o]));
            }
            Op::Mul(a, b, map) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| map.for_each(|o, ia, ib| ga[ia] += g[o] * db[ib]));
                acc(*b, &mut |gb| map.for_each(|o, ia, ib| gb[ib] += g[o] * da[ia]));
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * s);
            }),
            Op::Gelu(x) => {
                let dx = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(dx) {
                        *a += gi * gelu_grad(xi);
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let y = out.data();
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let dot: f32 = (0..len).map(|l| g[base + l * inner] * y[base + l * inner]).sum();
                            for l in 0..len {
                                let k = base + l * inner;
                                gx[k] += y[k] * (g[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x, axis) => {
                let y = out.data();
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let total: f32 = (0..len).map(|l| g[base + l * inner]).sum();
                            for l in 0..len {
                                let k = base + l * inner;
                                gx[k] += g[k] - y[k].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out.shape().last().unwrap();
                let rows = rstd.len();
                let gamma_data = gamma.map(|gv| nodes[gv.0].value.data());
                acc(*x, &mut |gx| {
                    let mut dy = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dy[j] = gr[j] * gamma_data.map_or(1.0, |gd| gd[j]);
                        }
                        let mean_dy = dy.iter().sum::<f32>() / d as f32;
                        let mean_dyx = dy.iter().zip(xr).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dy[j] - mean_dy - xr[j] * mean_dyx);
                        }
                    }
                });
                if let Some(gv) = gamma {
                    acc(*gv, &mut |gg| {
                        for (k, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
                            gg[k % d] += gi * xh;
                        }
                    });
                }
                if let Some(bv) = beta {
                    acc(*bv, &mut |gb| {
                        for (k, &gi) in g.iter().enumerate() {
                            gb[k % d] += gi;
                        }
                    });
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }),
            Op::Permute(x, axes) => {
                let in_shape = nodes[x.0].value.shape();
                acc(*x, &mut |gx| for_each_permuted(in_shape, axes, |o, ii| gx[ii] += g[o]));
            }
            Op::BroadcastTo(x, map) => acc(*x, &mut |gx| map.for_each(|o, _, j| gx[j] += g[o])),
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = axis_extents(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut offset = 0;
                for x in xs {
                    let len = nodes[x.0].value.shape()[*axis];
                    acc(*x, &mut |gx| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gx[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = nodes[x.0].value.shape();
                let (outer, full, inner) = axis_extents(in_shape, *axis);
                let len = out.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let base = o * full * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        gx[base..base + len * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let is_mean = matches!(nodes[i].op, Op::Mean(..));
                let in_shape = nodes[x.0].value.shape();
                match axis {
                    None => {
                        let n = numel(in_shape).max(1) as f32;
                        let v = if is_mean { g[0] / n } else { g[0] };
                        acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += v));
                    }
                    Some(axis) => {
                        let (outer, len, inner) = axis_extents(in_shape, *axis);
                        let s = if is_mean { 1.0 / len as f32 } else { 1.0 };
                        acc(*x, &mut |gx| {
                            for o in 0..outer {
                                let src = &g[o * inner..(o + 1) * inner];
                                for l in 0..len {
                                    let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b * s);
                                }
                            }
                        });
                    }
                }
            }
            Op::Ln(x, floor) => {
                let dx = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(dx) {
                        if xi >= *floor {
                            *a += gi / xi;
                        }
                    }
                });
            }
            Op::SmoothL1(a, b, beta) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let n = da.len().max(1) as f32;
                let deriv = |k: usize| {
                    let d = da[k] - db[k];
                    let v = if d.abs() <= *beta { d / beta } else { d.signum() };
                    v * g[0] / n
                };
                acc(*a, &mut |ga| ga.iter_mut().enumerate().for_each(|(k, v)| *v += deriv(k)));
                acc(*b, &mut |gb| gb.iter_mut().enumerate().for_each(|(k, v)| *v -= deriv(k)));
            }
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Shape bookkeeping for a batched matmul.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// `(out_batch, a_batch, b_batch)` triples; `None` when `b` is a plain
    /// matrix and `a` can be flattened into one big product.
    batches: Option<Vec<(usize, usize, usize)>>,
    a_rows: usize,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands must be at least 2-d, got {:?} and {:?}", sa, sb),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", sa, sb),
            ));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if bb.iter().all(|&d| d == 1) && bb.len() <= ba.len() {
            let mut out_shape = ba.to_vec();
            out_shape.extend([m, n]);
            return Ok(MatMulPlan {
                m,
                k,
                n,
                out_shape,
                batches: None,
                a_rows: numel(ba) * m,
            });
        }
        let map = BroadcastMap::new("matmul", ba, bb).map_err(|_| {
            Error::shape("matmul", format!("batch dimensions not broadcastable: {:?} x {:?}", sa, sb))
        })?;
        let mut batches = Vec::with_capacity(map.out_numel());
        map.for_each(|o, i, j| batches.push((o, i, j)));
        let mut out_shape = map.out_shape.clone();
        out_shape.extend([m, n]);
        Ok(MatMulPlan {
            m,
            k,
            n,
            out_shape,
            batches: Some(batches),
            a_rows: 0,
        })
    }

    fn forward(&self, a: &[f32], b: &[f32]) -> Vec<f32> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![0.0; numel(&self.out_shape)];
        match &self.batches {
            None => gemm_nn(self.a_rows, k, n, a, b, &mut out),
            Some(batches) => {
                for &(o, ia, ib) in batches {
                    gemm_nn(
                        m,
                        k,
                        n,
                        &a[ia * m * k..(ia + 1) * m * k],
                        &b[ib * k * n..(ib + 1) * k * n],
                        &mut out[o * m * n..(o + 1) * m * n],
                    );
                }
            }
        }
        out
    }

    fn grad_a(&self, g: &[f32], b: &[f32], ga: &mut [f32]) {
        let (m, k, n) = (self.m, self.k, self.n);
        match &self.batches {
            None => gemm_nt(self.a_rows, n, k, g, b, ga),
            Some(batches) => {
                for &(o, ia, ib) in batches {
                    gemm_nt(
                        m,
                        n,
                        k,
                        &g[o * m * n..(o + 1) * m * n],
                        &b[ib * k * n..(ib + 1) * k * n],
                        &mut ga[ia * m * k..(ia + 1) * m * k],
                    );
                }
            }
        }
    }

    fn grad_b(&self, g: &[f32], a: &[f32], gb: &mut [f32]) {
        let (m, k, n) = (self.m, self.k, self.n);
        match &self.batches {
            None => gemm_tn(k, self.a_rows, n, a, g, gb),
            Some(batches) => {
                for &(o, ia, ib) in batches {
                    gemm_tn(
                        k,
                        m,
                        n,
                        &a[ia * m * k..(ia + 1) * m * k],
                        &g[o * m * n..(o + 1) * m * n],
                        &mut gb[ib * k * n..(ib + 1) * k * n],
                    );
                }
            }
        }
    }
}

/// Row-major strides of a shape, exposed for callers assembling tensors by hand.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    contiguous_strides(shape)
}
