//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends one node holding its forward value and enough
//! context to run its vector-Jacobian product. Inputs always precede the
//! node that consumes them, so a single reverse sweep over the node list is
//! a valid topological traversal and visits each node once.

use super::kernels::{self, Bcast, MatmulPlan};
use super::{check_axis, numel, split_axis, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Scale(f64),
    Exp,
    Log,
    Sigmoid,
    Gelu,
    Sqrt,
    ClampMax(f64),
    ClampMin(f64),
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnKind,
        x: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        plan: MatmulPlan,
    },
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        eps: f64,
        norms: Vec<T>,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when `v` is not reachable from the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copies the value of `x` into a fresh constant (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ── Elementwise binary ───────────────────────────────────────────

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = kernels::broadcast_shape(name, sa, sb)?;
        let ma = Bcast::new(sa, &out_shape);
        let mb = Bcast::new(sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let n = numel(&out_shape);
        let data: Vec<T> = match (&ma, &mb) {
            (Bcast::Same, Bcast::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(da[ma.at(i)], db[mb.at(i)])).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(&mut self, kind: UnKind, x: Var) -> Var {
        let xv = self.value(x);
        let f = |v: T| -> T {
            match kind {
                UnKind::Scale(c) => v * T::cast(c),
                UnKind::Exp => v.exp(),
                UnKind::Log => v.ln(),
                UnKind::Sigmoid => sigmoid(v),
                UnKind::Gelu => gelu(v),
                UnKind::Sqrt => v.sqrt(),
                UnKind::ClampMax(c) => v.min(T::cast(c)),
                UnKind::ClampMin(c) => v.max(T::cast(c)),
            }
        };
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(x);
        self.push(t, Op::Unary { kind, x }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnKind::Scale(c), x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnKind::Scale(-1.0), x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnKind::Log, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnKind::Sigmoid, x)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnKind::Gelu, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnKind::Sqrt, x)
    }

    /// `min(x, c)`; the gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnKind::ClampMax(c), x)
    }

    /// `max(x, c)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnKind::ClampMin(c), x)
    }

    // ── Shape manipulation ───────────────────────────────────────────

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast
    /// batch prefixes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = kernels::matmul_plan(self.shape(a), self.shape(b))?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![T::zero(); numel(&plan.out_shape)];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for (bi, (&ao, &bo)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
            kernels::gemm_nn(
                &da[ao..ao + m * k],
                &db[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor {
            shape: plan.out_shape.clone(),
            data: out,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Matmul { a, b, plan }, rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::contract(format!(
                "permute: {axes:?} is not a permutation of {} axes",
                shape.len()
            )));
        }
        let (out_shape, map) = kernels::permute_map(shape, axes);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Permute { x, map },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::contract("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in xs {
                let ext = self.shape(v)[axis];
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", &shape, axis)?;
        if start + len > shape[axis] {
            return Err(Error::contract(format!(
                "slice {start}..{} out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Gathers entries along `axis`.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("index_select", &shape, axis)?;
        let (outer, ext, inner) = split_axis(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= ext) {
            return Err(Error::contract(format!(
                "index_select: index {bad} out of range for extent {ext}"
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * ext + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..ext {
                let base = (o * ext + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::SumAxis { x, axis },
            rg,
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ext = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::contract("mean_axis: axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / ext.max(1) as f64))
    }

    // ── Normalizations ───────────────────────────────────────────────

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let data = softmax_rows(self.value(x).data(), &shape, axis, false);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("log_softmax", &shape, axis)?;
        let data = softmax_rows(self.value(x).data(), &shape, axis, true);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::LogSoftmax { x, axis }, rg))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::contract("layer_norm on a scalar"))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = numel(&shape) / d.max(1);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let inv_d = T::cast(1.0 / d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::cast(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// `x / max(‖x‖, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("l2_normalize", &shape, axis)?;
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut norms = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); src.len()];
        let e = T::cast(eps);
        for o in 0..outer {
            for i in 0..inner {
                let mut s = T::zero();
                for a in 0..ext {
                    let v = src[(o * ext + a) * inner + i];
                    s = s + v * v;
                }
                let nrm = s.sqrt();
                norms[o * inner + i] = nrm;
                let den = nrm.max(e);
                for a in 0..ext {
                    let idx = (o * ext + a) * inner + i;
                    out[idx] = src[idx] / den;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::L2Normalize {
                x,
                axis,
                eps,
                norms,
            },
            rg,
        ))
    }

    // ── Reverse sweep ────────────────────────────────────────────────

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn node_vjp(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let ma = Bcast::new(sa, out_shape);
                let mb = Bcast::new(sb, out_shape);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let ga = slot(grads, *a, da.len());
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            BinKind::Add | BinKind::Sub => gk,
                            BinKind::Mul => gk * db[mb.at(k)],
                            BinKind::Div => gk / db[mb.at(k)],
                        };
                        let j = ma.at(k);
                        ga[j] = ga[j] + d;
                    }
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, db.len());
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            BinKind::Add => gk,
                            BinKind::Sub => -gk,
                            BinKind::Mul => gk * da[ma.at(k)],
                            BinKind::Div => {
                                let bv = db[mb.at(k)];
                                -gk * da[ma.at(k)] / (bv * bv)
                            }
                        };
                        let j = mb.at(k);
                        gb[j] = gb[j] + d;
                    }
                }
            }
            Op::Unary { kind, x } => {
                let xd = self.value(*x).data();
                let gx = slot(grads, *x, xd.len());
                for k in 0..g.len() {
                    let d = match *kind {
                        UnKind::Scale(c) => g[k] * T::cast(c),
                        UnKind::Exp => g[k] * y[k],
                        UnKind::Log => g[k] / xd[k],
                        UnKind::Sigmoid => g[k] * y[k] * (T::one() - y[k]),
                        UnKind::Gelu => g[k] * gelu_grad(xd[k]),
                        UnKind::Sqrt => g[k] / (T::cast(2.0) * y[k]),
                        UnKind::ClampMax(c) => {
                            if xd[k] < T::cast(c) {
                                g[k]
                            } else {
                                T::zero()
                            }
                        }
                        UnKind::ClampMin(c) => {
                            if xd[k] > T::cast(c) {
                                g[k]
                            } else {
                                T::zero()
                            }
                        }
                    };
                    gx[k] = gx[k] + d;
                }
            }
            Op::Matmul { a, b, plan } => {
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let ga = slot(grads, *a, da.len());
                    for (bi, (&ao, &bo)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                        kernels::gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &db[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, db.len());
                    for (bi, (&ao, &bo)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                        kernels::gemm_tn(
                            &da[ao..ao + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Permute { x, map } => {
                let gx = slot(grads, *x, g.len());
                for (k, &src) in map.iter().enumerate() {
                    gx[src] = gx[src] + g[k];
                }
            }
            Op::Reshape { x } => {
                let gx = slot(grads, *x, g.len());
                for (a, &b) in gx.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let ext = self.shape(v)[*axis];
                    if self.rg(v) {
                        let gv = slot(grads, v, outer * ext * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            for t in 0..ext * inner {
                                gv[dst + t] = gv[dst + t] + g[src + t];
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.shape(*x).to_vec();
                let (outer, ext, inner) = split_axis(&src_shape, *axis);
                let len = node.value.shape()[*axis];
                let gx = slot(grads, *x, numel(&src_shape));
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    for t in 0..len * inner {
                        gx[base + t] = gx[base + t] + g[o * len * inner + t];
                    }
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let src_shape = self.shape(*x).to_vec();
                let (outer, ext, inner) = split_axis(&src_shape, *axis);
                let gx = slot(grads, *x, numel(&src_shape));
                let cnt = indices.len();
                for o in 0..outer {
                    for (p, &idx) in indices.iter().enumerate() {
                        let dst = (o * ext + idx) * inner;
                        let src = (o * cnt + p) * inner;
                        for t in 0..inner {
                            gx[dst + t] = gx[dst + t] + g[src + t];
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                let n = self.value(*x).len();
                let gx = slot(grads, *x, n);
                for v in gx.iter_mut() {
                    *v = *v + g[0];
                }
            }
            Op::SumAxis { x, axis } => {
                let src_shape = self.shape(*x).to_vec();
                let (outer, ext, inner) = split_axis(&src_shape, *axis);
                let gx = slot(grads, *x, numel(&src_shape));
                for o in 0..outer {
                    for a in 0..ext {
                        let base = (o * ext + a) * inner;
                        for t in 0..inner {
                            gx[base + t] = gx[base + t] + g[o * inner + t];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, ext, inner) = split_axis(node.value.shape(), *axis);
                let gx = slot(grads, *x, y.len());
                for o in 0..outer {
                    for t in 0..inner {
                        let idx = |a: usize| (o * ext + a) * inner + t;
                        let dot: T = (0..ext).map(|a| y[idx(a)] * g[idx(a)]).sum();
                        for a in 0..ext {
                            let j = idx(a);
                            gx[j] = gx[j] + y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, ext, inner) = split_axis(node.value.shape(), *axis);
                let gx = slot(grads, *x, y.len());
                for o in 0..outer {
                    for t in 0..inner {
                        let idx = |a: usize| (o * ext + a) * inner + t;
                        let gs: T = (0..ext).map(|a| g[idx(a)]).sum();
                        for a in 0..ext {
                            let j = idx(a);
                            gx[j] = gx[j] + g[j] - y[j].exp() * gs;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let rows = rstd.len();
                let gv = self.value(*gain).data();
                if self.rg(*gain) {
                    let gg = slot(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = slot(grads, *bias, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + g[r * d + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = slot(grads, *x, rows * d);
                    let inv_d = T::cast(1.0 / d as f64);
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * xhat[r * d + j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            let k = r * d + j;
                            gx[k] = gx[k] + rstd[r] * (dh - m1 - xhat[k] * m2);
                        }
                    }
                }
            }
            Op::L2Normalize { x, axis, eps, norms } => {
                let (outer, ext, inner) = split_axis(node.value.shape(), *axis);
                let gx = slot(grads, *x, y.len());
                let e = T::cast(*eps);
                for o in 0..outer {
                    for t in 0..inner {
                        let idx = |a: usize| (o * ext + a) * inner + t;
                        let nrm = norms[o * inner + t];
                        if nrm >= e {
                            let dot: T = (0..ext).map(|a| y[idx(a)] * g[idx(a)]).sum();
                            for a in 0..ext {
                                let j = idx(a);
                                gx[j] = gx[j] + (g[j] - y[j] * dot) / nrm;
                            }
                        } else {
                            for a in 0..ext {
                                let j = idx(a);
                                gx[j] = gx[j] + g[j] / e;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu<T: Scalar>(v: T) -> T {
    let c = T::cast(GELU_C);
    let inner = c * (v + T::cast(0.044715) * v * v * v);
    T::cast(0.5) * v * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(v: T) -> T {
    let c = T::cast(GELU_C);
    let inner = c * (v + T::cast(0.044715) * v * v * v);
    let th = inner.tanh();
    let dinner = c * (T::one() + T::cast(3.0 * 0.044715) * v * v);
    T::cast(0.5) * (T::one() + th) + T::cast(0.5) * v * (T::one() - th * th) * dinner
}

fn softmax_rows<T: Scalar>(src: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, ext, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for t in 0..inner {
            let idx = |a: usize| (o * ext + a) * inner + t;
            let mx = (0..ext)
                .map(|a| src[idx(a)])
                .fold(T::neg_infinity(), |m, v| m.max(v));
            let mut s = T::zero();
            for a in 0..ext {
                let e = (src[idx(a)] - mx).exp();
                out[idx(a)] = e;
                s = s + e;
            }
            if log {
                let ls = s.ln();
                for a in 0..ext {
                    out[idx(a)] = src[idx(a)] - mx - ls;
                }
            } else {
                for a in 0..ext {
                    out[idx(a)] = out[idx(a)] / s;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tp = Tape::new();
        let i = tp.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tp.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tp.matmul(i, m).unwrap();
        assert_eq!(tp.value(p).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn row_times_column() {
        let mut tp = Tape::new();
        let a = tp.constant(t(&[1, 2], &[1., 2.]));
        let b = tp.constant(t(&[2, 1], &[3., 4.]));
        let p = tp.matmul(a, b).unwrap();
        assert_eq!(tp.value(p).data(), &[11.]);
        assert_eq!(tp.shape(p), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(Tensor::zeros(vec![2, 3]));
        let b = tp.constant(Tensor::zeros(vec![2, 3]));
        let err = tp.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_broadcast_batch_prefix() {
        let mut tp = Tape::new();
        let a = tp.leaf(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = tp.leaf(t(&[2, 1], &[5., 6.]));
        let p = tp.matmul(a, b).unwrap();
        assert_eq!(tp.shape(p), &[2, 1, 1]);
        assert_eq!(tp.value(p).data(), &[17., 39.]);
        let s = tp.sum(p);
        let g = tp.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap(), &[4., 6.]);
        assert_eq!(g.get(a).unwrap(), &[5., 6., 5., 6.]);
    }

    #[test]
    fn softmax_basic_and_stable() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[2], &[0., 0.]));
        let s = tp.softmax(x, 0).unwrap();
        assert_eq!(tp.value(s).data(), &[0.5, 0.5]);
        let x = tp.constant(t(&[2], &[1000., 0.]));
        let s = tp.softmax(x, 0).unwrap();
        let d = tp.value(s).data();
        assert!((d[0] - 1.0).abs() < 1e-6 && d[1].abs() < 1e-6);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_inner_axis() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[2, 2], &[0., 1., 0., 1.]));
        let s = tp.softmax(x, 0).unwrap();
        assert_eq!(tp.value(s).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_cases() {
        let mut tp = Tape::new();
        let g = tp.constant(t(&[2], &[1., 1.]));
        let b = tp.constant(t(&[2], &[0., 0.]));
        let x = tp.constant(t(&[2], &[3., 3.]));
        let y = tp.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tp.value(y).data(), &[0., 0.]);
        let x = tp.constant(t(&[2], &[1., -1.]));
        let y = tp.layer_norm(x, g, b, 1e-5).unwrap();
        for (a, e) in tp.value(y).data().iter().zip([1.0, -1.0]) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[2], &[3., 4.]));
        let y = tp.l2_normalize(x, 0, 1e-8).unwrap();
        let d = tp.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        let x = tp.constant(t(&[2], &[0., 0.]));
        let y = tp.l2_normalize(x, 0, 1e-8).unwrap();
        assert_eq!(tp.value(y).data(), &[0., 0.]);
    }

    #[test]
    fn elementwise_basics() {
        let mut tp = Tape::new();
        let z = tp.constant(t(&[1], &[0.]));
        let s = tp.sigmoid(z);
        assert_eq!(tp.value(s).data(), &[0.5]);
        let x = tp.constant(t(&[3], &[1., 2., 3.]));
        let m = tp.mean(x);
        assert_eq!(tp.value(m).item(), 2.0);
        let a = tp.constant(t(&[2, 1], &[0.1, 0.2]));
        let b = tp.constant(t(&[2, 2], &[0.3, 0.4, 0.5, 0.6]));
        let c = tp.concat(&[a, b], 1).unwrap();
        let a2 = tp.slice(c, 1, 0, 1).unwrap();
        let b2 = tp.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tp.value(a2), tp.value(a));
        assert_eq!(tp.value(b2), tp.value(b));
    }

    #[test]
    fn backward_simple_cases() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[3], &[1., -2., 5.]));
        let s = tp.sum(x);
        let g = tp.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1., 1., 1.]);

        let mut tp = Tape::new();
        let x = tp.leaf(t(&[], &[3.]));
        let sq = tp.mul(x, x).unwrap();
        let g = tp.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_and_nonscalar_loss_rejected() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[2], &[1., 2.]));
        let unused = tp.leaf(t(&[2], &[1., 2.]));
        let s = tp.sum(x);
        let g = tp.backward(s).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0., 0.]);
        assert!(matches!(tp.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[2], &[1., 2.]));
        let c = tp.constant(t(&[2], &[3., 4.]));
        let p = tp.mul(x, c).unwrap();
        let d = tp.detach(p);
        let q = tp.mul(d, x).unwrap();
        let s = tp.sum(q);
        let g = tp.backward(s).unwrap();
        assert!(g.get(c).is_none());
        // only the direct path through `x` contributes: d/dx (sg(x*c) * x) = x*c
        assert_eq!(g.get(x).unwrap(), &[3., 8.]);
    }
}
