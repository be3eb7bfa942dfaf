use super::kernels::{self, LayerNormCache, MatmulPlan};
use super::{broadcast_shape, BroadcastMap, Tensor};
use crate::error::TensorError;

/// Layer-norm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        plan: MatmulPlan,
    },
    Add {
        a: Var,
        b: Var,
        map_a: BroadcastMap,
        map_b: BroadcastMap,
    },
    Sub {
        a: Var,
        b: Var,
        map_a: BroadcastMap,
        map_b: BroadcastMap,
    },
    Mul {
        a: Var,
        b: Var,
        map_a: BroadcastMap,
        map_b: BroadcastMap,
    },
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Abs(Var),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    /// `out[i] = in[map[i]]`
    Gather {
        x: Var,
        map: Vec<usize>,
    },
    BroadcastTo {
        x: Var,
        map: BroadcastMap,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of a computation.
///
/// Nodes are appended in evaluation order, so every op's inputs precede it.
/// A tape is built fresh for each forward pass and consumed by one call to
/// [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf with an explicit gradient flag.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    ///
    /// `None` when the leaf does not require grad or did not influence the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient matches value shape"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let plan = MatmulPlan::new(sa, sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: "matmul",
            left: sa.to_vec(),
            right: sb.to_vec(),
        })?;
        let data = kernels::matmul(&plan, self.value(a).data(), self.value(b).data());
        let value = Tensor::new(plan.out_shape.clone(), data)?;
        self.push("matmul", value, Op::MatMul { a, b, plan }, &[a, b])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, BroadcastMap, BroadcastMap), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            left: sa.to_vec(),
            right: sb.to_vec(),
        })?;
        let map_a = BroadcastMap::new(sa, &out_shape);
        let map_b = BroadcastMap::new(sb, &out_shape);
        let numel: usize = out_shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = (0..numel)
            .map(|i| f(da[map_a.index(i)], db[map_b.index(i)]))
            .collect();
        Ok((Tensor::new(out_shape, data)?, map_a, map_b))
    }

    /// Element-wise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, map_a, map_b) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add { a, b, map_a, map_b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, map_a, map_b) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub { a, b, map_a, map_b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, map_a, map_b) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a, b, map_a, map_b }, &[a, b])
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let value = self.unary(x, |v| v * factor);
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.unary(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// Logistic function `1 / (1 + e^-x)`.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.unary(x, |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.unary(x, f64::sqrt);
        self.push("sqrt", value, Op::Sqrt(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.unary(x, f64::abs);
        self.push("abs", value, Op::Abs(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastaxis(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let width = match t.shape().last() {
            Some(&w) if w > 0 => w,
            _ => {
                return Err(TensorError::Dimension {
                    op: "softmax",
                    message: format!("empty last axis in shape {:?}", t.shape()),
                })
            }
        };
        let data = kernels::softmax_rows(t.data(), width);
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Per-slice normalization over the last axis, then affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x);
        let width = sx.last().copied().unwrap_or(0);
        for p in [gain, bias] {
            if self.shape(p) != [width] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: sx.to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        if width == 0 {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                message: "empty last axis".into(),
            });
        }
        let (data, cache) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            LAYER_NORM_EPS,
        );
        let value = Tensor::new(sx.to_vec(), data)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            &[x, gain, bias],
        )
    }

    pub fn concat_axis(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Dimension {
            op: "concat",
            message: "no parts".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Dimension {
                op: "concat",
                message: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Contiguous sub-range `[start, stop)` along `axis`.
    pub fn slice_axis(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        stop: usize,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= stop || stop > shape[axis] {
            return Err(TensorError::Dimension {
                op: "slice",
                message: format!("range {start}..{stop} on axis {axis} of shape {shape:?}"),
            });
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let width = stop - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + stop * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let value = Tensor::new(out_shape, data)?;
        self.push("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Dimension {
                op: "permute",
                message: format!("invalid permutation {perm:?} for shape {shape:?}"),
            });
        }
        let (out_shape, map) = kernels::permute_index(&shape, perm);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(out_shape, data)?;
        self.push("permute", value, Op::Gather { x, map }, &[x])
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var, TensorError> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(TensorError::Dimension {
                op: "transpose",
                message: format!("rank {rank} < 2"),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// Repeats `x` along broadcast axes to reach `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if broadcast_shape(&sx, shape).as_deref() != Some(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                left: sx,
                right: shape.to_vec(),
            });
        }
        let map = BroadcastMap::new(&sx, shape);
        let numel: usize = shape.iter().product();
        let src = self.value(x).data();
        let data = (0..numel).map(|i| src[map.index(i)]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push("broadcast_to", value, Op::BroadcastTo { x, map }, &[x])
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Dimension {
                op: "sum_axis",
                message: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        self.push("sum_axis", value, Op::SumAxis { x, axis }, &[x])
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// leaf that requires grad; read them with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let numel = |v: &Var| self.nodes[v.0].value.numel();
        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                if wants(a) {
                    let da = slot(grads, *a, numel(a));
                    kernels::matmul_grad_a(plan, g, self.value(*b).data(), da);
                }
                if wants(b) {
                    let db = slot(grads, *b, numel(b));
                    kernels::matmul_grad_b(plan, g, self.value(*a).data(), db);
                }
            }
            Op::Add { a, b, map_a, map_b } | Op::Sub { a, b, map_a, map_b } => {
                let sign_b = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                if wants(a) {
                    let da = slot(grads, *a, numel(a));
                    for (k, &gv) in g.iter().enumerate() {
                        da[map_a.index(k)] += gv;
                    }
                }
                if wants(b) {
                    let db = slot(grads, *b, numel(b));
                    for (k, &gv) in g.iter().enumerate() {
                        db[map_b.index(k)] += sign_b * gv;
                    }
                }
            }
            Op::Mul { a, b, map_a, map_b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if wants(a) {
                    let da = slot(grads, *a, numel(a));
                    for (k, &gv) in g.iter().enumerate() {
                        da[map_a.index(k)] += gv * vb[map_b.index(k)];
                    }
                }
                if wants(b) {
                    let db = slot(grads, *b, numel(b));
                    for (k, &gv) in g.iter().enumerate() {
                        db[map_b.index(k)] += gv * va[map_a.index(k)];
                    }
                }
            }
            Op::Scale(x, factor) => {
                let dx = slot(grads, *x, numel(x));
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += gv * factor;
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                let dx = slot(grads, *x, numel(x));
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(vx) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = slot(grads, *x, numel(x));
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }
            Op::Sqrt(x) => {
                // Subgradient 0 at the origin.
                let y = node.value.data();
                let dx = slot(grads, *x, numel(x));
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                    if yv > 0.0 {
                        *d += gv * 0.5 / yv;
                    }
                }
            }
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                let dx = slot(grads, *x, numel(x));
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(vx) {
                    if xv > 0.0 {
                        *d += gv;
                    } else if xv < 0.0 {
                        *d -= gv;
                    }
                }
            }
            Op::SumAll(x) => {
                let dx = slot(grads, *x, numel(x));
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::MeanAll(x) => {
                let n = numel(x) as f64;
                let dx = slot(grads, *x, numel(x));
                dx.iter_mut().for_each(|d| *d += g[0] / n);
            }
            Op::Softmax(x) => {
                let width = *node.value.shape().last().expect("nonempty");
                let dx = slot(grads, *x, numel(x));
                kernels::softmax_rows_grad(node.value.data(), g, width, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let gv = self.value(*gain).data().to_vec();
                let mut dgain = wants(gain).then(|| vec![0.0; gv.len()]);
                let mut dbias = wants(bias).then(|| vec![0.0; gv.len()]);
                if wants(x) {
                    let dx = slot(grads, *x, numel(x));
                    kernels::layer_norm_grad(
                        cache,
                        &gv,
                        g,
                        Some(dx),
                        dgain.as_deref_mut(),
                        dbias.as_deref_mut(),
                    );
                } else {
                    kernels::layer_norm_grad(
                        cache,
                        &gv,
                        g,
                        None,
                        dgain.as_deref_mut(),
                        dbias.as_deref_mut(),
                    );
                }
                for (p, d) in [(gain, dgain), (bias, dbias)] {
                    if let Some(d) = d {
                        let dst = slot(grads, *p, d.len());
                        dst.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if wants(p) {
                        let dp = slot(grads, *p, numel(p));
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut dp[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = kernels::axis_split(self.shape(*x), *axis);
                let width = node.value.shape()[*axis];
                let dx = slot(grads, *x, numel(x));
                for o in 0..outer {
                    let dst = &mut dx[(o * len + start) * inner..(o * len + start + width) * inner];
                    let src = &g[o * width * inner..(o + 1) * width * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            Op::Reshape(x) => {
                let dx = slot(grads, *x, numel(x));
                dx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Gather { x, map } => {
                let dx = slot(grads, *x, numel(x));
                for (&src, &gv) in map.iter().zip(g) {
                    dx[src] += gv;
                }
            }
            Op::BroadcastTo { x, map } => {
                let dx = slot(grads, *x, numel(x));
                for (k, &gv) in g.iter().enumerate() {
                    dx[map.index(k)] += gv;
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(self.shape(*x), *axis);
                let dx = slot(grads, *x, numel(x));
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..len {
                        let dst = &mut dx[(o * len + j) * inner..(o * len + j + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
}
