//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, which is a topological order, so
//! backward is a single reverse sweep. Gradient contributions are always
//! added in that fixed sweep order, making repeated backward passes bitwise
//! reproducible.

use std::sync::Arc;

use super::kernels::{self, ConvSpec, SparseMap};
use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_acc, DType, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Upsample(Var),
    AvgPool(Var),
    Sparse { x: Var, map: Arc<SparseMap> },
    GroupMax { x: Var, arg: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Bce { pred: Var, target: Arc<Vec<f64>>, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    dtype: DType,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn slice_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected a rank-2 operand, got shape {s:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_dtype(DType::F64)
    }

    pub fn with_dtype(dtype: DType) -> Self {
        Graph {
            nodes: Vec::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let value = value.with_dtype(self.dtype);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant leaf; no gradient is propagated into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// `x @ w + b` for `x: N x in`, `w: in x out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = matrix_dims("linear", self.value(x))?;
        let (win, dout) = matrix_dims("linear", self.value(w))?;
        if din != win {
            return Err(Error::dim(
                "linear",
                format!("input axis 1 has {din} features but weight axis 0 has {win}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim(
                    "linear",
                    format!("bias shape {:?} does not match weight axis 1 ({dout})", self.shape(b)),
                ));
            }
        }
        let mut out = vec![0.0; n * dout];
        matmul_into(self.value(x).data(), self.value(w).data(), n, din, dout, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bias).for_each(|(y, bb)| *y += bb);
            }
        }
        let deps: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let ng = self.ng(&deps);
        Ok(self.push(Tensor::from_parts(vec![n, dout], out), Op::Linear { x, w, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&a| match kind {
                Unary::Relu => a.max(0.0),
                Unary::Sigmoid => sigmoid(a),
            })
            .collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        let ng = self.ng(&[x]);
        self.push(t, Op::Unary(kind, x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                "elementwise",
                format!("operand shapes {:?} and {:?} differ", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Binary(kind, a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect());
        let ng = self.ng(&[x]);
        self.push(t, Op::Scale(x, c), ng)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &e)| i == axis || e == base[i]);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("shape {s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = slice_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = self.ng(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Sum of all elements, as a shape-`[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, dropping it from the shape (a rank-1 input yields `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", format!("axis {axis} out of range for rank {}", shape.len())));
        }
        let (outer, n, inner) = slice_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &data[(o * n + i) * inner..(o * n + i + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::SumAxis { x, axis }, ng))
    }

    /// Softmax along `axis`, with per-slice max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for rank {}", t.rank())));
        }
        let out = softmax_values(t, axis);
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, ng))
    }

    /// Grid convolution. `x` is `[s.., cin]`, `w` is `[k^dims * cin, cout]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        if spec.kernel % 2 == 0 {
            return Err(Error::Config(format!("convolution kernel extent must be odd, got {}", spec.kernel)));
        }
        if spec.stride != 1 && spec.stride != 2 {
            return Err(Error::Config(format!("unsupported convolution stride {}", spec.stride)));
        }
        let xs = self.shape(x).to_vec();
        let dims = xs.len().saturating_sub(1);
        if !(2..=3).contains(&dims) {
            return Err(Error::dim("conv", format!("expected a 2D or 3D channels-last grid, got {xs:?}")));
        }
        let cin = xs[dims];
        let taps = spec.kernel.pow(dims as u32);
        let (wr, cout) = matrix_dims("conv", self.value(w))?;
        if wr != taps * cin {
            return Err(Error::dim(
                "conv",
                format!("kernel axis 0 has {wr} rows, expected {taps} taps x {cin} channels"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim("conv", format!("bias shape {:?} != [{cout}]", self.shape(b))));
            }
        }
        let (mut out_shape, out) = kernels::conv_forward(
            self.value(x).data(),
            &xs[..dims],
            cin,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
            &spec,
        );
        out_shape.push(cout);
        let deps: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let ng = self.ng(&deps);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Conv { x, w, b, spec }, ng))
    }

    /// Nearest-neighbour x2 upsampling of a channels-last grid.
    pub fn upsample(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("upsample", format!("no spatial axes in shape {xs:?}")));
        }
        let c = xs[xs.len() - 1];
        let (mut s, out) = kernels::upsample_nearest(self.value(x).data(), &xs[..xs.len() - 1], c);
        s.push(c);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(s, out), Op::Upsample(x), ng))
    }

    /// Non-overlapping 2x average pooling of a channels-last grid.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let spatial = &xs[..xs.len().saturating_sub(1)];
        if spatial.is_empty() || spatial.iter().any(|n| n % 2 != 0) {
            return Err(Error::dim("avg_pool2", format!("spatial extents of {xs:?} must be even")));
        }
        let c = xs[xs.len() - 1];
        let (mut s, out) = kernels::avg_pool2(self.value(x).data(), spatial, c);
        s.push(c);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(s, out), Op::AvgPool(x), ng))
    }

    /// Applies a sparse row map to `x` viewed as rows x channels.
    /// `out_shape` must have `map.n_out()` rows and the same channel count.
    pub fn sparse(&mut self, x: Var, map: Arc<SparseMap>, out_shape: &[usize]) -> Result<Var> {
        let (rows, c) = self.value(x).rows_cols();
        if rows != map.n_in {
            return Err(Error::dim(
                "sparse",
                format!("map expects {} input rows, operand has {rows}", map.n_in),
            ));
        }
        let out_rows: usize = out_shape[..out_shape.len() - 1].iter().product();
        if out_shape.last() != Some(&c) || out_rows != map.n_out() {
            return Err(Error::dim(
                "sparse",
                format!("output shape {out_shape:?} does not hold {} rows of {c}", map.n_out()),
            ));
        }
        let out = map.apply(self.value(x).data(), c);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape.to_vec(), out), Op::Sparse { x, map }, ng))
    }

    /// Per-channel max over groups of rows of `x`; empty groups are zero.
    pub fn group_max(&mut self, x: Var, groups: &SparseMap, out_shape: &[usize]) -> Result<Var> {
        let (rows, c) = self.value(x).rows_cols();
        let out_rows: usize = out_shape[..out_shape.len() - 1].iter().product();
        if rows != groups.n_in || out_shape.last() != Some(&c) || out_rows != groups.n_out() {
            return Err(Error::dim("group_max", "group map does not match operand or output shape"));
        }
        let (out, arg) = kernels::group_max(self.value(x).data(), c, groups);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape.to_vec(), out), Op::GroupMax { x, arg }, ng))
    }

    /// Columns `start..start+len` of a rank-2 operand.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = matrix_dims("slice_cols", self.value(x))?;
        if start + len > c || len == 0 {
            return Err(Error::dim("slice_cols", format!("columns {start}..{} out of 0..{c}", start + len)));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&data[r * c + start..r * c + start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, len], out), Op::SliceCols { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Summed binary cross-entropy with predictions clamped to `[eps, 1-eps]`.
    pub fn bce(&mut self, pred: Var, target: &[f64], eps: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(Error::dim(
                "bce",
                format!("{} predictions vs {} targets", p.len(), target.len()),
            ));
        }
        if let Some(bad) = target.iter().find(|&&o| o != 0.0 && o != 1.0) {
            return Err(Error::Contract(format!("occupancy target {bad} is not 0 or 1")));
        }
        let loss = bce_sum(p.data(), target, eps);
        let ng = self.ng(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: Arc::new(target.to_vec()),
                eps,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            // Only leaf gradients are kept; intermediates are released as the sweep passes them.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g.with_dtype(self.dtype));
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).rows_cols();
                let dout = self.value(*w).shape()[1];
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; n * din];
                    matmul_nt_into(gd, self.value(*w).data(), n, dout, din, &mut dx);
                    self.acc(grads, *x, &dx);
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; din * dout];
                    matmul_tn_acc(self.value(*x).data(), gd, din, n, dout, &mut dw);
                    self.acc(grads, *w, &dw);
                }
                if let Some(b) = b {
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; dout];
                        for row in gd.chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                        self.acc(grads, *b, &db);
                    }
                }
            }
            Op::Unary(kind, x) => {
                let y = node.value.data();
                let xv = self.value(*x).data();
                let dx: Vec<f64> = match kind {
                    Unary::Relu => gd.iter().zip(xv).map(|(g, &a)| if a > 0.0 { *g } else { 0.0 }).collect(),
                    Unary::Sigmoid => gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect(),
                };
                self.acc(grads, *x, &dx);
            }
            Op::Binary(kind, a, b) => match kind {
                Binary::Add => {
                    self.acc(grads, *a, gd);
                    self.acc(grads, *b, gd);
                }
                Binary::Sub => {
                    self.acc(grads, *a, gd);
                    let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                    self.acc(grads, *b, &neg);
                }
                Binary::Mul => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let da: Vec<f64> = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.acc(grads, *a, &da);
                    self.acc(grads, *b, &db);
                }
            },
            Op::Scale(x, c) => {
                let dx: Vec<f64> = gd.iter().map(|g| g * c).collect();
                self.acc(grads, *x, &dx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = slice_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let e = self.shape(v)[*axis];
                    let mut dv = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dv.extend_from_slice(&gd[base..base + e * inner]);
                    }
                    offset += e;
                    self.acc(grads, v, &dv);
                }
            }
            Op::Sum(x) => {
                let dx = vec![gd[0]; self.value(*x).len()];
                self.acc(grads, *x, &dx);
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = slice_axis(self.shape(*x), *axis);
                let mut dx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        dx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = slice_axis(node.value.shape(), *axis);
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + c;
                        let dot: f64 = (0..n).map(|i| gd[idx(i)] * y[idx(i)]).sum();
                        for i in 0..n {
                            dx[idx(i)] = y[idx(i)] * (gd[idx(i)] - dot);
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::Conv { x, w, b, spec } => {
                let xs = self.shape(*x);
                let dims = xs.len() - 1;
                let cin = xs[dims];
                let cout = self.shape(*w)[1];
                let mut dx = self.nodes[x.0].needs_grad.then(|| vec![0.0; self.value(*x).len()]);
                let mut dw = self.nodes[w.0].needs_grad.then(|| vec![0.0; self.value(*w).len()]);
                let mut db = b.filter(|b| self.nodes[b.0].needs_grad).map(|_| vec![0.0; cout]);
                kernels::conv_backward(
                    self.value(*x).data(),
                    &xs[..dims],
                    cin,
                    self.value(*w).data(),
                    cout,
                    spec,
                    gd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, &dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, &dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(grads, *b, &db);
                }
            }
            Op::Upsample(x) => {
                let xs = self.shape(*x);
                let c = xs[xs.len() - 1];
                let map = kernels::upsample_map(&xs[..xs.len() - 1]);
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, &src) in map.iter().enumerate() {
                    dx[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(&gd[o * c..(o + 1) * c])
                        .for_each(|(a, b)| *a += b);
                }
                self.acc(grads, *x, &dx);
            }
            Op::AvgPool(x) => {
                let os = node.value.shape();
                let c = os[os.len() - 1];
                let map = kernels::upsample_map(&os[..os.len() - 1]);
                let scale = 1.0 / (1usize << (os.len() - 1)) as f64;
                let mut dx = vec![0.0; self.value(*x).len()];
                for (i, &dst) in map.iter().enumerate() {
                    dx[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&gd[dst * c..(dst + 1) * c])
                        .for_each(|(a, b)| *a += b * scale);
                }
                self.acc(grads, *x, &dx);
            }
            Op::Sparse { x, map } => {
                let (_, c) = self.value(*x).rows_cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                map.apply_transpose_acc(gd, c, &mut dx);
                self.acc(grads, *x, &dx);
            }
            Op::GroupMax { x, arg } => {
                let (_, c) = self.value(*x).rows_cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (k, &p) in arg.iter().enumerate() {
                    if p != usize::MAX {
                        dx[p * c + k % c] += gd[k];
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::SliceCols { x, start } => {
                let (n, c) = self.value(*x).rows_cols();
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; n * c];
                for r in 0..n {
                    dx[r * c + start..r * c + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.acc(grads, *x, &dx);
            }
            Op::Reshape(x) => self.acc(grads, *x, gd),
            Op::Bce { pred, target, eps } => {
                let p = self.value(*pred).data();
                let dx: Vec<f64> = p
                    .iter()
                    .zip(target.iter())
                    .map(|(&q, &o)| gd[0] * bce_grad(q, o, *eps))
                    .collect();
                self.acc(grads, *pred, &dx);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), g.to_vec()));
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_values(t: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = slice_axis(t.shape(), axis);
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for c in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + c;
            let m = (0..n).map(|i| x[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..n {
                let e = (x[idx(i)] - m).exp();
                out[idx(i)] = e;
                z += e;
            }
            for i in 0..n {
                out[idx(i)] /= z;
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

pub(crate) fn bce_sum(pred: &[f64], target: &[f64], eps: f64) -> f64 {
    -pred
        .iter()
        .zip(target)
        .map(|(&p, &o)| {
            let q = p.clamp(eps, 1.0 - eps);
            o * q.ln() + (1.0 - o) * (1.0 - q).ln()
        })
        .sum::<f64>()
}

fn bce_grad(p: f64, o: f64, eps: f64) -> f64 {
    if p < eps || p > 1.0 - eps {
        return 0.0;
    }
    -(o / p) + (1.0 - o) / (1.0 - p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_zero_weights() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let w = g.constant(Tensor::identity(2));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.constant(Tensor::from_rows(&[vec![4.0, -1.0, 2.0], vec![0.5, 0.0, 9.0]]).unwrap());
        let w = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.constant(Tensor::full(&[2], 3.0));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn linear_reports_offending_axes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 3]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("axis 1") && err.contains("axis 0"), "{err}");
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[9]));
        let s = g.softmax(x, 0).unwrap();
        assert!(g.value(s).data().iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));

        let x = g.constant(Tensor::new(&[2], vec![0.0, 2f64.ln()]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15 && (v[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[1.0, 1.0]);

        let r = g.relu(x);
        let l = g.sum(r);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 1.0]);

        let unused = g.variable(Tensor::ones(&[3]));
        assert_eq!(g.backward(l).unwrap().get(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 4, 1]));
        let w = g.constant(Tensor::zeros(&[4, 1]));
        let spec = ConvSpec { kernel: 2, stride: 1, padding: kernels::Padding::Zero };
        assert!(matches!(g.conv(x, w, None, spec), Err(Error::Config(_))));
    }

    #[test]
    fn upsample_2d() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap());
        let y = g.upsample(x).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 1]);
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::full(&[2], 0.5));
        assert!(matches!(g.bce(p, &[1.0, 0.5], 1e-7), Err(Error::Contract(_))));
    }
}
