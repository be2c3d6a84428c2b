//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each primitive appends one
//! node holding its output value; [`Graph::backward`] then walks the nodes in
//! reverse insertion order, which is a valid reverse topological order because
//! every node's inputs were inserted before it.
//!
//! ```
//! use stvqa::graph::Graph;
//! use stvqa::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable primitives. Every model computation is a composition
/// of these.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Elementwise sum; the right operand may broadcast over leading axes.
    Add,
    Sub,
    /// Elementwise product; the right operand may broadcast over leading axes.
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// Rank-2 matrix product.
    MatMul,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Vec<usize>),
    Tanh,
    Sigmoid,
    Relu,
    Log,
    /// Softmax over the last axis.
    Softmax,
    LogSoftmax,
    /// Sum of all elements, yielding a `[1]` scalar.
    Sum,
    Mean,
    /// Zero-mean unit-variance normalization over the last axis (no affine).
    Normalize {
        eps: f64,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::MatMul => "matmul",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape(_) => "reshape",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Relu => "relu",
            Primitive::Log => "log",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Normalize { .. } => "normalize",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

struct Node {
    primitive: Option<Primitive>,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A tape of primitive applications.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    fault: Option<&'static str>,
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

    /// Scales the adjoint of every `primitive` node by 1.5. Negative control
    /// for gradient checking only.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, primitive: &'static str) {
        self.fault = Some(primitive);
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { primitive: None, inputs: Vec::new(), value, requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, None)
    }

    /// The leaf for a model parameter, inserted on first use and reused after.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_leaf(value.clone(), true, Some(id));
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Applies `primitive` to `inputs`, recording the result.
    pub fn apply(&mut self, primitive: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = primitive.arity() {
            if inputs.len() != n {
                return Err(Error::Invalid(format!("{} takes {n} inputs, got {}", primitive.name(), inputs.len())));
            }
        } else if inputs.is_empty() {
            return Err(Error::Invalid(format!("{} needs at least one input", primitive.name())));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(&primitive, &values)?;
        if !out.is_finite() {
            return Err(Error::NonFinite { primitive: primitive.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            primitive: Some(primitive),
            inputs: inputs.to_vec(),
            value: out,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(Primitive::Scale(k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(k), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmax, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gain * x̂ + bias`. `gain` and `bias` must match the trailing axes of `x`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        for (name, p) in [("gain", gain), ("bias", bias)] {
            let ps = self.shape(p);
            if ps.len() > xs.len() || xs[xs.len() - ps.len()..] != *ps {
                return Err(Error::ShapeMismatch {
                    primitive: if name == "gain" { "layer_norm(gain)" } else { "layer_norm(bias)" },
                    lhs: xs.clone(),
                    rhs: ps.to_vec(),
                });
            }
        }
        let n = self.apply(Primitive::Normalize { eps }, &[x])?;
        let scaled = self.mul(n, gain)?;
        self.add(scaled, bias)
    }

    /// Gradients of the scalar `root` with respect to every leaf that
    /// requires them. Leaves not reachable from `root` get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::Invalid(format!("backward needs a scalar root, got shape {:?}", root_value.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_value.shape()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(primitive) = &node.primitive else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let wanted: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let mut input_grads = adjoint(primitive, &inputs, &node.value, &dout, &wanted);
            if self.fault == Some(primitive.name()) {
                for g in input_grads.iter_mut().flatten() {
                    for v in g.data_mut() {
                        *v *= 1.5;
                    }
                }
            }
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut leaves = HashMap::new();
        let mut params = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.primitive.is_some() || !node.requires_grad {
                continue;
            }
            let g = grads.get_mut(idx).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            if let Some(p) = node.param {
                params.insert(p, g.clone());
            }
            leaves.insert(Var(idx), g);
        }
        Ok(Gradients { leaves, params })
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf variable.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.leaves.get(&v).cloned().unwrap_or_else(|| panic!("{v:?} is not a differentiable leaf"))
    }

    /// Gradient for a parameter, or `None` when the parameter did not take
    /// part in the graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.params.iter()
    }
}

/// Central-difference gradient estimate of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("finite difference step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Gradient-check error between an analytic and a numeric value. Values below
/// `floor` in magnitude are compared absolutely against `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn mismatch(primitive: &Primitive, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { primitive: primitive.name(), lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn broadcasts(a: &Tensor, b: &Tensor) -> bool {
    let (sa, sb) = (a.shape(), b.shape());
    sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb
}

fn forward(p: &Primitive, x: &[&Tensor]) -> Result<Tensor> {
    let out = match p {
        Primitive::Add | Primitive::Mul => {
            let (a, b) = (x[0], x[1]);
            if !broadcasts(a, b) {
                return Err(mismatch(p, a, b));
            }
            let n = b.numel();
            let mut out = a.clone();
            let bd = b.data();
            let is_add = *p == Primitive::Add;
            for chunk in out.data_mut().chunks_mut(n) {
                for (o, &bv) in chunk.iter_mut().zip(bd) {
                    if is_add {
                        *o += bv
                    } else {
                        *o *= bv
                    }
                }
            }
            out
        }
        Primitive::Sub => {
            let (a, b) = (x[0], x[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(p, a, b));
            }
            a.zip_map(b, |u, v| u - v)
        }
        Primitive::Scale(k) => x[0].map(|v| v * k),
        Primitive::AddScalar(k) => x[0].map(|v| v + k),
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch(p, a, b));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm_acc(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(&[m, n], out)?
        }
        Primitive::Concat { axis } => {
            let axis = *axis;
            let first = x[0];
            if axis >= first.rank() {
                return Err(Error::Shape(format!("concat axis {axis} out of range for {:?}", first.shape())));
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = 0;
            for t in x {
                let s = t.shape();
                let compatible = s.len() == first.rank()
                    && s.iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(mismatch(p, first, t));
                }
                shape[axis] += s[axis];
            }
            let outer: usize = first.shape()[..axis].iter().product();
            let inners: Vec<usize> = x.iter().map(|t| t.shape()[axis..].iter().product()).collect();
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for (t, &inner) in x.iter().zip(&inners) {
                    data.extend_from_slice(&t.data()[o * inner..(o + 1) * inner]);
                }
            }
            Tensor::new(&shape, data)?
        }
        Primitive::Slice { axis, start, len } => {
            let t = x[0];
            let (axis, start, len) = (*axis, *start, *len);
            if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
                return Err(Error::Shape(format!(
                    "slice [{start}, {}) on axis {axis} out of range for {:?}",
                    start + len,
                    t.shape()
                )));
            }
            let outer: usize = t.shape()[..axis].iter().product();
            let inner: usize = t.shape()[axis + 1..].iter().product();
            let extent = t.shape()[axis];
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, data)?
        }
        Primitive::Reshape(shape) => {
            x[0].reshaped(shape).map_err(|_| Error::Shape(format!("reshape {:?} -> {shape:?}", x[0].shape())))?
        }
        Primitive::Tanh => x[0].map(f64::tanh),
        Primitive::Sigmoid => x[0].map(sigmoid),
        Primitive::Relu => x[0].map(|v| v.max(0.0)),
        Primitive::Log => x[0].map(f64::ln),
        Primitive::Softmax => row_map(x[0], |row, out| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }),
        Primitive::LogSoftmax => row_map(x[0], |row, out| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v - lse;
            }
        }),
        Primitive::Sum => Tensor::scalar(x[0].sum()),
        Primitive::Mean => Tensor::scalar(x[0].sum() / x[0].numel() as f64),
        Primitive::Normalize { eps } => row_map(x[0], |row, out| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }),
    };
    Ok(out)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn row_map(t: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let (_, cols) = t.rows_cols();
    let mut out = Tensor::zeros(t.shape());
    for (row, o) in t.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)) {
        f(row, o);
    }
    out
}

fn adjoint(p: &Primitive, x: &[&Tensor], y: &Tensor, dy: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
    let want = |i: usize| wanted[i];
    match p {
        Primitive::Add | Primitive::Mul => {
            let (a, b) = (x[0], x[1]);
            let n = b.numel();
            let is_add = *p == Primitive::Add;
            let da = want(0).then(|| {
                if is_add {
                    dy.clone()
                } else {
                    let mut g = dy.clone();
                    for chunk in g.data_mut().chunks_mut(n) {
                        for (o, &bv) in chunk.iter_mut().zip(b.data()) {
                            *o *= bv;
                        }
                    }
                    g
                }
            });
            let db = want(1).then(|| {
                let mut g = Tensor::zeros(b.shape());
                for (k, (&d, &av)) in dy.data().iter().zip(a.data()).enumerate() {
                    g.data_mut()[k % n] += if is_add { d } else { d * av };
                }
                g
            });
            vec![da, db]
        }
        Primitive::Sub => vec![want(0).then(|| dy.clone()), want(1).then(|| dy.map(|v| -v))],
        Primitive::Scale(k) => vec![Some(dy.map(|v| v * k))],
        Primitive::AddScalar(_) | Primitive::Reshape(_) => {
            vec![Some(Tensor::new(x[0].shape(), dy.data().to_vec()).expect("same numel"))]
        }
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let da = want(0).then(|| {
                let mut g = Tensor::zeros(a.shape());
                gemm_nt_acc(dy.data(), b.data(), g.data_mut(), m, n, k);
                g
            });
            let db = want(1).then(|| {
                let mut g = Tensor::zeros(b.shape());
                gemm_tn_acc(a.data(), dy.data(), g.data_mut(), m, k, n);
                g
            });
            vec![da, db]
        }
        Primitive::Concat { axis } => {
            let axis = *axis;
            let outer: usize = x[0].shape()[..axis].iter().product();
            let inners: Vec<usize> = x.iter().map(|t| t.shape()[axis..].iter().product()).collect();
            let total: usize = inners.iter().sum();
            let mut out = Vec::with_capacity(x.len());
            let mut offset = 0;
            for (i, (t, &inner)) in x.iter().zip(&inners).enumerate() {
                if want(i) {
                    let mut data = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = o * total + offset;
                        data.extend_from_slice(&dy.data()[base..base + inner]);
                    }
                    out.push(Some(Tensor::new(t.shape(), data).expect("same shape")));
                } else {
                    out.push(None);
                }
                offset += inner;
            }
            out
        }
        Primitive::Slice { axis, start, len } => {
            let t = x[0];
            let outer: usize = t.shape()[..*axis].iter().product();
            let inner: usize = t.shape()[axis + 1..].iter().product();
            let extent = t.shape()[*axis];
            let mut g = Tensor::zeros(t.shape());
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                let src = o * len * inner;
                g.data_mut()[dst..dst + len * inner].copy_from_slice(&dy.data()[src..src + len * inner]);
            }
            vec![Some(g)]
        }
        Primitive::Tanh => vec![Some(y.zip_map(dy, |yv, d| d * (1.0 - yv * yv)))],
        Primitive::Sigmoid => vec![Some(y.zip_map(dy, |yv, d| d * yv * (1.0 - yv)))],
        Primitive::Relu => vec![Some(x[0].zip_map(dy, |xv, d| if xv > 0.0 { d } else { 0.0 }))],
        Primitive::Log => vec![Some(x[0].zip_map(dy, |xv, d| d / xv))],
        Primitive::Softmax => {
            let (_, cols) = y.rows_cols();
            let mut g = Tensor::zeros(y.shape());
            for ((yr, dr), gr) in y.data().chunks(cols).zip(dy.data().chunks(cols)).zip(g.data_mut().chunks_mut(cols)) {
                let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                for ((o, &yv), &d) in gr.iter_mut().zip(yr).zip(dr) {
                    *o = yv * (d - dot);
                }
            }
            vec![Some(g)]
        }
        Primitive::LogSoftmax => {
            let (_, cols) = y.rows_cols();
            let mut g = Tensor::zeros(y.shape());
            for ((yr, dr), gr) in y.data().chunks(cols).zip(dy.data().chunks(cols)).zip(g.data_mut().chunks_mut(cols)) {
                let total: f64 = dr.iter().sum();
                for ((o, &yv), &d) in gr.iter_mut().zip(yr).zip(dr) {
                    *o = d - yv.exp() * total;
                }
            }
            vec![Some(g)]
        }
        Primitive::Sum => vec![Some(Tensor::filled(x[0].shape(), dy.item()))],
        Primitive::Mean => vec![Some(Tensor::filled(x[0].shape(), dy.item() / x[0].numel() as f64))],
        Primitive::Normalize { eps } => {
            let t = x[0];
            let (_, cols) = t.rows_cols();
            let n = cols as f64;
            let mut g = Tensor::zeros(t.shape());
            let rows = t.data().chunks(cols).zip(y.data().chunks(cols)).zip(dy.data().chunks(cols));
            for (((xr, yr), dr), gr) in rows.zip(g.data_mut().chunks_mut(cols)) {
                let mean = xr.iter().sum::<f64>() / n;
                let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let mean_d = dr.iter().sum::<f64>() / n;
                let mean_dy = dr.iter().zip(yr).map(|(d, yv)| d * yv).sum::<f64>() / n;
                for ((o, &d), &yv) in gr.iter_mut().zip(dr).zip(yr) {
                    *o = inv * (d - mean_d - yv * mean_dy);
                }
            }
            vec![Some(g)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3));
        let a = Tensor::matrix(3, 3, (1..=9).map(f64::from).collect()).unwrap();
        let av = g.constant(a.clone());
        let y = g.matmul(i, av).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn concat_vectors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(&[1.0, 2.0]));
        let b = g.constant(Tensor::vector(&[3.0]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(&[0.3, -1.2, 2.0, 0.7]));
        let s = g.softmax(x).unwrap();
        let y = g.sum(s).unwrap();
        let grad = g.backward(y).unwrap().wrt(x);
        assert!(grad.data().iter().all(|v| v.abs() < 1e-15), "{grad:?}");
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(&[1.0, 2.0]));
        let y = g.tanh(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let unused = g.variable(Tensor::vector(&[1.0, 1.0]));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        assert!(matches!(g.log(x), Err(Error::NonFinite { primitive: "log" })));
    }

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let x = Tensor::vector(&[0.5, -2.0, 7.0]);
        let grad = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for v in grad.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_of_square() {
        let grad = finite_diff_grad(|t| Ok(t.item() * t.item()), &Tensor::scalar(2.0), 1e-5).unwrap();
        assert!((grad.item() - 4.0).abs() < 1e-6);
    }

    fn layer_norm_value(x: &[f64], eps: f64) -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::vector(x));
        let gain = g.constant(Tensor::ones(&[x.len()]));
        let bias = g.constant(Tensor::zeros(&[x.len()]));
        let y = g.layer_norm(xv, gain, bias, eps).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        assert!(layer_norm_value(&[3.0; 5], 1e-5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_of_normalized_input_is_identity() {
        let y = layer_norm_value(&[1.0, -1.0], 1e-12);
        assert!((y[0] - 1.0).abs() < 1e-9 && (y[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_rejects_mismatched_gain() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let gain = g.constant(Tensor::ones(&[3]));
        let bias = g.constant(Tensor::zeros(&[4]));
        assert!(g.layer_norm(x, gain, bias, 1e-5).is_err());
    }
}
