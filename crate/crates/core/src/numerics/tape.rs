//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters enter as
//! borrowed leaves (no copy), intermediate values are owned by the tape, and
//! [`Tape::backward`] walks the records once in reverse, accumulating leaf
//! gradients keyed by [`TensorId`]. A tensor bound more than once receives
//! the sum of its path contributions.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Tensor, TensorId};

/// Population-variance floor under the square root of [`Tape::std_over_axis`].
pub const STD_EPS: f64 = 1e-6;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    MeanAxis(Var, usize),
    StdAxis(Var, usize),
    LogSoftmax(Var),
    Sum(Var),
}

struct Node<'p> {
    op: Op,
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    requires_grad: bool,
    leaf: Option<TensorId>,
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    consumed: bool,
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_leaf: BTreeMap<TensorId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.by_leaf.get(&id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: TensorId) -> bool {
        self.by_leaf.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    /// Adds the gradient of every listed tensor that requires grad and was
    /// bound on the tape. Returns how many tensors received a gradient.
    pub fn accumulate_into<'a, I>(&self, params: I) -> Result<usize>
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        let mut written = 0;
        for p in params {
            if !p.requires_grad() {
                continue;
            }
            if let Some(g) = self.by_leaf.get(&p.id()) {
                p.accumulate_grad(g)?;
                written += 1;
            }
        }
        Ok(written)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major storage, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        None => *slot = Some(contribution),
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a tensor as a leaf without copying it. Gradients flow to it
    /// iff the tensor requires grad.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.values()),
            requires_grad: t.requires_grad(),
            leaf: Some(t.id()),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_constant(shape, t.into_values())
    }

    fn push_constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            value: Cow::Owned(values),
            requires_grad: false,
            leaf: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let shape = self.nodes[v.0].shape.clone();
        let values = self.nodes[v.0].value.to_vec();
        self.push_constant(shape, values)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape values are finite")
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, name: &'static str) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.operands(&op).iter().any(|o| self.nodes[o.0].requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            value: Cow::Owned(value),
            requires_grad,
            leaf: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn operands(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MulScalar(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Reshape(a)
            | Op::MeanAxis(a, _)
            | Op::StdAxis(a, _)
            | Op::LogSoftmax(a)
            | Op::Sum(a) => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a), false, self.value(b), false, 0.0, &mut out);
        self.push(Op::MatMul(a, b), vec![n, m], out, "matmul")
    }

    /// Right operand must match `a`'s shape or be a row vector broadcast over
    /// the leading axis (bias addition).
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        let last = sa.last().copied().unwrap_or(1);
        if sb.len() == 1 && sb[0] == last && sa.len() >= 2 {
            return Ok(true);
        }
        Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
    }

    fn binary_map(&self, a: Var, b: Var, broadcast: bool, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (self.value(a), self.value(b));
        if broadcast {
            let w = vb.len();
            va.iter().enumerate().map(|(i, &x)| f(x, vb[i % w])).collect()
        } else {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_check("add", a, b)?;
        let out = self.binary_map(a, b, bc, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(Op::Add(a, b), shape, out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_check("sub", a, b)?;
        let out = self.binary_map(a, b, bc, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push(Op::Sub(a, b), shape, out, "sub")
    }

    /// Elementwise product (same shapes, or row broadcast of `b`).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_check("mul", a, b)?;
        let out = self.binary_map(a, b, bc, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul(a, b), shape, out, "mul")
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::MulScalar(a, s), shape, out, "mul_scalar")
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), "log", f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), "square", |x| x * x)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let out = self.value(a).to_vec();
        self.push(Op::Reshape(a), shape, out, "reshape")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let v = self.value(*p);
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Op::Concat(parts.to_vec(), axis), shape, out, "concat")
    }

    fn reduced_shape(&self, a: Var, axis: usize, op: &'static str) -> Result<Vec<usize>> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::shape(op, format!("axis {axis} for {s:?}")));
        }
        let mut out = s.to_vec();
        out.remove(axis);
        Ok(out)
    }

    fn axis_means(&self, a: Var, axis: usize) -> Vec<f64> {
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        let v = self.value(a);
        let mut mean = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (m, x) in mean[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *m += x;
                }
            }
        }
        let inv = 1.0 / len as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }

    pub fn mean_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.reduced_shape(a, axis, "mean_over_axis")?;
        if self.shape(a)[axis] == 0 {
            return Err(Error::shape("mean_over_axis", "empty axis"));
        }
        let out = self.axis_means(a, axis);
        self.push(Op::MeanAxis(a, axis), shape, out, "mean_over_axis")
    }

    /// Population standard deviation with [`STD_EPS`] under the root.
    pub fn std_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.reduced_shape(a, axis, "std_over_axis")?;
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        if len < 2 {
            return Err(Error::shape(
                "std_over_axis",
                format!("needs >= 2 elements along axis {axis}, got {len}"),
            ));
        }
        let mean = self.axis_means(a, axis);
        let v = self.value(a);
        let mut var = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let d = v[(o * len + l) * inner + i] - mean[o * inner + i];
                    var[o * inner + i] += d * d;
                }
            }
        }
        let out = var
            .iter()
            .map(|s| (s / len as f64 + STD_EPS).sqrt())
            .collect();
        self.push(Op::StdAxis(a, axis), shape, out, "std_over_axis")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let width = s.last().copied().unwrap_or(1);
        if width == 0 {
            return Err(Error::shape("log_softmax", "empty class axis"));
        }
        let shape = s.to_vec();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(Op::LogSoftmax(a), shape, out, "log_softmax")
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).iter().sum();
        self.push(Op::Sum(a), vec![], vec![total], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Reverse pass from a scalar. Consumes the tape: a second call fails.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if let Some(id) = node.leaf {
                    out.by_leaf
                        .entry(id)
                        .or_insert_with(|| vec![0.0; node.value.len()]);
                }
                continue;
            };
            if let Some(id) = node.leaf {
                match out.by_leaf.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        out.by_leaf.insert(id, g);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        // Bound leaves that sit after the loss never influence it.
        for node in &self.nodes[loss.0 + 1..] {
            if let (true, Some(id)) = (node.requires_grad, node.leaf) {
                out.by_leaf
                    .entry(id)
                    .or_insert_with(|| vec![0.0; node.value.len()]);
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; n * k];
                    gemm(n, m, k, g, false, self.value(*b), true, 0.0, &mut ga);
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * m];
                    gemm(k, n, m, self.value(*a), true, g, false, 0.0, &mut gb);
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    let gb = self.reduce_broadcast(*b, g.iter().map(|x| sign * x));
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let w = vb.len();
                if self.wants(*a) {
                    let ga = g.iter().enumerate().map(|(j, x)| x * vb[j % w]).collect();
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let gb = self.reduce_broadcast(*b, g.iter().zip(va).map(|(x, y)| x * y));
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::MulScalar(a, s) => {
                accumulate(&mut grads[a.0], g.iter().map(|x| x * s).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::Exp(a) => {
                accumulate(&mut grads[a.0], g.iter().zip(y.iter()).map(|(d, y)| d * y).collect());
            }
            Op::Log(a) => {
                let x = self.value(*a);
                accumulate(&mut grads[a.0], g.iter().zip(x).map(|(d, x)| d / x).collect());
            }
            Op::Square(a) => {
                let x = self.value(*a);
                accumulate(
                    &mut grads[a.0],
                    g.iter().zip(x).map(|(d, x)| 2.0 * x * d).collect(),
                );
            }
            Op::Reshape(a) => accumulate(&mut grads[a.0], g.to_vec()),
            Op::Concat(parts, axis) => {
                let total = node.shape[*axis];
                let (outer, _, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[start..start + len * inner]);
                        }
                        accumulate(&mut grads[p.0], gp);
                    }
                    offset += len;
                }
            }
            Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                let inv = 1.0 / len as f64;
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for k in 0..inner {
                            ga[(o * len + l) * inner + k] = g[o * inner + k] * inv;
                        }
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::StdAxis(a, axis) => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                let mean = self.axis_means(*a, *axis);
                let x = self.value(*a);
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for k in 0..inner {
                            let j = o * inner + k;
                            let idx = (o * len + l) * inner + k;
                            ga[idx] = g[j] * (x[idx] - mean[j]) / (len as f64 * y[j]);
                        }
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::LogSoftmax(a) => {
                let width = node.shape.last().copied().unwrap_or(1);
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(width).zip(y.chunks(width)) {
                    let s: f64 = gr.iter().sum();
                    ga.extend(gr.iter().zip(yr).map(|(d, y)| d - y.exp() * s));
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], vec![g[0]; n]);
            }
        }
    }

    /// Folds an upstream gradient back onto `b`'s shape, summing over the
    /// broadcast leading axis when `b` was a row vector.
    fn reduce_broadcast(&self, b: Var, g: impl Iterator<Item = f64>) -> Vec<f64> {
        let w = self.value(b).len();
        let mut gb = vec![0.0; w];
        for (j, x) in g.enumerate() {
            gb[j % w] += x;
        }
        gb
    }
}
