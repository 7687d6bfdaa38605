//! Reverse-mode autodiff over a Wengert list.
//!
//! A `Tape` owns every node's output tensor; `Var` is an index into it.
//! Forward values are computed eagerly at `apply` time, `backward` walks the
//! list once in reverse and accumulates sum-of-products into per-node adjoint
//! slots in a fixed order, so two runs over the same tape are bitwise equal.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::tensor::Tensor;

/// Handle to one tape node. Only meaningful for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[m,k]x[k,n] -> [m,n]`, `[k]x[k,n] -> [n]`, `[m,k]x[k] -> [m]`.
    MatMul,
    /// Elementwise with suffix broadcast (scalar or trailing-shape operand
    /// tiles over the leading axes of the larger one).
    Add,
    Sub,
    Mul,
    /// max(x, 0); gradient at exactly 0 is 0.
    Relu,
    Tanh,
    Sigmoid,
    /// Errors if the result overflows to infinity.
    Exp,
    /// Errors on non-positive input.
    Log,
    /// Full reduction to a scalar.
    Sum,
    Mean,
    /// Concatenation along axis 0; trailing extents must match.
    Concat,
    /// `len` rows starting at `start`, along axis 0.
    Slice { start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    /// Rows along the last axis divided by (norm + 1e-12); errors on an
    /// exactly zero-norm row.
    L2Normalize,
    /// log(sum(exp(x))) along the last axis, max-shifted.
    LogSumExp,
    /// x - logsumexp(x) along the last axis.
    LogSoftmax,
    /// 2x2 ceil-mode max pooling over the first two axes of a rank-3 tensor.
    /// Ties resolve to the first maximum in row-major window order.
    MaxPool2,
    Clamp { lo: f64, hi: f64 },
    /// Errors outside [-1, 1]; the derivative is unbounded near the ends.
    Acos,
    Cos,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Relu => "relu",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape { .. } => "reshape",
            Primitive::L2Normalize => "l2_normalize",
            Primitive::LogSumExp => "logsumexp",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::MaxPool2 => "max_pool2",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Acos => "acos",
            Primitive::Cos => "cos",
        }
    }
}

enum NodeOp {
    Leaf,
    Prim { prim: Primitive, inputs: Vec<usize> },
}

#[derive(Default)]
pub struct Tape {
    ops: Vec<NodeOp>,
    vals: Vec<Tensor>,
}

/// Adjoints produced by one `backward` pass, indexed by `Var`.
pub struct Gradients {
    entries: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.entries.get(v.0).and_then(|e| e.as_ref())
    }

    /// Adjoint of `v`, zero-filled when `v` does not influence the root.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.entries.get(v.0) {
            Some(Some(t)) => t.clone(),
            _ => Tensor::zeros(tape.value(v).shape().to_vec()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Registers an input tensor. Leaves must be finite; this is the gate
    /// that keeps NaN/Inf off the tape.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        t.assert_finite("tape leaf")?;
        self.ops.push(NodeOp::Leaf);
        self.vals.push(t);
        Ok(Var(self.ops.len() - 1))
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    /// Applies a primitive, computing its output immediately.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if v.0 >= self.ops.len() {
                return Err(CoreError::Contract(format!(
                    "input var {} is not on this tape (len {})",
                    v.0,
                    self.ops.len()
                )));
            }
        }
        let out = self.forward(&prim, inputs)?;
        self.ops.push(NodeOp::Prim {
            prim,
            inputs: inputs.iter().map(|v| v.0).collect(),
        });
        self.vals.push(out);
        Ok(Var(self.ops.len() - 1))
    }

    fn forward(&self, prim: &Primitive, inputs: &[Var]) -> Result<Tensor> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(CoreError::Contract(format!(
                    "{} expects {n} inputs, got {}",
                    prim.name(),
                    inputs.len()
                )))
            }
        };
        let val = |i: usize| -> &Tensor { &self.vals[inputs[i].0] };

        match prim {
            Primitive::MatMul => {
                arity(2)?;
                forward_matmul(val(0), val(1))
            }
            Primitive::Add => {
                arity(2)?;
                elementwise_bin("add", val(0), val(1), |a, b| a + b)
            }
            Primitive::Sub => {
                arity(2)?;
                elementwise_bin("sub", val(0), val(1), |a, b| a - b)
            }
            Primitive::Mul => {
                arity(2)?;
                elementwise_bin("mul", val(0), val(1), |a, b| a * b)
            }
            Primitive::Relu => {
                arity(1)?;
                Ok(val(0).map(|x| if x > 0.0 { x } else { 0.0 }))
            }
            Primitive::Tanh => {
                arity(1)?;
                Ok(val(0).map(fmath::tanh))
            }
            Primitive::Sigmoid => {
                arity(1)?;
                Ok(val(0).map(fmath::sigmoid))
            }
            Primitive::Exp => {
                arity(1)?;
                let out = val(0).map(fmath::exp);
                out.assert_finite("exp output").map_err(|_| CoreError::Domain {
                    op: "exp",
                    detail: "overflow to infinity".into(),
                })?;
                Ok(out)
            }
            Primitive::Log => {
                arity(1)?;
                let x = val(0);
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                    return Err(CoreError::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                Ok(x.map(fmath::ln))
            }
            Primitive::Sum => {
                arity(1)?;
                Ok(Tensor::scalar(val(0).data().iter().sum()))
            }
            Primitive::Mean => {
                arity(1)?;
                let x = val(0);
                let s: f64 = x.data().iter().sum();
                Ok(Tensor::scalar(s / x.numel() as f64))
            }
            Primitive::Concat => forward_concat(inputs.iter().map(|v| &self.vals[v.0])),
            Primitive::Slice { start, len } => {
                arity(1)?;
                forward_slice(val(0), *start, *len)
            }
            Primitive::Reshape { shape } => {
                arity(1)?;
                let x = val(0);
                let numel: usize = shape.iter().product();
                if shape.iter().any(|&d| d == 0) || numel != x.numel() {
                    return Err(CoreError::Dimension {
                        op: "reshape",
                        detail: format!("{:?} -> {:?}", x.shape(), shape),
                    });
                }
                Tensor::new(shape.clone(), x.data().to_vec())
            }
            Primitive::L2Normalize => {
                arity(1)?;
                forward_l2_normalize(val(0))
            }
            Primitive::LogSumExp => {
                arity(1)?;
                forward_logsumexp(val(0))
            }
            Primitive::LogSoftmax => {
                arity(1)?;
                forward_log_softmax(val(0))
            }
            Primitive::MaxPool2 => {
                arity(1)?;
                forward_max_pool2(val(0))
            }
            Primitive::Clamp { lo, hi } => {
                arity(1)?;
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(CoreError::Contract(format!(
                        "clamp bounds must be finite with lo < hi, got [{lo}, {hi}]"
                    )));
                }
                let (lo, hi) = (*lo, *hi);
                Ok(val(0).map(|x| x.clamp(lo, hi)))
            }
            Primitive::Acos => {
                arity(1)?;
                let x = val(0);
                if let Some(bad) = x.data().iter().find(|&&v| !(-1.0..=1.0).contains(&v)) {
                    return Err(CoreError::Domain {
                        op: "acos",
                        detail: format!("input {bad} outside [-1, 1]"),
                    });
                }
                Ok(x.map(fmath::acos))
            }
            Primitive::Cos => {
                arity(1)?;
                Ok(val(0).map(fmath::cos))
            }
        }
    }

    /// Reverse sweep from a scalar root. Nodes that do not influence the root
    /// keep a `None` adjoint, read back as zeros via `Gradients::wrt`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.ops.len() {
            return Err(CoreError::Contract("backward root is not on this tape".into()));
        }
        if !self.vals[root.0].is_scalar() {
            return Err(CoreError::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.vals[root.0].shape()
            )));
        }
        let mut entries: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        entries[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let dz = match &entries[id] {
                Some(t) => t.clone(),
                None => continue,
            };
            let (prim, inputs) = match &self.ops[id] {
                NodeOp::Leaf => continue,
                NodeOp::Prim { prim, inputs } => (prim, inputs),
            };
            self.backprop_node(prim, inputs, id, &dz, &mut entries)?;
        }
        Ok(Gradients { entries })
    }

    fn backprop_node(
        &self,
        prim: &Primitive,
        inputs: &[usize],
        out_id: usize,
        dz: &Tensor,
        entries: &mut [Option<Tensor>],
    ) -> Result<()> {
        let x = |i: usize| -> &Tensor { &self.vals[inputs[i]] };
        let y = &self.vals[out_id];
        let mut acc = |slot: usize, delta: Tensor| -> Result<()> {
            match &mut entries[slot] {
                Some(t) => t.add_assign(&delta),
                none => {
                    *none = Some(delta);
                    Ok(())
                }
            }
        };

        match prim {
            Primitive::MatMul => {
                let (da, db) = backward_matmul(x(0), x(1), dz)?;
                acc(inputs[0], da)?;
                acc(inputs[1], db)?;
            }
            Primitive::Add => {
                acc(inputs[0], reduce_into_shape(dz, x(0).shape(), None))?;
                acc(inputs[1], reduce_into_shape(dz, x(1).shape(), None))?;
            }
            Primitive::Sub => {
                acc(inputs[0], reduce_into_shape(dz, x(0).shape(), None))?;
                let mut db = reduce_into_shape(dz, x(1).shape(), None);
                for v in db.data_mut() {
                    *v = -*v;
                }
                acc(inputs[1], db)?;
            }
            Primitive::Mul => {
                acc(inputs[0], reduce_into_shape(dz, x(0).shape(), Some(x(1))))?;
                acc(inputs[1], reduce_into_shape(dz, x(1).shape(), Some(x(0))))?;
            }
            Primitive::Relu => {
                let xi = x(0);
                let d = zip3(dz, xi, |g, v| if v > 0.0 { g } else { 0.0 });
                acc(inputs[0], d)?;
            }
            Primitive::Tanh => {
                let d = zip3(dz, y, |g, t| g * (1.0 - t * t));
                acc(inputs[0], d)?;
            }
            Primitive::Sigmoid => {
                let d = zip3(dz, y, |g, s| g * s * (1.0 - s));
                acc(inputs[0], d)?;
            }
            Primitive::Exp => {
                let d = zip3(dz, y, |g, e| g * e);
                acc(inputs[0], d)?;
            }
            Primitive::Log => {
                let d = zip3(dz, x(0), |g, v| g / v);
                acc(inputs[0], d)?;
            }
            Primitive::Sum => {
                let g = dz.item()?;
                acc(inputs[0], Tensor::full(x(0).shape().to_vec(), g))?;
            }
            Primitive::Mean => {
                let g = dz.item()? / x(0).numel() as f64;
                acc(inputs[0], Tensor::full(x(0).shape().to_vec(), g))?;
            }
            Primitive::Concat => {
                let mut offset = 0usize;
                for &inp in inputs {
                    let part = &self.vals[inp];
                    let n = part.numel();
                    let data = dz.data()[offset..offset + n].to_vec();
                    offset += n;
                    acc(inp, Tensor::new(part.shape().to_vec(), data)?)?;
                }
            }
            Primitive::Slice { start, len } => {
                let xi = x(0);
                let row = xi.numel() / xi.shape()[0];
                let mut d = Tensor::zeros(xi.shape().to_vec());
                let dst = &mut d.data_mut()[start * row..(start + len) * row];
                dst.copy_from_slice(dz.data());
                acc(inputs[0], d)?;
            }
            Primitive::Reshape { .. } => {
                let d = Tensor::new(x(0).shape().to_vec(), dz.data().to_vec())?;
                acc(inputs[0], d)?;
            }
            Primitive::L2Normalize => {
                acc(inputs[0], backward_l2_normalize(x(0), dz))?;
            }
            Primitive::LogSumExp => {
                acc(inputs[0], backward_logsumexp(x(0), y, dz))?;
            }
            Primitive::LogSoftmax => {
                acc(inputs[0], backward_log_softmax(y, dz))?;
            }
            Primitive::MaxPool2 => {
                acc(inputs[0], backward_max_pool2(x(0), dz))?;
            }
            Primitive::Clamp { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let d = zip3(dz, x(0), |g, v| if v > lo && v < hi { g } else { 0.0 });
                acc(inputs[0], d)?;
            }
            Primitive::Acos => {
                let d = zip3(dz, x(0), |g, v| -g / fmath::sqrt(1.0 - v * v));
                acc(inputs[0], d)?;
            }
            Primitive::Cos => {
                let d = zip3(dz, x(0), |g, v| -g * fmath::sin(v));
                acc(inputs[0], d)?;
            }
        }
        Ok(())
    }

    // Convenience wrappers. All of them funnel through `apply`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
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

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, xs)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { start, len }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Primitive::Reshape { shape: shape.into() }, &[x])
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::L2Normalize, &[x])
    }

    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::LogSumExp, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmax, &[x])
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::MaxPool2, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[x])
    }

    pub fn acos(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Acos, &[x])
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Cos, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let zero = self.scalar(0.0)?;
        self.sub(zero, x)
    }
}

// Shape and kernel helpers.

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && &big[big.len() - small.len()..] == small
}

fn elementwise_bin(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (out_shape, an, bn) = if is_suffix(b.shape(), a.shape()) {
        (a.shape().to_vec(), a.numel(), b.numel())
    } else if is_suffix(a.shape(), b.shape()) {
        (b.shape().to_vec(), a.numel(), b.numel())
    } else {
        return Err(CoreError::Dimension {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    };
    let n: usize = out_shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n).map(|i| f(ad[i % an], bd[i % bn])).collect();
    Tensor::new(out_shape, data)
}

/// Sum-reduces `dz` onto `target_shape` (a suffix of dz's shape), optionally
/// weighting each term by the broadcast other operand (for Mul).
fn reduce_into_shape(dz: &Tensor, target_shape: &[usize], weight: Option<&Tensor>) -> Tensor {
    let tn: usize = target_shape.iter().product();
    let mut out = Tensor::zeros(target_shape.to_vec());
    let od = out.data_mut();
    let dzd = dz.data();
    match weight {
        Some(w) => {
            let wd = w.data();
            let wn = wd.len();
            for (i, &g) in dzd.iter().enumerate() {
                od[i % tn] += g * wd[i % wn];
            }
        }
        None => {
            for (i, &g) in dzd.iter().enumerate() {
                od[i % tn] += g;
            }
        }
    }
    out
}

fn zip3(dz: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(dz.shape(), other.shape());
    let data = dz
        .data()
        .iter()
        .zip(other.data().iter())
        .map(|(&g, &v)| f(g, v))
        .collect();
    Tensor::new(dz.shape().to_vec(), data).expect("shapes match")
}

fn matmul_kernel(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

struct MatMulDims {
    m: usize,
    k: usize,
    n: usize,
    a_vec: bool,
    b_vec: bool,
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<MatMulDims> {
    let err = || CoreError::Dimension {
        op: "matmul",
        detail: format!("{:?} x {:?}", a.shape(), b.shape()),
    };
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(err());
            }
            Ok(MatMulDims { m, k, n, a_vec: false, b_vec: false })
        }
        (1, 2) => {
            let k = a.shape()[0];
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(err());
            }
            Ok(MatMulDims { m: 1, k, n, a_vec: true, b_vec: false })
        }
        (2, 1) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            if k != b.shape()[0] {
                return Err(err());
            }
            Ok(MatMulDims { m, k, n: 1, a_vec: false, b_vec: true })
        }
        _ => Err(err()),
    }
}

fn forward_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(a, b)?;
    let data = matmul_kernel(a.data(), d.m, d.k, b.data(), d.n);
    let shape: Vec<usize> = match (d.a_vec, d.b_vec) {
        (false, false) => vec![d.m, d.n],
        (true, false) => vec![d.n],
        (false, true) => vec![d.m],
        (true, true) => unreachable!(),
    };
    Tensor::new(shape, data)
}

fn backward_matmul(a: &Tensor, b: &Tensor, dz: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = matmul_dims(a, b)?;
    // dA = dZ . B^T, dB = A^T . dZ, all in the promoted [m,k]/[k,n] view.
    let bt = transpose(b.data(), d.k, d.n);
    let da = matmul_kernel(dz.data(), d.m, d.n, &bt, d.k);
    let at = transpose(a.data(), d.m, d.k);
    let db = matmul_kernel(&at, d.k, d.m, dz.data(), d.n);
    Ok((
        Tensor::new(a.shape().to_vec(), da)?,
        Tensor::new(b.shape().to_vec(), db)?,
    ))
}

fn forward_concat<'a>(parts: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let parts: Vec<&Tensor> = parts.collect();
    let first = parts.first().ok_or(CoreError::Contract(
        "concat needs at least one input".into(),
    ))?;
    if first.rank() == 0 {
        return Err(CoreError::Dimension {
            op: "concat",
            detail: "scalar inputs; reshape to [1] first".into(),
        });
    }
    let tail = &first.shape()[1..];
    let mut dim0 = 0usize;
    let mut data = Vec::new();
    for p in &parts {
        if p.rank() != first.rank() || &p.shape()[1..] != tail {
            return Err(CoreError::Dimension {
                op: "concat",
                detail: format!("{:?} vs {:?}", first.shape(), p.shape()),
            });
        }
        dim0 += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![dim0];
    shape.extend_from_slice(tail);
    Tensor::new(shape, data)
}

fn forward_slice(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if x.rank() == 0 || len == 0 || start + len > x.shape()[0] {
        return Err(CoreError::Dimension {
            op: "slice",
            detail: format!("rows {start}..{} of shape {:?}", start + len, x.shape()),
        });
    }
    let row = x.numel() / x.shape()[0];
    let data = x.data()[start * row..(start + len) * row].to_vec();
    let mut shape = vec![len];
    shape.extend_from_slice(&x.shape()[1..]);
    Tensor::new(shape, data)
}

const NORM_EPS: f64 = 1e-12;

fn last_axis_rows(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() == 0 {
        return Err(CoreError::Dimension {
            op: "last-axis op",
            detail: "needs rank >= 1".into(),
        });
    }
    let cols = *x.shape().last().expect("rank >= 1");
    Ok((x.numel() / cols, cols))
}

fn forward_l2_normalize(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = last_axis_rows(x)?;
    let mut data = vec![0.0; x.numel()];
    for r in 0..rows {
        let src = &x.data()[r * cols..(r + 1) * cols];
        let norm = fmath::sqrt(src.iter().map(|v| v * v).sum());
        if norm == 0.0 {
            return Err(CoreError::Domain {
                op: "l2_normalize",
                detail: format!("zero-norm row {r}"),
            });
        }
        let inv = 1.0 / (norm + NORM_EPS);
        for (dst, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(src) {
            *dst = v * inv;
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn backward_l2_normalize(x: &Tensor, dz: &Tensor) -> Tensor {
    let (rows, cols) = last_axis_rows(x).expect("validated in forward");
    let mut out = Tensor::zeros(x.shape().to_vec());
    for r in 0..rows {
        let xs = &x.data()[r * cols..(r + 1) * cols];
        let gs = &dz.data()[r * cols..(r + 1) * cols];
        let norm = fmath::sqrt(xs.iter().map(|v| v * v).sum());
        let denom = norm + NORM_EPS;
        let dot: f64 = xs.iter().zip(gs).map(|(&v, &g)| v * g).sum();
        let coef = dot / (norm * denom * denom);
        let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dst[j] = gs[j] / denom - xs[j] * coef;
        }
    }
    out
}

fn forward_logsumexp(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = last_axis_rows(x)?;
    let mut data = vec![0.0; rows];
    for r in 0..rows {
        let src = &x.data()[r * cols..(r + 1) * cols];
        data[r] = lse_row(src);
    }
    let shape = x.shape()[..x.rank() - 1].to_vec();
    Tensor::new(shape, data)
}

fn lse_row(src: &[f64]) -> f64 {
    let m = src.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let s: f64 = src.iter().map(|&v| fmath::exp(v - m)).sum();
    m + fmath::ln(s)
}

fn backward_logsumexp(x: &Tensor, y: &Tensor, dz: &Tensor) -> Tensor {
    let (rows, cols) = last_axis_rows(x).expect("validated in forward");
    let mut out = Tensor::zeros(x.shape().to_vec());
    for r in 0..rows {
        let xs = &x.data()[r * cols..(r + 1) * cols];
        let g = dz.data()[r];
        let yr = y.data()[r];
        let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dst[j] = g * fmath::exp(xs[j] - yr);
        }
    }
    out
}

fn forward_log_softmax(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = last_axis_rows(x)?;
    let mut data = vec![0.0; x.numel()];
    for r in 0..rows {
        let src = &x.data()[r * cols..(r + 1) * cols];
        let lse = lse_row(src);
        for (dst, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(src) {
            *dst = v - lse;
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn backward_log_softmax(y: &Tensor, dz: &Tensor) -> Tensor {
    let (rows, cols) = last_axis_rows(y).expect("validated in forward");
    let mut out = Tensor::zeros(y.shape().to_vec());
    for r in 0..rows {
        let ys = &y.data()[r * cols..(r + 1) * cols];
        let gs = &dz.data()[r * cols..(r + 1) * cols];
        let gsum: f64 = gs.iter().sum();
        let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dst[j] = gs[j] - fmath::exp(ys[j]) * gsum;
        }
    }
    out
}

fn pool_out_extent(x: usize) -> usize {
    x.div_ceil(2)
}

fn forward_max_pool2(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(CoreError::Dimension {
            op: "max_pool2",
            detail: format!("needs rank 3, got {:?}", x.shape()),
        });
    }
    let (t, d, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ot, od) = (pool_out_extent(t), pool_out_extent(d));
    let mut data = vec![0.0; ot * od * c];
    let xd = x.data();
    for oi in 0..ot {
        for oj in 0..od {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                for i in 2 * oi..(2 * oi + 2).min(t) {
                    for j in 2 * oj..(2 * oj + 2).min(d) {
                        let v = xd[(i * d + j) * c + ch];
                        if v > best {
                            best = v;
                        }
                    }
                }
                data[(oi * od + oj) * c + ch] = best;
            }
        }
    }
    Tensor::new(vec![ot, od, c], data)
}

fn backward_max_pool2(x: &Tensor, dz: &Tensor) -> Tensor {
    let (t, d, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ot, od) = (pool_out_extent(t), pool_out_extent(d));
    let mut out = Tensor::zeros(x.shape().to_vec());
    let xd = x.data();
    for oi in 0..ot {
        for oj in 0..od {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0usize;
                for i in 2 * oi..(2 * oi + 2).min(t) {
                    for j in 2 * oj..(2 * oj + 2).min(d) {
                        let idx = (i * d + j) * c + ch;
                        if xd[idx] > best {
                            best = xd[idx];
                            arg = idx;
                        }
                    }
                }
                out.data_mut()[arg] += dz.data()[(oi * od + oj) * c + ch];
            }
        }
    }
    out
}
