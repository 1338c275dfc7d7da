//! Forward operations. Each op records a tape node when any input is
//! graph-attached; detached inputs are promoted to constant leaves.

use std::rc::Rc;

use super::{Node, Op, Tensor};
use crate::error::{Error, Result};

/// Public operation kinds accepted by [`op_forward`].
#[derive(Debug, Clone)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    MulElementwise,
    ScalarMul(f64),
    Relu,
    Sigmoid,
    Reshape(Vec<usize>),
    Sum,
    Mean,
    Log,
    Exp,
    MaxReduce,
    Softmax,
    LogSoftmax,
    Clamp { lo: f64, hi: f64 },
}

/// Uniform entry point over the supported op set.
pub fn op_forward(kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(Error::DomainError {
                op: "op_forward",
                msg: format!("expected {n} inputs, got {}", inputs.len()),
            });
        }
        Ok(())
    };
    match kind {
        OpKind::MatMul => {
            arity(2)?;
            inputs[0].matmul(inputs[1])
        }
        OpKind::Add => {
            arity(2)?;
            inputs[0].add(inputs[1])
        }
        OpKind::Sub => {
            arity(2)?;
            inputs[0].sub(inputs[1])
        }
        OpKind::MulElementwise => {
            arity(2)?;
            inputs[0].mul(inputs[1])
        }
        OpKind::ScalarMul(c) => {
            arity(1)?;
            Ok(inputs[0].scalar_mul(c))
        }
        OpKind::Relu => {
            arity(1)?;
            Ok(inputs[0].relu())
        }
        OpKind::Sigmoid => {
            arity(1)?;
            Ok(inputs[0].sigmoid())
        }
        OpKind::Reshape(shape) => {
            arity(1)?;
            inputs[0].reshape(shape)
        }
        OpKind::Sum => {
            arity(1)?;
            Ok(inputs[0].sum())
        }
        OpKind::Mean => {
            arity(1)?;
            Ok(inputs[0].mean())
        }
        OpKind::Log => {
            arity(1)?;
            inputs[0].log()
        }
        OpKind::Exp => {
            arity(1)?;
            Ok(inputs[0].exp())
        }
        OpKind::MaxReduce => {
            arity(1)?;
            Ok(inputs[0].max_reduce())
        }
        OpKind::Softmax => {
            arity(1)?;
            Ok(inputs[0].softmax())
        }
        OpKind::LogSoftmax => {
            arity(1)?;
            Ok(inputs[0].log_softmax())
        }
        OpKind::Clamp { lo, hi } => {
            arity(1)?;
            Ok(inputs[0].clamp(lo, hi))
        }
    }
}

/// Record `op` on the graph of the first attached input, if any.
fn record(op: Op, inputs: &[&Tensor], shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    let graph = inputs.iter().find_map(|t| t.node.as_ref().map(|(g, _)| g));
    let graph = match graph {
        Some(g) => g.clone(),
        None => return Ok(Tensor::new(shape, data)),
    };
    let mut parents = Vec::with_capacity(inputs.len());
    for t in inputs {
        let id = match &t.node {
            Some((g, id)) => {
                if !g.same_graph(&graph) {
                    return Err(Error::UnreachableTensor);
                }
                *id
            }
            // promote constants so parent indices stay well-formed
            None => graph.attach(t).node_in(&graph)?,
        };
        parents.push(id);
    }
    let value = Rc::new(data);
    let id = graph.push(Node {
        op,
        parents,
        shape: shape.clone(),
        value: Rc::clone(&value),
    });
    Ok(Tensor {
        shape,
        data: value,
        node: Some((graph, id)),
    })
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / d.max(1);
    (rows, d)
}

impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; m * n];
        let a = self.data();
        let b = rhs.data();
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        record(Op::MatMul, &[self, rhs], vec![m, n], out)
    }

    /// Elementwise addition; also accepts a rank-1 bias against rank-2
    /// rows ([B,D] + [D]).
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape == rhs.shape {
            let data = self
                .data()
                .iter()
                .zip(rhs.data())
                .map(|(a, b)| a + b)
                .collect();
            return record(Op::Add, &[self, rhs], self.shape.clone(), data);
        }
        if self.shape.len() == 2 && rhs.shape.len() == 1 && self.shape[1] == rhs.shape[0] {
            let d = self.shape[1];
            let data = self
                .data()
                .iter()
                .enumerate()
                .map(|(i, a)| a + rhs.data()[i % d])
                .collect();
            return record(Op::AddBias, &[self, rhs], self.shape.clone(), data);
        }
        Err(Error::ShapeMismatch {
            op: "add",
            lhs: self.shape.clone(),
            rhs: rhs.shape.clone(),
        })
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a - b)
            .collect();
        record(Op::Sub, &[self, rhs], self.shape.clone(), data)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: "mul_elementwise",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a * b)
            .collect();
        record(Op::MulElementwise, &[self, rhs], self.shape.clone(), data)
    }

    pub fn scalar_mul(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * c).collect();
        record(Op::ScalarMul(c), &[self], self.shape.clone(), data).expect("unary op")
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.max(0.0)).collect();
        record(Op::Relu, &[self], self.shape.clone(), data).expect("unary op")
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|a| 1.0 / (1.0 + (-a).exp()))
            .collect();
        record(Op::Sigmoid, &[self], self.shape.clone(), data).expect("unary op")
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        record(Op::Reshape, &[self], shape, self.data.as_ref().clone())
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        record(Op::Sum, &[self], vec![1], vec![s]).expect("unary op")
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.data.len().max(1) as f64;
        record(Op::Mean, &[self], vec![1], vec![s / n]).expect("unary op")
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.data().iter().any(|&a| a <= 0.0) {
            return Err(Error::DomainError {
                op: "log",
                msg: "input has non-positive entries".into(),
            });
        }
        let data = self.data().iter().map(|a| a.ln()).collect();
        record(Op::Log, &[self], self.shape.clone(), data)
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.exp()).collect();
        record(Op::Exp, &[self], self.shape.clone(), data).expect("unary op")
    }

    /// Max over the last axis, keeping it as extent 1.
    pub fn max_reduce(&self) -> Tensor {
        let (rows, d) = last_axis(&self.shape);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &self.data()[r * d..(r + 1) * d];
            out.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = 1;
        record(Op::MaxReduce, &[self], shape, out).expect("unary op")
    }

    /// Row-wise softmax over the last axis (numerically stabilized).
    pub fn softmax(&self) -> Tensor {
        let (rows, d) = last_axis(&self.shape);
        let mut out = vec![0.0; self.data.len()];
        for r in 0..rows {
            let row = &self.data()[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                out[r * d + j] = e;
                z += e;
            }
            for j in 0..d {
                out[r * d + j] /= z;
            }
        }
        record(Op::Softmax, &[self], self.shape.clone(), out).expect("unary op")
    }

    pub fn log_softmax(&self) -> Tensor {
        let (rows, d) = last_axis(&self.shape);
        let mut out = vec![0.0; self.data.len()];
        for r in 0..rows {
            let row = &self.data()[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            let lz = m + z.ln();
            for (j, &x) in row.iter().enumerate() {
                out[r * d + j] = x - lz;
            }
        }
        record(Op::LogSoftmax, &[self], self.shape.clone(), out).expect("unary op")
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data().iter().map(|a| a.clamp(lo, hi)).collect();
        record(Op::Clamp { lo, hi }, &[self], self.shape.clone(), data).expect("unary op")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::RankError {
                op: "transpose",
                expected: "rank-2 tensor",
                actual: self.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data()[i * n + j];
            }
        }
        record(Op::Transpose, &[self], vec![n, m], out)
    }

    pub(crate) fn recip(&self) -> Result<Tensor> {
        if self.data().iter().any(|&a| a == 0.0) {
            return Err(Error::DomainError {
                op: "recip",
                msg: "input has zero entries".into(),
            });
        }
        let data = self.data().iter().map(|a| 1.0 / a).collect();
        record(Op::Recip, &[self], self.shape.clone(), data)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.data().iter().any(|&a| a < 0.0) {
            return Err(Error::DomainError {
                op: "sqrt",
                msg: "input has negative entries".into(),
            });
        }
        let data = self.data().iter().map(|a| a.sqrt()).collect();
        record(Op::Sqrt, &[self], self.shape.clone(), data)
    }

    /// Sum over the last axis, keeping it as extent 1.
    pub fn sum_last_keep(&self) -> Tensor {
        let (rows, d) = last_axis(&self.shape);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            out.push(self.data()[r * d..(r + 1) * d].iter().sum());
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = 1;
        record(Op::SumLastKeep, &[self], shape, out).expect("unary op")
    }

    /// Expand a trailing extent-1 axis to extent `d`.
    pub(crate) fn broadcast_last(&self, d: usize) -> Result<Tensor> {
        if self.shape.last() != Some(&1) {
            return Err(Error::RankError {
                op: "broadcast_last",
                expected: "trailing axis of extent 1",
                actual: self.shape.clone(),
            });
        }
        let rows = self.data.len();
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            out.extend(std::iter::repeat(self.data()[r]).take(d));
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = d;
        record(Op::BroadcastLast, &[self], shape, out)
    }

    /// Column sums of a rank-2 tensor: [B,D] -> [D].
    pub(crate) fn sum_axis0(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::RankError {
                op: "sum_axis0",
                expected: "rank-2 tensor",
                actual: self.shape.clone(),
            });
        }
        let (b, d) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; d];
        for i in 0..b {
            for j in 0..d {
                out[j] += self.data()[i * d + j];
            }
        }
        record(Op::SumAxis0, &[self], vec![d], out)
    }

    /// Tile a rank-1 tensor into `b` identical rows: [D] -> [B,D].
    pub(crate) fn broadcast_rows(&self, b: usize) -> Result<Tensor> {
        if self.shape.len() != 1 {
            return Err(Error::RankError {
                op: "broadcast_rows",
                expected: "rank-1 tensor",
                actual: self.shape.clone(),
            });
        }
        let d = self.shape[0];
        let mut out = Vec::with_capacity(b * d);
        for _ in 0..b {
            out.extend_from_slice(self.data());
        }
        record(Op::BroadcastRows, &[self], vec![b, d], out)
    }

    /// Fill `shape` with the single element of a scalar tensor.
    pub(crate) fn broadcast_scalar(&self, shape: Vec<usize>) -> Result<Tensor> {
        let v = self.item()?;
        let n = shape.iter().product();
        record(Op::BroadcastScalar, &[self], shape, vec![v; n])
    }

    /// Multiply by a constant (non-differentiated) mask.
    pub(crate) fn mask_mul(&self, mask: Rc<Vec<f64>>) -> Tensor {
        assert_eq!(mask.len(), self.data.len());
        let data = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(a, m)| a * m)
            .collect();
        record(Op::MaskMul(mask), &[self], self.shape.clone(), data).expect("unary op")
    }
}
