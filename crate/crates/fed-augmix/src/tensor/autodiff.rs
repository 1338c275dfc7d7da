//! Reverse-mode backward pass.
//!
//! Vector-Jacobian products are emitted as ordinary tape ops, so the
//! returned gradients are themselves differentiable when
//! `create_graph` is set.

use super::{NodeId, Op, Tensor};
use crate::error::{Error, Result};

/// Gradients of a scalar `output` with respect to each tensor in `wrt`.
///
/// With `create_graph = true` the results stay attached to the tape and
/// can be differentiated again; otherwise they are detached values.
pub fn backward(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.len() != 1 {
        return Err(Error::RankError {
            op: "backward",
            expected: "scalar output",
            actual: output.shape().to_vec(),
        });
    }
    let (graph, out_id) = match &output.node {
        Some((g, id)) => (g.clone(), *id),
        None => return Err(Error::DetachedTensor),
    };
    let wrt_ids: Vec<NodeId> = wrt
        .iter()
        .map(|t| t.node_in(&graph))
        .collect::<Result<_>>()?;

    let mut adjoints: Vec<Option<Tensor>> = vec![None; out_id + 1];
    adjoints[out_id] = Some(graph.var(vec![1], vec![1.0]));

    for id in (0..=out_id).rev() {
        let grad = match adjoints[id].take() {
            Some(g) => g,
            None => continue,
        };
        let (op, parents) = {
            let inner = graph.0.borrow();
            let node = &inner.nodes[id];
            (node.op.clone(), node.parents.clone())
        };
        let contribs = vjp(&graph, id, &op, &parents, &grad)?;
        for (pid, contrib) in contribs {
            adjoints[pid] = Some(match adjoints[pid].take() {
                Some(existing) => existing.add(&contrib)?,
                None => contrib,
            });
        }
        // keep the gradient available if it is one of the requested tensors
        if wrt_ids.contains(&id) {
            adjoints[id] = Some(grad);
        }
    }

    let mut results = Vec::with_capacity(wrt.len());
    for (tensor, id) in wrt.iter().zip(&wrt_ids) {
        let g = match adjoints[*id].clone() {
            Some(g) => g,
            None => graph.var(tensor.shape().to_vec(), vec![0.0; tensor.len()]),
        };
        results.push(if create_graph { g } else { g.detach() });
    }
    Ok(results)
}

fn vjp(
    graph: &super::Graph,
    id: NodeId,
    op: &Op,
    parents: &[NodeId],
    grad: &Tensor,
) -> Result<Vec<(NodeId, Tensor)>> {
    let parent = |i: usize| graph.tensor_of(parents[i]);
    let out = || graph.tensor_of(id);
    Ok(match op {
        Op::Leaf => vec![],
        Op::MatMul => {
            let a = parent(0);
            let b = parent(1);
            let da = grad.matmul(&b.transpose()?)?;
            let db = a.transpose()?.matmul(grad)?;
            vec![(parents[0], da), (parents[1], db)]
        }
        Op::Add => vec![(parents[0], grad.clone()), (parents[1], grad.clone())],
        Op::AddBias => vec![
            (parents[0], grad.clone()),
            (parents[1], grad.sum_axis0()?),
        ],
        Op::Sub => vec![
            (parents[0], grad.clone()),
            (parents[1], grad.scalar_mul(-1.0)),
        ],
        Op::MulElementwise => {
            let a = parent(0);
            let b = parent(1);
            vec![(parents[0], grad.mul(&b)?), (parents[1], grad.mul(&a)?)]
        }
        Op::ScalarMul(c) => vec![(parents[0], grad.scalar_mul(*c))],
        Op::Relu => {
            let x = parent(0);
            let mask: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            vec![(parents[0], grad.mask_mul(mask.into()))]
        }
        Op::Sigmoid => {
            let s = out();
            let ds = s.sub(&s.mul(&s)?)?;
            vec![(parents[0], grad.mul(&ds)?)]
        }
        Op::Reshape => {
            let x = parent(0);
            vec![(parents[0], grad.reshape(x.shape().to_vec())?)]
        }
        Op::Sum => {
            let x = parent(0);
            vec![(parents[0], grad.broadcast_scalar(x.shape().to_vec())?)]
        }
        Op::Mean => {
            let x = parent(0);
            let n = x.len() as f64;
            vec![(
                parents[0],
                grad.broadcast_scalar(x.shape().to_vec())?.scalar_mul(1.0 / n),
            )]
        }
        Op::Log => {
            let x = parent(0);
            vec![(parents[0], grad.mul(&x.recip()?)?)]
        }
        Op::Exp => vec![(parents[0], grad.mul(&out())?)],
        Op::MaxReduce => {
            let x = parent(0);
            let d = *x.shape().last().unwrap();
            let rows = x.len() / d;
            let mut mask = vec![0.0; x.len()];
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let (argmax, _) = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    });
                mask[r * d + argmax] = 1.0;
            }
            vec![(parents[0], grad.broadcast_last(d)?.mask_mul(mask.into()))]
        }
        Op::Softmax => {
            // dx = y * (g - rowsum(y * g))
            let y = out();
            let d = *y.shape().last().unwrap();
            let inner = y.mul(grad)?.sum_last_keep().broadcast_last(d)?;
            vec![(parents[0], y.mul(&grad.sub(&inner)?)?)]
        }
        Op::LogSoftmax => {
            // dx = g - softmax(x) * rowsum(g)
            let x = parent(0);
            let d = *x.shape().last().unwrap();
            let sm = x.softmax();
            let rs = grad.sum_last_keep().broadcast_last(d)?;
            vec![(parents[0], grad.sub(&sm.mul(&rs)?)?)]
        }
        Op::Clamp { lo, hi } => {
            let x = parent(0);
            let mask: Vec<f64> = x
                .data()
                .iter()
                .map(|&v| if v > *lo && v < *hi { 1.0 } else { 0.0 })
                .collect();
            vec![(parents[0], grad.mask_mul(mask.into()))]
        }
        Op::Transpose => vec![(parents[0], grad.transpose()?)],
        Op::Recip => {
            let r = out();
            vec![(parents[0], grad.mul(&r.mul(&r)?)?.scalar_mul(-1.0))]
        }
        Op::Sqrt => {
            let s = out();
            vec![(parents[0], grad.mul(&s.recip()?)?.scalar_mul(0.5))]
        }
        Op::SumLastKeep => {
            let x = parent(0);
            let d = *x.shape().last().unwrap();
            vec![(parents[0], grad.broadcast_last(d)?)]
        }
        Op::BroadcastLast => vec![(parents[0], grad.sum_last_keep())],
        Op::SumAxis0 => {
            let x = parent(0);
            vec![(parents[0], grad.broadcast_rows(x.shape()[0])?)]
        }
        Op::BroadcastRows => vec![(parents[0], grad.sum_axis0()?)],
        Op::BroadcastScalar => vec![(parents[0], grad.sum())],
        Op::MaskMul(mask) => vec![(parents[0], grad.mask_mul(mask.clone()))],
    })
}
