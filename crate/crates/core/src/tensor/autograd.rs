use std::collections::{HashMap, HashSet};

use super::{set_grad_enabled, Tensor};
use crate::error::{contract_err, Result};

/// Recorded operation kinds. Vector-Jacobian products are expressed with
/// ordinary tensor ops, so they are themselves differentiable.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Powf(f64),
    Exp,
    Ln,
    Relu,
    MatMul { groups: usize, ta: bool, tb: bool },
    Transpose,
    Reshape,
    Expand,
    SumTo,
    TileRows(usize),
    FoldRows(usize),
    RepeatRows(usize),
    SegmentSum(usize),
    SoftmaxRows,
    LogSoftmaxRows,
    ConcatCols(Vec<usize>),
    SliceCols { start: usize },
    PadCols { start: usize },
}

/// Gradient of `out` with respect to input `idx`, given upstream `g`.
fn vjp(op: &Op, inputs: &[Tensor], out: &Tensor, g: &Tensor, idx: usize) -> Result<Tensor> {
    let x = &inputs[0];
    Ok(match op {
        Op::Add => g.clone(),
        Op::Sub => {
            if idx == 0 {
                g.clone()
            } else {
                g.neg()
            }
        }
        Op::Mul => g.mul(&inputs[1 - idx])?,
        Op::Scale(c) => g.scale(*c),
        Op::AddScalar => g.clone(),
        Op::Powf(p) => {
            if *p == 1.0 {
                g.clone()
            } else {
                g.mul(&x.powf(p - 1.0).scale(*p))?
            }
        }
        Op::Exp => g.mul(out)?,
        Op::Ln => g.mul(&x.powf(-1.0))?,
        Op::Relu => {
            let mask = x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            g.mul(&Tensor::new(mask, x.shape())?)?
        }
        Op::MatMul { groups, ta, tb } => {
            let (a, b, n) = (&inputs[0], &inputs[1], *groups);
            match (idx, ta, tb) {
                // C = A B
                (0, false, false) => g.bmm(b, n, false, true)?,
                (1, false, false) => a.bmm(g, n, true, false)?,
                // C = A Bᵀ
                (0, false, true) => g.bmm(b, n, false, false)?,
                (1, false, true) => g.bmm(a, n, true, false)?,
                // C = Aᵀ B
                (0, true, false) => b.bmm(g, n, false, true)?,
                (1, true, false) => a.bmm(g, n, false, false)?,
                // C = Aᵀ Bᵀ
                (0, true, true) => b.bmm(g, n, true, true)?,
                _ => g.bmm(a, n, true, true)?,
            }
        }
        Op::Transpose => g.transpose()?,
        Op::Reshape => g.reshape(x.shape())?,
        Op::Expand => g.sum_to(x.shape())?,
        Op::SumTo => g.expand(x.shape())?,
        Op::TileRows(n) => g.fold_rows(*n)?,
        Op::FoldRows(n) => g.tile_rows(*n)?,
        Op::RepeatRows(k) => g.segment_sum(*k)?,
        Op::SegmentSum(k) => g.repeat_rows(*k)?,
        Op::SoftmaxRows => {
            let dot = g.mul(out)?.sum_rows()?;
            out.mul(&g.sub_bcast(&dot)?)?
        }
        Op::LogSoftmaxRows => {
            let total = g.sum_rows()?;
            g.sub(&out.exp().mul_bcast(&total)?)?
        }
        Op::ConcatCols(widths) => {
            let start: usize = widths[..idx].iter().sum();
            g.slice_cols(start, widths[idx])?
        }
        Op::SliceCols { start } => g.pad_cols(*start, x.dims2()?.1)?,
        Op::PadCols { start } => g.slice_cols(*start, x.dims2()?.1)?,
    })
}

/// Tracked tensors reachable from `root`, in reverse tape order.
fn reverse_tape(root: &Tensor) -> Vec<Tensor> {
    let mut seen = HashSet::new();
    let mut stack = vec![root.clone()];
    let mut order = Vec::new();
    while let Some(t) = stack.pop() {
        if !t.requires_grad() || !seen.insert(t.id()) {
            continue;
        }
        if let Some(node) = t.node() {
            stack.extend(node.inputs.iter().cloned());
        }
        order.push(t);
    }
    order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));
    order
}

/// Propagate from a scalar root; returns the gradient of every tracked
/// tensor reached, keyed by id.
fn propagate(root: &Tensor, create_graph: bool) -> Result<HashMap<usize, Tensor>> {
    let _mode = set_grad_enabled(create_graph);
    let mut grads: HashMap<usize, Tensor> = HashMap::new();
    grads.insert(root.id(), Tensor::ones(root.shape()));
    for t in reverse_tape(root) {
        let Some(node) = t.node() else { continue };
        let Some(g) = grads.get(&t.id()).cloned() else { continue };
        for (i, input) in node.inputs.iter().enumerate() {
            if !input.requires_grad() {
                continue;
            }
            let gi = vjp(&node.op, &node.inputs, &t, &g, i)?;
            let merged = match grads.remove(&input.id()) {
                Some(prev) => prev.add(&gi)?,
                None => gi,
            };
            grads.insert(input.id(), merged);
        }
    }
    Ok(grads)
}

fn check_root(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return contract_err(format!("gradient root must be scalar, got shape {:?}", loss.shape()));
    }
    if !loss.requires_grad() {
        return contract_err("gradient root is not connected to any tracked tensor");
    }
    Ok(())
}

pub(crate) fn backward_into_leaves(loss: &Tensor) -> Result<()> {
    check_root(loss)?;
    let grads = propagate(loss, false)?;
    for t in reverse_tape(loss) {
        if t.is_leaf() {
            if let Some(g) = grads.get(&t.id()) {
                t.accumulate_grad(g.data());
            }
        }
    }
    Ok(())
}

/// Gradients of a scalar `loss` with respect to `wrt`.
///
/// With `create_graph`, the returned tensors stay on the tape and can be
/// differentiated again. Inputs the loss does not depend on get zeros.
pub fn grad(loss: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    check_root(loss)?;
    let grads = propagate(loss, create_graph)?;
    Ok(wrt
        .iter()
        .map(|w| match grads.get(&w.id()) {
            Some(g) if create_graph => g.clone(),
            Some(g) => g.detach(),
            None => Tensor::zeros(w.shape()),
        })
        .collect())
}
