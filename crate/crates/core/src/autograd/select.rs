//! Value-based top-k selection along an axis.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{axis_split, Tensor};

/// Positions along a slice of `len` values ordered largest first; equal
/// values keep the lower position first.
pub(crate) fn ranked(values: impl Fn(usize) -> f64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| {
        values(b)
            .partial_cmp(&values(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn check_k(shape: &[usize], axis: usize, k: usize) -> Result<()> {
    super::ops::check_axis(shape, axis)?;
    if k == 0 || k > shape[axis] {
        return Err(Error::config(format!(
            "top-k with k = {k} needs 1 <= k <= {}",
            shape[axis]
        )));
    }
    Ok(())
}

impl Graph {
    /// Sum of the `k` largest entries along `axis` (the axis is removed).
    /// Gradient flows only to the selected entries.
    pub fn topk_sum(&mut self, x: Var, k: usize, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_k(t.shape(), axis, k)?;
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut selected = Vec::with_capacity(outer * inner * k);
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let order = ranked(|l| d[at(l)], len);
                let mut acc = 0.0;
                for &l in &order[..k] {
                    acc += d[at(l)];
                    selected.push(at(l));
                }
                out.push(acc);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let v = Tensor::new(&shape, out)?;
        self.push("topk_sum", v, Op::TopKSum { x, k, selected }, &[x])
    }

    /// Keeps the `k` largest entries along `axis` and zeroes the rest.
    pub fn topk_mask(&mut self, x: Var, k: usize, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_k(t.shape(), axis, k)?;
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut keep = vec![false; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                for &l in &ranked(|l| d[at(l)], len)[..k] {
                    keep[at(l)] = true;
                }
            }
        }
        let out = d
            .iter()
            .zip(&keep)
            .map(|(&v, &kp)| if kp { v } else { 0.0 })
            .collect();
        let v = Tensor::new(t.shape(), out)?;
        self.push("topk_mask", v, Op::TopKMask { x, keep }, &[x])
    }
}
