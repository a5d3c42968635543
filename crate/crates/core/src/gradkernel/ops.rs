//! Forward and backward rules for the dense layers the network is built from.
//!
//! Backward functions accumulate into caller-owned buffers (`+=`) so that a
//! fixed composition order gives reverse-mode gradients without a tape.

use super::tensor::Tensor;
use crate::error::{DspnError, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `W·x + bias` for `W` of shape a×b.
pub fn affine(w: &Tensor, x: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() || w.rows() != bias.len() {
        return Err(DspnError::shape(
            "affine",
            format!(
                "W is {}x{}, x has {}, bias has {}",
                w.rows(),
                w.cols(),
                x.len(),
                bias.len()
            ),
        ));
    }
    let out: Vec<f64> = w
        .row_iter()
        .zip(bias)
        .map(|(row, b)| dot(row, x) + b)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(DspnError::NonFinite("affine output".into()));
    }
    Ok(out)
}

/// Accumulates `g xᵀ` into `dw`, `Wᵀ g` into `dx` and `g` into `dbias`.
/// Any of the outputs may be skipped by passing `None`.
pub fn affine_backward(
    w: &Tensor,
    x: &[f64],
    g: &[f64],
    dw: Option<&mut Tensor>,
    dx: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let cols = w.cols();
    if let Some(dw) = dw {
        let dws = dw.as_mut_slice();
        for (i, gi) in g.iter().enumerate() {
            if *gi == 0.0 {
                continue;
            }
            for (d, xj) in dws[i * cols..(i + 1) * cols].iter_mut().zip(x) {
                *d += gi * xj;
            }
        }
    }
    if let Some(dx) = dx {
        for (i, gi) in g.iter().enumerate() {
            if *gi == 0.0 {
                continue;
            }
            for (d, wij) in dx.iter_mut().zip(w.row(i)) {
                *d += gi * wij;
            }
        }
    }
    if let Some(db) = dbias {
        for (d, gi) in db.iter_mut().zip(g) {
            *d += gi;
        }
    }
}

/// Numerically stable softmax: `exp(v_i - max v) / Σ exp(v_j - max v)`.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "softmax of an empty vector");
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Vector-Jacobian product of softmax given its output `p`: `p ∘ (g − (p·g))`.
pub fn softmax_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let pg = dot(p, g);
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - pg)).collect()
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
}

/// Subgradient at exactly 0 is 0.
pub fn relu_backward(pre: &[f64], g: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(g)
        .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
        .collect()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `out += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], out: &mut [f64]) {
    for (o, xi) in out.iter_mut().zip(x) {
        *o += alpha * xi;
    }
}
