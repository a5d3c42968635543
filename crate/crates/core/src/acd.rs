//! Aspect-category detection: aspect importance, sentence reconstruction from
//! aspect embeddings, the reconstruction hinge loss with in-batch negatives,
//! the uniqueness regularizer and thresholded detection.

use rand::Rng;

use crate::error::{DspnError, Result};
use crate::gradkernel::{affine, affine_backward, dot, l2_norm, softmax, softmax_backward, Shape, Tensor};

pub const DEFAULT_NEG_SAMPLES: usize = 10;
pub const DEFAULT_LAMBDA_ACD: f64 = 1.0;
pub const DEFAULT_ACD_THRESHOLD: f64 = 1e-4;
pub const HINGE_MARGIN: f64 = 1.0;

/// Borrowed view of the aspect parameters: `W1` (N×d), `b1` (N), `T` (N×d).
#[derive(Clone, Copy, Debug)]
pub struct AspectModel<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a [f64],
    pub t: &'a Tensor,
}

impl<'a> AspectModel<'a> {
    pub fn n_aspects(&self) -> usize {
        self.t.rows()
    }

    pub fn dim(&self) -> usize {
        self.t.cols()
    }

    /// `p = softmax(W1·z + b1)`
    pub fn importance(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&affine(self.w1, z, self.b1)?))
    }

    /// `r = Tᵀ·p`
    pub fn reconstruct(&self, p: &[f64]) -> Result<Vec<f64>> {
        reconstruct(self.t, p)
    }

    /// Given `dp` (gradient w.r.t. p), accumulate into `dW1`, `db1` and `dz`.
    pub fn importance_backward(
        &self,
        z: &[f64],
        p: &[f64],
        dp: &[f64],
        dw1: &mut Tensor,
        db1: &mut [f64],
        dz: Option<&mut [f64]>,
    ) {
        let ds = softmax_backward(p, dp);
        affine_backward(self.w1, z, &ds, Some(dw1), dz, Some(db1));
    }
}

pub fn aspect_importance(z: &[f64], model: &AspectModel<'_>) -> Result<Vec<f64>> {
    model.importance(z)
}

pub fn reconstruct(t: &Tensor, p: &[f64]) -> Result<Vec<f64>> {
    if t.rows() != p.len() {
        return Err(DspnError::shape(
            "reconstruct",
            format!("T has {} rows, p has {}", t.rows(), p.len()),
        ));
    }
    let mut r = vec![0.0; t.cols()];
    for (k, &pk) in p.iter().enumerate() {
        for (rc, tc) in r.iter_mut().zip(t.row(k)) {
            *rc += pk * tc;
        }
    }
    Ok(r)
}

/// Accumulate the gradient of `r = Tᵀp` into `dT` and `dp`.
pub fn reconstruct_backward(t: &Tensor, p: &[f64], dr: &[f64], dt: &mut Tensor, dp: &mut [f64]) {
    for (k, &pk) in p.iter().enumerate() {
        for (d, g) in dt.row_mut(k).iter_mut().zip(dr) {
            *d += pk * g;
        }
        dp[k] += dot(t.row(k), dr);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NegSampleConfig {
    pub m: usize,
    pub seed: u64,
}

impl Default for NegSampleConfig {
    fn default() -> Self {
        NegSampleConfig {
            m: DEFAULT_NEG_SAMPLES,
            seed: 0,
        }
    }
}

/// For every instance of a batch, `m` indices of other instances drawn
/// uniformly with replacement. The instance itself is never drawn.
pub fn sample_negatives<R: Rng>(batch_size: usize, m: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if m == 0 {
        return Ok(vec![Vec::new(); batch_size]);
    }
    if batch_size < 2 {
        return Err(DspnError::BatchTooSmall(batch_size));
    }
    Ok((0..batch_size)
        .map(|i| {
            (0..m)
                .map(|_| {
                    let j = rng.gen_range(0..batch_size - 1);
                    if j >= i {
                        j + 1
                    } else {
                        j
                    }
                })
                .collect()
        })
        .collect())
}

/// `max(0, 1 − r·z + r·n)`
pub fn hinge(r: &[f64], z: &[f64], n: &[f64]) -> f64 {
    (HINGE_MARGIN - dot(r, z) + dot(r, n)).max(0.0)
}

fn normalized_rows(t: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let mut tn = t.clone();
    let mut norms = Vec::with_capacity(t.rows());
    for k in 0..t.rows() {
        let norm = l2_norm(t.row(k));
        if norm == 0.0 {
            return Err(DspnError::ZeroRow { row: k });
        }
        tn.row_mut(k).iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok((tn, norms))
}

fn gram_minus_identity(tn: &Tensor) -> Tensor {
    let n = tn.rows();
    Tensor::from_fn(Shape::Matrix(n, n), |idx| {
        let (i, j) = (idx / n, idx % n);
        dot(tn.row(i), tn.row(j)) - if i == j { 1.0 } else { 0.0 }
    })
}

/// `‖Tₙ·Tₙᵀ − I‖_F` with `Tₙ` the row-normalized aspect matrix.
pub fn uniqueness_penalty(t: &Tensor) -> Result<f64> {
    let (tn, _) = normalized_rows(t)?;
    Ok(l2_norm(gram_minus_identity(&tn).as_slice()))
}

/// Value of the penalty, accumulating `scale · ∂U/∂T` into `dt`. At U = 0 the
/// zero subgradient is used.
pub fn uniqueness_backward(t: &Tensor, scale: f64, dt: &mut Tensor) -> Result<f64> {
    let (tn, norms) = normalized_rows(t)?;
    let g = gram_minus_identity(&tn);
    let u = l2_norm(g.as_slice());
    if u == 0.0 || scale == 0.0 {
        return Ok(u);
    }
    let n = t.rows();
    let d = t.cols();
    // dU/dTn = 2 (G/U) Tn since G is symmetric
    for k in 0..n {
        let mut dtn = vec![0.0; d];
        for j in 0..n {
            let coef = 2.0 * g.get(k, j) / u;
            for (x, y) in dtn.iter_mut().zip(tn.row(j)) {
                *x += coef * y;
            }
        }
        // through row normalization: (dtn − tn (tn·dtn)) / ‖t‖
        let proj = dot(tn.row(k), &dtn);
        for ((out, x), y) in dt.row_mut(k).iter_mut().zip(&dtn).zip(tn.row(k)) {
            *out += scale * (x - y * proj) / norms[k];
        }
    }
    Ok(u)
}

/// Value of the module's loss over a batch of sentence embeddings:
/// `Σ_i Σ_j max(0, 1 − r_i·z_i + r_i·z_{neg(i,j)}) + λ_ACD·U(T)`.
pub fn acd_loss(
    zs: &[Vec<f64>],
    negatives: &[Vec<usize>],
    model: &AspectModel<'_>,
    lambda_acd: f64,
) -> Result<f64> {
    if zs.len() != negatives.len() {
        return Err(DspnError::shape(
            "acd_loss",
            format!("{} instances but {} negative lists", zs.len(), negatives.len()),
        ));
    }
    let mut total = 0.0;
    for (z, negs) in zs.iter().zip(negatives) {
        let r = model.reconstruct(&model.importance(z)?)?;
        for &j in negs {
            total += hinge(&r, z, &zs[j]);
        }
    }
    Ok(total + lambda_acd * uniqueness_penalty(model.t)?)
}

/// Indices `k` with `p_k > threshold`.
pub fn detect_aspects(p: &[f64], threshold: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(DspnError::InvalidThreshold(threshold));
    }
    Ok(p.iter()
        .enumerate()
        .filter(|(_, &pk)| pk > threshold)
        .map(|(k, _)| k)
        .collect())
}
