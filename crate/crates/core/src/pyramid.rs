//! Word → aspect → review sentiment.
//!
//! Word sentiment logits come from a two-layer network over each hidden state.
//! Each aspect attends over the words by dot product with its embedding, the
//! attention-weighted word logits give the aspect distribution, and the
//! importance-weighted aspect distributions give the review distribution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Polarity;
use crate::error::{DspnError, Result};
use crate::gradkernel::{affine, affine_backward, dot, relu, relu_backward, softmax, softmax_backward, Shape, Tensor};

pub const CLASSES: usize = 3;
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Borrowed view of the word-sentiment layers: `W2` (d_h×d), `b2`, `W3` (3×d_h), `b3`.
#[derive(Clone, Copy, Debug)]
pub struct PyramidHead<'a> {
    pub w2: &'a Tensor,
    pub b2: &'a [f64],
    pub w3: &'a Tensor,
    pub b3: &'a [f64],
}

/// Row j is `W3·ReLU(W2·h_j + b2) + b3`.
pub fn word_sentiments(h: &Tensor, head: &PyramidHead<'_>) -> Result<Tensor> {
    Ok(word_layers(h, head)?.2)
}

fn word_layers(h: &Tensor, head: &PyramidHead<'_>) -> Result<(Tensor, Tensor, Tensor)> {
    if h.rows() == 0 {
        return Err(DspnError::Empty("word_sentiments needs at least one word"));
    }
    if head.w3.rows() != CLASSES {
        return Err(DspnError::shape("word_sentiments", format!("W3 has {} rows", head.w3.rows())));
    }
    let n = h.rows();
    let dh = head.w2.rows();
    let mut pre = Tensor::zeros(Shape::Matrix(n, dh));
    let mut act = Tensor::zeros(Shape::Matrix(n, dh));
    let mut logits = Tensor::zeros(Shape::Matrix(n, CLASSES));
    for j in 0..n {
        let u = affine(head.w2, h.row(j), head.b2)?;
        let v = relu(&u);
        let w = affine(head.w3, &v, head.b3)?;
        pre.row_mut(j).copy_from_slice(&u);
        act.row_mut(j).copy_from_slice(&v);
        logits.row_mut(j).copy_from_slice(&w);
    }
    Ok((pre, act, logits))
}

/// Row k is the softmax over words of `d_k^(j) = T_k·h_j`.
pub fn aspect_attention(h: &Tensor, t: &Tensor) -> Result<Tensor> {
    if h.cols() != t.cols() {
        return Err(DspnError::shape(
            "aspect_attention",
            format!("H has {} columns, T has {}", h.cols(), t.cols()),
        ));
    }
    let n = h.rows();
    let mut attn = Tensor::zeros(Shape::Matrix(t.rows(), n));
    for k in 0..t.rows() {
        let scores: Vec<f64> = (0..n).map(|j| dot(t.row(k), h.row(j))).collect();
        attn.row_mut(k).copy_from_slice(&softmax(&scores));
    }
    Ok(attn)
}

fn mixed_logits(word_sent: &Tensor, attn: &Tensor) -> Result<Tensor> {
    if word_sent.rows() != attn.cols() || word_sent.cols() != CLASSES {
        return Err(DspnError::shape(
            "aspect_sentiments",
            format!(
                "word_sent is {}x{}, attention is {}x{}",
                word_sent.rows(),
                word_sent.cols(),
                attn.rows(),
                attn.cols()
            ),
        ));
    }
    let mut g = Tensor::zeros(Shape::Matrix(attn.rows(), CLASSES));
    for k in 0..attn.rows() {
        let row = g.row_mut(k);
        for (j, &a) in attn.row(k).iter().enumerate() {
            for (c, w) in row.iter_mut().zip(word_sent.row(j)) {
                *c += a * w;
            }
        }
    }
    Ok(g)
}

/// Row k is `softmax(Σ_j a_k^(j) w^(j))`.
pub fn aspect_sentiments(word_sent: &Tensor, attn: &Tensor) -> Result<Tensor> {
    let mut g = mixed_logits(word_sent, attn)?;
    for k in 0..g.rows() {
        let p = softmax(g.row(k));
        g.row_mut(k).copy_from_slice(&p);
    }
    Ok(g)
}

fn mix_aspects(aspect_sent: &Tensor, p: &[f64]) -> Result<Vec<f64>> {
    if aspect_sent.rows() != p.len() || aspect_sent.cols() != CLASSES {
        return Err(DspnError::shape(
            "review_sentiment",
            format!(
                "aspect_sent is {}x{}, p has {}",
                aspect_sent.rows(),
                aspect_sent.cols(),
                p.len()
            ),
        ));
    }
    let mut q = vec![0.0; CLASSES];
    for (k, &pk) in p.iter().enumerate() {
        for (qc, a) in q.iter_mut().zip(aspect_sent.row(k)) {
            *qc += pk * a;
        }
    }
    Ok(q)
}

/// `softmax(Ŷ·p)` with `Ŷ` the 3×N matrix whose columns are the aspect rows.
pub fn review_sentiment(aspect_sent: &Tensor, p: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&mix_aspects(aspect_sent, p)?))
}

/// Categorical cross-entropy `−log ŷ_gold`.
pub fn rp_loss(review_sent: &[f64], gold: Polarity) -> f64 {
    -review_sent[gold.index()].ln()
}

/// `λ·L_ACD + L_RP`
pub fn joint_loss(acd_loss: f64, rp_loss: f64, lambda: f64) -> f64 {
    lambda * acd_loss + rp_loss
}

/// Every intermediate of one review's pass through the head, kept for backward.
#[derive(Clone, Debug)]
pub struct PyramidTrace {
    pub pre: Tensor,
    pub act: Tensor,
    pub word_sent: Tensor,
    pub attn: Tensor,
    pub aspect_sent: Tensor,
    pub review_logits: Vec<f64>,
    pub review_sent: Vec<f64>,
}

pub fn pyramid_forward(h: &Tensor, t: &Tensor, p: &[f64], head: &PyramidHead<'_>) -> Result<PyramidTrace> {
    let (pre, act, word_sent) = word_layers(h, head)?;
    let attn = aspect_attention(h, t)?;
    let aspect_sent = aspect_sentiments(&word_sent, &attn)?;
    let review_logits = mix_aspects(&aspect_sent, p)?;
    let review_sent = softmax(&review_logits);
    Ok(PyramidTrace {
        pre,
        act,
        word_sent,
        attn,
        aspect_sent,
        review_logits,
        review_sent,
    })
}

/// Gradient buffers the head's backward pass accumulates into.
pub struct PyramidGrads<'a> {
    pub w2: &'a mut Tensor,
    pub b2: &'a mut [f64],
    pub w3: &'a mut Tensor,
    pub b3: &'a mut [f64],
    pub t: &'a mut Tensor,
    /// n×d, gradient w.r.t. the hidden states.
    pub h: &'a mut Tensor,
    pub p: &'a mut [f64],
}

/// Backpropagate `d_logits`, the gradient w.r.t. the review logits `Ŷ·p`.
pub fn pyramid_backward(
    trace: &PyramidTrace,
    h: &Tensor,
    t: &Tensor,
    p: &[f64],
    head: &PyramidHead<'_>,
    d_logits: &[f64],
    grads: PyramidGrads<'_>,
) {
    let n = h.rows();
    let n_aspects = t.rows();
    let mut d_word = Tensor::zeros(Shape::Matrix(n, CLASSES));
    for k in 0..n_aspects {
        let ak = trace.aspect_sent.row(k);
        grads.p[k] += dot(ak, d_logits);
        let d_ak: Vec<f64> = d_logits.iter().map(|g| p[k] * g).collect();
        let d_mix = softmax_backward(ak, &d_ak);
        let attn_k = trace.attn.row(k);
        let d_attn: Vec<f64> = (0..n)
            .map(|j| {
                for (dw, g) in d_word.row_mut(j).iter_mut().zip(&d_mix) {
                    *dw += attn_k[j] * g;
                }
                dot(trace.word_sent.row(j), &d_mix)
            })
            .collect();
        let d_score = softmax_backward(attn_k, &d_attn);
        for (j, &ds) in d_score.iter().enumerate() {
            if ds == 0.0 {
                continue;
            }
            for (dt, hv) in grads.t.row_mut(k).iter_mut().zip(h.row(j)) {
                *dt += ds * hv;
            }
            for (dh, tv) in grads.h.row_mut(j).iter_mut().zip(t.row(k)) {
                *dh += ds * tv;
            }
        }
    }
    for j in 0..n {
        let mut d_act = vec![0.0; head.w3.cols()];
        affine_backward(
            head.w3,
            trace.act.row(j),
            d_word.row(j),
            Some(&mut *grads.w3),
            Some(&mut d_act),
            Some(&mut *grads.b3),
        );
        let d_pre = relu_backward(trace.pre.row(j), &d_act);
        affine_backward(
            head.w2,
            h.row(j),
            &d_pre,
            Some(&mut *grads.w2),
            Some(grads.h.row_mut(j)),
            Some(&mut *grads.b2),
        );
    }
}

/// Per-review inference result.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidOutput {
    pub p: Vec<f64>,
    /// n×3 word sentiment logits.
    pub word_sent: Tensor,
    /// N×n attention weights.
    pub attn: Tensor,
    /// N×3 aspect sentiment distributions.
    pub aspect_sent: Tensor,
    pub review_sent: Vec<f64>,
    pub detected: Vec<usize>,
}

impl PyramidOutput {
    pub fn predicted_class(&self) -> Polarity {
        Polarity::argmax(&self.review_sent)
    }

    pub fn aspect_polarity(&self, k: usize) -> Polarity {
        Polarity::argmax(self.aspect_sent.row(k))
    }

    pub fn to_record(&self, id: &str, aspect_names: &[String]) -> OutputRecord {
        let dist = |v: &[f64]| ClassDist {
            neg: v[0],
            neu: v[1],
            pos: v[2],
        };
        OutputRecord {
            id: id.to_string(),
            p: self.p.clone(),
            detected: self.detected.iter().map(|&k| aspect_names[k].clone()).collect(),
            word_sent: self.word_sent.row_iter().map(<[f64]>::to_vec).collect(),
            attention: aspect_names
                .iter()
                .enumerate()
                .map(|(k, n)| (n.clone(), self.attn.row(k).to_vec()))
                .collect(),
            aspect_sent: aspect_names
                .iter()
                .enumerate()
                .map(|(k, n)| (n.clone(), dist(self.aspect_sent.row(k))))
                .collect(),
            review_sent: dist(&self.review_sent),
            predicted_class: self.predicted_class(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDist {
    pub neg: f64,
    pub neu: f64,
    pub pos: f64,
}

/// Serialized form of a [`PyramidOutput`], one JSON object per review.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub id: String,
    pub p: Vec<f64>,
    pub detected: Vec<String>,
    pub word_sent: Vec<Vec<f64>>,
    pub attention: BTreeMap<String, Vec<f64>>,
    pub aspect_sent: BTreeMap<String, ClassDist>,
    pub review_sent: ClassDist,
    pub predicted_class: Polarity,
}
