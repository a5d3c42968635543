//! The full network: parameters, per-review inference and batched gradients
//! of the training objective.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::acd::{detect_aspects, hinge, reconstruct_backward, uniqueness_backward, uniqueness_penalty, AspectModel};
use crate::corpus::{AspectSchema, Polarity, Review, Vocabulary};
use crate::encoder::{
    encode_tokens, init_aspect_matrix, init_embedding_table, AspectSeedSource, EncodedReview, EncoderConfig,
    EncoderMode, PrecomputedEmbeddings,
};
use crate::error::{DspnError, Result};
use crate::gradkernel::{axpy, dot, ParamId, ParamSet, Shape, Tensor};
use crate::pyramid::{pyramid_backward, pyramid_forward, rp_loss, PyramidGrads, PyramidHead, PyramidOutput, CLASSES};

pub const EMBEDDING: &str = "embedding";
pub const W1: &str = "W1";
pub const B1: &str = "b1";
pub const T: &str = "T";
pub const W2: &str = "W2";
pub const B2: &str = "b2";
pub const W3: &str = "W3";
pub const B3: &str = "b3";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub n_aspects: usize,
    /// Hidden width of the word-sentiment layer.
    pub d_h: usize,
    pub acd_threshold: f64,
    pub w1_init: W1Init,
}

pub const DEFAULT_W1_SCALE: f64 = 30.0;

/// Initialization of the aspect-importance projection `W1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum W1Init {
    /// Xavier-uniform.
    Xavier,
    /// `scale · T`, so that `p` starts out ranking aspects by similarity to
    /// their seed words.
    Seeded { scale: f64 },
}

impl Default for W1Init {
    fn default() -> Self {
        W1Init::Seeded {
            scale: DEFAULT_W1_SCALE,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Slots {
    emb: Option<ParamId>,
    w1: ParamId,
    b1: ParamId,
    t: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

impl Slots {
    /// Every slot that exists in both modes, in ParamSet order after the embedding.
    fn dense(&self) -> [ParamId; 7] {
        [self.w1, self.b1, self.t, self.w2, self.b2, self.w3, self.b3]
    }
}

/// Which terms of the objective a gradient pass includes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// `λ·L_ACD + L_RP`
    Joint { lambda: f64 },
    /// `L_ACD` alone.
    AcdOnly,
    /// `L_RP` alone.
    RpOnly,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchLoss {
    /// Objective value.
    pub total: f64,
    /// Σ hinge terms.
    pub hinge: f64,
    pub uniqueness: f64,
    /// `hinge + λ_ACD·U`; zero for `RpOnly`.
    pub acd: f64,
    pub rp: f64,
    /// Kink sides (ReLU signs, hinge activity), for gradient checking.
    pub activity: Vec<bool>,
}

#[derive(Debug)]
pub struct Dspn {
    pub config: ModelConfig,
    pub params: ParamSet,
    slots: Slots,
    precomputed: Option<Arc<PrecomputedEmbeddings>>,
}

impl Clone for Dspn {
    fn clone(&self) -> Self {
        Dspn {
            config: self.config.clone(),
            params: self.params.clone(),
            slots: self.slots,
            precomputed: self.precomputed.clone(),
        }
    }
}

fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(Shape::Matrix(rows, cols), |_| rng.gen_range(-a..=a))
}

struct ReviewGrad {
    hinge: f64,
    rp: f64,
    activity: Vec<bool>,
    dense: Vec<Tensor>,
    dz_self: Vec<f64>,
    dz_neg: Vec<(usize, Vec<f64>)>,
    dh: Tensor,
}

impl Dspn {
    /// Fresh parameters: embedding table (trainable mode) uniform in
    /// [−0.1, 0.1], `T` from the schema seeds, `W1` per `config.w1_init`,
    /// Xavier-uniform head weights and zero biases.
    pub fn init(
        config: ModelConfig,
        schema: &AspectSchema,
        vocab: &Vocabulary,
        precomputed: Option<Arc<PrecomputedEmbeddings>>,
        seed: u64,
    ) -> Result<Dspn> {
        config.encoder.validate()?;
        if schema.len() != config.n_aspects {
            return Err(DspnError::Config(format!(
                "schema has {} aspects, config says {}",
                schema.len(),
                config.n_aspects
            )));
        }
        let d = config.encoder.d_w;
        let n = config.n_aspects;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (emb, t) = match config.encoder.mode {
            EncoderMode::Trainable => {
                let table = init_embedding_table(config.encoder.vocab_size, d, &mut rng);
                let t = init_aspect_matrix(schema, AspectSeedSource::Table { vocab, table: &table })?;
                (Some(params.add(EMBEDDING, table)), t)
            }
            EncoderMode::Precomputed => {
                let pre = precomputed
                    .as_deref()
                    .ok_or_else(|| DspnError::Config("precomputed mode needs an embeddings file".into()))?;
                if pre.dim() != d {
                    return Err(DspnError::DimensionMismatch { file: pre.dim(), expected: d });
                }
                (None, init_aspect_matrix(schema, AspectSeedSource::Precomputed(pre))?)
            }
        };
        // always drawn so the head weights do not depend on the W1 choice
        let mut w1_init = xavier(n, d, &mut rng);
        if let W1Init::Seeded { scale } = config.w1_init {
            for (x, y) in w1_init.as_mut_slice().iter_mut().zip(t.as_slice()) {
                *x = scale * y;
            }
        }
        let w1 = params.add(W1, w1_init);
        let b1 = params.add(B1, Tensor::zeros(Shape::Vector(n)));
        let t = params.add(T, t);
        let w2 = params.add(W2, xavier(config.d_h, d, &mut rng));
        let b2 = params.add(B2, Tensor::zeros(Shape::Vector(config.d_h)));
        let w3 = params.add(W3, xavier(CLASSES, config.d_h, &mut rng));
        let b3 = params.add(B3, Tensor::zeros(Shape::Vector(CLASSES)));
        Ok(Dspn {
            config,
            params,
            slots: Slots { emb, w1, b1, t, w2, b2, w3, b3 },
            precomputed,
        })
    }

    /// Rebuild from stored parameters, checking names and shapes.
    pub fn from_params(
        config: ModelConfig,
        params: ParamSet,
        precomputed: Option<Arc<PrecomputedEmbeddings>>,
    ) -> Result<Dspn> {
        let d = config.encoder.d_w;
        let (n, dh) = (config.n_aspects, config.d_h);
        let expect = |name: &str, shape: Shape| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| DspnError::Config(format!("missing parameter {name}")))?;
            if params.value(id).shape() != shape {
                return Err(DspnError::shape(
                    "Dspn::from_params",
                    format!("{name} is {:?}, expected {:?}", params.value(id).shape(), shape),
                ));
            }
            Ok(id)
        };
        let emb = match config.encoder.mode {
            EncoderMode::Trainable => Some(expect(EMBEDDING, Shape::Matrix(config.encoder.vocab_size, d))?),
            EncoderMode::Precomputed => {
                let pre = precomputed
                    .as_deref()
                    .ok_or_else(|| DspnError::Config("precomputed mode needs an embeddings file".into()))?;
                if pre.dim() != d {
                    return Err(DspnError::DimensionMismatch { file: pre.dim(), expected: d });
                }
                None
            }
        };
        let slots = Slots {
            emb,
            w1: expect(W1, Shape::Matrix(n, d))?,
            b1: expect(B1, Shape::Vector(n))?,
            t: expect(T, Shape::Matrix(n, d))?,
            w2: expect(W2, Shape::Matrix(dh, d))?,
            b2: expect(B2, Shape::Vector(dh))?,
            w3: expect(W3, Shape::Matrix(CLASSES, dh))?,
            b3: expect(B3, Shape::Vector(CLASSES))?,
        };
        Ok(Dspn {
            config,
            params,
            slots,
            precomputed,
        })
    }

    pub fn precomputed(&self) -> Option<&Arc<PrecomputedEmbeddings>> {
        self.precomputed.as_ref()
    }

    pub fn embedding_id(&self) -> Option<ParamId> {
        self.slots.emb
    }

    pub fn aspect_model(&self) -> AspectModel<'_> {
        AspectModel {
            w1: self.params.value(self.slots.w1),
            b1: self.params.value(self.slots.b1).as_slice(),
            t: self.params.value(self.slots.t),
        }
    }

    pub fn head(&self) -> PyramidHead<'_> {
        PyramidHead {
            w2: self.params.value(self.slots.w2),
            b2: self.params.value(self.slots.b2).as_slice(),
            w3: self.params.value(self.slots.w3),
            b3: self.params.value(self.slots.b3).as_slice(),
        }
    }

    pub fn encode(&self, review: &Review) -> Result<EncodedReview> {
        match (self.slots.emb, &self.precomputed) {
            (Some(emb), _) => encode_tokens(&review.tokens, self.params.value(emb)),
            (None, Some(pre)) => pre.encode(review),
            (None, None) => Err(DspnError::Config("no encoder available".into())),
        }
    }

    pub fn forward(&self, review: &Review) -> Result<PyramidOutput> {
        self.forward_encoded(&self.encode(review)?)
    }

    pub fn forward_encoded(&self, enc: &EncodedReview) -> Result<PyramidOutput> {
        let am = self.aspect_model();
        let p = am.importance(&enc.z)?;
        let trace = pyramid_forward(&enc.h, am.t, &p, &self.head())?;
        let detected = detect_aspects(&p, self.config.acd_threshold)?;
        Ok(PyramidOutput {
            p,
            word_sent: trace.word_sent,
            attn: trace.attn,
            aspect_sent: trace.aspect_sent,
            review_sent: trace.review_sent,
            detected,
        })
    }

    /// Loss of `objective` over a batch, with its gradient written into the
    /// parameter accumulators (previous contents are cleared).
    ///
    /// `negatives[i]` lists batch positions used as negatives for review `i`;
    /// `labels[i]` must be present unless the objective is `AcdOnly`. The
    /// per-review work can be spread over `pool`; reductions always run in
    /// batch order so the result does not depend on the thread count.
    pub fn batch_gradient(
        &mut self,
        batch: &[&Review],
        labels: &[Option<Polarity>],
        negatives: &[Vec<usize>],
        objective: Objective,
        lambda_acd: f64,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<BatchLoss> {
        if labels.len() != batch.len() || negatives.len() != batch.len() {
            return Err(DspnError::shape(
                "batch_gradient",
                format!("{} reviews, {} labels, {} negative lists", batch.len(), labels.len(), negatives.len()),
            ));
        }
        let (acd_weight, with_rp) = match objective {
            Objective::Joint { lambda } => (lambda, true),
            Objective::AcdOnly => (1.0, false),
            Objective::RpOnly => (0.0, true),
        };
        let with_acd = !matches!(objective, Objective::RpOnly);

        let this = &*self;
        let encode_all = || batch.par_iter().map(|r| this.encode(r)).collect::<Result<Vec<_>>>();
        let encs = match pool {
            Some(p) => p.install(encode_all)?,
            None => encode_all()?,
        };
        let per_review = |i: usize| {
            let label = if with_rp {
                Some(labels[i].ok_or_else(|| DspnError::MissingLabel {
                    id: batch[i].id.clone(),
                    source_name: "batch".into(),
                })?)
            } else {
                None
            };
            let negs: &[usize] = if with_acd { &negatives[i] } else { &[] };
            this.review_grad(i, &encs, negs, label, acd_weight)
        };
        let grads: Vec<ReviewGrad> = match pool {
            Some(p) => p.install(|| (0..batch.len()).into_par_iter().map(per_review).collect::<Result<_>>())?,
            None => (0..batch.len()).map(per_review).collect::<Result<_>>()?,
        };

        let t_id = self.slots.t;
        self.params.zero_grad();
        let mut loss = BatchLoss::default();
        for g in &grads {
            loss.hinge += g.hinge;
            loss.rp += g.rp;
            loss.activity.extend_from_slice(&g.activity);
            for (id, dg) in self.slots.dense().into_iter().zip(&g.dense) {
                self.params.grad_mut(id).add_assign(dg)?;
            }
        }
        if with_acd {
            let (t, dt) = self.params.pair_mut(t_id);
            let scale = acd_weight * lambda_acd;
            loss.uniqueness = if scale != 0.0 {
                uniqueness_backward(t, scale, dt)?
            } else {
                uniqueness_penalty(t)?
            };
            loss.acd = loss.hinge + lambda_acd * loss.uniqueness;
        }
        if let Some(emb) = self.slots.emb {
            let d = self.config.encoder.d_w;
            let mut dz: Vec<Vec<f64>> = vec![vec![0.0; d]; batch.len()];
            for (i, g) in grads.iter().enumerate() {
                axpy(1.0, &g.dz_self, &mut dz[i]);
                for (j, v) in &g.dz_neg {
                    axpy(1.0, v, &mut dz[*j]);
                }
            }
            let table_grad = self.params.grad_mut(emb);
            for ((r, g), dzi) in batch.iter().zip(&grads).zip(&dz) {
                let inv_n = 1.0 / r.tokens.len() as f64;
                for (j, &tok) in r.tokens.iter().enumerate() {
                    let row = table_grad.row_mut(tok);
                    axpy(1.0, g.dh.row(j), row);
                    axpy(inv_n, dzi, row);
                }
            }
        }
        loss.total = match objective {
            Objective::Joint { lambda } => lambda * loss.acd + loss.rp,
            Objective::AcdOnly => loss.acd,
            Objective::RpOnly => loss.rp,
        };
        if !loss.total.is_finite() {
            return Err(DspnError::NonFinite("batch loss".into()));
        }
        Ok(loss)
    }

    /// One review's loss terms and gradients. Hinge values are always reported
    /// for the given negatives; their gradient is added only when
    /// `acd_weight != 0`.
    fn review_grad(
        &self,
        i: usize,
        encs: &[EncodedReview],
        negatives: &[usize],
        label: Option<Polarity>,
        acd_weight: f64,
    ) -> Result<ReviewGrad> {
        let enc = &encs[i];
        let am = self.aspect_model();
        let head = self.head();
        let d = enc.dim();
        let n_aspects = am.n_aspects();
        let mut dense: Vec<Tensor> = self
            .slots
            .dense()
            .iter()
            .map(|&id| Tensor::zeros(self.params.value(id).shape()))
            .collect();
        let mut dz_self = vec![0.0; d];
        let mut dz_neg = Vec::new();
        let mut dh = Tensor::zeros(enc.h.shape());
        let mut dp = vec![0.0; n_aspects];
        let mut activity = Vec::new();

        let p = am.importance(&enc.z)?;

        let mut hinge_total = 0.0;
        if !negatives.is_empty() {
            let r = am.reconstruct(&p)?;
            let mut dr = vec![0.0; d];
            for &j in negatives {
                let neg = &encs[j].z;
                let value = hinge(&r, &enc.z, neg);
                activity.push(value > 0.0);
                hinge_total += value;
                if value > 0.0 && acd_weight != 0.0 {
                    for c in 0..d {
                        dr[c] += acd_weight * (neg[c] - enc.z[c]);
                    }
                    axpy(-acd_weight, &r, &mut dz_self);
                    dz_neg.push((j, r.iter().map(|v| acd_weight * v).collect()));
                }
            }
            if acd_weight != 0.0 {
                reconstruct_backward(am.t, &p, &dr, &mut dense[2], &mut dp);
            }
        }

        let mut rp = 0.0;
        if let Some(gold) = label {
            let trace = pyramid_forward(&enc.h, am.t, &p, &head)?;
            rp = rp_loss(&trace.review_sent, gold);
            let mut d_logits = trace.review_sent.clone();
            d_logits[gold.index()] -= 1.0;
            let [_, _, dt, dw2, db2, dw3, db3] = &mut dense[..] else {
                unreachable!("seven dense slots")
            };
            pyramid_backward(
                &trace,
                &enc.h,
                am.t,
                &p,
                &head,
                &d_logits,
                PyramidGrads {
                    w2: dw2,
                    b2: db2.as_mut_slice(),
                    w3: dw3,
                    b3: db3.as_mut_slice(),
                    t: dt,
                    h: &mut dh,
                    p: &mut dp,
                },
            );
            activity.extend(trace.pre.as_slice().iter().map(|&u| u > 0.0));
        }

        if dp.iter().any(|&g| g != 0.0) {
            let [dw1, db1, ..] = &mut dense[..] else {
                unreachable!("seven dense slots")
            };
            am.importance_backward(&enc.z, &p, &dp, dw1, db1.as_mut_slice(), Some(&mut dz_self));
        }

        Ok(ReviewGrad {
            hinge: hinge_total,
            rp,
            activity,
            dense,
            dz_self,
            dz_neg,
            dh,
        })
    }

    /// Value of `λ·L_ACD + L_RP` for a batch without touching the accumulators.
    pub fn batch_loss(
        &self,
        batch: &[&Review],
        labels: &[Polarity],
        negatives: &[Vec<usize>],
        lambda: f64,
        lambda_acd: f64,
    ) -> Result<f64> {
        let encs: Vec<EncodedReview> = batch.iter().map(|r| self.encode(r)).collect::<Result<_>>()?;
        let zs: Vec<Vec<f64>> = encs.iter().map(|e| e.z.clone()).collect();
        let acd = crate::acd::acd_loss(&zs, negatives, &self.aspect_model(), lambda_acd)?;
        let mut rp = 0.0;
        for (enc, gold) in encs.iter().zip(labels) {
            rp += rp_loss(&self.forward_encoded(enc)?.review_sent, *gold);
        }
        Ok(crate::pyramid::joint_loss(acd, rp, lambda))
    }

    /// Sum of `r·z` over a batch; handy for inspecting reconstruction quality.
    pub fn reconstruction_score(&self, enc: &EncodedReview) -> Result<f64> {
        let am = self.aspect_model();
        let r = am.reconstruct(&am.importance(&enc.z)?)?;
        Ok(dot(&r, &enc.z))
    }
}
