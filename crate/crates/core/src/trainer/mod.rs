//! Training loop for the joint objective, run configuration and checkpoints.

mod checkpoint;
mod optim;

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointState, CKPT_MAGIC, CKPT_VERSION};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::acd::{sample_negatives, DEFAULT_ACD_THRESHOLD, DEFAULT_LAMBDA_ACD, DEFAULT_NEG_SAMPLES};
use crate::config::KvConfig;
use crate::corpus::{AspectSchema, Corpus, LabelSource, Polarity, Review, DEFAULT_MAX_LEN, DEFAULT_MIN_COUNT};
use crate::encoder::{EncoderConfig, EncoderMode, PrecomputedEmbeddings};
use crate::error::{DspnError, Result};
use crate::metrics::{evaluate, EvalOptions};
use crate::model::{BatchLoss, Dspn, ModelConfig, Objective, W1Init, DEFAULT_W1_SCALE};
use crate::pyramid::DEFAULT_LAMBDA;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Joint epochs, after any pretraining epochs.
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub lambda: f64,
    pub lambda_acd: f64,
    /// Negative samples per review.
    pub neg_samples: usize,
    pub seed: u64,
    /// Epochs of aspect-reconstruction-only training before joint training.
    pub acd_pretrain_epochs: usize,
    pub label_source: LabelSource,
    /// Share of the training corpus held out for model selection when no
    /// separate validation file is given.
    pub val_fraction: f64,
    /// Threads for per-review gradients; results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            lambda: DEFAULT_LAMBDA,
            lambda_acd: DEFAULT_LAMBDA_ACD,
            neg_samples: DEFAULT_NEG_SAMPLES,
            seed: 0,
            acd_pretrain_epochs: 1,
            label_source: LabelSource::Stars,
            val_fraction: 0.1,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DspnError::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !(self.lambda_acd >= 0.0 && self.lambda_acd.is_finite()) {
            return bad(format!("lambda_acd must be finite and non-negative, got {}", self.lambda_acd));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }
}

/// Model and training settings, read from flat `key=value` config text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder_mode: EncoderMode,
    pub d_w: usize,
    /// Hidden width of the word-sentiment layer; defaults to `d_w`.
    pub d_h: usize,
    pub max_len: usize,
    pub min_count: usize,
    pub acd_threshold: f64,
    pub w1_init: W1Init,
    pub embeddings_path: Option<String>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d_w = EncoderConfig::DEFAULT_TRAINABLE_DIM;
        RunConfig {
            encoder_mode: EncoderMode::Trainable,
            d_w,
            d_h: d_w,
            max_len: DEFAULT_MAX_LEN,
            min_count: DEFAULT_MIN_COUNT,
            acd_threshold: DEFAULT_ACD_THRESHOLD,
            w1_init: W1Init::default(),
            embeddings_path: None,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "acd_pretrain_epochs",
        "acd_threshold",
        "batch",
        "d_h",
        "d_w",
        "embeddings_path",
        "encoder_mode",
        "epochs",
        "label_source",
        "lambda",
        "lambda_acd",
        "lr",
        "max_len",
        "min_count",
        "neg_samples",
        "optimizer",
        "seed",
        "val_fraction",
        "w1_init",
        "w1_scale",
        "workers",
    ];

    /// Missing keys take their defaults; unknown keys are rejected.
    pub fn from_kv(kv: &KvConfig) -> Result<RunConfig> {
        let unknown = kv.unknown_keys(Self::KEYS);
        if !unknown.is_empty() {
            return Err(DspnError::Config(format!("unknown config key(s): {}", unknown.join(", "))));
        }
        let encoder_mode: EncoderMode = kv.get_or("encoder_mode", EncoderMode::Trainable)?;
        let default_dim = match encoder_mode {
            EncoderMode::Trainable => EncoderConfig::DEFAULT_TRAINABLE_DIM,
            EncoderMode::Precomputed => EncoderConfig::DEFAULT_PRECOMPUTED_DIM,
        };
        let d_w = kv.get_or("d_w", default_dim)?;
        let t = TrainConfig::default();
        let w1_init = match kv.get("w1_init").unwrap_or("seeded") {
            "seeded" => W1Init::Seeded {
                scale: kv.get_or("w1_scale", DEFAULT_W1_SCALE)?,
            },
            "xavier" => W1Init::Xavier,
            other => {
                return Err(DspnError::Config(format!("unknown w1_init {other:?} (expected seeded or xavier)")));
            }
        };
        let run = RunConfig {
            encoder_mode,
            d_w,
            d_h: kv.get_or("d_h", d_w)?,
            max_len: kv.get_or("max_len", DEFAULT_MAX_LEN)?,
            min_count: kv.get_or("min_count", DEFAULT_MIN_COUNT)?,
            acd_threshold: kv.get_or("acd_threshold", DEFAULT_ACD_THRESHOLD)?,
            w1_init,
            embeddings_path: kv.get("embeddings_path").filter(|s| !s.is_empty()).map(str::to_string),
            train: TrainConfig {
                epochs: kv.get_or("epochs", t.epochs)?,
                batch: kv.get_or("batch", t.batch)?,
                lr: kv.get_or("lr", t.lr)?,
                optimizer: kv.get_or("optimizer", t.optimizer)?,
                lambda: kv.get_or("lambda", t.lambda)?,
                lambda_acd: kv.get_or("lambda_acd", t.lambda_acd)?,
                neg_samples: kv.get_or("neg_samples", t.neg_samples)?,
                seed: kv.get_or("seed", t.seed)?,
                acd_pretrain_epochs: kv.get_or("acd_pretrain_epochs", t.acd_pretrain_epochs)?,
                label_source: kv.get_or("label_source", t.label_source)?,
                val_fraction: kv.get_or("val_fraction", t.val_fraction)?,
                workers: kv.get_or("workers", t.workers)?,
            },
        };
        run.validate()?;
        Ok(run)
    }

    /// Every setting as text. `workers` is left out of checkpoints so they do
    /// not depend on the thread count.
    pub fn to_kv(&self, include_workers: bool) -> KvConfig {
        let t = &self.train;
        let mut kv = KvConfig::new();
        kv.set("encoder_mode", self.encoder_mode);
        kv.set("d_w", self.d_w);
        kv.set("d_h", self.d_h);
        kv.set("max_len", self.max_len);
        kv.set("min_count", self.min_count);
        kv.set("acd_threshold", self.acd_threshold);
        match self.w1_init {
            W1Init::Xavier => kv.set("w1_init", "xavier"),
            W1Init::Seeded { scale } => {
                kv.set("w1_init", "seeded");
                kv.set("w1_scale", scale);
            }
        }
        if let Some(p) = &self.embeddings_path {
            kv.set("embeddings_path", p);
        }
        kv.set("epochs", t.epochs);
        kv.set("batch", t.batch);
        kv.set("lr", t.lr);
        kv.set("optimizer", t.optimizer);
        kv.set("lambda", t.lambda);
        kv.set("lambda_acd", t.lambda_acd);
        kv.set("neg_samples", t.neg_samples);
        kv.set("seed", t.seed);
        kv.set("acd_pretrain_epochs", t.acd_pretrain_epochs);
        kv.set("label_source", t.label_source);
        kv.set("val_fraction", t.val_fraction);
        if include_workers {
            kv.set("workers", t.workers);
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 {
            return Err(DspnError::Config("d_h must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(DspnError::Config("max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.acd_threshold) {
            return Err(DspnError::InvalidThreshold(self.acd_threshold));
        }
        if let W1Init::Seeded { scale } = self.w1_init {
            if !scale.is_finite() {
                return Err(DspnError::Config(format!("w1_scale must be finite, got {scale}")));
            }
        }
        self.encoder(0).validate()?;
        self.train.validate()
    }

    fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            mode: self.encoder_mode,
            d_w: self.d_w,
            vocab_size,
            max_len: self.max_len,
        }
    }

    pub fn model_config(&self, n_aspects: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder(vocab_size),
            n_aspects,
            d_h: self.d_h,
            acd_threshold: self.acd_threshold,
            w1_init: self.w1_init,
        }
    }
}

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub negatives: u64,
    pub split: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Seeds {
            init: rng.next_u64(),
            shuffle: rng.next_u64(),
            negatives: rng.next_u64(),
            split: rng.next_u64(),
        }
    }
}

/// Seeded hold-out split; the held-out part has `round(fraction·len)`
/// reviews, at least one, and leaves at least one for training.
pub fn split_validation(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    let n = corpus.len();
    if n < 2 {
        return Err(DspnError::Config(format!("need at least 2 reviews to hold out a validation split, got {n}")));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(Seeds::derive(seed).split);
    let held: HashSet<usize> = rand::seq::index::sample(&mut rng, n, k).into_iter().collect();
    Ok(corpus.partition(&held))
}

/// Optimizer state plus the negative-sampling stream; one update per call.
pub struct Trainer {
    model: Dspn,
    optimizer: Optimizer,
    config: TrainConfig,
    pool: Option<rayon::ThreadPool>,
    neg_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Dspn, config: &TrainConfig, neg_seed: u64) -> Result<Trainer> {
        config.validate()?;
        let pool = if config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| DspnError::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Trainer {
            optimizer: Optimizer::new(config.optimizer, config.lr, &model.params),
            model,
            config: config.clone(),
            pool,
            neg_rng: ChaCha8Rng::seed_from_u64(neg_seed),
        })
    }

    pub fn model(&self) -> &Dspn {
        &self.model
    }

    pub fn into_model(self) -> Dspn {
        self.model
    }

    /// Gradient of `objective` on `batch` followed by one optimizer update.
    /// A batch of one has no in-batch negatives and contributes no hinge term.
    pub fn step(&mut self, batch: &[&Review], labels: &[Option<Polarity>], objective: Objective) -> Result<BatchLoss> {
        let m = if batch.len() < 2 { 0 } else { self.config.neg_samples };
        let negatives = sample_negatives(batch.len(), m, &mut self.neg_rng)?;
        let loss = self.model.batch_gradient(
            batch,
            labels,
            &negatives,
            objective,
            self.config.lambda_acd,
            self.pool.as_ref(),
        )?;
        self.optimizer.step(&mut self.model.params);
        if self.model.params.iter().any(|(_, t)| !t.is_finite()) {
            return Err(DspnError::NonFinite("parameters after update".into()));
        }
        Ok(loss)
    }

    /// One pass over `reviews` in a shuffled order. `labels` may be `None`
    /// only for `Objective::AcdOnly`.
    pub fn epoch(
        &mut self,
        reviews: &[Review],
        labels: &[Option<Polarity>],
        objective: Objective,
        shuffle: &mut ChaCha8Rng,
        epoch: usize,
    ) -> Result<EpochLoss> {
        let mut order: Vec<usize> = (0..reviews.len()).collect();
        order.shuffle(shuffle);
        let mut total = EpochLoss::default();
        for (step, chunk) in order.chunks(self.config.batch).enumerate() {
            let batch: Vec<&Review> = chunk.iter().map(|&i| &reviews[i]).collect();
            let batch_labels: Vec<Option<Polarity>> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = self.step(&batch, &batch_labels, objective).map_err(|e| match e {
                DspnError::NonFinite(_) => DspnError::Diverged { epoch, step },
                other => other,
            })?;
            total.loss += loss.total;
            total.acd += loss.acd;
            total.rp += loss.rp;
        }
        Ok(total)
    }
}

/// Losses summed over the batches of an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub loss: f64,
    pub acd: f64,
    pub rp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Aspect reconstruction only.
    Pretrain,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based, counting pretraining epochs.
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub loss_acd: f64,
    pub loss_rp: f64,
    pub val_acc_rp: Option<f64>,
    pub val_f1_acd: Option<f64>,
    pub val_acc_acsa: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters from the joint epoch with the best validation RP accuracy
    /// (earliest on ties).
    pub model: Dspn,
    pub best: EpochRecord,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, run: &RunConfig, schema: &AspectSchema, corpus: &Corpus, corpus_path: Option<&str>) -> Checkpoint {
        let state = CheckpointState {
            epoch: self.best.epoch,
            loss: self.best.loss,
            loss_acd: self.best.loss_acd,
            loss_rp: self.best.loss_rp,
        };
        Checkpoint::new(&self.model, run, schema, &corpus.vocab, state, corpus_path)
    }
}

pub fn train(
    train_set: &Corpus,
    val_set: &Corpus,
    schema: &AspectSchema,
    run: &RunConfig,
    precomputed: Option<Arc<PrecomputedEmbeddings>>,
) -> Result<TrainOutcome> {
    train_with_progress(train_set, val_set, schema, run, precomputed, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    train_set: &Corpus,
    val_set: &Corpus,
    schema: &AspectSchema,
    run: &RunConfig,
    precomputed: Option<Arc<PrecomputedEmbeddings>>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    run.validate()?;
    let cfg = &run.train;
    if train_set.is_empty() {
        return Err(DspnError::Empty("training corpus"));
    }
    if val_set.is_empty() {
        return Err(DspnError::Empty("validation corpus"));
    }
    let labels: Vec<Option<Polarity>> = cfg
        .label_source
        .require_all(&train_set.reviews, "train")?
        .into_iter()
        .map(Some)
        .collect();
    cfg.label_source.require_all(&val_set.reviews, "validation")?;

    let seeds = Seeds::derive(cfg.seed);
    let model = Dspn::init(
        run.model_config(schema.len(), train_set.vocab.len()),
        schema,
        &train_set.vocab,
        precomputed,
        seeds.init,
    )?;
    let mut trainer = Trainer::new(model, cfg, seeds.negatives)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(seeds.shuffle);
    let eval_opts = EvalOptions {
        label_source: cfg.label_source,
        ..EvalOptions::default()
    };

    let mut history = Vec::new();
    let mut best: Option<(EpochRecord, Dspn)> = None;
    let total = cfg.acd_pretrain_epochs + cfg.epochs;
    for epoch in 1..=total {
        let (phase, objective) = if epoch <= cfg.acd_pretrain_epochs {
            (Phase::Pretrain, Objective::AcdOnly)
        } else {
            (Phase::Joint, Objective::Joint { lambda: cfg.lambda })
        };
        let loss = trainer.epoch(&train_set.reviews, &labels, objective, &mut shuffle, epoch)?;
        let report = evaluate(trainer.model(), val_set, schema, &eval_opts)?;
        let record = EpochRecord {
            epoch,
            phase,
            loss: loss.loss,
            loss_acd: loss.acd,
            loss_rp: loss.rp,
            val_acc_rp: report.acc_rp,
            val_f1_acd: report.f1_acd,
            val_acc_acsa: report.acc_acsa,
        };
        progress(&record);
        if phase == Phase::Joint {
            let better = match &best {
                None => true,
                Some((b, _)) => record.val_acc_rp > b.val_acc_rp,
            };
            if better {
                best = Some((record.clone(), trainer.model().clone()));
            }
        }
        history.push(record);
    }
    let (best, model) = best.expect("at least one joint epoch");
    Ok(TrainOutcome { model, best, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_text() {
        let mut kv = KvConfig::parse("lr=0.01\nlambda=0\noptimizer=sgd\nlabel_source=pseudo\nd_w=8").unwrap();
        let run = RunConfig::from_kv(&kv).unwrap();
        assert_eq!(run.d_h, 8);
        assert_eq!(run.w1_init, W1Init::Seeded { scale: DEFAULT_W1_SCALE });
        let xavier = RunConfig::from_kv(&KvConfig::parse("w1_init=xavier").unwrap()).unwrap();
        assert_eq!(RunConfig::from_kv(&xavier.to_kv(true)).unwrap(), xavier);
        assert_eq!(run.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(RunConfig::from_kv(&run.to_kv(true)).unwrap(), run);
        kv.set("learning_rate", 1);
        assert!(RunConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn precomputed_mode_defaults_to_wide_embeddings() {
        let run = RunConfig::from_kv(&KvConfig::parse("encoder_mode=precomputed").unwrap()).unwrap();
        assert_eq!((run.d_w, run.d_h), (768, 768));
    }

    #[test]
    fn invalid_settings_are_rejected() {
        for text in ["epochs=0", "batch=0", "lr=-1", "lambda=-0.5", "val_fraction=1", "workers=0", "acd_threshold=1", "w1_init=zeros"] {
            assert!(RunConfig::from_kv(&KvConfig::parse(text).unwrap()).is_err(), "{text}");
        }
    }

    #[test]
    fn seed_streams_differ() {
        let s = Seeds::derive(7);
        assert_eq!(s, Seeds::derive(7));
        let all = [s.init, s.shuffle, s.negatives, s.split];
        assert_eq!(all.iter().collect::<HashSet<_>>().len(), 4);
    }
}
