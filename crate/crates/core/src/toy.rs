//! Small random model instances for gradient checks and oracle tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acd::sample_negatives;
use crate::corpus::{AspectSchema, AspectSpec, Polarity, Review, Vocabulary};
use crate::encoder::{EncoderConfig, EncoderMode};
use crate::error::Result;
use crate::gradkernel::{check_gradient_with, Evaluation, GradCheckReport, ParamSet, DEFAULT_FLOOR};
use crate::model::{Dspn, ModelConfig, Objective, W1Init};

/// Size limits for generated instances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyLimits {
    pub max_tokens: usize,
    pub max_aspects: usize,
    pub max_dim: usize,
    pub max_batch: usize,
    pub max_negatives: usize,
    pub vocab: usize,
    /// Parameters are drawn uniform in `[-scale, scale]`.
    pub scale: f64,
}

impl Default for ToyLimits {
    fn default() -> Self {
        ToyLimits {
            max_tokens: 6,
            max_aspects: 3,
            max_dim: 8,
            max_batch: 4,
            max_negatives: 3,
            vocab: 12,
            scale: 1.0,
        }
    }
}

pub struct ToyInstance {
    pub model: Dspn,
    pub schema: AspectSchema,
    pub vocab: Vocabulary,
    pub reviews: Vec<Review>,
    pub labels: Vec<Polarity>,
    pub negatives: Vec<Vec<usize>>,
}

impl ToyInstance {
    pub fn generate(seed: u64, limits: &ToyLimits) -> Result<ToyInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_aspects = rng.gen_range(2..=limits.max_aspects.max(2));
        let d = rng.gen_range(2..=limits.max_dim.max(2));
        let words: Vec<String> = (0..limits.vocab.max(n_aspects)).map(|i| format!("t{i}")).collect();
        let vocab = Vocabulary::from_tokens(words.iter().cloned());

        let mut seeds = words.clone();
        seeds.shuffle(&mut rng);
        let schema = AspectSchema::new(
            (0..n_aspects)
                .map(|k| AspectSpec {
                    name: format!("aspect{k}"),
                    seeds: vec![seeds[k].clone()],
                })
                .collect(),
        )?;

        let config = ModelConfig {
            encoder: EncoderConfig {
                mode: EncoderMode::Trainable,
                d_w: d,
                vocab_size: vocab.len(),
                max_len: limits.max_tokens,
            },
            n_aspects,
            d_h: d,
            acd_threshold: 1e-4,
            w1_init: W1Init::Xavier,
        };
        let mut model = Dspn::init(config, &schema, &vocab, None, rng.gen())?;
        let s = limits.scale;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            if model.params.name(id) == crate::model::T {
                continue;
            }
            for v in model.params.value_mut(id).as_mut_slice() {
                *v = rng.gen_range(-s..=s);
            }
        }

        let batch = rng.gen_range(2..=limits.max_batch.max(2));
        let reviews: Vec<Review> = (0..batch)
            .map(|i| {
                let n = rng.gen_range(1..=limits.max_tokens.max(1));
                let words: Vec<String> = (0..n).map(|_| words[rng.gen_range(0..words.len())].clone()).collect();
                Review {
                    id: format!("toy{i}"),
                    tokens: words.iter().map(|w| vocab.id(w)).collect(),
                    words,
                    stars: None,
                    gold_aspects: Vec::new(),
                    pseudo_label: None,
                }
            })
            .collect();
        let labels = (0..batch)
            .map(|_| Polarity::ALL[rng.gen_range(0..3)])
            .collect();
        let m = rng.gen_range(1..=limits.max_negatives.max(1));
        let negatives = sample_negatives(batch, m, &mut rng)?;
        Ok(ToyInstance {
            model,
            schema,
            vocab,
            reviews,
            labels,
            negatives,
        })
    }

    /// Finite-difference check of the batch gradient of `objective`.
    pub fn check(&self, objective: Objective, lambda_acd: f64, h: f64) -> Result<GradCheckReport> {
        self.check_with(objective, lambda_acd, h, DEFAULT_FLOOR)
    }

    pub fn check_with(&self, objective: Objective, lambda_acd: f64, h: f64, floor: f64) -> Result<GradCheckReport> {
        let config = self.model.config.clone();
        let batch: Vec<&Review> = self.reviews.iter().collect();
        let labels: Vec<Option<Polarity>> = self.labels.iter().copied().map(Some).collect();
        check_gradient_with(
            |ps: &mut ParamSet| {
                let mut model = Dspn::from_params(config.clone(), ps.clone(), None)?;
                let loss = model.batch_gradient(&batch, &labels, &self.negatives, objective, lambda_acd, None)?;
                for id in model.params.ids().collect::<Vec<_>>() {
                    ps.grad_mut(id).as_mut_slice().copy_from_slice(model.params.grad(id).as_slice());
                }
                Ok(Evaluation {
                    loss: loss.total,
                    activity: loss.activity,
                })
            },
            &self.model.params,
            h,
            floor,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let limits = ToyLimits::default();
        for seed in 0..10 {
            let inst = ToyInstance::generate(seed, &limits).unwrap();
            let report = inst.check(Objective::Joint { lambda: 0.7 }, 1.3, 1e-5).unwrap();
            assert!(report.passes(1e-4), "seed {seed}: {report:?}");
        }
    }

    // Single-token reviews make p irrelevant to the RP term, so some
    // gradients are exactly zero; a larger floor absorbs the rounding noise.
    #[test]
    fn partial_objectives_check() {
        let limits = ToyLimits::default();
        for seed in 20..25 {
            let inst = ToyInstance::generate(seed, &limits).unwrap();
            for obj in [Objective::AcdOnly, Objective::RpOnly, Objective::Joint { lambda: 0.0 }] {
                let report = inst.check_with(obj, 1.0, 1e-5, 1e-6).unwrap();
                assert!(report.passes(1e-4), "seed {seed} {obj:?}: {report:?}");
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let limits = ToyLimits::default();
        let a = ToyInstance::generate(3, &limits).unwrap();
        let b = ToyInstance::generate(3, &limits).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.negatives, b.negatives);
        assert_eq!(a.labels, b.labels);
    }
}
