//! Synthetic review corpora with known aspect structure.
//!
//! Every review mentions one or more aspects. Each mention emits one of the
//! aspect's keywords next to one of that aspect's opinion words for the chosen
//! polarity; the rest of the review is filler. The star rating is derived from
//! the mention-weighted mean of the aspect polarities, so review sentiment is
//! by construction an aggregation of aspect sentiments.

use std::collections::HashSet;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;

use super::{AspectSchema, AspectSpec, Corpus, Polarity, Review, Vocabulary};
use crate::config::KvConfig;
use crate::error::{DspnError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthAspect {
    pub name: String,
    pub keywords: Vec<String>,
    /// Opinion words indexed by `Polarity::index()`.
    pub opinions: [Vec<String>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub aspects: Vec<SynthAspect>,
    pub filler: Vec<String>,
    pub size: usize,
    /// Probability that a review mentions more than one aspect.
    pub multi_aspect_prob: f64,
    pub max_aspects: usize,
    /// Inclusive range of mentions per chosen aspect.
    pub mentions: (usize, usize),
    /// Inclusive range of review length in tokens; filler tops reviews up to it.
    pub length: (usize, usize),
    pub polarity_weights: [f64; 3],
}

impl GenConfig {
    /// Generated lexicon: aspect `k` is named `aspect{k}`, with keywords
    /// `a{k}kw{i}`, opinion words `a{k}neg{i}` / `a{k}neu{i}` / `a{k}pos{i}`,
    /// and filler `w{i}` making up the rest of `vocab_size`.
    pub fn generated(
        n_aspects: usize,
        keywords_per_aspect: usize,
        opinions_per_polarity: usize,
        vocab_size: usize,
    ) -> GenConfig {
        let aspects: Vec<SynthAspect> = (0..n_aspects)
            .map(|k| {
                let words = |tag: &str, n: usize| -> Vec<String> {
                    (0..n).map(|i| format!("a{k}{tag}{i}")).collect()
                };
                SynthAspect {
                    name: format!("aspect{k}"),
                    keywords: words("kw", keywords_per_aspect),
                    opinions: [
                        words("neg", opinions_per_polarity),
                        words("neu", opinions_per_polarity),
                        words("pos", opinions_per_polarity),
                    ],
                }
            })
            .collect();
        let used = n_aspects * (keywords_per_aspect + 3 * opinions_per_polarity);
        let filler = (0..vocab_size.saturating_sub(used).max(1))
            .map(|i| format!("w{i}"))
            .collect();
        GenConfig {
            aspects,
            filler,
            size: 1000,
            multi_aspect_prob: 0.3,
            max_aspects: 2,
            mentions: (1, 1),
            length: (4, 6),
            polarity_weights: [1.0, 1.0, 1.0],
        }
    }

    pub fn from_kv(kv: &KvConfig) -> Result<GenConfig> {
        let mut cfg = GenConfig::generated(
            kv.get_or("aspects", 5)?,
            kv.get_or("keywords_per_aspect", 4)?,
            kv.get_or("opinions_per_polarity", 3)?,
            kv.get_or("vocab_size", 200)?,
        );
        cfg.size = kv.get_or("size", cfg.size)?;
        cfg.multi_aspect_prob = kv.get_or("multi_aspect_prob", cfg.multi_aspect_prob)?;
        cfg.max_aspects = kv.get_or("max_aspects", cfg.max_aspects)?;
        cfg.mentions = (
            kv.get_or("min_mentions", cfg.mentions.0)?,
            kv.get_or("max_mentions", cfg.mentions.1)?,
        );
        cfg.length = (
            kv.get_or("min_len", cfg.length.0)?,
            kv.get_or("max_len", cfg.length.1)?,
        );
        cfg.polarity_weights = [
            kv.get_or("weight_negative", 1.0)?,
            kv.get_or("weight_neutral", 1.0)?,
            kv.get_or("weight_positive", 1.0)?,
        ];
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DspnError::Config(m));
        if self.aspects.is_empty() {
            return bad("synthetic corpus needs at least one aspect".into());
        }
        let mut seen = HashSet::new();
        for a in &self.aspects {
            if a.keywords.is_empty() || a.opinions.iter().any(Vec::is_empty) {
                return bad(format!("aspect {:?} needs keywords and opinion words for every polarity", a.name));
            }
            let words = a.keywords.iter().chain(a.opinions.iter().flatten());
            for w in words {
                if !seen.insert(w.as_str()) {
                    return Err(DspnError::OverlappingLexicon { word: w.clone() });
                }
            }
        }
        for w in &self.filler {
            if !seen.insert(w.as_str()) {
                return Err(DspnError::OverlappingLexicon { word: w.clone() });
            }
        }
        if self.filler.is_empty() {
            return bad("filler lexicon is empty".into());
        }
        if !(0.0..=1.0).contains(&self.multi_aspect_prob) {
            return bad(format!("multi_aspect_prob {} outside [0,1]", self.multi_aspect_prob));
        }
        if self.multi_aspect_prob > 0.0 && (self.max_aspects < 2 || self.aspects.len() < 2) {
            return bad("multi-aspect reviews need max_aspects >= 2 and at least 2 aspects".into());
        }
        if self.mentions.0 == 0 || self.mentions.0 > self.mentions.1 {
            return bad(format!("bad mention range {:?}", self.mentions));
        }
        if self.length.0 == 0 || self.length.0 > self.length.1 {
            return bad(format!("bad length range {:?}", self.length));
        }
        if WeightedIndex::new(self.polarity_weights).is_err() {
            return bad(format!("bad polarity weights {:?}", self.polarity_weights));
        }
        Ok(())
    }

    /// Schema whose seeds are each aspect's keywords.
    pub fn schema(&self) -> Result<AspectSchema> {
        AspectSchema::new(
            self.aspects
                .iter()
                .map(|a| AspectSpec {
                    name: a.name.clone(),
                    seeds: a.keywords.clone(),
                })
                .collect(),
        )
    }
}

pub fn synth_corpus(cfg: &GenConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let polarity_dist = WeightedIndex::new(cfg.polarity_weights).expect("validated");
    let n_aspects = cfg.aspects.len();

    let mut reviews = Vec::with_capacity(cfg.size);
    for i in 0..cfg.size {
        let k = if n_aspects >= 2 && rng.gen_bool(cfg.multi_aspect_prob) {
            rng.gen_range(2..=cfg.max_aspects.min(n_aspects))
        } else {
            1
        };
        let mut chosen = index::sample(&mut rng, n_aspects, k).into_vec();
        chosen.sort_unstable();

        let mut words = Vec::new();
        let mut gold = Vec::with_capacity(k);
        let mut weighted = 0i64;
        let mut total = 0i64;
        for &a in &chosen {
            let aspect = &cfg.aspects[a];
            let pol = Polarity::ALL[polarity_dist.sample(&mut rng)];
            let mentions = rng.gen_range(cfg.mentions.0..=cfg.mentions.1);
            for _ in 0..mentions {
                words.push(aspect.keywords.choose(&mut rng).expect("nonempty").clone());
                words.push(aspect.opinions[pol.index()].choose(&mut rng).expect("nonempty").clone());
            }
            weighted += mentions as i64 * pol.score();
            total += mentions as i64;
            gold.push((aspect.name.clone(), pol));
        }
        let target = rng.gen_range(cfg.length.0..=cfg.length.1);
        while words.len() < target {
            words.push(cfg.filler.choose(&mut rng).expect("nonempty").clone());
        }
        words.shuffle(&mut rng);

        let stars = if 3 * weighted > total {
            rng.gen_range(4..=5)
        } else if 3 * weighted < -total {
            rng.gen_range(1..=2)
        } else {
            3
        };
        reviews.push(Review {
            id: format!("synth-{i}"),
            tokens: Vec::new(),
            words,
            stars: Some(stars),
            gold_aspects: gold,
            pseudo_label: None,
        });
    }

    let vocab = Vocabulary::build(reviews.iter().map(|r| r.words.as_slice()), 1);
    for r in &mut reviews {
        r.tokens = r.words.iter().map(|w| vocab.id(w)).collect();
    }
    let max_len = reviews.iter().map(Review::len).max().unwrap_or(0).max(cfg.length.1);
    Ok(Corpus {
        reviews,
        vocab,
        max_len,
    })
}
