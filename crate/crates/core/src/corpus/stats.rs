use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use super::{map_star_to_polarity, Corpus, Polarity};
use crate::error::{DspnError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PolarityCounts {
    pub negative: usize,
    pub neutral: usize,
    pub positive: usize,
}

impl PolarityCounts {
    fn bump(&mut self, p: Polarity) {
        match p {
            Polarity::Negative => self.negative += 1,
            Polarity::Neutral => self.neutral += 1,
            Polarity::Positive => self.positive += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.negative + self.neutral + self.positive
    }
}

/// Dataset summary in the style of a corpus statistics table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub splits: Vec<(String, usize)>,
    pub reviews: usize,
    /// Review polarity from star ratings.
    pub review_sentiment: PolarityCounts,
    /// Reviews with no star rating.
    pub unrated: usize,
    pub aspect_sentiment: PolarityCounts,
    /// (review, aspect) pairs with no annotation, over the aspects seen in the corpus.
    pub absent_aspects: usize,
    pub aspects: Vec<String>,
    pub multi_aspect: f64,
    pub multi_aspect_multi_sentiment: f64,
}

pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats> {
    corpus_stats_for_splits(&[("all", corpus)])
}

/// MA is the fraction of reviews with at least two annotated aspects; MAS the
/// fraction of those that also carry at least two distinct polarities. Only
/// annotated aspects count; absent ones never contribute to MAS.
pub fn corpus_stats_for_splits(splits: &[(&str, &Corpus)]) -> Result<CorpusStats> {
    let mut reviews = 0;
    let mut review_sentiment = PolarityCounts::default();
    let mut unrated = 0;
    let mut aspect_sentiment = PolarityCounts::default();
    let mut names = BTreeSet::new();
    let mut ma = 0usize;
    let mut mas = 0usize;

    for (_, corpus) in splits {
        for r in &corpus.reviews {
            reviews += 1;
            match r.stars {
                Some(s) => review_sentiment.bump(map_star_to_polarity(s as i64)?),
                None => unrated += 1,
            }
            for (name, p) in &r.gold_aspects {
                names.insert(name.clone());
                aspect_sentiment.bump(*p);
            }
            if r.gold_aspects.len() >= 2 {
                ma += 1;
                let distinct: BTreeSet<_> = r.gold_aspects.iter().map(|(_, p)| *p).collect();
                if distinct.len() >= 2 {
                    mas += 1;
                }
            }
        }
    }
    if aspect_sentiment.total() == 0 {
        return Err(DspnError::NoAnnotations(
            "corpus statistics need gold aspect annotations".into(),
        ));
    }
    let denom = reviews as f64;
    Ok(CorpusStats {
        splits: splits
            .iter()
            .map(|(name, c)| (name.to_string(), c.len()))
            .collect(),
        reviews,
        review_sentiment,
        unrated,
        absent_aspects: names.len() * reviews - aspect_sentiment.total(),
        aspects: names.into_iter().collect(),
        aspect_sentiment,
        multi_aspect: ma as f64 / denom,
        multi_aspect_multi_sentiment: mas as f64 / denom,
    })
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>8}", "split", "reviews")?;
        for (name, n) in &self.splits {
            writeln!(f, "{name:<12} {n:>8}")?;
        }
        writeln!(f, "{:<12} {:>8}", "total", self.reviews)?;
        writeln!(f)?;
        writeln!(
            f,
            "{:<12} {:>8} {:>8} {:>8} {:>8}",
            "level", "neg", "neu", "pos", "absent"
        )?;
        let r = &self.review_sentiment;
        writeln!(
            f,
            "{:<12} {:>8} {:>8} {:>8} {:>8}",
            "review", r.negative, r.neutral, r.positive, self.unrated
        )?;
        let a = &self.aspect_sentiment;
        writeln!(
            f,
            "{:<12} {:>8} {:>8} {:>8} {:>8}",
            "aspect", a.negative, a.neutral, a.positive, self.absent_aspects
        )?;
        writeln!(f)?;
        writeln!(f, "aspects: {}", self.aspects.join(", "))?;
        writeln!(f, "MA  {:6.2}%", 100.0 * self.multi_aspect)?;
        write!(f, "MAS {:6.2}%", 100.0 * self.multi_aspect_multi_sentiment)
    }
}
