use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Corpus;
use crate::error::{DspnError, Result};

/// A label budget given either as a count or as a percentage of the labels
/// available (`"120"`, `"50%"`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelBudget {
    Count(usize),
    Percent(f64),
}

impl LabelBudget {
    /// Number of labels to keep out of `available`; percentages round down.
    pub fn resolve(self, available: usize) -> Result<usize> {
        let n = match self {
            LabelBudget::Count(n) => n,
            LabelBudget::Percent(p) => (p / 100.0 * available as f64).floor() as usize,
        };
        if n > available {
            return Err(DspnError::BudgetTooLarge {
                requested: n,
                available,
            });
        }
        Ok(n)
    }
}

impl FromStr for LabelBudget {
    type Err = DspnError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || DspnError::Config(format!("budget {s:?} is neither a count nor a percentage in [0, 100]"));
        match s.strip_suffix('%') {
            Some(p) => {
                let p: f64 = p.trim().parse().map_err(|_| bad())?;
                if (0.0..=100.0).contains(&p) {
                    Ok(LabelBudget::Percent(p))
                } else {
                    Err(bad())
                }
            }
            None => s.trim().parse().map(LabelBudget::Count).map_err(|_| bad()),
        }
    }
}

impl fmt::Display for LabelBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelBudget::Count(n) => write!(f, "{n}"),
            LabelBudget::Percent(p) => write!(f, "{p}%"),
        }
    }
}

/// Keep exactly `label_budget` gold aspect labels, drawn uniformly without
/// replacement over all (review, aspect) labels. Review texts and the order of
/// the surviving labels are untouched.
pub fn budget_subsample(corpus: &Corpus, label_budget: usize, seed: u64) -> Result<Corpus> {
    let positions: Vec<(usize, usize)> = corpus
        .reviews
        .iter()
        .enumerate()
        .flat_map(|(i, r)| (0..r.gold_aspects.len()).map(move |k| (i, k)))
        .collect();
    if label_budget > positions.len() {
        return Err(DspnError::BudgetTooLarge {
            requested: label_budget,
            available: positions.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: HashSet<(usize, usize)> = index::sample(&mut rng, positions.len(), label_budget)
        .into_iter()
        .map(|i| positions[i])
        .collect();

    let mut out = corpus.clone();
    for (i, r) in out.reviews.iter_mut().enumerate() {
        let kept = r
            .gold_aspects
            .drain(..)
            .enumerate()
            .filter(|(k, _)| chosen.contains(&(i, *k)))
            .map(|(_, a)| a)
            .collect();
        r.gold_aspects = kept;
    }
    Ok(out)
}
