use std::fmt;
use std::str::FromStr;

use super::{Polarity, Review};
use crate::error::{DspnError, Result};

/// Where a review's training label comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LabelSource {
    #[default]
    Stars,
    /// Externally supplied pseudo-labels.
    Pseudo,
    /// Aggregated from the gold aspect polarities.
    DerivedFromAspects,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Stars => "stars",
            LabelSource::Pseudo => "pseudo",
            LabelSource::DerivedFromAspects => "derived_from_aspects",
        }
    }

    /// The review's label under this source, `None` when the field it reads is absent.
    pub fn label(self, review: &Review) -> Result<Option<Polarity>> {
        match self {
            LabelSource::Stars => review.stars.map(|s| map_star_to_polarity(s as i64)).transpose(),
            LabelSource::Pseudo => Ok(review.pseudo_label),
            LabelSource::DerivedFromAspects if review.gold_aspects.is_empty() => Ok(None),
            LabelSource::DerivedFromAspects => derive_review_label(&review.gold_aspects).map(Some),
        }
    }

    /// Labels for every review, failing on the first one without a label.
    pub fn require_all<'a>(self, reviews: impl IntoIterator<Item = &'a Review>, source_name: &str) -> Result<Vec<Polarity>> {
        reviews
            .into_iter()
            .map(|r| {
                self.label(r)?.ok_or_else(|| DspnError::MissingLabel {
                    id: r.id.clone(),
                    source_name: source_name.to_string(),
                })
            })
            .collect()
    }
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelSource {
    type Err = DspnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stars" => Ok(LabelSource::Stars),
            "pseudo" => Ok(LabelSource::Pseudo),
            "derived_from_aspects" | "derived" => Ok(LabelSource::DerivedFromAspects),
            other => Err(DspnError::Config(format!(
                "unknown label source {other:?} (expected stars, pseudo or derived_from_aspects)"
            ))),
        }
    }
}

/// 1–2 stars negative, 3 neutral, 4–5 positive.
pub fn map_star_to_polarity(stars: i64) -> Result<Polarity> {
    match stars {
        1 | 2 => Ok(Polarity::Negative),
        3 => Ok(Polarity::Neutral),
        4 | 5 => Ok(Polarity::Positive),
        other => Err(DspnError::InvalidStars(other)),
    }
}

/// Review polarity from its aspect polarities: the mean of the −1/0/+1 scores,
/// positive above +1/3, negative below −1/3, neutral otherwise.
pub fn derive_review_label<'a, I>(aspects: I) -> Result<Polarity>
where
    I: IntoIterator<Item = &'a (String, Polarity)>,
{
    let (sum, count) = aspects
        .into_iter()
        .fold((0i64, 0i64), |(s, c), (_, p)| (s + p.score(), c + 1));
    if count == 0 {
        return Err(DspnError::NoAnnotations(
            "cannot derive a review label from zero aspects".into(),
        ));
    }
    // mean > 1/3  <=>  3·sum > count, kept in integers so the boundary is exact
    Ok(if 3 * sum > count {
        Polarity::Positive
    } else if 3 * sum < -count {
        Polarity::Negative
    } else {
        Polarity::Neutral
    })
}
