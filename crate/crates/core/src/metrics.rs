//! Scores for the three tasks: aspect detection F1, aspect sentiment
//! accuracy and review rating accuracy.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{budget_subsample, AspectSchema, Corpus, LabelSource, Polarity};
use crate::error::{DspnError, Result};
use crate::model::Dspn;

/// Confusion counts, rows gold and columns predicted, classes in
/// negative/neutral/positive order.
pub type Confusion = [[usize; 3]; 3];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl DetectionCounts {
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        let p = self.tp as f64 / (self.tp + self.fp) as f64;
        let r = self.tp as f64 / (self.tp + self.fn_) as f64;
        2.0 * p * r / (p + r)
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(DspnError::LengthMismatch(a, b));
    }
    Ok(())
}

/// Per-review aspect sets are compared as sets; duplicates are ignored.
pub fn detection_counts(predicted: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<DetectionCounts> {
    check_lengths(predicted.len(), gold.len())?;
    let mut c = DetectionCounts::default();
    for (p, g) in predicted.iter().zip(gold) {
        let p: BTreeSet<_> = p.iter().collect();
        let g: BTreeSet<_> = g.iter().collect();
        let tp = p.intersection(&g).count();
        c.tp += tp;
        c.fp += p.len() - tp;
        c.fn_ += g.len() - tp;
    }
    Ok(c)
}

/// Micro-averaged F1 over all (review, aspect) decisions; 0 when nothing is
/// correctly detected.
pub fn acd_f1(predicted: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    Ok(detection_counts(predicted, gold)?.f1())
}

/// Mean of per-aspect F1 over aspects `0..n_aspects`.
pub fn acd_macro_f1(predicted: &[Vec<usize>], gold: &[Vec<usize>], n_aspects: usize) -> Result<f64> {
    check_lengths(predicted.len(), gold.len())?;
    if n_aspects == 0 {
        return Err(DspnError::Empty("aspects"));
    }
    let total: f64 = (0..n_aspects)
        .map(|k| {
            let keep = |v: &Vec<usize>| if v.contains(&k) { vec![k] } else { Vec::new() };
            let p: Vec<_> = predicted.iter().map(keep).collect();
            let g: Vec<_> = gold.iter().map(keep).collect();
            detection_counts(&p, &g).map(|c| c.f1())
        })
        .sum::<Result<f64>>()?;
    Ok(total / n_aspects as f64)
}

/// Accuracy over pairs that carry a gold polarity; `None` entries (aspects
/// absent from the review) are skipped.
pub fn acsa_accuracy(predicted: &[Polarity], gold: &[Option<Polarity>]) -> Result<f64> {
    check_lengths(predicted.len(), gold.len())?;
    let (correct, total) = predicted
        .iter()
        .zip(gold)
        .filter_map(|(p, g)| g.map(|g| (*p == g) as usize))
        .fold((0, 0), |(c, t), hit| (c + hit, t + 1));
    if total == 0 {
        return Err(DspnError::NoAnnotations("no gold aspect polarities to score".into()));
    }
    Ok(correct as f64 / total as f64)
}

pub fn rp_accuracy(predicted: &[Polarity], gold: &[Polarity]) -> Result<f64> {
    check_lengths(predicted.len(), gold.len())?;
    if gold.is_empty() {
        return Err(DspnError::Empty("rating predictions"));
    }
    let correct = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / gold.len() as f64)
}

pub fn confusion(predicted: &[Polarity], gold: &[Polarity]) -> Result<Confusion> {
    check_lengths(predicted.len(), gold.len())?;
    if gold.is_empty() {
        return Err(DspnError::Empty("rating predictions"));
    }
    let mut m = [[0; 3]; 3];
    for (p, g) in predicted.iter().zip(gold) {
        m[g.index()][p.index()] += 1;
    }
    Ok(m)
}

/// Share of the most frequent class.
pub fn majority_baseline(gold: &[Polarity]) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let mut counts = [0usize; 3];
    gold.iter().for_each(|g| counts[g.index()] += 1);
    Some(*counts.iter().max().unwrap() as f64 / gold.len() as f64)
}

/// Which aspects sentiment accuracy is computed over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcsaScope {
    /// Every gold-annotated aspect, whether detected or not.
    #[default]
    Gold,
    /// Gold-annotated aspects that were also detected.
    Detected,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub label_source: LabelSource,
    pub acsa_scope: AcsaScope,
    pub macro_f1: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            label_source: LabelSource::Stars,
            acsa_scope: AcsaScope::Gold,
            macro_f1: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub negative: usize,
    pub neutral: usize,
    pub positive: usize,
}

impl LabelCounts {
    fn tally(labels: &[Polarity]) -> Self {
        let mut c = [0usize; 3];
        labels.iter().for_each(|l| c[l.index()] += 1);
        LabelCounts {
            negative: c[0],
            neutral: c[1],
            positive: c[2],
        }
    }
}

/// Everything `eval` reports. Metrics whose gold data is missing are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reviews: usize,
    pub f1_acd: Option<f64>,
    /// "micro" or "macro".
    pub f1_acd_average: String,
    pub acd_threshold: f64,
    pub acc_acsa: Option<f64>,
    pub acsa_scope: AcsaScope,
    pub acsa_pairs: usize,
    pub acsa_majority: Option<f64>,
    pub acc_rp: Option<f64>,
    pub rp_majority: Option<f64>,
    pub confusion: Option<Confusion>,
    pub label_source: String,
    pub label_counts: LabelCounts,
    pub aspect_label_counts: LabelCounts,
    /// Aspect labels kept for ACSA scoring, when a budget was applied.
    pub label_budget: Option<usize>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "reviews            {}", self.reviews)?;
        writeln!(
            f,
            "ACD F1 ({})     {}  (threshold {:e})",
            self.f1_acd_average,
            opt(self.f1_acd),
            self.acd_threshold
        )?;
        writeln!(
            f,
            "ACSA accuracy      {}  ({} pairs, {} aspects, majority {})",
            opt(self.acc_acsa),
            self.acsa_pairs,
            match self.acsa_scope {
                AcsaScope::Gold => "gold",
                AcsaScope::Detected => "detected",
            },
            opt(self.acsa_majority)
        )?;
        writeln!(
            f,
            "RP accuracy        {}  (labels from {}, majority {})",
            opt(self.acc_rp),
            self.label_source,
            opt(self.rp_majority)
        )?;
        let c = &self.label_counts;
        writeln!(f, "review labels      neg {} / neu {} / pos {}", c.negative, c.neutral, c.positive)?;
        let c = &self.aspect_label_counts;
        writeln!(f, "aspect labels      neg {} / neu {} / pos {}", c.negative, c.neutral, c.positive)?;
        if let Some(b) = self.label_budget {
            writeln!(f, "label budget       {b} aspect labels scored for ACSA")?;
        }
        if let Some(m) = &self.confusion {
            writeln!(f, "confusion (rows gold, cols predicted)")?;
            writeln!(f, "            neg    neu    pos")?;
            for (name, row) in ["neg", "neu", "pos"].iter().zip(m) {
                writeln!(f, "  {name:<6} {:>6} {:>6} {:>6}", row[0], row[1], row[2])?;
            }
        }
        Ok(())
    }
}

/// Runs the model over `corpus` and scores all three tasks.
pub fn evaluate(model: &Dspn, corpus: &Corpus, schema: &AspectSchema, opts: &EvalOptions) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(DspnError::Empty("evaluation corpus"));
    }
    let mut det_pred = Vec::new();
    let mut det_gold = Vec::new();
    let mut acsa_pred = Vec::new();
    let mut acsa_gold = Vec::new();
    let mut rp_pred = Vec::new();
    let mut rp_gold = Vec::new();

    for review in &corpus.reviews {
        let out = model.forward(review)?;
        let mut gold_idx = Vec::with_capacity(review.gold_aspects.len());
        for (name, pol) in &review.gold_aspects {
            let k = schema.index_of(name).ok_or_else(|| {
                DspnError::InvalidSchema(format!("review {} mentions unknown aspect {name:?}", review.id))
            })?;
            gold_idx.push(k);
            if opts.acsa_scope == AcsaScope::Gold || out.detected.contains(&k) {
                acsa_pred.push(out.aspect_polarity(k));
                acsa_gold.push(Some(*pol));
            }
        }
        if !review.gold_aspects.is_empty() {
            det_pred.push(out.detected.clone());
            det_gold.push(gold_idx);
        }
        if let Some(label) = opts.label_source.label(review)? {
            rp_pred.push(out.predicted_class());
            rp_gold.push(label);
        }
    }

    let f1_acd = if det_gold.is_empty() {
        None
    } else if opts.macro_f1 {
        Some(acd_macro_f1(&det_pred, &det_gold, schema.len())?)
    } else {
        Some(acd_f1(&det_pred, &det_gold)?)
    };
    let acsa_gold_flat: Vec<Polarity> = acsa_gold.iter().flatten().copied().collect();
    let acc_acsa = if acsa_gold.is_empty() {
        None
    } else {
        Some(acsa_accuracy(&acsa_pred, &acsa_gold)?)
    };
    let all_aspect_labels: Vec<Polarity> = corpus
        .reviews
        .iter()
        .flat_map(|r| r.gold_aspects.iter().map(|(_, p)| *p))
        .collect();
    let (acc_rp, confusion_m) = if rp_gold.is_empty() {
        (None, None)
    } else {
        (Some(rp_accuracy(&rp_pred, &rp_gold)?), Some(confusion(&rp_pred, &rp_gold)?))
    };
    Ok(EvalReport {
        reviews: corpus.len(),
        f1_acd,
        f1_acd_average: if opts.macro_f1 { "macro" } else { "micro" }.to_string(),
        acd_threshold: model.config.acd_threshold,
        acc_acsa,
        acsa_scope: opts.acsa_scope,
        acsa_pairs: acsa_gold.len(),
        acsa_majority: majority_baseline(&acsa_gold_flat),
        acc_rp,
        rp_majority: majority_baseline(&rp_gold),
        confusion: confusion_m,
        label_source: opts.label_source.to_string(),
        label_counts: LabelCounts::tally(&rp_gold),
        aspect_label_counts: LabelCounts::tally(&all_aspect_labels),
        label_budget: None,
    })
}

/// [`evaluate`] with ACSA scored only on a seeded subsample of `label_budget`
/// gold aspect labels. Detection and rating metrics use every label.
pub fn evaluate_with_budget(
    model: &Dspn,
    corpus: &Corpus,
    schema: &AspectSchema,
    opts: &EvalOptions,
    label_budget: usize,
    seed: u64,
) -> Result<EvalReport> {
    let full = evaluate(model, corpus, schema, opts)?;
    let kept = evaluate(model, &budget_subsample(corpus, label_budget, seed)?, schema, opts)?;
    Ok(EvalReport {
        acc_acsa: kept.acc_acsa,
        acsa_pairs: kept.acsa_pairs,
        acsa_majority: kept.acsa_majority,
        aspect_label_counts: kept.aspect_label_counts,
        label_budget: Some(label_budget),
        ..full
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Polarity::*;

    #[test]
    fn f1_cases() {
        let gold = vec![vec![0, 1], vec![0]];
        assert_eq!(acd_f1(&gold, &gold).unwrap(), 1.0);
        assert_eq!(acd_f1(&[vec![2], vec![1]], &gold).unwrap(), 0.0);
        let pred = vec![vec![0], vec![0, 1]];
        let c = detection_counts(&pred, &gold).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (2, 1, 1));
        assert!((acd_f1(&pred, &gold).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(acd_f1(&pred, &gold[..1]), Err(DspnError::LengthMismatch(2, 1))));
        assert_eq!(acd_f1(&[vec![]], &[vec![]]).unwrap(), 0.0);
    }

    #[test]
    fn macro_f1_averages_aspects() {
        let gold = vec![vec![0], vec![1]];
        let pred = vec![vec![0], vec![0]];
        // aspect 0: tp 1, fp 1 -> 2/3; aspect 1: 0
        assert!((acd_macro_f1(&pred, &gold, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn acsa_cases() {
        assert_eq!(acsa_accuracy(&[Positive, Negative], &[Some(Positive), Some(Negative)]).unwrap(), 1.0);
        let pred = [Positive, Negative, Neutral, Positive];
        let gold = [Some(Positive), Some(Negative), Some(Neutral), Some(Negative)];
        assert_eq!(acsa_accuracy(&pred, &gold).unwrap(), 0.75);
        let pred = [Positive, Negative, Neutral, Neutral, Positive];
        let gold = [Some(Positive), None, Some(Neutral), None, None];
        assert_eq!(acsa_accuracy(&pred, &gold).unwrap(), 1.0);
        assert!(acsa_accuracy(&[Positive], &[None]).is_err());
    }

    #[test]
    fn rp_cases() {
        let gold = [Negative, Neutral, Positive, Positive];
        assert_eq!(rp_accuracy(&gold, &gold).unwrap(), 1.0);
        let m = confusion(&gold, &gold).unwrap();
        assert_eq!(m, [[1, 0, 0], [0, 1, 0], [0, 0, 2]]);
        let balanced = [Negative, Neutral, Positive];
        assert!((rp_accuracy(&[Neutral; 3], &balanced).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(rp_accuracy(&[], &[]).is_err());
        assert!(confusion(&[], &[]).is_err());
    }

    #[test]
    fn tally_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| Polarity::ALL[rng.gen_range(0..3)];
        let pred: Vec<_> = (0..20).map(|_| draw(&mut rng)).collect();
        let gold: Vec<_> = (0..20).map(|_| draw(&mut rng)).collect();
        let mut hits = 0;
        let mut table = vec![vec![0; 3]; 3];
        for i in 0..20 {
            if pred[i] == gold[i] {
                hits += 1;
            }
            table[gold[i].index()][pred[i].index()] += 1;
        }
        assert_eq!(rp_accuracy(&pred, &gold).unwrap(), hits as f64 / 20.0);
        let m = confusion(&pred, &gold).unwrap();
        for g in 0..3 {
            assert_eq!(m[g].to_vec(), table[g]);
        }
    }

    fn polarity() -> impl Strategy<Value = Polarity> {
        (0usize..3).prop_map(|i| Polarity::ALL[i])
    }

    proptest! {
        #[test]
        fn rp_metrics_are_consistent(pairs in prop::collection::vec((polarity(), polarity()), 1..40), rot in 0usize..40) {
            let (pred, gold): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let acc = rp_accuracy(&pred, &gold).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            let m = confusion(&pred, &gold).unwrap();
            let trace: usize = (0..3).map(|i| m[i][i]).sum();
            let total: usize = m.iter().flatten().sum();
            prop_assert_eq!(total, pred.len());
            prop_assert_eq!(trace as f64 / total as f64, acc);

            let mut rotated = pairs.clone();
            let len = rotated.len();
            rotated.rotate_left(rot % len);
            let (rp, rg): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
            prop_assert_eq!(rp_accuracy(&rp, &rg).unwrap(), acc);
        }

        #[test]
        fn f1_is_one_iff_sets_match(
            sets in prop::collection::vec(
                (prop::collection::btree_set(0usize..4, 0..4), prop::collection::btree_set(0usize..4, 0..4)),
                1..12,
            ),
        ) {
            let pred: Vec<Vec<usize>> = sets.iter().map(|(p, _)| p.iter().copied().collect()).collect();
            let gold: Vec<Vec<usize>> = sets.iter().map(|(_, g)| g.iter().copied().collect()).collect();
            let f1 = acd_f1(&pred, &gold).unwrap();
            prop_assert!((0.0..=1.0).contains(&f1));
            let equal = sets.iter().all(|(p, g)| p == g);
            let any_gold = gold.iter().any(|g| !g.is_empty());
            if any_gold {
                prop_assert_eq!(f1 == 1.0, equal);
            }
            let mut rev_p = pred.clone();
            let mut rev_g = gold.clone();
            rev_p.reverse();
            rev_g.reverse();
            prop_assert_eq!(acd_f1(&rev_p, &rev_g).unwrap(), f1);
        }
    }
}
