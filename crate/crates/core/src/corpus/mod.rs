//! Review corpora: the line-delimited record format, tokenization, vocabulary,
//! label mapping and the aspect schema.

mod labels;
mod stats;
mod subsample;
pub mod synth;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DspnError, Result};

pub use labels::{derive_review_label, map_star_to_polarity, LabelSource};
pub use stats::{corpus_stats, corpus_stats_for_splits, CorpusStats, PolarityCounts};
pub use subsample::{budget_subsample, LabelBudget};

pub const DEFAULT_MAX_LEN: usize = 100;
pub const DEFAULT_MIN_COUNT: usize = 2;

/// Three-way sentiment class. Class order is `[negative, neutral, positive]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative,
    Neutral,
    Positive,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Negative, Polarity::Neutral, Polarity::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Polarity> {
        Self::ALL.get(i).copied()
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }

    /// −1, 0 or +1.
    pub fn score(self) -> i64 {
        self.index() as i64 - 1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
            Polarity::Positive => "positive",
        }
    }

    /// Index of the largest entry; ties go to the lower class index.
    pub fn argmax(probs: &[f64]) -> Polarity {
        let mut best = 0;
        for (i, &v) in probs.iter().enumerate().take(3) {
            if v > probs[best] {
                best = i;
            }
        }
        Polarity::ALL[best]
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "negative" => Ok(Polarity::Negative),
            "neutral" => Ok(Polarity::Neutral),
            "positive" => Ok(Polarity::Positive),
            other => Err(other.to_string()),
        }
    }
}

/// Lowercase, turn every character that is neither alphanumeric nor
/// whitespace into a separator, then split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    min_count: usize,
}

impl Vocabulary {
    pub const UNK: usize = 0;
    pub const PAD: usize = 1;
    pub const UNK_TOKEN: &'static str = "<unk>";
    pub const PAD_TOKEN: &'static str = "<pad>";

    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// frequency then lexicographically.
    pub fn build<'a, I, S>(sequences: I, min_count: usize) -> Vocabulary
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in sequences {
            for tok in seq {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && t != Self::UNK_TOKEN && t != Self::PAD_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut vocab = Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()));
        vocab.min_count = min_count;
        vocab
    }

    /// Rebuild from the non-special tokens in id order (ids start at 2).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Vocabulary {
        let mut id_to_token = vec![Self::UNK_TOKEN.to_string(), Self::PAD_TOKEN.to_string()];
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
            min_count: DEFAULT_MIN_COUNT,
        }
    }

    pub fn with_min_count(mut self, min_count: usize) -> Self {
        self.min_count = min_count;
        self
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 2
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Id of `token`, or `UNK`.
    pub fn id(&self, token: &str) -> usize {
        self.lookup(token).unwrap_or(Self::UNK)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[2..]
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex_prefix(&h.finalize())
    }
}

pub(crate) fn hex_prefix(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Review {
    pub id: String,
    /// Surface tokens after truncation; `tokens[j]` is the id of `words[j]`.
    pub words: Vec<String>,
    pub tokens: Vec<usize>,
    pub stars: Option<u8>,
    pub gold_aspects: Vec<(String, Polarity)>,
    pub pseudo_label: Option<Polarity>,
}

impl Review {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn gold_polarity(&self, aspect: &str) -> Option<Polarity> {
        self.gold_aspects
            .iter()
            .find(|(name, _)| name == aspect)
            .map(|(_, p)| *p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub reviews: Vec<Review>,
    pub vocab: Vocabulary,
    pub max_len: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.reviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }

    pub fn aspect_label_count(&self) -> usize {
        self.reviews.iter().map(|r| r.gold_aspects.len()).sum()
    }

    pub fn find(&self, id: &str) -> Option<&Review> {
        self.reviews.iter().find(|r| r.id == id)
    }

    /// Split off the reviews at the given positions, preserving order in both halves.
    pub fn partition(&self, held_out: &HashSet<usize>) -> (Corpus, Corpus) {
        let mut keep = Vec::new();
        let mut out = Vec::new();
        for (i, r) in self.reviews.iter().enumerate() {
            if held_out.contains(&i) {
                out.push(r.clone());
            } else {
                keep.push(r.clone());
            }
        }
        (self.with_reviews(keep), self.with_reviews(out))
    }

    pub fn with_reviews(&self, reviews: Vec<Review>) -> Corpus {
        Corpus {
            reviews,
            vocab: self.vocab.clone(),
            max_len: self.max_len,
        }
    }
}

/// Where `load_corpus` gets its vocabulary from.
#[derive(Clone, Debug)]
pub enum VocabSource<'a> {
    Build { min_count: usize },
    Existing(&'a Vocabulary),
}

#[derive(Serialize, Deserialize)]
struct AspectRecord {
    name: String,
    polarity: String,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stars: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aspects: Option<Vec<AspectRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pseudo_label: Option<String>,
}

struct RawReview {
    id: String,
    words: Vec<String>,
    stars: Option<u8>,
    gold_aspects: Vec<(String, Polarity)>,
    pseudo_label: Option<Polarity>,
}

fn parse_record(line: &str, lineno: usize, max_len: usize) -> Result<RawReview> {
    let rec: Record = serde_json::from_str(line).map_err(|e| DspnError::MalformedRecord {
        line: lineno,
        reason: e.to_string(),
    })?;
    let stars = match rec.stars {
        None => None,
        Some(s) if (1..=5).contains(&s) => Some(s as u8),
        Some(_) => return Err(DspnError::StarsOutOfRange { line: lineno }),
    };
    let parse_pol = |s: &str| {
        s.parse::<Polarity>()
            .map_err(|value| DspnError::UnknownPolarity { line: lineno, value })
    };
    let mut gold_aspects = Vec::new();
    for a in rec.aspects.unwrap_or_default() {
        if gold_aspects.iter().any(|(n, _)| *n == a.name) {
            return Err(DspnError::MalformedRecord {
                line: lineno,
                reason: format!("aspect {:?} annotated twice", a.name),
            });
        }
        gold_aspects.push((a.name, parse_pol(&a.polarity)?));
    }
    let pseudo_label = rec.pseudo_label.as_deref().map(parse_pol).transpose()?;
    let mut words = tokenize(&rec.text);
    if words.is_empty() {
        return Err(DspnError::MalformedRecord {
            line: lineno,
            reason: "text has no tokens".into(),
        });
    }
    words.truncate(max_len);
    Ok(RawReview {
        id: rec.id,
        words,
        stars,
        gold_aspects,
        pseudo_label,
    })
}

/// Parse line-delimited records. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus(text: &str, vocab: VocabSource<'_>, max_len: usize) -> Result<Corpus> {
    let mut raws = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        raws.push(parse_record(line, i + 1, max_len)?);
    }
    Ok(assemble(raws, vocab, max_len))
}

pub fn load_corpus(path: impl AsRef<Path>, vocab: VocabSource<'_>, max_len: usize) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| DspnError::io(path, e))?;
    let mut raws = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DspnError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        raws.push(parse_record(&line, i + 1, max_len)?);
    }
    Ok(assemble(raws, vocab, max_len))
}

fn assemble(raws: Vec<RawReview>, vocab: VocabSource<'_>, max_len: usize) -> Corpus {
    let vocab = match vocab {
        VocabSource::Existing(v) => v.clone(),
        VocabSource::Build { min_count } => {
            Vocabulary::build(raws.iter().map(|r| r.words.as_slice()), min_count)
        }
    };
    let reviews = raws
        .into_iter()
        .map(|r| Review {
            tokens: r.words.iter().map(|w| vocab.id(w)).collect(),
            id: r.id,
            words: r.words,
            stars: r.stars,
            gold_aspects: r.gold_aspects,
            pseudo_label: r.pseudo_label,
        })
        .collect();
    Corpus {
        reviews,
        vocab,
        max_len,
    }
}

fn review_record(r: &Review) -> Record {
    Record {
        id: r.id.clone(),
        text: r.words.join(" "),
        stars: r.stars.map(i64::from),
        aspects: if r.gold_aspects.is_empty() {
            None
        } else {
            Some(
                r.gold_aspects
                    .iter()
                    .map(|(name, p)| AspectRecord {
                        name: name.clone(),
                        polarity: p.as_str().to_string(),
                    })
                    .collect(),
            )
        },
        pseudo_label: r.pseudo_label.map(|p| p.as_str().to_string()),
    }
}

pub fn write_corpus_to<W: Write>(reviews: &[Review], mut out: W) -> std::io::Result<()> {
    for r in reviews {
        serde_json::to_writer(&mut out, &review_record(r))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_corpus(reviews: &[Review], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| DspnError::io(path, e))?;
    write_corpus_to(reviews, BufWriter::new(file)).map_err(|e| DspnError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectSpec {
    pub name: String,
    pub seeds: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectSchema {
    pub aspects: Vec<AspectSpec>,
}

impl AspectSchema {
    pub fn new(aspects: Vec<AspectSpec>) -> Result<Self> {
        let schema = AspectSchema { aspects };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.aspects.len() < 2 {
            return Err(DspnError::InvalidSchema(format!(
                "need at least 2 aspects, got {}",
                self.aspects.len()
            )));
        }
        let mut seen = HashSet::new();
        for a in &self.aspects {
            if !seen.insert(a.name.as_str()) {
                return Err(DspnError::InvalidSchema(format!("duplicate aspect {:?}", a.name)));
            }
            if a.seeds.is_empty() {
                return Err(DspnError::InvalidSchema(format!("aspect {:?} has no seeds", a.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.aspects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aspects.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.aspects.iter().map(|a| a.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.aspects.iter().position(|a| a.name == name)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.aspects {
            h.update(a.name.as_bytes());
            h.update([0u8]);
            for s in &a.seeds {
                h.update(s.as_bytes());
                h.update([1u8]);
            }
            h.update([2u8]);
        }
        hex_prefix(&h.finalize())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: AspectSchema = serde_json::from_str(text)
            .map_err(|e| DspnError::InvalidSchema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DspnError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("schema serializes");
        fs::write(path, text + "\n").map_err(|e| DspnError::io(path, e))
    }
}
