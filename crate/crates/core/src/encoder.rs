//! Sentence embedding `z` and per-token hidden states `H` for a review, either
//! from a trainable embedding table (mean-pooled bag of embeddings) or from
//! precomputed contextual embeddings in the `DSPNEMB1` binary format.
//!
//! Format, little-endian:
//!
//! ```text
//! magic "DSPNEMB1" (8 bytes)
//! u32 d_w
//! u32 record count
//! per record: u32 id length, id bytes (UTF-8), u32 n,
//!             f32 × d_w   z
//!             f32 × n·d_w H, row-major
//! ```
//!
//! Trailing bytes after the last record are rejected. Aspect seed-sentence
//! embeddings are stored as ordinary records with id `aspect:<name>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::corpus::{AspectSchema, Review, Vocabulary};
use crate::error::{DspnError, Result};
use crate::gradkernel::{l2_norm, Shape, Tensor};

pub const EMB_MAGIC: &[u8; 8] = b"DSPNEMB1";
pub const ASPECT_ID_PREFIX: &str = "aspect:";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    Trainable,
    Precomputed,
}

impl EncoderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderMode::Trainable => "trainable",
            EncoderMode::Precomputed => "precomputed",
        }
    }
}

impl std::fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EncoderMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "trainable" => Ok(EncoderMode::Trainable),
            "precomputed" => Ok(EncoderMode::Precomputed),
            other => Err(format!("unknown encoder mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub d_w: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    pub const DEFAULT_TRAINABLE_DIM: usize = 32;
    pub const DEFAULT_PRECOMPUTED_DIM: usize = 768;

    pub fn validate(&self) -> Result<()> {
        if self.d_w < 2 {
            return Err(DspnError::Config(format!("d_w must be >= 2, got {}", self.d_w)));
        }
        Ok(())
    }
}

/// `h` is n×d_w with row j the hidden state of token j; `z` has length d_w.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedReview {
    pub z: Vec<f64>,
    pub h: Tensor,
}

impl EncodedReview {
    pub fn n(&self) -> usize {
        self.h.rows()
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// Uniform in [−0.1, 0.1].
pub fn init_embedding_table<R: Rng>(vocab_size: usize, d_w: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn(Shape::Matrix(vocab_size, d_w), |_| rng.gen_range(-0.1..=0.1))
}

/// Bag-of-embeddings encoding: `H` rows are the token embeddings, `z` their mean.
pub fn encode_tokens(tokens: &[usize], table: &Tensor) -> Result<EncodedReview> {
    if tokens.is_empty() {
        return Err(DspnError::Empty("review has no tokens"));
    }
    let (size, d) = (table.rows(), table.cols());
    let mut h = Tensor::zeros(Shape::Matrix(tokens.len(), d));
    let mut z = vec![0.0; d];
    for (j, &t) in tokens.iter().enumerate() {
        if t >= size {
            return Err(DspnError::TokenOutOfRange { id: t, size });
        }
        let row = table.row(t);
        h.row_mut(j).copy_from_slice(row);
        for (zc, v) in z.iter_mut().zip(row) {
            *zc += v;
        }
    }
    let n = tokens.len() as f64;
    z.iter_mut().for_each(|v| *v /= n);
    Ok(EncodedReview { z, h })
}

/// Read-only map from review id to precomputed encodings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecomputedEmbeddings {
    d_w: usize,
    order: Vec<String>,
    records: HashMap<String, EncodedReview>,
}

impl PrecomputedEmbeddings {
    pub fn new(d_w: usize) -> Self {
        PrecomputedEmbeddings {
            d_w,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, enc: EncodedReview) -> Result<()> {
        if enc.dim() != self.d_w || enc.h.cols() != self.d_w {
            return Err(DspnError::DimensionMismatch {
                file: enc.dim(),
                expected: self.d_w,
            });
        }
        let id = id.into();
        if self.records.insert(id.clone(), enc).is_none() {
            self.order.push(id);
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.d_w
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EncodedReview> {
        self.records.get(id)
    }

    pub fn encode(&self, review: &Review) -> Result<EncodedReview> {
        self.get(&review.id)
            .cloned()
            .ok_or_else(|| DspnError::UnknownReview(review.id.clone()))
    }

    /// Records in insertion (file) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &EncodedReview)> {
        self.order
            .iter()
            .map(move |id| (id.as_str(), &self.records[id]))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&(self.d_w as u32).to_le_bytes());
        out.extend_from_slice(&(self.order.len() as u32).to_le_bytes());
        for (id, enc) in self.iter() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(enc.n() as u32).to_le_bytes());
            for v in enc.z.iter().chain(enc.h.as_slice()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parse a `DSPNEMB1` buffer; with `expected_dim`, the header must match it.
    pub fn from_bytes(bytes: &[u8], expected_dim: Option<usize>) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(8, "header")? != EMB_MAGIC {
            return Err(DspnError::BadMagic("embedding file"));
        }
        let d_w = r.u32("header")? as usize;
        let count = r.u32("header")? as usize;
        if let Some(expected) = expected_dim {
            if expected != d_w {
                return Err(DspnError::DimensionMismatch { file: d_w, expected });
            }
        }
        let mut out = PrecomputedEmbeddings::new(d_w);
        for i in 0..count {
            let what = || format!("embedding record {i}");
            let id_len = r.u32(&what())? as usize;
            let id = std::str::from_utf8(r.take(id_len, &what())?)
                .map_err(|_| DspnError::Truncated(format!("{}: id is not UTF-8", what())))?
                .to_string();
            let n = r.u32(&what())? as usize;
            let z = r.f32s(d_w, &what())?;
            let h = Tensor::matrix(n, d_w, r.f32s(n * d_w, &what())?)?;
            out.insert(id, EncodedReview { z, h })?;
        }
        if r.pos != bytes.len() {
            return Err(DspnError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(out)
    }
}

pub fn load_precomputed(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<PrecomputedEmbeddings> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DspnError::io(path, e))?;
    PrecomputedEmbeddings::from_bytes(&bytes, expected_dim)
}

pub fn save_precomputed(emb: &PrecomputedEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, emb.to_bytes()).map_err(|e| DspnError::io(path, e))
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| DspnError::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| DspnError::Truncated(what.into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Where initial aspect embeddings come from.
pub enum AspectSeedSource<'a> {
    /// Mean of the seed keywords' rows in the embedding table.
    Table {
        vocab: &'a Vocabulary,
        table: &'a Tensor,
    },
    /// The stored `aspect:<name>` seed-sentence embedding.
    Precomputed(&'a PrecomputedEmbeddings),
}

/// N×d_w aspect matrix, one L2-normalized row per aspect.
pub fn init_aspect_matrix(schema: &AspectSchema, source: AspectSeedSource<'_>) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = match source {
        AspectSeedSource::Table { vocab, table } => {
            let missing: Vec<String> = schema
                .aspects
                .iter()
                .flat_map(|a| &a.seeds)
                .filter(|s| vocab.lookup(s).is_none())
                .cloned()
                .collect();
            if !missing.is_empty() {
                return Err(DspnError::MissingSeeds(missing));
            }
            schema
                .aspects
                .iter()
                .map(|a| {
                    let ids: Vec<usize> = a.seeds.iter().map(|s| vocab.id(s)).collect();
                    encode_tokens(&ids, table).map(|e| e.z)
                })
                .collect::<Result<_>>()?
        }
        AspectSeedSource::Precomputed(emb) => {
            let missing: Vec<String> = schema
                .names()
                .map(|n| format!("{ASPECT_ID_PREFIX}{n}"))
                .filter(|id| emb.get(id).is_none())
                .collect();
            if !missing.is_empty() {
                return Err(DspnError::MissingSeeds(missing));
            }
            schema
                .names()
                .map(|n| emb.get(&format!("{ASPECT_ID_PREFIX}{n}")).unwrap().z.clone())
                .collect()
        }
    };
    let d = rows.first().map_or(0, Vec::len);
    let mut t = Tensor::zeros(Shape::Matrix(rows.len(), d));
    for (k, row) in rows.iter().enumerate() {
        let norm = l2_norm(row);
        if norm == 0.0 {
            return Err(DspnError::ZeroRow { row: k });
        }
        for (dst, v) in t.row_mut(k).iter_mut().zip(row) {
            *dst = v / norm;
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AspectSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn single_token_z_is_its_row() {
        let t = table(&[&[1.0, 2.0], &[3.0, -4.0]]);
        let e = encode_tokens(&[1], &t).unwrap();
        assert_eq!(e.z, vec![3.0, -4.0]);
        let e = encode_tokens(&[0, 1], &t).unwrap();
        assert_eq!(e.z, vec![2.0, -1.0]);
        assert_eq!(e.n(), 2);
    }

    #[test]
    fn z_matches_column_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = init_embedding_table(10, 6, &mut rng);
        let toks = [3, 7, 7, 0, 9];
        let e = encode_tokens(&toks, &t).unwrap();
        for c in 0..6 {
            let mut s = 0.0;
            for &tk in &toks {
                s += t.get(tk, c);
            }
            assert!((e.z[c] - s / 5.0).abs() < 1e-12);
        }
        assert!(t.as_slice().iter().all(|v| (-0.1..=0.1).contains(v)));
    }

    #[test]
    fn out_of_range_token() {
        let t = table(&[&[1.0, 2.0]]);
        assert!(matches!(
            encode_tokens(&[1], &t),
            Err(DspnError::TokenOutOfRange { id: 1, size: 1 })
        ));
    }

    fn schema(seeds: &[&[&str]]) -> AspectSchema {
        AspectSchema::new(
            seeds
                .iter()
                .enumerate()
                .map(|(i, s)| AspectSpec {
                    name: format!("a{i}"),
                    seeds: s.iter().map(|x| x.to_string()).collect(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn aspect_rows_are_normalized_seed_means() {
        let vocab = Vocabulary::from_tokens(["food", "dish", "meal", "staff"].map(String::from));
        let t = table(&[
            &[0.0, 0.0, 0.0],
            &[0.0, 0.0, 0.0],
            &[3.0, 4.0, 0.0],
            &[1.0, 0.0, 2.0],
            &[0.5, -1.0, 1.0],
            &[0.0, 2.0, 0.0],
        ]);
        let s = schema(&[&["food", "dish", "meal"], &["staff"], &["food"]]);
        let m = init_aspect_matrix(&s, AspectSeedSource::Table { vocab: &vocab, table: &t }).unwrap();
        let mean: [f64; 3] = [(3.0 + 1.0 + 0.5) / 3.0, (4.0 - 1.0) / 3.0, (2.0 + 1.0) / 3.0];
        let norm = (mean[0] * mean[0] + mean[1] * mean[1] + mean[2] * mean[2]).sqrt();
        for c in 0..3 {
            assert!((m.get(0, c) - mean[c] / norm).abs() < 1e-12);
        }
        assert_eq!(m.row(1), &[0.0, 1.0, 0.0]);
        assert!((m.get(2, 0) - 0.6).abs() < 1e-15 && (m.get(2, 1) - 0.8).abs() < 1e-15);
        for k in 0..3 {
            assert!((l2_norm(m.row(k)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_seed_lists_word() {
        let vocab = Vocabulary::from_tokens(["food".to_string()]);
        let t = table(&[&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let s = schema(&[&["food"], &["staff", "waiter"]]);
        match init_aspect_matrix(&s, AspectSeedSource::Table { vocab: &vocab, table: &t }) {
            Err(DspnError::MissingSeeds(w)) => assert_eq!(w, vec!["staff", "waiter"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn sample_file() -> PrecomputedEmbeddings {
        let mut emb = PrecomputedEmbeddings::new(3);
        emb.insert(
            "r1",
            EncodedReview {
                z: vec![0.5, -1.0, 2.0],
                h: Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            },
        )
        .unwrap();
        emb.insert(
            "r2",
            EncodedReview {
                z: vec![0.25, 0.0, 1.0],
                h: Tensor::matrix(1, 3, vec![0.0, 0.0, -1.0]).unwrap(),
            },
        )
        .unwrap();
        emb
    }

    #[test]
    fn binary_round_trip() {
        let emb = sample_file();
        let bytes = emb.to_bytes();
        let back = PrecomputedEmbeddings::from_bytes(&bytes, Some(3)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back, emb);
        assert_eq!(back.iter().map(|(id, _)| id).collect::<Vec<_>>(), ["r1", "r2"]);
    }

    #[test]
    fn header_only_file_is_empty() {
        let bytes = PrecomputedEmbeddings::new(768).to_bytes();
        assert_eq!(bytes.len(), 16);
        assert!(PrecomputedEmbeddings::from_bytes(&bytes, None).unwrap().is_empty());
    }

    #[test]
    fn format_errors_are_distinct() {
        let mut bytes = sample_file().to_bytes();
        assert!(matches!(
            PrecomputedEmbeddings::from_bytes(&bytes, Some(32)),
            Err(DspnError::DimensionMismatch { file: 3, expected: 32 })
        ));
        let truncated = &bytes[..bytes.len() - 2];
        assert!(matches!(
            PrecomputedEmbeddings::from_bytes(truncated, None),
            Err(DspnError::Truncated(_))
        ));
        bytes.push(0);
        assert!(matches!(
            PrecomputedEmbeddings::from_bytes(&bytes, None),
            Err(DspnError::TrailingBytes(1))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            PrecomputedEmbeddings::from_bytes(&bytes, None),
            Err(DspnError::BadMagic(_))
        ));
    }

    #[test]
    fn precomputed_lookup_and_aspect_seeds() {
        let mut emb = sample_file();
        assert!(matches!(
            emb.encode(&Review {
                id: "nope".into(),
                words: vec![],
                tokens: vec![],
                stars: None,
                gold_aspects: vec![],
                pseudo_label: None,
            }),
            Err(DspnError::UnknownReview(_))
        ));
        let s = schema(&[&["x"], &["y"]]);
        assert!(init_aspect_matrix(&s, AspectSeedSource::Precomputed(&emb)).is_err());
        emb.insert(
            "aspect:a0",
            EncodedReview { z: vec![0.0, 3.0, 4.0], h: Tensor::matrix(1, 3, vec![0.0; 3]).unwrap() },
        )
        .unwrap();
        emb.insert(
            "aspect:a1",
            EncodedReview { z: vec![2.0, 0.0, 0.0], h: Tensor::matrix(1, 3, vec![0.0; 3]).unwrap() },
        )
        .unwrap();
        let t = init_aspect_matrix(&s, AspectSeedSource::Precomputed(&emb)).unwrap();
        assert_eq!(t.row(1), &[1.0, 0.0, 0.0]);
        assert!((t.get(0, 2) - 0.8).abs() < 1e-15);
    }
}
