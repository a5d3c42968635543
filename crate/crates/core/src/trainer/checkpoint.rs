//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DSPNCKPT"                      8 bytes
//! version                         u32
//! tensor count                    u32
//! per tensor: name length u32, name bytes, ndim u32, dims u32 × ndim,
//!             values f64 × Π dims
//! text length u32, text bytes     canonical key=value block
//! checksum                        first 8 bytes of SHA-256 over everything above
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::RunConfig;
use crate::config::KvConfig;
use crate::corpus::{AspectSchema, Vocabulary};
use crate::encoder::PrecomputedEmbeddings;
use crate::error::{DspnError, Result};
use crate::gradkernel::{ParamSet, Shape, Tensor};
use crate::model::Dspn;

pub const CKPT_MAGIC: &[u8; 8] = b"DSPNCKPT";
pub const CKPT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 8;

const K_SCHEMA: &str = "schema.json";
const K_SCHEMA_FP: &str = "schema.fingerprint";
const K_VOCAB: &str = "vocab.tokens";
const K_VOCAB_MIN: &str = "vocab.min_count";
const K_VOCAB_FP: &str = "vocab.fingerprint";
const K_N_ASPECTS: &str = "model.n_aspects";
const K_EPOCH: &str = "state.epoch";
const K_LOSS: &str = "state.loss";
const K_LOSS_ACD: &str = "state.loss_acd";
const K_LOSS_RP: &str = "state.loss_rp";
const K_CORPUS: &str = "data.corpus";

/// Final losses and position of the saved parameters in the run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CheckpointState {
    pub epoch: usize,
    pub loss: f64,
    pub loss_acd: f64,
    pub loss_rp: f64,
}

/// Parameters plus everything needed to rebuild the model for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ParamSet,
    pub meta: KvConfig,
}

impl Checkpoint {
    pub fn new(
        model: &Dspn,
        run: &RunConfig,
        schema: &AspectSchema,
        vocab: &Vocabulary,
        state: CheckpointState,
        corpus_path: Option<&str>,
    ) -> Checkpoint {
        let mut meta = run.to_kv(false);
        meta.set(K_SCHEMA, serde_json::to_string(schema).expect("schema serializes"));
        meta.set(K_SCHEMA_FP, schema.fingerprint());
        meta.set(K_VOCAB, serde_json::to_string(vocab.tokens()).expect("tokens serialize"));
        meta.set(K_VOCAB_MIN, vocab.min_count());
        meta.set(K_VOCAB_FP, vocab.fingerprint());
        meta.set(K_N_ASPECTS, model.config.n_aspects);
        meta.set(K_EPOCH, state.epoch);
        meta.set(K_LOSS, state.loss);
        meta.set(K_LOSS_ACD, state.loss_acd);
        meta.set(K_LOSS_RP, state.loss_rp);
        if let Some(path) = corpus_path {
            meta.set(K_CORPUS, path);
        }
        let mut params = model.params.clone();
        params.zero_grad();
        Checkpoint {
            version: CKPT_VERSION,
            params,
            meta,
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let mut kv = KvConfig::new();
        for (k, v) in self.meta.iter().filter(|(k, _)| !k.contains('.')) {
            kv.set(k, v);
        }
        RunConfig::from_kv(&kv)
    }

    pub fn schema(&self) -> Result<AspectSchema> {
        let schema = AspectSchema::from_json(&self.meta.require::<String>(K_SCHEMA)?)?;
        let stored: String = self.meta.require(K_SCHEMA_FP)?;
        let computed = schema.fingerprint();
        if stored != computed {
            return Err(DspnError::FingerprintMismatch {
                what: "aspect schema",
                stored,
                computed,
            });
        }
        Ok(schema)
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        let tokens: Vec<String> = serde_json::from_str(&self.meta.require::<String>(K_VOCAB)?)
            .map_err(|e| DspnError::Config(format!("{K_VOCAB}: {e}")))?;
        let vocab = Vocabulary::from_tokens(tokens).with_min_count(self.meta.require(K_VOCAB_MIN)?);
        let stored: String = self.meta.require(K_VOCAB_FP)?;
        let computed = vocab.fingerprint();
        if stored != computed {
            return Err(DspnError::FingerprintMismatch {
                what: "vocabulary",
                stored,
                computed,
            });
        }
        Ok(vocab)
    }

    pub fn state(&self) -> Result<CheckpointState> {
        Ok(CheckpointState {
            epoch: self.meta.require(K_EPOCH)?,
            loss: self.meta.require(K_LOSS)?,
            loss_acd: self.meta.require(K_LOSS_ACD)?,
            loss_rp: self.meta.require(K_LOSS_RP)?,
        })
    }

    /// Path of the training corpus, when it was recorded.
    pub fn corpus_path(&self) -> Option<&str> {
        self.meta.get(K_CORPUS)
    }

    /// Rebuild the model. Precomputed-mode checkpoints need the embeddings.
    pub fn model(&self, precomputed: Option<Arc<PrecomputedEmbeddings>>) -> Result<Dspn> {
        let run = self.run_config()?;
        let vocab = self.vocab()?;
        let schema = self.schema()?;
        let n_aspects: usize = self.meta.require(K_N_ASPECTS)?;
        if n_aspects != schema.len() {
            return Err(DspnError::Config(format!(
                "checkpoint has {n_aspects} aspects but its schema lists {}",
                schema.len()
            )));
        }
        Dspn::from_params(run.model_config(n_aspects, vocab.len()), self.params.clone(), precomputed)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_u32(&mut out, self.params.len());
        for (name, tensor) in self.params.iter() {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            let dims = tensor.shape().dims();
            put_u32(&mut out, dims.len());
            for d in dims {
                put_u32(&mut out, d);
            }
            for v in tensor.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let text = self.meta.to_canonical();
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest[..CHECKSUM_LEN]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic").ok() != Some(&CKPT_MAGIC[..]) {
            return Err(DspnError::BadMagic("checkpoint"));
        }
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(DspnError::VersionMismatch {
                found: version,
                expected: CKPT_VERSION,
            });
        }
        let count = r.u32("tensor count")? as usize;
        let mut params = ParamSet::new();
        for i in 0..count {
            let what = format!("tensor {i}");
            let len = r.u32(&what)? as usize;
            let name = String::from_utf8(r.take(len, &what)?.to_vec())
                .map_err(|_| DspnError::Config(format!("{what}: name is not UTF-8")))?;
            let ndim = r.u32(&name)? as usize;
            let dims = (0..ndim).map(|_| r.u32(&name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let shape = Shape::from_dims(&dims)?;
            let raw = r.take(shape.len().checked_mul(8).ok_or_else(|| DspnError::Truncated(name.clone()))?, &name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if params.id(&name).is_some() {
                return Err(DspnError::Config(format!("duplicate tensor {name:?}")));
            }
            params.add(name, Tensor::new(shape, data)?);
        }
        let text_len = r.u32("config block")? as usize;
        let text = std::str::from_utf8(r.take(text_len, "config block")?)
            .map_err(|_| DspnError::Config("config block is not UTF-8".into()))?;
        let meta = KvConfig::parse(text)?;
        let body_end = r.pos;
        let checksum = r.take(CHECKSUM_LEN, "checksum")?;
        if r.pos != bytes.len() {
            return Err(DspnError::TrailingBytes(bytes.len() - r.pos));
        }
        if Sha256::digest(&bytes[..body_end])[..CHECKSUM_LEN] != *checksum {
            return Err(DspnError::Checksum);
        }
        Ok(Checkpoint { version, params, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| DspnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| DspnError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("length fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DspnError::Truncated(what.to_string())),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
