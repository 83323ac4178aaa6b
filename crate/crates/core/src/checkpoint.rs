//! Checkpoint bundles: named parameter tensors, optimizer moments, iteration
//! counter, RNG position and a configuration fingerprint.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container;
use crate::error::{Error, Result};
use crate::optim::MomentTable;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCCK";

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// u128 word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::format(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::format("rng seed must be 32 bytes"))?;
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::format(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// SHA-256 over the canonical JSON of the given values.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// SHA-256 of a file's bytes, for provenance records.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// "concepts" or "policy".
    pub kind: String,
    pub fingerprint: String,
    /// Number of completed iterations.
    pub iteration: usize,
    /// Free-form configuration needed to rebuild the model.
    pub config: serde_json::Value,
    pub rng: Option<RngState>,
    pub params: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub moments: Option<MomentTable>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    fingerprint: String,
    iteration: usize,
    config: serde_json::Value,
    rng: Option<RngState>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<u64>,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq)]
#[serde(rename_all = "lowercase")]
enum Role {
    Param,
    M,
    V,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: &str, role, shape: Vec<usize>, data: &[f32], step| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                role,
                shape,
                offset: payload.len(),
                step,
            });
            payload.extend_from_slice(data);
        };
        for (name, (shape, data)) in &self.params {
            push(name, Role::Param, shape.clone(), data, None);
        }
        if let Some(moments) = &self.moments {
            for (name, (m, v, step)) in moments {
                push(name, Role::M, vec![m.len()], m, Some(*step));
                push(name, Role::V, vec![v.len()], v, None);
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            fingerprint: self.fingerprint.clone(),
            iteration: self.iteration,
            config: self.config.clone(),
            rng: self.rng.clone(),
            tensors,
        };
        container::encode(CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode::<Header>(CHECKPOINT_MAGIC, bytes)?;
        let h = c.header;
        let mut params = BTreeMap::new();
        let mut moments: MomentTable = BTreeMap::new();
        for e in &h.tensors {
            let n: usize = e.shape.iter().product();
            let data = c
                .payload
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::format(format!("tensor {} out of range", e.name)))?
                .to_vec();
            match e.role {
                Role::Param => {
                    params.insert(e.name.clone(), (e.shape.clone(), data));
                }
                Role::M => {
                    let entry = moments.entry(e.name.clone()).or_default();
                    entry.0 = data;
                    entry.2 = e.step.unwrap_or(0);
                }
                Role::V => moments.entry(e.name.clone()).or_default().1 = data,
            }
        }
        Ok(Self {
            kind: h.kind,
            fingerprint: h.fingerprint,
            iteration: h.iteration,
            config: h.config,
            rng: h.rng,
            params,
            moments: (!moments.is_empty()).then_some(moments),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        if self.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected: expected.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn check_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::validation(format!(
                "checkpoint holds a {} model, expected {kind}",
                self.kind
            )));
        }
        Ok(())
    }
}
