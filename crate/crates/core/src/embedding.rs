//! Sequence embeddings: a feature-hashing embedder and a text file format for
//! vectors produced offline by an external encoder.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{MoceError, Result};
use crate::rng::{mix64, stable_hash};

pub const DEFAULT_EMBED_DIM: usize = 64;

const FILE_MAGIC: &str = "MOCE-EMB";
const FILE_VERSION: &str = "v1";

/// Unit-norm vector representing one input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEmbedding {
    vector: Vec<f64>,
    source_id: String,
}

impl SequenceEmbedding {
    /// Normalizes `vector` to unit length.
    pub fn new(source_id: impl Into<String>, mut vector: Vec<f64>) -> Result<Self> {
        if vector.is_empty() {
            return Err(MoceError::shape("embedding of dimension 0"));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(MoceError::numeric("non-finite embedding value"));
        }
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(MoceError::numeric(
                "zero embedding vector cannot be normalized",
            ));
        }
        vector.iter_mut().for_each(|v| *v /= norm);
        Ok(Self {
            vector,
            source_id: source_id.into(),
        })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn cosine(&self, other: &SequenceEmbedding) -> f64 {
        self.vector
            .iter()
            .zip(&other.vector)
            .map(|(a, b)| a * b)
            .sum()
    }
}

impl AsRef<[f64]> for SequenceEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.vector
    }
}

/// Ordered embeddings sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    embeddings: Vec<SequenceEmbedding>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, embeddings: Vec<SequenceEmbedding>) -> Result<Self> {
        if dim == 0 {
            return Err(MoceError::shape("embedding dimension 0"));
        }
        if let Some((i, e)) = embeddings.iter().enumerate().find(|(_, e)| e.dim() != dim) {
            return Err(MoceError::shape(format!(
                "embedding {i} has dimension {}, expected {dim}",
                e.dim()
            )));
        }
        Ok(Self { dim, embeddings })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn embeddings(&self) -> &[SequenceEmbedding] {
        &self.embeddings
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SequenceEmbedding> {
        self.embeddings.iter()
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("{FILE_MAGIC} {FILE_VERSION} {} {}\n", self.len(), self.dim);
        for e in &self.embeddings {
            out.push_str(e.source_id());
            for v in e.vector() {
                // 32-bit storage; Display prints the shortest string that round-trips the f32
                write!(out, " {}", *v as f32).expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(e) = self
            .embeddings
            .iter()
            .find(|e| e.source_id().is_empty() || e.source_id().contains(char::is_whitespace))
        {
            return Err(MoceError::format(
                "embedding file",
                format!(
                    "source id {:?} is empty or contains whitespace",
                    e.source_id()
                ),
            ));
        }
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| MoceError::io(path, e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ctx = "embedding file";
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| MoceError::format(ctx, "missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (count, dim) = match fields.as_slice() {
            [magic, version, count, dim] if *magic == FILE_MAGIC && *version == FILE_VERSION => {
                let count: usize = count
                    .parse()
                    .map_err(|_| MoceError::format(ctx, format!("bad count {count:?}")))?;
                let dim: usize = dim
                    .parse()
                    .map_err(|_| MoceError::format(ctx, format!("bad dimension {dim:?}")))?;
                (count, dim)
            }
            _ => {
                return Err(MoceError::format(
                    ctx,
                    format!(
                    "expected header '{FILE_MAGIC} {FILE_VERSION} <count> <dim>', got {header:?}"
                ),
                ))
            }
        };
        let mut embeddings = Vec::with_capacity(count);
        for (row, line) in lines.enumerate() {
            if row >= count {
                return Err(MoceError::format(ctx, format!("more than {count} rows")));
            }
            let mut parts = line.split_whitespace();
            let id = parts.next().expect("non-empty line");
            let values = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| MoceError::format(ctx, format!("row {row}: bad value {p:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != dim {
                return Err(MoceError::format(
                    ctx,
                    format!("row {row}: expected {dim} values, found {}", values.len()),
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(MoceError::numeric(format!("row {row}: non-finite value")));
            }
            embeddings.push(SequenceEmbedding::new(id, values).map_err(|e| match e {
                MoceError::Numeric(m) => MoceError::numeric(format!("row {row}: {m}")),
                other => other,
            })?);
        }
        if embeddings.len() != count {
            return Err(MoceError::format(
                ctx,
                format!("header promises {count} rows, found {}", embeddings.len()),
            ));
        }
        Self::new(dim, embeddings)
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MoceError::io(path, e))?;
    EmbeddingSet::parse(&text)
}

const UNIGRAM_DOMAIN: u64 = 0x5547_5241_4d00_0001;
const BIGRAM_DOMAIN: u64 = 0x4247_5241_4d00_0002;

fn feature_key(seed: u64, domain: u64, a: u32, b: u32) -> u64 {
    mix64(mix64(seed ^ domain) ^ (u64::from(a) << 32 | u64::from(b)))
}

/// Feature-hashing sequence embedder.
///
/// Every unigram and adjacent bigram is hashed to one of `dim` buckets with a
/// ±1 sign; the bucket vector is mean-pooled over the features and L2-normalized.
/// A sequence of `T` tokens has `2T − 1` features, an odd count, so the pooled
/// vector can never cancel to zero.
pub fn embed_sequence(tokens: &[u32], dim: usize, seed: u64) -> Result<SequenceEmbedding> {
    if tokens.is_empty() {
        return Err(MoceError::contract("cannot embed an empty token sequence"));
    }
    if dim == 0 {
        return Err(MoceError::contract("embedding dimension must be positive"));
    }
    let mut acc = vec![0.0; dim];
    let mut add = |key: u64| {
        let bucket = (key % dim as u64) as usize;
        acc[bucket] += if key >> 63 == 0 { 1.0 } else { -1.0 };
    };
    for &t in tokens {
        add(feature_key(seed, UNIGRAM_DOMAIN, t, 0));
    }
    for w in tokens.windows(2) {
        add(feature_key(seed, BIGRAM_DOMAIN, w[0], w[1]));
    }
    let features = (2 * tokens.len() - 1) as f64;
    acc.iter_mut().for_each(|v| *v /= features);
    let id = format!("seq-{:016x}", {
        let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
        stable_hash(&bytes)
    });
    SequenceEmbedding::new(id, acc)
}

/// Whitespace word tokens hashed to vocabulary-free ids. Case-sensitive.
pub fn text_tokens(text: &str) -> Vec<u32> {
    text.split_whitespace()
        .map(|w| stable_hash(w.as_bytes()) as u32)
        .collect()
}

pub fn embed_text(text: &str, dim: usize, seed: u64) -> Result<SequenceEmbedding> {
    embed_sequence(&text_tokens(text), dim, seed)
}
