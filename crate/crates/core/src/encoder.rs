//! Text-to-vector encoders.
//!
//! Two kinds: a deterministic parameter-free hashing bag-of-words encoder
//! (tokenize, hash each token to a bucket, count, L2-normalize), and a
//! trainable encoder that feeds the same hashed features through a learned
//! linear projection. The hashing encoder is the test-suite default so the
//! whole pipeline runs without any model weights; it also serves, at its own
//! width, as the frozen reference encoder behind semantic similarity
//! weights, which must stay constant during training.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token cap for full-text inputs.
pub const DEFAULT_MAX_TOKENS_FULL: usize = 512;
/// Token cap for keyword-concatenation inputs.
pub const DEFAULT_MAX_TOKENS_KEYWORDS: usize = 48;
/// Floor for clamped cosine similarity; keeps degree-over-similarity
/// weights bounded.
pub const SIM_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    HashingBow,
    TrainableLm,
}

/// A text encoder handle: hashing bag-of-words or hashed features behind a
/// trainable linear projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub kind: EncoderKind,
    /// Output embedding width.
    pub dim: usize,
    /// Hash bucket count (equals `dim` for the plain hashing encoder).
    pub buckets: usize,
    pub max_tokens_full: usize,
    pub max_tokens_keywords: usize,
    /// `buckets x dim` projection; present only for the trainable kind.
    pub projection: Option<Array2<f64>>,
}

fn fnv1a64(token: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Lowercased alphanumeric tokens in order.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

impl Encoder {
    pub fn hashing_bow(dim: usize) -> Self {
        Encoder {
            kind: EncoderKind::HashingBow,
            dim,
            buckets: dim,
            max_tokens_full: DEFAULT_MAX_TOKENS_FULL,
            max_tokens_keywords: DEFAULT_MAX_TOKENS_KEYWORDS,
            projection: None,
        }
    }

    /// Trainable encoder: hashed token counts through a linear projection
    /// initialized uniform-Xavier under `seed`.
    pub fn trainable_lm(buckets: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (6.0 / (buckets + dim) as f64).sqrt();
        let projection =
            Array2::from_shape_fn((buckets, dim), |_| rng.gen_range(-scale..scale));
        Encoder {
            kind: EncoderKind::TrainableLm,
            dim,
            buckets,
            max_tokens_full: DEFAULT_MAX_TOKENS_FULL,
            max_tokens_keywords: DEFAULT_MAX_TOKENS_KEYWORDS,
            projection: Some(projection),
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == EncoderKind::TrainableLm
    }

    /// L2-normalized hashed token counts, truncated at `cap` tokens.
    /// Empty or whitespace-only text yields the zero vector.
    pub fn bow_features(&self, text: &str, cap: usize) -> Array1<f64> {
        let mut counts = Array1::zeros(self.buckets);
        let tokens = tokenize(text);
        if tokens.is_empty() {
            log::warn!("encoding empty text; returning zero vector");
            return counts;
        }
        for token in tokens.iter().take(cap) {
            let bucket = (fnv1a64(token) % self.buckets as u64) as usize;
            counts[bucket] += 1.0;
        }
        let norm = counts.dot(&counts).sqrt();
        if norm > 0.0 {
            counts.mapv_inplace(|c| c / norm);
        }
        counts
    }

    fn project(&self, features: Array1<f64>) -> Array1<f64> {
        match &self.projection {
            None => features,
            Some(p) => features.dot(p),
        }
    }

    /// Encodes a full text under the full-text token cap.
    pub fn encode_text(&self, text: &str) -> Array1<f64> {
        self.project(self.bow_features(text, self.max_tokens_full))
    }

    /// Encodes a keyword list by joining with single spaces under the
    /// keyword token cap. An empty list falls back to the raw text, so a
    /// failed keyword extraction never zeroes out a node's features.
    pub fn encode_keywords(&self, keywords: &[String], fallback_text: &str) -> Array1<f64> {
        if keywords.is_empty() {
            return self.encode_text(fallback_text);
        }
        let joined = keywords.join(" ");
        self.project(self.bow_features(&joined, self.max_tokens_keywords))
    }

    /// Raw (pre-projection) feature matrix for a batch of texts under the
    /// full-text cap; rows follow input order.
    pub fn feature_matrix(&self, texts: &[String]) -> Array2<f64> {
        let mut out = Array2::zeros((texts.len(), self.buckets));
        for (i, t) in texts.iter().enumerate() {
            out.row_mut(i).assign(&self.bow_features(t, self.max_tokens_full));
        }
        out
    }

    /// Like [`Encoder::feature_matrix`] but for keyword lists with raw-text
    /// fallback, under the keyword cap.
    pub fn keyword_feature_matrix(&self, items: &[(Vec<String>, String)]) -> Array2<f64> {
        let mut out = Array2::zeros((items.len(), self.buckets));
        for (i, (kws, fallback)) in items.iter().enumerate() {
            let row = if kws.is_empty() {
                self.bow_features(fallback, self.max_tokens_full)
            } else {
                self.bow_features(&kws.join(" "), self.max_tokens_keywords)
            };
            out.row_mut(i).assign(&row);
        }
        out
    }
}

/// Cosine similarity of `ref_enc` embeddings, clamped to `[SIM_FLOOR, 1]`.
/// `ref_enc` must be a frozen encoder so the value is constant over
/// training. Zero-vector inputs (empty texts) clamp to the floor.
pub fn text_similarity(ref_enc: &Encoder, a: &str, b: &str) -> f64 {
    let va = ref_enc.encode_text(a);
    let vb = ref_enc.encode_text(b);
    let na = va.dot(&va).sqrt();
    let nb = vb.dot(&vb).sqrt();
    let cos = if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        va.dot(&vb) / (na * nb)
    };
    cos.clamp(SIM_FLOOR, 1.0)
}

/// Where an embedding matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Raw,
    RationaleEnhanced,
}

/// Dense per-node embeddings at a named layer (layer 0 is the text
/// embedding; higher layers come from message passing).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub layer: u32,
    pub provenance: Provenance,
    pub data: Array2<f64>,
}

const EMBEDDING_MAGIC: &[u8; 4] = b"TDEM";
const EMBEDDING_VERSION: u32 = 1;

impl EmbeddingMatrix {
    pub fn new(layer: u32, provenance: Provenance, data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("embedding matrix at layer {layer}"),
            });
        }
        Ok(EmbeddingMatrix {
            layer,
            provenance,
            data,
        })
    }

    /// Binary export: magic, version, node count, dim, layer tag,
    /// provenance, then row-major little-endian f64 values.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(29 + self.data.len() * 8);
        buf.extend_from_slice(EMBEDDING_MAGIC);
        buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.data.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.data.ncols() as u64).to_le_bytes());
        buf.extend_from_slice(&self.layer.to_le_bytes());
        buf.push(match self.provenance {
            Provenance::Raw => 0,
            Provenance::RationaleEnhanced => 1,
        });
        for v in self.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f =
            fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let fail = |msg: &str| Error::Serde(format!("{}: {msg}", path.display()));
        if bytes.len() < 29 || &bytes[0..4] != EMBEDDING_MAGIC {
            return Err(fail("not an embedding matrix file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != EMBEDDING_VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let layer = u32::from_le_bytes(bytes[24..28].try_into().unwrap());
        let provenance = match bytes[28] {
            0 => Provenance::Raw,
            1 => Provenance::RationaleEnhanced,
            other => return Err(fail(&format!("unknown provenance tag {other}"))),
        };
        let expected = 29 + rows * cols * 8;
        if bytes.len() != expected {
            return Err(fail(&format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let mut data = Array2::zeros((rows, cols));
        for (i, chunk) in bytes[29..].chunks_exact(8).enumerate() {
            data[[i / cols.max(1), i % cols.max(1)]] =
                f64::from_le_bytes(chunk.try_into().unwrap());
        }
        EmbeddingMatrix::new(layer, provenance, data)
    }
}
