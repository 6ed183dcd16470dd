//! Sentence-embedding container ("SEMB") and a deterministic synthetic
//! sentence embedder.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SEMB" | version u32 | dim u32 | record count u64 |
//!   per record: id length u32 | id UTF-8 | sentence count u32 | count*dim f32
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::scalar::{all_finite, Scalar};

pub const MAGIC: &[u8; 4] = b"SEMB";
pub const VERSION: u32 = 1;

/// Noise scale applied to per-sentence vectors in genre-correlated mode.
pub const DEFAULT_GENRE_NOISE: f64 = 0.1;

/// Ordered sentence vectors of one document, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbeddingSet<T> {
    pub book_id: String,
    pub dim: usize,
    values: Vec<T>,
}

impl<T: Scalar> SentenceEmbeddingSet<T> {
    pub fn new(book_id: impl Into<String>, dim: usize, values: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        if !values.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} values do not divide into rows of {dim}",
                values.len()
            )));
        }
        if !all_finite(&values) {
            return Err(Error::Format("embedding contains a non-finite value".into()));
        }
        Ok(SentenceEmbeddingSet {
            book_id: book_id.into(),
            dim,
            values,
        })
    }

    pub fn from_rows(book_id: impl Into<String>, rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("sentence vectors have differing dimensions".into()));
        }
        Self::new(book_id, dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[T] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> impl ExactSizeIterator<Item = &[T]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

pub fn encode_embeddings<T: Scalar>(sets: &[SentenceEmbeddingSet<T>]) -> Result<Vec<u8>> {
    let dim = sets.first().map(|s| s.dim).unwrap_or(0);
    if let Some(bad) = sets.iter().find(|s| s.dim != dim) {
        return Err(Error::Format(format!(
            "record {} has dim {} but the file dim is {dim}",
            bad.book_id, bad.dim
        )));
    }
    let payload: usize = sets.iter().map(|s| 8 + s.book_id.len() + 4 * s.values.len()).sum();
    let mut out = Vec::with_capacity(20 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(dim, "dim")?.to_le_bytes());
    out.extend_from_slice(&(sets.len() as u64).to_le_bytes());
    for set in sets {
        out.extend_from_slice(&u32_len(set.book_id.len(), "book id length")?.to_le_bytes());
        out.extend_from_slice(set.book_id.as_bytes());
        out.extend_from_slice(&u32_len(set.len(), "sentence count")?.to_le_bytes());
        for v in &set.values {
            let x = v.as_f32();
            if !x.is_finite() {
                return Err(Error::Format(format!("non-finite value in record {}", set.book_id)));
            }
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

/// Little-endian cursor that reports the offset of the first short read.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Truncated {
                offset: self.pos as u64,
                message: format!(
                    "need {n} bytes for {what}, {} available",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn i64(&mut self, what: &str) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s<T: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let bytes = self.take(n.saturating_mul(4), what)?;
        bytes
            .chunks_exact(4)
            .map(|b| {
                let x = f32::from_le_bytes(b.try_into().unwrap());
                if x.is_finite() {
                    Ok(T::lit(x as f64))
                } else {
                    Err(Error::Format(format!("non-finite value in {what}")))
                }
            })
            .collect()
    }

    pub(crate) fn string(&mut self, n: usize, what: &str) -> Result<String> {
        let offset = self.pos;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Format(format!("{what} at byte offset {offset} is not UTF-8")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{} trailing bytes after byte offset {}",
                self.bytes.len() - self.pos,
                self.pos
            )))
        }
    }
}

pub(crate) fn check_magic(r: &mut Reader<'_>, magic: &[u8; 4], version: u32) -> Result<()> {
    let found = r.take(4, "magic")?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = r.u32("version")?;
    if v != version {
        return Err(Error::Format(format!("unsupported version {v}, expected {version}")));
    }
    Ok(())
}

pub fn decode_embeddings<T: Scalar>(bytes: &[u8]) -> Result<Vec<SentenceEmbeddingSet<T>>> {
    let mut r = Reader::new(bytes);
    check_magic(&mut r, MAGIC, VERSION)?;
    let dim = r.u32("dim")? as usize;
    let count = r.u64("record count")?;
    if count > 0 && dim == 0 {
        return Err(Error::Format("records present but dim is 0".into()));
    }
    let mut sets = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let id_len = r.u32("book id length")? as usize;
        let book_id = r.string(id_len, "book id")?;
        let n = r.u32("sentence count")? as usize;
        let values = r.f32s(n * dim, "sentence vectors")?;
        sets.push(SentenceEmbeddingSet { book_id, dim, values });
    }
    r.finish()?;
    Ok(sets)
}

pub fn write_embeddings<T: Scalar>(sets: &[SentenceEmbeddingSet<T>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_embeddings(sets)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<SentenceEmbeddingSet<T>>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

/// Header facts reported by [`validate_embeddings`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingFileSummary {
    pub dim: usize,
    pub records: usize,
    pub sentences: usize,
}

/// Full structural check of an embeddings file.
pub fn validate_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingFileSummary> {
    let sets: Vec<SentenceEmbeddingSet<f32>> = read_embeddings(path)?;
    Ok(EmbeddingFileSummary {
        dim: sets.first().map(|s| s.dim).unwrap_or(0),
        records: sets.len(),
        sentences: sets.iter().map(|s| s.len()).sum(),
    })
}

/// Deterministic unit-norm stand-in for a sentence encoder.
///
/// SHA-256 over `seed` (u64 LE) followed by the UTF-8 sentence gives a 32-byte
/// ChaCha8 seed; `dim` standard normals are drawn in `f64` and scaled to unit
/// L2 norm.
pub fn synthetic_embed<T: Scalar>(sentence: &str, dim: usize, seed: u64) -> Vec<T> {
    let raw = normal_draws(sentence, dim, seed);
    normalize_f64(&raw).into_iter().map(T::lit).collect()
}

fn normal_draws(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn normalize_f64(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

/// Unit vector shared by every sentence of a genre in correlated mode.
pub fn genre_direction(genre_key: &str, dim: usize, seed: u64) -> Vec<f64> {
    normalize_f64(&normal_draws(&format!("genre:{genre_key}"), dim, seed))
}

#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticMode {
    /// Each sentence embeds independently.
    Plain,
    /// Sentences of a genre share a direction plus per-sentence noise of the
    /// given scale, renormalized.
    GenreCorrelated { noise: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEmbedder {
    pub dim: usize,
    pub seed: u64,
    pub mode: SyntheticMode,
}

impl SyntheticEmbedder {
    pub fn plain(dim: usize, seed: u64) -> Self {
        SyntheticEmbedder {
            dim,
            seed,
            mode: SyntheticMode::Plain,
        }
    }

    pub fn genre_correlated(dim: usize, seed: u64) -> Self {
        SyntheticEmbedder {
            dim,
            seed,
            mode: SyntheticMode::GenreCorrelated {
                noise: DEFAULT_GENRE_NOISE,
            },
        }
    }

    /// Embeds one sentence. `genre_key` is ignored in plain mode; in
    /// correlated mode a missing key falls back to plain embedding.
    pub fn embed<T: Scalar>(&self, sentence: &str, genre_key: Option<&str>) -> Vec<T> {
        match (&self.mode, genre_key) {
            (SyntheticMode::GenreCorrelated { noise }, Some(key)) => {
                let base = genre_direction(key, self.dim, self.seed);
                let jitter = normalize_f64(&normal_draws(sentence, self.dim, self.seed));
                let mixed: Vec<f64> = base.iter().zip(&jitter).map(|(b, j)| b + noise * j).collect();
                normalize_f64(&mixed).into_iter().map(T::lit).collect()
            }
            _ => synthetic_embed(sentence, self.dim, self.seed),
        }
    }

    pub fn embed_document<T: Scalar>(&self, doc: &Document, genre_key: Option<&str>) -> SentenceEmbeddingSet<T> {
        let values = doc
            .sentences
            .iter()
            .flat_map(|s| self.embed::<T>(s, genre_key))
            .collect();
        SentenceEmbeddingSet {
            book_id: doc.book_id.clone(),
            dim: self.dim,
            values,
        }
    }
}
