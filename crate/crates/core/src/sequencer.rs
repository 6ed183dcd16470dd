//! Documents as cluster-id token sequences.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::codebook::Codebook;
use crate::embedstore::SentenceEmbeddingSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type TokenId = u32;

/// Position budget for content plus BOS/EOS. A position table of 514 rows
/// holds these 512 slots plus two reserved indices.
pub const DEFAULT_MAX_POSITIONS: usize = 512;

/// Cluster ids `0..k` followed by four special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenVocabulary {
    pub k: usize,
}

impl TokenVocabulary {
    pub fn new(k: usize) -> Self {
        TokenVocabulary { k }
    }

    pub fn from_size(vocab_size: usize) -> Result<Self> {
        if vocab_size < 5 {
            return Err(Error::Config(format!("vocabulary size {vocab_size} leaves no cluster ids")));
        }
        Ok(TokenVocabulary { k: vocab_size - 4 })
    }

    pub fn pad(&self) -> TokenId {
        self.k as TokenId
    }

    pub fn bos(&self) -> TokenId {
        self.k as TokenId + 1
    }

    pub fn eos(&self) -> TokenId {
        self.k as TokenId + 2
    }

    pub fn mask(&self) -> TokenId {
        self.k as TokenId + 3
    }

    pub fn size(&self) -> usize {
        self.k + 4
    }

    pub fn is_cluster(&self, t: TokenId) -> bool {
        (t as usize) < self.k
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub book_id: String,
    pub tokens: Vec<TokenId>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `[BOS] ++ cluster ids ++ [EOS]`, keeping the first `max_positions - 2`
/// sentences of long documents.
pub fn encode_document<T: Scalar>(
    embeddings: &SentenceEmbeddingSet<T>,
    codebook: &Codebook<T>,
    max_positions: usize,
) -> Result<TokenSequence> {
    if embeddings.dim != codebook.dim {
        return Err(Error::Shape(format!(
            "embedding dim {} differs from codebook dim {}",
            embeddings.dim, codebook.dim
        )));
    }
    if embeddings.is_empty() {
        return Err(Error::EmptyDocument(embeddings.book_id.clone()));
    }
    if max_positions < 3 {
        return Err(Error::Config(format!(
            "max_positions {max_positions} leaves no room for content"
        )));
    }
    let vocab = TokenVocabulary::new(codebook.k);
    let mut tokens = Vec::with_capacity(embeddings.len().min(max_positions - 2) + 2);
    tokens.push(vocab.bos());
    for v in embeddings.vectors().take(max_positions - 2) {
        tokens.push(codebook.assign(v)? as TokenId);
    }
    tokens.push(vocab.eos());
    Ok(TokenSequence {
        book_id: embeddings.book_id.clone(),
        tokens,
    })
}

/// Right-padded token matrix with its attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub rows: usize,
    pub len: usize,
    /// `rows * len`, row-major.
    pub tokens: Vec<TokenId>,
    /// 1 on real tokens, 0 on padding.
    pub mask: Vec<u8>,
}

impl PaddedBatch {
    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.tokens[r * self.len..(r + 1) * self.len]
    }

    pub fn mask_row(&self, r: usize) -> &[u8] {
        &self.mask[r * self.len..(r + 1) * self.len]
    }
}

pub fn pad_batch(sequences: &[&TokenSequence], batch_length: usize, vocab: TokenVocabulary) -> Result<PaddedBatch> {
    let mut tokens = Vec::with_capacity(sequences.len() * batch_length);
    let mut mask = Vec::with_capacity(sequences.len() * batch_length);
    for seq in sequences {
        if seq.len() > batch_length {
            return Err(Error::Contract(format!(
                "sequence {} has length {} > batch length {batch_length}",
                seq.book_id,
                seq.len()
            )));
        }
        tokens.extend_from_slice(&seq.tokens);
        tokens.resize(tokens.len() + batch_length - seq.len(), vocab.pad());
        mask.resize(mask.len() + seq.len(), 1);
        mask.resize(mask.len() + batch_length - seq.len(), 0);
    }
    Ok(PaddedBatch {
        rows: sequences.len(),
        len: batch_length,
        tokens,
        mask,
    })
}

/// Pads to the longest member.
pub fn pad_to_longest(sequences: &[&TokenSequence], vocab: TokenVocabulary) -> Result<PaddedBatch> {
    let len = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
    pad_batch(sequences, len, vocab)
}

/// `book_id<TAB>space-separated ids`, one sequence per line.
pub fn format_sequences(sequences: &[TokenSequence]) -> String {
    let mut out = String::new();
    for s in sequences {
        out.push_str(&s.book_id);
        out.push('\t');
        for (i, t) in s.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{t}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_sequences(text: &str) -> Result<Vec<TokenSequence>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("line {}: missing tab", n + 1)))?;
            let tokens = rest
                .split(' ')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse().map_err(|_| Error::Format(format!("line {}: bad token {t:?}", n + 1))))
                .collect::<Result<Vec<TokenId>>>()?;
            Ok(TokenSequence {
                book_id: id.to_string(),
                tokens,
            })
        })
        .collect()
}

pub fn write_sequences(path: impl AsRef<Path>, sequences: &[TokenSequence]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_sequences(sequences)).map_err(|e| Error::io(path, e))
}

pub fn read_sequences(path: impl AsRef<Path>) -> Result<Vec<TokenSequence>> {
    let path = path.as_ref();
    parse_sequences(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
