//! Document vectors: pooled encoder states concatenated with the pooled
//! sentence embeddings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::SentenceEmbeddingSet;
use crate::encoder::{forward_row, EncoderModel};
use crate::error::{Error, Result};
use crate::scalar::{all_finite, Scalar};
use crate::sequencer::{TokenSequence, TokenVocabulary};

/// How final-layer states become one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean over cluster-token positions, BOS state when there are none.
    #[default]
    Mean,
    /// The BOS state alone.
    Bos,
}

/// Pools the final hidden states of `seq`.
pub fn encoder_docvec<T: Scalar>(model: &EncoderModel<T>, seq: &TokenSequence, pooling: Pooling) -> Result<Vec<T>> {
    let h = model.config().hidden_size;
    let vocab = TokenVocabulary::from_size(model.config().vocab_size)?;
    let trace = forward_row(model, &seq.tokens, &vec![1u8; seq.tokens.len()])?;
    let hidden = trace.hidden();
    let state = |p: usize| &hidden[p * h..(p + 1) * h];
    let bos = || {
        seq.tokens
            .iter()
            .position(|&t| t == vocab.bos())
            .ok_or_else(|| Error::Contract(format!("sequence {} has no BOS token", seq.book_id)))
    };
    let content: Vec<usize> = match pooling {
        Pooling::Bos => vec![],
        Pooling::Mean => (0..seq.tokens.len())
            .filter(|&p| {
                let t = seq.tokens[p];
                t != vocab.pad() && t != vocab.bos() && t != vocab.eos()
            })
            .collect(),
    };
    if content.is_empty() {
        return Ok(state(bos()?).to_vec());
    }
    let mut out = vec![T::zero(); h];
    for &p in &content {
        out.iter_mut().zip(state(p)).for_each(|(o, &x)| *o += x);
    }
    let n = T::from_usize_lossy(content.len());
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Component-wise mean of a document's sentence vectors.
pub fn sentence_docvec<T: Scalar>(set: &SentenceEmbeddingSet<T>) -> Result<Vec<T>> {
    if set.is_empty() {
        return Err(Error::EmptyDocument(set.book_id.clone()));
    }
    let mut out = vec![T::zero(); set.dim];
    for v in set.vectors() {
        out.iter_mut().zip(v).for_each(|(o, &x)| *o += x);
    }
    let n = T::from_usize_lossy(set.len());
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// `encoder part ++ sentence part`.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentEmbedding<T> {
    pub book_id: String,
    encoder_dim: usize,
    vector: Vec<T>,
}

impl<T: Scalar> DocumentEmbedding<T> {
    pub fn vector(&self) -> &[T] {
        &self.vector
    }

    pub fn encoder_part(&self) -> &[T] {
        &self.vector[..self.encoder_dim]
    }

    pub fn sentence_part(&self) -> &[T] {
        &self.vector[self.encoder_dim..]
    }

    pub fn split(&self) -> (&[T], &[T]) {
        self.vector.split_at(self.encoder_dim)
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// One-vector record for the embedding container.
    pub fn to_set(&self) -> Result<SentenceEmbeddingSet<T>> {
        SentenceEmbeddingSet::new(self.book_id.clone(), self.vector.len(), self.vector.clone())
    }
}

pub fn compose<T: Scalar>(book_id: impl Into<String>, encoder_part: &[T], sentence_part: &[T]) -> Result<DocumentEmbedding<T>> {
    let book_id = book_id.into();
    for (name, part) in [("encoder part", encoder_part), ("sentence part", sentence_part)] {
        if !all_finite(part) {
            return Err(Error::NonFinite {
                tensor: name.into(),
                detail: format!("document {book_id}"),
            });
        }
    }
    let mut vector = Vec::with_capacity(encoder_part.len() + sentence_part.len());
    vector.extend_from_slice(encoder_part);
    vector.extend_from_slice(sentence_part);
    Ok(DocumentEmbedding {
        book_id,
        encoder_dim: encoder_part.len(),
        vector,
    })
}

/// Document embeddings for aligned sequences and sentence sets, computed in
/// parallel; output order follows the input.
pub fn embed_documents<T: Scalar>(
    model: &EncoderModel<T>,
    sequences: &[TokenSequence],
    sentences: &[SentenceEmbeddingSet<T>],
    pooling: Pooling,
) -> Result<Vec<DocumentEmbedding<T>>> {
    if sequences.len() != sentences.len() {
        return Err(Error::Contract(format!(
            "{} sequences but {} sentence sets",
            sequences.len(),
            sentences.len()
        )));
    }
    sequences
        .par_iter()
        .zip(sentences)
        .map(|(seq, set)| {
            if seq.book_id != set.book_id {
                return Err(Error::Contract(format!(
                    "sequence {} paired with sentences of {}",
                    seq.book_id, set.book_id
                )));
            }
            compose(&seq.book_id, &encoder_docvec(model, seq, pooling)?, &sentence_docvec(set)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use proptest::prelude::*;

    fn model() -> EncoderModel<f64> {
        let cfg = EncoderConfig {
            vocab_size: 10,
            hidden_size: 4,
            n_layers: 1,
            n_heads: 2,
            ffn_size: 8,
            max_positions: 8,
            dropout: 0.0,
            seed: 1,
        };
        EncoderModel::init(&cfg).unwrap()
    }

    fn seq(tokens: Vec<u32>) -> TokenSequence {
        TokenSequence { book_id: "b".into(), tokens }
    }

    #[test]
    fn single_content_token_is_its_state() {
        let m = model();
        // k = 6: BOS 7, EOS 8
        let s = seq(vec![7, 3, 8]);
        let trace = forward_row(&m, &s.tokens, &[1, 1, 1]).unwrap();
        assert_eq!(encoder_docvec(&m, &s, Pooling::Mean).unwrap(), trace.hidden()[4..8]);
        assert_eq!(encoder_docvec(&m, &s, Pooling::Bos).unwrap(), trace.hidden()[0..4]);
    }

    #[test]
    fn mean_over_content_positions() {
        let m = model();
        let s = seq(vec![7, 3, 1, 5, 8]);
        let trace = forward_row(&m, &s.tokens, &[1; 5]).unwrap();
        let got = encoder_docvec(&m, &s, Pooling::Mean).unwrap();
        for j in 0..4 {
            let want = (trace.hidden()[4 + j] + trace.hidden()[8 + j] + trace.hidden()[12 + j]) / 3.0;
            assert!((got[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_document_falls_back_to_bos() {
        let m = model();
        let s = seq(vec![7, 8]);
        let trace = forward_row(&m, &s.tokens, &[1, 1]).unwrap();
        assert_eq!(encoder_docvec(&m, &s, Pooling::Mean).unwrap(), trace.hidden()[0..4]);
    }

    #[test]
    fn bad_tokens_are_rejected() {
        let m = model();
        assert!(matches!(encoder_docvec(&m, &seq(vec![7, 42, 8]), Pooling::Mean), Err(Error::Contract(_))));
        assert!(encoder_docvec(&m, &seq(vec![7; 9]), Pooling::Mean).is_err());
    }

    #[test]
    fn sentence_mean_cases() {
        let one = SentenceEmbeddingSet::from_rows("a", &[vec![0.5f64, -1.0]]).unwrap();
        assert_eq!(sentence_docvec(&one).unwrap(), vec![0.5, -1.0]);
        let pair = SentenceEmbeddingSet::from_rows("a", &[vec![0.3f64, -2.0], vec![-0.3, 2.0]]).unwrap();
        assert_eq!(sentence_docvec(&pair).unwrap(), vec![0.0, 0.0]);
        let empty = SentenceEmbeddingSet::<f64>::new("e", 3, vec![]).unwrap();
        assert!(matches!(sentence_docvec(&empty), Err(Error::EmptyDocument(_))));
    }

    #[test]
    fn compose_and_split() {
        let d = compose("x", &[1.0f32, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0]).unwrap();
        assert_eq!(d.vector(), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(d.split(), (&[1.0f32, 2.0, 3.0, 4.0][..], &[5.0f32, 6.0, 7.0][..]));
        assert!(compose("x", &[f32::NAN], &[1.0]).is_err());
        let z = compose("z", &[0.0f32; 4], &[1.0]).unwrap();
        assert!(z.encoder_part().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn composed_length_and_round_trip(a in prop::collection::vec(-10.0f64..10.0, 1..20),
                                          b in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let d = compose("p", &a, &b).unwrap();
            prop_assert_eq!(d.dim(), a.len() + b.len());
            prop_assert_eq!(d.encoder_part(), &a[..]);
            prop_assert_eq!(d.sentence_part(), &b[..]);
        }

        #[test]
        fn sentence_mean_is_permutation_invariant_and_linear(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..8),
            c in 0.1f64..10.0,
        ) {
            let set = SentenceEmbeddingSet::from_rows("p", &rows).unwrap();
            let base = sentence_docvec(&set).unwrap();
            let mut rev = rows.clone();
            rev.reverse();
            let r = sentence_docvec(&SentenceEmbeddingSet::from_rows("p", &rev).unwrap()).unwrap();
            let scaled: Vec<Vec<f64>> = rows.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
            let s = sentence_docvec(&SentenceEmbeddingSet::from_rows("p", &scaled).unwrap()).unwrap();
            for j in 0..3 {
                prop_assert!((base[j] - r[j]).abs() < 1e-12);
                prop_assert!((s[j] - c * base[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encoder_pooling_depends_on_order() {
        let m = model();
        let a = encoder_docvec(&m, &seq(vec![7, 1, 2, 3, 8]), Pooling::Mean).unwrap();
        let b = encoder_docvec(&m, &seq(vec![7, 3, 2, 1, 8]), Pooling::Mean).unwrap();
        assert_ne!(a, b);
    }
}
