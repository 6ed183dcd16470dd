use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sequencer::{PaddedBatch, TokenId, TokenVocabulary};

/// Mean cross-entropy over the positions where `counted` is nonzero.
///
/// `logits` is `positions * vocab`; `targets` and `counted` have one entry per
/// position.
pub fn reconstruction_loss<T: Scalar>(logits: &[T], vocab: usize, targets: &[TokenId], counted: &[u8]) -> Result<T> {
    let (sum, n) = cross_entropy_sum(logits, vocab, targets, counted, None)?;
    Ok(sum / T::from_usize_lossy(n))
}

/// Sum of per-position cross-entropies and the number of counted positions.
/// When `grad` is given, writes `∂(sum / normalizer) / ∂logits` into it.
pub(crate) fn cross_entropy_sum<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[TokenId],
    counted: &[u8],
    grad: Option<(&mut [T], T)>,
) -> Result<(T, usize)> {
    if logits.len() != targets.len() * vocab || counted.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} positions over vocab {vocab}",
            logits.len(),
            targets.len()
        )));
    }
    let n = counted.iter().filter(|&&c| c != 0).count();
    if n == 0 {
        return Err(Error::Contract("no position contributes to the loss (all padding)".into()));
    }
    let mut total = T::zero();
    let mut grad = grad;
    for (p, (&target, &c)) in targets.iter().zip(counted).enumerate() {
        let row = &logits[p * vocab..(p + 1) * vocab];
        if c == 0 {
            continue;
        }
        let t = target as usize;
        if t >= vocab {
            return Err(Error::Contract(format!("target {t} outside vocabulary {vocab}")));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum_exp: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[t];
        if let Some((g, normalizer)) = grad.as_mut() {
            let gr = &mut g[p * vocab..(p + 1) * vocab];
            for (j, (gj, &z)) in gr.iter_mut().zip(row).enumerate() {
                let soft = (z - log_z).exp();
                let onehot = if j == t { T::one() } else { T::zero() };
                *gj = (soft - onehot) / *normalizer;
            }
        }
    }
    Ok((total, n))
}

/// Inputs fed to the encoder and the positions scored by the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub inputs: Vec<TokenId>,
    pub counted: Vec<u8>,
}

/// With `probability == 0`, inputs equal the targets and every real token is
/// scored. Otherwise each cluster token is replaced by MASK with the given
/// probability and only replaced positions are scored; a batch that would
/// end up with none gets its first cluster token masked.
pub fn mask_batch(batch: &PaddedBatch, vocab: TokenVocabulary, probability: f64, rng: &mut ChaCha8Rng) -> MaskedBatch {
    if probability <= 0.0 {
        return MaskedBatch {
            inputs: batch.tokens.clone(),
            counted: batch.mask.clone(),
        };
    }
    let mut inputs = batch.tokens.clone();
    let mut counted = vec![0u8; inputs.len()];
    for (i, t) in inputs.iter_mut().enumerate() {
        if batch.mask[i] == 1 && vocab.is_cluster(*t) && rng.random::<f64>() < probability {
            *t = vocab.mask();
            counted[i] = 1;
        }
    }
    if !counted.contains(&1) {
        if let Some(i) = (0..inputs.len()).find(|&i| batch.mask[i] == 1 && vocab.is_cluster(inputs[i])) {
            inputs[i] = vocab.mask();
            counted[i] = 1;
        }
    }
    MaskedBatch { inputs, counted }
}
