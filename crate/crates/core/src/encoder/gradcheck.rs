//! Finite-difference verification of the encoder's analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{EncoderConfig, EncoderModel};
use super::train::batch_gradient;
use crate::error::{Error, Result};
use crate::sequencer::TokenSequence;

pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Tensor and flat index where the maximum occurred.
    pub worst: (String, usize),
    pub parameters: usize,
    pub step: f64,
}

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of the reconstruction loss with central
/// differences `(L(θ+h) - L(θ-h)) / 2h` for every parameter, all in `f64`.
/// Dropout is disabled for the check.
pub fn gradient_check(config: &EncoderConfig, batch: &[TokenSequence], step: f64) -> Result<GradCheckReport> {
    let mut config = config.clone();
    config.dropout = 0.0;
    let model = EncoderModel::<f64>::init(&config)?;
    gradient_check_model(model, batch, step, Difference::Central)
}

/// Finite-difference formula used as the reference slope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difference {
    /// `(L(θ+h) - L(θ-h)) / 2h`, error O(h²).
    Central,
    /// `(4·D(h/2) - D(h)) / 3` over central differences `D`, error O(h⁴).
    Richardson,
}

pub fn gradient_check_model(
    mut model: EncoderModel<f64>,
    batch: &[TokenSequence],
    step: f64,
    scheme: Difference,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::Contract("gradient check needs at least one sequence".into()));
    }
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step {step} must be positive")));
    }
    let refs: Vec<&TokenSequence> = batch.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let analytic = batch_gradient(&model, &refs, 0.0, &mut rng)?.grads;
    let specs = model.specs();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (String::new(), 0),
        parameters: model.parameter_count(),
        step,
    };
    for (t, spec) in specs.iter().enumerate() {
        for i in 0..spec.len() {
            let original = model.tensors[t][i];
            let mut central = |h: f64| -> Result<f64> {
                model.tensors[t][i] = original + h;
                let plus = batch_gradient(&model, &refs, 0.0, &mut rng)?.loss;
                model.tensors[t][i] = original - h;
                let minus = batch_gradient(&model, &refs, 0.0, &mut rng)?.loss;
                model.tensors[t][i] = original;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = match scheme {
                Difference::Central => central(step)?,
                Difference::Richardson => {
                    let coarse = central(step)?;
                    (4.0 * central(step / 2.0)? - coarse) / 3.0
                }
            };
            let err = relative_error(analytic[t][i], numeric);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (spec.name.clone(), i);
            }
        }
    }
    Ok(report)
}

/// The batch used by the `gradcheck` command: two sequences over a vocabulary
/// of `vocab_size`, the second one padded.
pub fn default_batch(vocab_size: usize, length: usize) -> Result<Vec<TokenSequence>> {
    let vocab = crate::sequencer::TokenVocabulary::from_size(vocab_size)?;
    if length < 3 {
        return Err(Error::Config("gradient-check sequences need length >= 3".into()));
    }
    let body = |offset: usize, n: usize| (0..n).map(move |j| ((j + offset) % vocab.k) as u32);
    let full = std::iter::once(vocab.bos())
        .chain(body(0, length - 2))
        .chain([vocab.eos()])
        .collect();
    let short = std::iter::once(vocab.bos())
        .chain(body(1, length - 3))
        .chain([vocab.eos()])
        .collect();
    Ok(vec![
        TokenSequence { book_id: "gc0".into(), tokens: full },
        TokenSequence { book_id: "gc1".into(), tokens: short },
    ])
}

/// 1 layer, 1 head, hidden 4, vocabulary 8, 4 positions.
pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 8,
        hidden_size: 4,
        n_layers: 1,
        n_heads: 1,
        ffn_size: 16,
        max_positions: 4,
        dropout: 0.0,
        seed: 0,
    }
}
