use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{backward_row, forward_row_with, validate_row, Dropout};
use super::loss::{cross_entropy_sum, mask_batch};
use super::model::{first_non_finite, EncoderModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sequencer::{pad_to_longest, TokenSequence, TokenVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub mask_probability: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 1,
            mask_probability: 0.0,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.mask_probability) {
            return Err(Error::Config(format!(
                "mask_probability {} outside [0, 1]",
                self.mask_probability
            )));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0 || c.is_nan()) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction; one moment pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &EncoderModel<T>, cfg: &TrainConfig) -> Self {
        Adam {
            lr: T::lit(cfg.learning_rate),
            beta1: T::lit(cfg.beta1),
            beta2: T::lit(cfg.beta2),
            eps: T::lit(cfg.epsilon),
            step: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut [Vec<T>], grads: &[Vec<T>]) {
        self.step += 1;
        let c1 = T::one() - self.beta1.powi(self.step);
        let c2 = T::one() - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Loss and gradient of one padded batch, summed over rows in order.
pub(crate) struct BatchGradient<T> {
    pub loss: T,
    pub counted: usize,
    pub grads: Vec<Vec<T>>,
}

pub(crate) fn batch_gradient<T: Scalar>(
    model: &EncoderModel<T>,
    batch: &[&TokenSequence],
    mask_probability: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BatchGradient<T>> {
    let cfg = model.config();
    let vocab = TokenVocabulary::from_size(cfg.vocab_size)?;
    let padded = pad_to_longest(batch, vocab)?;
    for r in 0..padded.rows {
        validate_row(model, padded.row(r), padded.mask_row(r))?;
    }
    let masked = mask_batch(&padded, vocab, mask_probability, rng);
    let counted_total = masked.counted.iter().filter(|&&c| c != 0).count();
    if counted_total == 0 {
        return Err(Error::Contract("batch has no scored positions".into()));
    }
    let normalizer = T::from_usize_lossy(counted_total);
    let len = padded.len;
    let v = cfg.vocab_size;
    let mut grads = model.zeros_like();
    let mut loss_sum = T::zero();
    for r in 0..padded.rows {
        let span = r * len..(r + 1) * len;
        let inputs = &masked.inputs[span.clone()];
        let counted = &masked.counted[span.clone()];
        if !counted.contains(&1) {
            continue;
        }
        let mut dropout = Dropout {
            p: cfg.dropout as f64,
            rng: &mut *rng,
        };
        let trace = forward_row_with(model, inputs, padded.mask_row(r), Some(&mut dropout));
        let mut dlogits = vec![T::zero(); len * v];
        let (sum, _) = cross_entropy_sum(
            trace.logits(),
            v,
            &padded.tokens[span],
            counted,
            Some((&mut dlogits, normalizer)),
        )?;
        loss_sum += sum;
        backward_row(model, &trace, &dlogits, &mut grads);
    }
    Ok(BatchGradient {
        loss: loss_sum / normalizer,
        counted: counted_total,
        grads,
    })
}

/// Mean training loss per epoch, weighted by scored positions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub epochs: Vec<(usize, f64)>,
}

impl LossHistory {
    pub fn first(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.1)
    }

    /// Two columns, `epoch<TAB>mean loss`, one epoch per line.
    pub fn to_text(&self) -> String {
        self.epochs.iter().map(|(e, l)| format!("{e}\t{l:.9}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let (e, v) = l
                    .split_once('\t')
                    .ok_or_else(|| Error::Format(format!("bad loss line {l:?}")))?;
                let e = e.parse().map_err(|_| Error::Format(format!("bad epoch {e:?}")))?;
                let v = v.parse().map_err(|_| Error::Format(format!("bad loss {v:?}")))?;
                Ok((e, v))
            })
            .collect::<Result<_>>()?;
        Ok(LossHistory { epochs })
    }
}

#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub model: EncoderModel<T>,
    pub history: LossHistory,
}

fn global_norm<T: Scalar>(grads: &[Vec<T>]) -> T {
    grads.iter().flatten().map(|&g| g * g).sum::<T>().sqrt()
}

/// Trains with seeded shuffling, per-batch reconstruction loss and Adam.
/// `first_epoch` numbers the history so resumed runs continue counting.
pub fn train<T: Scalar>(
    mut model: EncoderModel<T>,
    sequences: &[TokenSequence],
    tcfg: &TrainConfig,
    first_epoch: usize,
) -> Result<Trained<T>> {
    tcfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus("no token sequences to train on".into()));
    }
    let specs = model.specs();
    let mut adam = Adam::new(&model, tcfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    noise_rng.set_stream(1);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut history = LossHistory::default();

    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut weighted = 0.0;
        let mut scored = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<&TokenSequence> = chunk.iter().map(|&i| &sequences[i]).collect();
            let mut bg = batch_gradient(&model, &batch, tcfg.mask_probability, &mut noise_rng)?;
            if !bg.loss.is_finite() {
                return Err(Error::NonFinite {
                    tensor: "loss".into(),
                    detail: format!("epoch {} loss {}", first_epoch + epoch, bg.loss),
                });
            }
            if let Some((name, i)) = first_non_finite(&specs, &bg.grads) {
                return Err(Error::NonFinite {
                    tensor: format!("grad[{name}]"),
                    detail: format!("index {i} at epoch {}", first_epoch + epoch),
                });
            }
            if let Some(clip) = tcfg.clip_norm {
                let norm = global_norm(&bg.grads);
                let clip = T::lit(clip);
                if norm > clip {
                    let s = clip / norm;
                    bg.grads.iter_mut().flatten().for_each(|g| *g *= s);
                }
            }
            adam.step(model.tensors_mut(), &bg.grads);
            if let Some((name, i)) = model.first_non_finite() {
                return Err(Error::NonFinite {
                    tensor: name,
                    detail: format!("parameter index {i} after update at epoch {}", first_epoch + epoch),
                });
            }
            weighted += bg.loss.as_f64() * bg.counted as f64;
            scored += bg.counted;
        }
        history.epochs.push((first_epoch + epoch, weighted / scored as f64));
    }
    Ok(Trained { model, history })
}
