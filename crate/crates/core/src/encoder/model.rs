use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape of the cluster-token encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub dropout: f32,
    pub seed: u32,
}

impl EncoderConfig {
    /// Full-size preset: 6 layers, 12 heads, hidden 768.
    pub fn full(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden_size: 768,
            n_layers: 6,
            n_heads: 12,
            ffn_size: 4 * 768,
            max_positions: crate::sequencer::DEFAULT_MAX_POSITIONS,
            dropout: 0.0,
            seed: 0,
        }
    }

    /// Desk-scale preset: 2 layers, 2 heads, hidden 32.
    pub fn toy(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden_size: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_size: 4 * 32,
            max_positions: crate::sequencer::DEFAULT_MAX_POSITIONS,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 5 {
            return fail(format!("vocab_size {} < 5", self.vocab_size));
        }
        if self.max_positions < 2 {
            return fail(format!("max_positions {} < 2", self.max_positions));
        }
        if self.hidden_size == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ffn_size == 0 {
            return fail("hidden_size, n_heads, n_layers and ffn_size must be positive".into());
        }
        if !self.hidden_size.is_multiple_of(self.n_heads) {
            return fail(format!(
                "hidden_size {} is not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (v, h, f, p) = (self.vocab_size, self.hidden_size, self.ffn_size, self.max_positions);
        let attention = 4 * (h * h + h);
        let feed_forward = h * f + f + f * h + h;
        let norms = 2 * 2 * h;
        v * h + p * h + self.n_layers * (attention + feed_forward + norms) + 2 * h
    }
}

/// Position of each tensor inside a layer block.
pub(crate) mod slot {
    pub const WQ: usize = 0;
    pub const BQ: usize = 1;
    pub const WK: usize = 2;
    pub const BK: usize = 3;
    pub const WV: usize = 4;
    pub const BV: usize = 5;
    pub const WO: usize = 6;
    pub const BO: usize = 7;
    pub const LN1_G: usize = 8;
    pub const LN1_B: usize = 9;
    pub const W1: usize = 10;
    pub const B1: usize = 11;
    pub const W2: usize = 12;
    pub const B2: usize = 13;
    pub const LN2_G: usize = 14;
    pub const LN2_B: usize = 15;
    pub const PER_LAYER: usize = 16;
}

pub(crate) const TOKEN_EMBEDDING: usize = 0;
pub(crate) const POSITION_EMBEDDING: usize = 1;
const FIRST_LAYER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    init: Init,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every tensor of the model in canonical order. Weight matrices are stored
/// `[in, out]` row-major; the output projection reuses the token embedding.
pub fn tensor_specs(cfg: &EncoderConfig) -> Vec<TensorSpec> {
    let (v, h, f, p) = (cfg.vocab_size, cfg.hidden_size, cfg.ffn_size, cfg.max_positions);
    let spec = |name: String, dims: Vec<usize>, init| TensorSpec { name, dims, init };
    let mut out = vec![
        spec("token_embedding".into(), vec![v, h], Init::Normal),
        spec("position_embedding".into(), vec![p, h], Init::Normal),
    ];
    for l in 0..cfg.n_layers {
        let n = |s: &str| format!("layer{l}.{s}");
        out.extend([
            spec(n("query.weight"), vec![h, h], Init::Normal),
            spec(n("query.bias"), vec![h], Init::Zeros),
            spec(n("key.weight"), vec![h, h], Init::Normal),
            spec(n("key.bias"), vec![h], Init::Zeros),
            spec(n("value.weight"), vec![h, h], Init::Normal),
            spec(n("value.bias"), vec![h], Init::Zeros),
            spec(n("attention_output.weight"), vec![h, h], Init::Normal),
            spec(n("attention_output.bias"), vec![h], Init::Zeros),
            spec(n("attention_norm.gain"), vec![h], Init::Ones),
            spec(n("attention_norm.bias"), vec![h], Init::Zeros),
            spec(n("ffn_in.weight"), vec![h, f], Init::Normal),
            spec(n("ffn_in.bias"), vec![f], Init::Zeros),
            spec(n("ffn_out.weight"), vec![f, h], Init::Normal),
            spec(n("ffn_out.bias"), vec![h], Init::Zeros),
            spec(n("ffn_norm.gain"), vec![h], Init::Ones),
            spec(n("ffn_norm.bias"), vec![h], Init::Zeros),
        ]);
    }
    out.push(spec("final_norm.gain".into(), vec![h], Init::Ones));
    out.push(spec("final_norm.bias".into(), vec![h], Init::Zeros));
    out
}

pub const INIT_STD: f64 = 0.02;

/// Transformer encoder parameters, one flat buffer per tensor in
/// [`tensor_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    config: EncoderConfig,
    pub(crate) tensors: Vec<Vec<T>>,
}

impl<T: Scalar> EncoderModel<T> {
    /// Draws weights from N(0, 0.02) with a ChaCha8 stream seeded by
    /// `config.seed`, tensor by tensor in canonical order. Norm gains start at
    /// 1, every bias at 0. Draws happen in `f64`, so `f32` and `f64` models
    /// from one config agree up to rounding.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed as u64);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let tensors = tensor_specs(config)
            .iter()
            .map(|s| match s.init {
                Init::Normal => (0..s.len()).map(|_| T::lit(normal.sample(&mut rng))).collect(),
                Init::Zeros => vec![T::zero(); s.len()],
                Init::Ones => vec![T::one(); s.len()],
            })
            .collect();
        Ok(EncoderModel {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Vec<T>>) -> Result<Self> {
        config.validate()?;
        let specs = tensor_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.len() != t.len() {
                return Err(Error::Shape(format!(
                    "tensor {} has {} values, expected {}",
                    s.name,
                    t.len(),
                    s.len()
                )));
            }
        }
        Ok(EncoderModel { config, tensors })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        tensor_specs(&self.config)
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        let i = self.specs().iter().position(|s| s.name == name)?;
        Some(&self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let i = self.specs().iter().position(|s| s.name == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub(crate) fn layer(&self, l: usize, s: usize) -> &[T] {
        &self.tensors[FIRST_LAYER + l * slot::PER_LAYER + s]
    }

    pub(crate) fn final_gain(&self) -> &[T] {
        &self.tensors[FIRST_LAYER + self.config.n_layers * slot::PER_LAYER]
    }

    pub(crate) fn final_bias(&self) -> &[T] {
        &self.tensors[FIRST_LAYER + self.config.n_layers * slot::PER_LAYER + 1]
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect()
    }

    /// First non-finite parameter, as `(tensor name, flat index)`.
    pub fn first_non_finite(&self) -> Option<(String, usize)> {
        first_non_finite(&self.specs(), &self.tensors)
    }

    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.iter().map(|x| U::lit(x.as_f64())).collect())
                .collect(),
        }
    }
}

pub(crate) fn layer_index(l: usize, s: usize) -> usize {
    FIRST_LAYER + l * slot::PER_LAYER + s
}

pub(crate) fn final_index(n_layers: usize) -> usize {
    FIRST_LAYER + n_layers * slot::PER_LAYER
}

pub(crate) fn first_non_finite<T: Scalar>(specs: &[TensorSpec], tensors: &[Vec<T>]) -> Option<(String, usize)> {
    specs.iter().zip(tensors).find_map(|(s, t)| {
        t.iter()
            .position(|x| !x.is_finite())
            .map(|i| (s.name.clone(), i))
    })
}
