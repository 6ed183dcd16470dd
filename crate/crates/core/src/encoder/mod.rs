//! Transformer encoder over cluster-token sequences, trained to reproduce its
//! own input at every position.
//!
//! Token and position embeddings feed post-norm blocks (self-attention, then a
//! GELU feed-forward, each followed by residual add and layer norm), a final
//! layer norm, and logits through the transposed token embedding.

mod checkpoint;
mod forward;
pub mod gradcheck;
mod loss;
mod model;
mod train;

#[cfg(test)]
mod tests;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use forward::{forward, forward_row, ForwardOutput, RowTrace, LAYER_NORM_EPS};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use loss::{mask_batch, reconstruction_loss, MaskedBatch};
pub use model::{tensor_specs, EncoderConfig, EncoderModel, TensorSpec, INIT_STD};
pub use train::{train, Adam, LossHistory, TrainConfig, Trained};
