//! Small decoder-only transformer over packed multimodal sequences.
//!
//! Text ids and the vision specials index one embedding table; patches go
//! through a linear projector. Each position receives a learned embedding
//! indexed by its offset within its segment. Pads embed to zero.

pub mod checkpoint;
pub mod forward;
pub mod gradcheck;
pub mod loss;
pub mod params;
pub mod schedule;
pub mod train;

use thiserror::Error;

use crate::encoding::EncodingError;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointHeader};
pub use forward::{backward, forward, forward_with_cache, ForwardCache};
pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{masked_loss, masked_loss_grad, masked_loss_sum, LossParts};
pub use params::{LayerParams, ModelConfig, ModelParams};
pub use schedule::{lr_at_step, TrainConfig};
pub use train::{batch_gradients, train, train_batches, Batch, LossRecord, TrainError, TrainOutcome, Trainer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sequence of {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("text id {id} at position {position} is outside the vocabulary of {limit}")]
    TokenOutOfRange { position: usize, id: u32, limit: u32 },
    #[error("step {step} is past the schedule end {total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}
