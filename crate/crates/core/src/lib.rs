//! Quadratic neural network layers and CTR training on a small autodiff tape.

pub mod commands;
pub mod data;
pub mod error;
pub mod layers;
pub mod loss_metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{QnnError, Result};
pub use layers::{ActivationPlacement, Format, HeadInputMode, KrpConfig, NeuronFormatSpec};
pub use model::{InputSpec, Inputs, ModelConfig, QnnModel};
pub use tensor::{ActivationKind, NodeId, Tape, Tensor};
