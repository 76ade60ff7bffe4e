//! Weight-only post-training quantization driven by fine-tuning signals.
//!
//! The pipeline: take the element-wise weight updates between a pre- and a
//! post-fine-tuning checkpoint, turn them into per-input-channel importance
//! ([`signals`]), search an importance exponent that scales weight columns
//! before round-to-nearest group quantization ([`search`], [`quant`]), and
//! measure the result ([`eval`]). A toy MLP trainer ([`toy`]) produces real
//! checkpoints and calibration activations at desk scale. Everything is
//! persisted in the `.dqt` container ([`store`]).

pub mod error;
pub mod eval;
pub mod matrix;
pub mod pack;
pub mod quant;
pub mod search;
pub mod signals;
pub mod store;
pub mod toy;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use quant::{QuantArtifact, QuantConfig, QuantizedTensor};
pub use search::{SearchConfig, SearchResult};
pub use signals::{DeltaStats, ImportanceSet, ImportanceVector, MappingConfig, Signal};
pub use store::{load_container, save_container, Tensor, TensorMap};
pub use toy::{CalibrationSet, ToyModel, TrainConfig};
