//! Dynamic non-uniform alignment for image-text models.

pub mod attention;
pub mod checkpoint;
pub mod coarse;
pub mod config;
pub mod cost;
pub mod cwa;
pub mod decisions;
pub mod error;
pub mod fourier;
pub mod gradcheck;
pub mod loss;
pub mod mask;
pub mod model;
pub mod nfa;
pub mod phi;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod tokens;
pub mod train;

pub use config::{DapeConfig, NfaMerge};
pub use cost::{CostMeter, Module};
pub use error::{DapeError, Result};
pub use mask::{AffinityMask, MaskLevel};
pub use model::{cost_report, forward_pair, Batch, CostReport, DapeModel, ForwardTrace, ImageInput, ModelWeights, TextInput};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use tokens::{Modality, Provenance, TokenSet};
pub use train::{train_step, StepReport};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = DapeModel<f64>;
pub type Model32 = DapeModel<f32>;
