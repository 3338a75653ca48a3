//! Cross-modal mixed patch reorganization pre-training, end to end: a
//! tape-based autodiff tensor core, shared image/text encoders with hard
//! two-stage grouping, patch mixing with exact restoration, the full loss
//! stack, a procedural image-caption corpus with exact masks, and the
//! training/evaluation pipeline on top.

pub mod encoders;
pub mod error;
pub mod losses;
pub mod mixing;
pub mod numerics;
pub mod pipeline;
pub mod raster;
pub mod synthdata;

pub use encoders::{BranchOutput, EncoderParams, ModelConfig};
pub use error::{Error, Result};
pub use losses::{LossBundle, LossValues, LossWeights};
pub use mixing::MixPlan;
pub use numerics::{Graph, RngStream, Scalar, Tensor, Var};
pub use pipeline::{TrainConfig, TrainState};
pub use raster::Raster;
pub use synthdata::{SyntheticScene, Vocab};
