//! Dense tensors, deterministic RNG streams, and reverse-mode autodiff.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use rng::{RngStream, SplitMix64};
pub use tensor::{Scalar, Tensor};
