//! Shared image and text encoders for the original, mixed, and restored
//! branches.

pub mod config;
pub mod grouping;
pub mod image;
pub mod layers;
pub mod params;
pub mod text;

pub use config::ModelConfig;
pub use grouping::{grouping_block, Assignment, GroupingOut};
pub use image::{encode_image_original, patch_embed, BranchOutput, OriginalTrace};
pub use params::{EncoderParams, GroupingP, LayerP, MlpP, TextP};
pub use text::encode_text;
