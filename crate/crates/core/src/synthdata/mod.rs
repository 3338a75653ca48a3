//! Procedural image-caption corpus with exact ground truth.

pub mod dataset;
pub mod scene;
pub mod vocab;

pub use dataset::{
    generate_corpus, read_dataset, write_dataset, CorpusMode, CorpusSpec,
};
pub use scene::{
    generate_scene, patch_majority_labels, prompt_labels, Noun, SceneSpec, SyntheticScene,
};
pub use vocab::{detokenize, tokenize, Vocab};
