//! Training loop, checkpointing, evaluation, and the ablation harness.

pub mod ablate;
pub mod eval;
pub mod optimizer;
pub mod state;
pub mod train;
pub mod trainconfig;

pub use ablate::{apply_axis, render_table, run_ablation, AblationAxis, AblationRow};
pub use eval::{
    class_captions_for, eval_classify, eval_miou, eval_reorg, random_segment_miou, segment,
    ClassSet, ConfusionMatrix, MiouResult, ReorgResult,
};
pub use optimizer::{lr_at, Adam};
pub use state::{MetricsEntry, TrainState};
pub use train::{build_step_loss, train, train_step, TrainReport};
pub use trainconfig::TrainConfig;
