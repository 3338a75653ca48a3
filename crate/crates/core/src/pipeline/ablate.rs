//! Ablation harness: train + evaluate per configuration value, emit a
//! machine-readable comparison table.

use super::eval::{class_captions_for, eval_miou, eval_reorg, ClassSet};
use super::state::TrainState;
use super::train::train;
use super::trainconfig::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::LossValues;
use crate::synthdata::{Noun, SyntheticScene, Vocab};
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Contextual mixing on/off (off mixes before the contextual layer).
    CmOnOff,
    /// Segmentation loss on/off.
    SegLossOnOff,
    /// Restoration contrastive losses on/off.
    ReLossOnOff,
    /// Images per mix group (M).
    GroupSize,
    /// Progressive injection depth (P).
    InjectLayers,
}

pub const AXIS_NAMES: [&str; 5] = ["cm_on_off", "l_seg_on_off", "l_re_on_off", "M", "P"];

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cm_on_off" => Ok(AblationAxis::CmOnOff),
            "l_seg_on_off" => Ok(AblationAxis::SegLossOnOff),
            "l_re_on_off" => Ok(AblationAxis::ReLossOnOff),
            "M" => Ok(AblationAxis::GroupSize),
            "P" => Ok(AblationAxis::InjectLayers),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?}; valid axes: {}",
                AXIS_NAMES.join(", ")
            ))),
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AblationAxis::CmOnOff => "cm_on_off",
            AblationAxis::SegLossOnOff => "l_seg_on_off",
            AblationAxis::ReLossOnOff => "l_re_on_off",
            AblationAxis::GroupSize => "M",
            AblationAxis::InjectLayers => "P",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub value: String,
    pub miou: f64,
    pub reorg_diagonal: f64,
    pub final_losses: LossValues,
}

fn parse_switch(value: &str) -> Result<bool> {
    match value {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(Error::Config(format!("expected on|off, got {other:?}"))),
    }
}

/// Apply one axis value to a configuration.
pub fn apply_axis(cfg: &mut TrainConfig, axis: AblationAxis, value: &str) -> Result<()> {
    match axis {
        AblationAxis::CmOnOff => cfg.model.cm_enabled = parse_switch(value)?,
        AblationAxis::SegLossOnOff => {
            cfg.weights.seg = if parse_switch(value)? { 1.0 } else { 0.0 }
        }
        AblationAxis::ReLossOnOff => cfg.weights.re = if parse_switch(value)? { 1.0 } else { 0.0 },
        AblationAxis::GroupSize => {
            cfg.model.group_size = value
                .parse()
                .map_err(|_| Error::Config(format!("bad M value {value:?}")))?;
        }
        AblationAxis::InjectLayers => {
            cfg.model.inject_layers = value
                .parse()
                .map_err(|_| Error::Config(format!("bad P value {value:?}")))?;
        }
    }
    cfg.validate()
}

/// Class captions covering every noun that occurs in the dataset.
pub fn dataset_class_captions(scenes: &[SyntheticScene]) -> Vec<String> {
    let nouns: BTreeSet<(u8, u8)> = scenes
        .iter()
        .flat_map(|s| s.nouns.iter().map(|n| (n.color, n.shape)))
        .collect();
    let nouns: Vec<Noun> = nouns
        .into_iter()
        .map(|(color, shape)| Noun { color, shape })
        .collect();
    class_captions_for(&nouns)
}

/// Train and evaluate one run per axis value, all from the same master seed.
pub fn run_ablation(
    base: &TrainConfig,
    axis: AblationAxis,
    values: &[String],
    scenes: &[SyntheticScene],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let vocab = Vocab::builtin();
    let captions = dataset_class_captions(scenes);
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        apply_axis(&mut cfg, axis, value)?;
        let run_dir = out_dir.join(format!("{axis}-{value}"));
        let report = train(&cfg, scenes, &run_dir)?;

        let state = TrainState::load(&report.final_checkpoint, &cfg, &vocab)?;
        let classes = ClassSet::build(&state.params, &cfg.model, &vocab, captions.clone())?;
        let miou = eval_miou(&state.params, &cfg.model, scenes, &classes, cfg.bg_threshold)?;
        let groups = (scenes.len() / cfg.model.group_size).max(1);
        let reorg = eval_reorg(
            &state.params,
            &cfg.model,
            &vocab,
            scenes,
            groups,
            cfg.model.seed,
        )?;
        rows.push(AblationRow {
            value: value.clone(),
            miou: miou.miou,
            reorg_diagonal: reorg.confusion.mean_diagonal(),
            final_losses: report.final_losses.unwrap_or(LossValues {
                seg: f64::NAN,
                re_pair: f64::NAN,
                re_multilabel: f64::NAN,
                ori_pair: f64::NAN,
                ori_multilabel: f64::NAN,
                total: f64::NAN,
            }),
        });
    }
    Ok(rows)
}

/// CSV rendering (one row per value, stable field order).
pub fn render_table(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "axis,value,miou,reorg_diagonal,seg,re_pair,re_multilabel,ori_pair,ori_multilabel,total\n",
    );
    for row in rows {
        let l = &row.final_losses;
        out.push_str(&format!(
            "{axis},{},{},{},{},{},{},{},{},{}\n",
            row.value,
            row.miou,
            row.reorg_diagonal,
            l.seg,
            l.re_pair,
            l.re_multilabel,
            l.ori_pair,
            l.ori_multilabel,
            l.total
        ));
    }
    out
}
