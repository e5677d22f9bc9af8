//! Temporal extension: reuse a short-clip model on long latents by slicing
//! them into interleaved temporal units, then fine-tune.

use gvr_core::attention::{AttentionMode, TemporalUnitPlan};
use gvr_core::{Error, Result};

use crate::config::TrainConfig;
use crate::data::TrainPair;
use crate::net::GvrModel;
use crate::train::{train, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtensionPlan {
    pub unit: usize,
    pub mode: AttentionMode,
    pub top_k: usize,
}

impl Default for ExtensionPlan {
    fn default() -> Self {
        Self {
            unit: 5,
            mode: AttentionMode::SparseLocal,
            top_k: 1,
        }
    }
}

/// Switches `model` to the extension's attention settings. No parameters
/// are added or removed.
pub fn apply_extension(model: &mut GvrModel, plan: ExtensionPlan) -> Result<()> {
    model.config.attention.temporal = TemporalUnitPlan::new(plan.unit)?;
    model.config.attention.mode = plan.mode;
    model.config.attention.top_k = plan.top_k;
    model.config.validate()
}

/// Applies the extension and fine-tunes on long clips.
pub fn extend_temporal(
    model: &mut GvrModel,
    plan: ExtensionPlan,
    data: &[TrainPair],
    cfg: &TrainConfig,
    first_step: usize,
) -> Result<TrainReport> {
    for (i, pair) in data.iter().enumerate() {
        let tl = pair.hr.dim(0);
        if tl < plan.unit {
            return Err(Error::invalid(
                "extend_temporal",
                format!("clip {i} has {tl} latent frames, fewer than the unit length {}", plan.unit),
            ));
        }
    }
    let before = model.parameter_count();
    apply_extension(model, plan)?;
    debug_assert_eq!(before, model.parameter_count());
    train(model, data, cfg, first_step)
}
