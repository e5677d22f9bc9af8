//! Synthetic first-stage artifacts: flow-guided color blending followed by
//! motion-adaptive blur.

mod blend;
mod blur;
mod estimator;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::Clip;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use blend::{blend_colors, motion_mask, sample_ellipses, EllipseParams, EllipseSpec, MotionMask};
pub use blur::{motion_blur, BlurKernelSpec};
pub use estimator::{estimate_flow, luma, pyramid_levels};

/// Resolution at which a training pair is degraded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradeAt {
    /// After downsampling to the low resolution.
    #[default]
    Low,
    /// Before downsampling.
    High,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeParams {
    pub tau_px: f32,
    pub block_px: usize,
    pub density: f64,
    pub samples_k: usize,
    pub strength_min: f64,
    pub strength_max: f64,
    pub apply_at: DegradeAt,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            tau_px: 1.5,
            block_px: 16,
            density: 0.5,
            samples_k: 16,
            strength_min: 0.3,
            strength_max: 0.7,
            apply_at: DegradeAt::Low,
        }
    }
}

impl DegradeParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |cond: bool, msg: &str| {
            if cond {
                Ok(())
            } else {
                Err(Error::invalid("flow_degrade", msg.to_string()))
            }
        };
        ok(self.tau_px > 0.0, "tau_px must be > 0")?;
        ok(self.block_px >= 1, "block_px must be >= 1")?;
        ok(self.density > 0.0 && self.density <= 1.0, "density must lie in (0, 1]")?;
        ok(self.samples_k >= 1, "samples_k must be >= 1")?;
        ok(
            0.0 <= self.strength_min && self.strength_min <= self.strength_max && self.strength_max <= 1.0,
            "need 0 <= strength_min <= strength_max <= 1",
        )
    }

    fn ellipses(&self) -> EllipseParams {
        EllipseParams {
            density: self.density,
            strength_min: self.strength_min,
            strength_max: self.strength_max,
        }
    }
}

/// Degrades `curr` given its predecessor: estimate flow, blend colors inside
/// sampled ellipses, then blur moving blocks.
pub fn degrade_frame(prev: &Tensor, curr: &Tensor, params: &DegradeParams, rng: &mut Rng) -> Result<Tensor> {
    let flow = estimate_flow(prev, curr)?;
    let mask = motion_mask(&flow, params.tau_px)?;
    let ellipses = sample_ellipses(&mask, &flow, rng, &params.ellipses())?;
    let blended = blend_colors(curr, prev, &flow, &ellipses, params.samples_k, rng)?;
    motion_blur(&blended, &flow, params.block_px, params.tau_px)
}

/// Degrades every frame after the first. Frame `t` draws from
/// `rng.fork(t)`, so results do not depend on scheduling.
pub fn degrade_clip(clip: &Clip, params: &DegradeParams, rng: &Rng) -> Result<Clip> {
    params.validate()?;
    let t = clip.len();
    if t < 2 {
        return Err(Error::invalid("degrade_clip", format!("need ≥ 2 frames, got {t}")));
    }
    let frames: Vec<Tensor> = (0..t).map(|i| clip.frame(i)).collect();
    let degraded = (1..t)
        .into_par_iter()
        .map(|i| degrade_frame(&frames[i - 1], &frames[i], params, &mut rng.fork(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(t);
    out.push(frames[0].clone());
    out.extend(degraded.into_iter().map(|f| f.map(|v| v.clamp(0.0, 1.0))));
    Clip::from_frames(&out, clip.frame_rate())
}
