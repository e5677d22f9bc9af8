//! Model and training configuration.

use serde::{Deserialize, Serialize};

use gvr_core::attention::AttentionConfig;
use gvr_core::codec::CodecDescriptor;
use gvr_core::flow::NoiseAugmentation;
use gvr_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GvrConfig {
    pub codec: CodecDescriptor,
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub attention: AttentionConfig,
    /// Spatial ratio between the target and conditioning latents.
    pub upsample: usize,
    /// Kernel extents `[kt, kh, kw]` of both conditioning convolutions.
    pub cond_kernel: [usize; 3],
    pub text_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for GvrConfig {
    fn default() -> Self {
        Self {
            codec: CodecDescriptor::default(),
            width: 64,
            heads: 4,
            depth: 4,
            attention: AttentionConfig::default(),
            upsample: 2,
            cond_kernel: [3, 3, 3],
            text_dim: 8,
            mlp_ratio: 2,
        }
    }
}

impl GvrConfig {
    pub fn latent_channels(&self) -> usize {
        self.codec.channels()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid("model config", msg));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.depth == 0 || self.depth % 2 != 0 {
            return fail(format!("depth {} must be even and >= 2", self.depth));
        }
        if self.upsample == 0 {
            return fail("upsample must be >= 1".into());
        }
        if self.cond_kernel.iter().any(|k| k % 2 == 0) {
            return fail(format!("cond_kernel {:?} must have odd extents", self.cond_kernel));
        }
        if self.attention.window.0 == 0 || self.attention.window.1 == 0 || self.attention.temporal.unit == 0 {
            return fail("attention window and temporal unit must be >= 1".into());
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    AdamW,
    Sgd,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerChoice {
    #[default]
    Uniform,
    /// Distribution table written by the sampler builder.
    DetailAware { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub noise_aug: NoiseAugmentation,
    pub text_dropout: f64,
    pub sampler: SamplerChoice,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 4,
            lr: 1e-3,
            weight_decay: 0.0,
            optimizer: OptimizerKind::AdamW,
            momentum: 0.9,
            noise_aug: NoiseAugmentation { lo: 0.3, hi: 0.6 },
            text_dropout: 0.1,
            sampler: SamplerChoice::Uniform,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid("train config", msg));
        if self.steps == 0 || self.batch == 0 {
            return fail("steps and batch must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.text_dropout) {
            return fail(format!("text_dropout {} outside [0, 1]", self.text_dropout));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return fail("momentum must lie in [0, 1) and weight_decay be >= 0".into());
        }
        NoiseAugmentation::new(self.noise_aug.lo, self.noise_aug.hi).map(|_| ())
    }
}
