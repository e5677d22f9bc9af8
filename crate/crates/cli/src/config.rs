//! The pipeline configuration document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use gvr_core::attention::AttentionConfig;
use gvr_core::codec::CodecDescriptor;
use gvr_core::curation::CurationConfig;
use gvr_core::degrade::DegradeParams;
use gvr_core::flow::{DetailAwareOptions, NoiseAugmentation};
use gvr_model::config::{OptimizerKind, SamplerChoice};
use gvr_model::{DatasetSpec, GvrConfig, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeditSection {
    pub alpha: f64,
    pub steps: usize,
}

impl Default for SdeditSection {
    fn default() -> Self {
        Self { alpha: 0.3, steps: 10 }
    }
}

/// Model settings other than attention, which has its own section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub codec: CodecDescriptor,
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub upsample: usize,
    pub cond_kernel: [usize; 3],
    pub text_dim: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let g = GvrConfig::default();
        Self {
            codec: g.codec,
            width: g.width,
            heads: g.heads,
            depth: g.depth,
            upsample: g.upsample,
            cond_kernel: g.cond_kernel,
            text_dim: g.text_dim,
            mlp_ratio: g.mlp_ratio,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub noise_aug: NoiseAugmentation,
    pub text_dropout: f64,
    pub seed: u64,
    /// Optimizer steps of stages 1, 2 and 3.
    pub stage_steps: [usize; 3],
    pub dataset: DatasetSpec,
    /// Source frames of the long clips used by stage 3.
    pub long_frames: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch: t.batch,
            lr: t.lr,
            weight_decay: t.weight_decay,
            optimizer: t.optimizer,
            momentum: t.momentum,
            noise_aug: t.noise_aug,
            text_dropout: t.text_dropout,
            seed: t.seed,
            stage_steps: [500, 200, 50],
            dataset: DatasetSpec::default(),
            long_frames: 77,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// Timestep distribution used during training.
    pub train_with: SamplerChoice,
    /// Held-out clips traced by `sampler build` when no directory is given.
    pub traces: usize,
    pub steps: usize,
    pub aug_level: f64,
    pub seed: u64,
    pub detail: DetailAwareOptions,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            train_with: SamplerChoice::Uniform,
            traces: 16,
            steps: 20,
            aug_level: 0.45,
            seed: 7,
            detail: DetailAwareOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub flow_degrade: DegradeParams,
    pub sdedit: SdeditSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub attention: AttentionConfig,
    pub curation: CurationConfig,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(&e.path().to_string());
            CliError::validation(format!("config error at {pointer}: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::runtime(format!("reading {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.flow_degrade.validate()?;
        self.curation.validate()?;
        self.gvr_config().validate()?;
        self.train_config(0).validate()?;
        if !(0.0..=1.0).contains(&self.sdedit.alpha) || self.sdedit.steps == 0 {
            return Err(CliError::validation("sdedit: alpha must lie in [0, 1] and steps be >= 1"));
        }
        if self.sampler.steps < 2 || self.sampler.traces == 0 {
            return Err(CliError::validation("sampler: need steps >= 2 and traces >= 1"));
        }
        Ok(())
    }

    pub fn gvr_config(&self) -> GvrConfig {
        let m = &self.model;
        GvrConfig {
            codec: m.codec,
            width: m.width,
            heads: m.heads,
            depth: m.depth,
            attention: self.attention.clone(),
            upsample: m.upsample,
            cond_kernel: m.cond_kernel,
            text_dim: m.text_dim,
            mlp_ratio: m.mlp_ratio,
        }
    }

    /// Training settings for a run of `steps` optimizer steps.
    pub fn train_config(&self, steps: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: steps.max(1),
            batch: t.batch,
            lr: t.lr,
            weight_decay: t.weight_decay,
            optimizer: t.optimizer,
            momentum: t.momentum,
            noise_aug: t.noise_aug,
            text_dropout: t.text_dropout,
            sampler: self.sampler.train_with.clone(),
            seed: t.seed,
        }
    }
}

/// `a.b[2].c` to `/a/b/2/c`.
fn json_pointer(path: &str) -> String {
    if path == "." || path.is_empty() {
        return "/".into();
    }
    let mut out = String::new();
    for part in path.split('.') {
        let (key, index) = match part.find('[') {
            Some(i) => (&part[..i], Some(part[i + 1..].trim_end_matches(']'))),
            None => (part, None),
        };
        if !key.is_empty() {
            out.push('/');
            out.push_str(&key.replace('~', "~0").replace('/', "~1"));
        }
        if let Some(i) = index {
            out.push('/');
            out.push_str(i);
        }
    }
    out
}
