//! Synthetic training clips and (HR, LR) latent pair construction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use gvr_core::codec::{encode, CodecDescriptor};
use gvr_core::degrade::{degrade_clip, DegradeAt, DegradeParams};
use gvr_core::flow::{sdedit_degrade, ContractiveToyVelocity};
use gvr_core::media::Clip;
use gvr_core::resample::bicubic_resize;
use gvr_core::{Error, Result, Rng, Tensor};

/// Procedural content of a synthetic clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    Gradient,
    Checkerboard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub pattern: Pattern,
    /// Pixels per frame.
    pub velocity: (f32, f32),
    pub cell: f32,
    pub angle: f32,
    pub colors: [[f32; 3]; 2],
}

impl SyntheticSpec {
    pub fn draw(rng: &mut Rng) -> Self {
        let pattern = if rng.bernoulli(0.5) {
            Pattern::Gradient
        } else {
            Pattern::Checkerboard
        };
        let mut color = || {
            [
                rng.uniform_in(0.1, 0.9) as f32,
                rng.uniform_in(0.1, 0.9) as f32,
                rng.uniform_in(0.1, 0.9) as f32,
            ]
        };
        let colors = [color(), color()];
        Self {
            pattern,
            velocity: (rng.uniform_in(-2.0, 2.0) as f32, rng.uniform_in(-2.0, 2.0) as f32),
            cell: rng.uniform_in(4.0, 12.0) as f32,
            angle: rng.uniform_in(0.0, std::f64::consts::TAU) as f32,
            colors,
        }
    }

    fn value(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        let px = x as f32 - self.velocity.0 * t as f32;
        let py = y as f32 - self.velocity.1 * t as f32;
        let (s, co) = self.angle.sin_cos();
        let u = px * co + py * s;
        let v = -px * s + py * co;
        let mix = match self.pattern {
            Pattern::Gradient => 0.5 + 0.5 * (u / (4.0 * self.cell)).sin() * (v / (6.0 * self.cell)).cos(),
            Pattern::Checkerboard => {
                let sq = ((u / self.cell).floor() + (v / self.cell).floor()).rem_euclid(2.0);
                0.1 + 0.8 * sq
            }
        };
        self.colors[0][c] * (1.0 - mix) + self.colors[1][c] * mix
    }

    pub fn render(&self, frames: usize, h: usize, w: usize) -> Result<Clip> {
        let data = Tensor::from_fn(vec![frames, h, w, 3], |i| {
            let c = i % 3;
            let p = i / 3;
            self.value(p / (h * w), (p / w) % h, p % w, c).clamp(0.0, 1.0)
        });
        Clip::new(data, 24.0)
    }

    /// Text slot: pattern one-hot, then velocity and cell size features.
    pub fn text(&self, dim: usize) -> Tensor {
        let feats = [
            (self.pattern == Pattern::Gradient) as u8 as f32,
            (self.pattern == Pattern::Checkerboard) as u8 as f32,
            self.velocity.0 / 2.0,
            self.velocity.1 / 2.0,
            self.cell / 12.0,
        ];
        Tensor::from_fn(vec![dim], |i| feats.get(i).copied().unwrap_or(0.0))
    }
}

/// Bicubic downsampling of every frame by an integer factor.
pub fn downsample_clip(clip: &Clip, factor: usize) -> Result<Clip> {
    if factor == 0 || clip.height() % factor != 0 || clip.width() % factor != 0 {
        return Err(Error::invalid(
            "downsample",
            format!("{}x{} is not divisible by {factor}", clip.height(), clip.width()),
        ));
    }
    let planar = clip.frames().permute(&[0, 3, 1, 2])?;
    let small = bicubic_resize(&planar, clip.height() / factor, clip.width() / factor)?;
    Clip::clamped(small.permute(&[0, 2, 3, 1])?, clip.frame_rate())
}

/// How the low-resolution side of a pair is produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum PairDegradation {
    /// Bicubic downsampling only.
    OneOrder,
    /// Downsampling plus flow-based degradation.
    Flow { params: DegradeParams },
    /// Flow-based degradation followed by model-guided degradation of the
    /// conditioning latent under the contractive toy field.
    FlowSdedit { params: DegradeParams, alpha: f64, steps: usize },
}

/// Maps `[0, 1]` latents to the model's `[-1, 1]` range.
pub fn to_model_space(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

pub fn from_model_space(x: &Tensor) -> Tensor {
    x.map(|v| (v + 1.0) / 2.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    /// `[Tl, Cl, H, W]`, model space.
    pub hr: Tensor,
    /// `[Tl, Cl, H / up, W / up]`, model space.
    pub lr: Tensor,
    pub text: Tensor,
}

pub fn make_pair(
    hr_clip: &Clip,
    upsample: usize,
    codec: CodecDescriptor,
    degradation: &PairDegradation,
    text: Tensor,
    rng: &Rng,
) -> Result<TrainPair> {
    let flow = |clip: &Clip, params: &DegradeParams, at: DegradeAt| -> Result<Clip> {
        match at {
            DegradeAt::Low => degrade_clip(&downsample_clip(clip, upsample)?, params, &rng.fork(1)),
            DegradeAt::High => downsample_clip(&degrade_clip(clip, params, &rng.fork(1))?, upsample),
        }
    };
    let lr_clip = match degradation {
        PairDegradation::OneOrder => downsample_clip(hr_clip, upsample)?,
        PairDegradation::Flow { params } | PairDegradation::FlowSdedit { params, .. } => {
            flow(hr_clip, params, params.apply_at)?
        }
    };
    let hr = to_model_space(&encode(hr_clip, codec)?.data);
    let mut lr = to_model_space(&encode(&lr_clip, codec)?.data);
    if let PairDegradation::FlowSdedit { alpha, steps, .. } = degradation {
        lr = sdedit_degrade(&ContractiveToyVelocity::default(), &lr, *alpha, *steps, &mut rng.fork(2), &())?;
    }
    Ok(TrainPair { hr, lr, text })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            clips: 64,
            frames: 17,
            height: 64,
            width: 64,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn clip_spec(&self, index: usize) -> SyntheticSpec {
        SyntheticSpec::draw(&mut Rng::new(self.seed, 1).fork(index as u64))
    }

    pub fn render(&self, index: usize) -> Result<Clip> {
        self.clip_spec(index).render(self.frames, self.height, self.width)
    }
}

/// Renders and encodes every clip; clip `i` depends only on `(seed, i)`.
pub fn synthetic_pairs(
    spec: &DatasetSpec,
    upsample: usize,
    codec: CodecDescriptor,
    text_dim: usize,
    degradation: &PairDegradation,
) -> Result<Vec<TrainPair>> {
    (0..spec.clips)
        .into_par_iter()
        .map(|i| {
            let s = spec.clip_spec(i);
            let clip = s.render(spec.frames, spec.height, spec.width)?;
            let rng = Rng::new(spec.seed, 2).fork(i as u64);
            make_pair(&clip, upsample, codec, degradation, s.text(text_dim), &rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_have_matching_extents() {
        let spec = DatasetSpec {
            clips: 2,
            ..DatasetSpec::default()
        };
        let pairs = synthetic_pairs(&spec, 2, CodecDescriptor::default(), 8, &PairDegradation::OneOrder).unwrap();
        assert_eq!(pairs[0].hr.shape(), &[5, 768, 8, 8]);
        assert_eq!(pairs[0].lr.shape(), &[5, 768, 4, 4]);
        assert!(pairs[0].hr.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let again = synthetic_pairs(&spec, 2, CodecDescriptor::default(), 8, &PairDegradation::OneOrder).unwrap();
        assert_eq!(pairs, again);
    }

    #[test]
    fn degraded_pairs_build() {
        let spec = DatasetSpec {
            clips: 1,
            ..DatasetSpec::default()
        };
        let deg = PairDegradation::FlowSdedit {
            params: DegradeParams::default(),
            alpha: 0.3,
            steps: 4,
        };
        let p = synthetic_pairs(&spec, 2, CodecDescriptor::default(), 8, &deg).unwrap();
        assert!(p[0].lr.is_finite());
    }

    #[test]
    fn downsample_rejects_odd_factor() {
        let clip = DatasetSpec::default().render(0).unwrap();
        assert!(downsample_clip(&clip, 3).is_err());
        assert_eq!(downsample_clip(&clip, 2).unwrap().height(), 32);
    }
}
