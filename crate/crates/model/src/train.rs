//! Flow-matching training: per-sample draws, gradients, optimizers and the
//! loss trace.

use std::path::Path;

use rayon::prelude::*;

use gvr_core::autodiff::Tape;
use gvr_core::flow::{
    add_noise, augment_with_noise, discrete_timestep, sample_timestep, sample_timestep_uniform, velocity_target,
    TimestepDistribution,
};
use gvr_core::media::{emit_report, Report};
use gvr_core::rng::randn;
use gvr_core::{Error, Result, Rng, Tensor};

use crate::config::{OptimizerKind, SamplerChoice, TrainConfig};
use crate::data::TrainPair;
use crate::net::{build, to_tokens, token_loss, GvrModel, NetInputs, TapeParams};

/// Random quantities of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraw {
    pub pair_index: usize,
    pub t: f64,
    pub eps: Tensor,
    pub aug_level: f64,
    pub aug_eps: Tensor,
    pub null_text: bool,
}

/// Returns `true` with probability `p`: the prompt is replaced by the null
/// slot.
pub fn draw_null_text(p: f64, rng: &mut Rng) -> bool {
    rng.bernoulli(p)
}

pub fn draw_sample(
    data: &[TrainPair],
    cfg: &TrainConfig,
    dist: Option<&TimestepDistribution>,
    rng: &mut Rng,
) -> Result<SampleDraw> {
    if data.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    let pair_index = rng.index(data.len());
    let t = match dist {
        Some(d) => sample_timestep(d, rng),
        None => sample_timestep_uniform(rng),
    };
    let pair = &data[pair_index];
    let eps = randn(rng, pair.hr.shape())?;
    let aug_level = cfg.noise_aug.draw_level(rng);
    let aug_eps = randn(rng, pair.lr.shape())?;
    let null_text = draw_null_text(cfg.text_dropout, rng);
    Ok(SampleDraw {
        pair_index,
        t,
        eps,
        aug_level,
        aug_eps,
        null_text,
    })
}

/// Loss of one draw and the gradient of every parameter.
pub fn sample_gradients(model: &GvrModel, pair: &TrainPair, draw: &SampleDraw) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::<f32>::new();
    let p = TapeParams::record(&mut tape, &model.params, true);
    let z_t = add_noise(&pair.hr, draw.t, &draw.eps)?.z_t;
    let inputs = NetInputs {
        z_t,
        t: draw.t,
        c_aug: augment_with_noise(&pair.lr, draw.aug_level, &draw.aug_eps)?,
        aug_level: draw.aug_level,
        text: if draw.null_text {
            model.null_text()
        } else {
            pair.text.clone()
        },
    };
    let v = build(&mut tape, &model.config, &p, &inputs)?;
    let target = to_tokens(&velocity_target(&pair.hr, &draw.eps)?)?;
    let loss = token_loss(&mut tape, v, &target)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).data()[0] as f64;
    let g = p
        .vars()
        .iter()
        .zip(model.params.tensors())
        .map(|(&var, t)| grads.get_or_zeros(var, t))
        .collect();
    Ok((value, g))
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0f32; p.numel()]).collect();
        Self {
            kind: cfg.optimizer,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            momentum: cfg.momentum,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        self.step += 1;
        let lr = self.lr as f32;
        let wd = self.weight_decay as f32;
        let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let mu = self.momentum as f32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            p.expect_same_shape(g, "optimizer")?;
            let mut data = p.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (x, &gj)) in data.iter_mut().zip(g.data()).enumerate() {
                match self.kind {
                    OptimizerKind::AdamW => {
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        *x -= lr * (update + wd * *x);
                    }
                    OptimizerKind::Sgd => {
                        m[j] = mu * m[j] + gj + wd * *x;
                        *x -= lr * m[j];
                    }
                }
            }
            *p = Tensor::new(p.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Discrete timestep of the batch's first example.
    pub timestep: u32,
    pub aug_level: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn to_report(&self) -> Report {
        let mut r = Report::new(["step", "loss", "timestep_drawn", "aug_level"]);
        for s in &self.records {
            r.push([
                s.step.to_string(),
                format!("{:.8}", s.loss),
                s.timestep.to_string(),
                format!("{:.6}", s.aug_level),
            ])
            .expect("four cells");
        }
        r
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        emit_report(&self.to_report(), path)
    }
}

pub fn load_sampler(choice: &SamplerChoice) -> Result<Option<TimestepDistribution>> {
    match choice {
        SamplerChoice::Uniform => Ok(None),
        SamplerChoice::DetailAware { path } => TimestepDistribution::read_csv(path).map(Some),
    }
}

/// Runs `cfg.steps` optimizer steps starting at global step `first_step`.
/// Step `s` draws from `Rng::new(seed, 3).fork(s)`, so resumed runs see the
/// same examples as uninterrupted ones.
pub fn train(model: &mut GvrModel, data: &[TrainPair], cfg: &TrainConfig, first_step: usize) -> Result<TrainReport> {
    cfg.validate()?;
    model.config.validate()?;
    let dist = load_sampler(&cfg.sampler)?;
    let mut opt = Optimizer::new(cfg, model.params.tensors());
    let root = Rng::new(cfg.seed, 3);
    let mut report = TrainReport::default();
    for step in first_step..first_step + cfg.steps {
        let step_rng = root.fork(step as u64);
        let draws = (0..cfg.batch)
            .map(|b| draw_sample(data, cfg, dist.as_ref(), &mut step_rng.fork(b as u64)))
            .collect::<Result<Vec<_>>>()?;
        let results = draws
            .par_iter()
            .map(|d| sample_gradients(model, &data[d.pair_index], d))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / cfg.batch as f32;
        let mut loss = 0.0;
        let mut grads: Vec<Tensor> = Vec::new();
        for (l, g) in results {
            loss += l / cfg.batch as f64;
            grads = if grads.is_empty() {
                g.iter().map(|x| x.scale(scale)).collect()
            } else {
                grads
                    .iter()
                    .zip(&g)
                    .map(|(a, b)| a.lerp_with(1.0, b, scale))
                    .collect::<Result<_>>()?
            };
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("training loss is {loss}"),
            });
        }
        opt.update(model.params.tensors_mut(), &grads)?;
        if !model.params.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
        report.records.push(StepRecord {
            step,
            loss,
            timestep: discrete_timestep(draws[0].t),
            aug_level: draws[0].aug_level,
        });
    }
    Ok(report)
}
