//! Cascaded inference and clean-estimate trace collection.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rayon::prelude::*;

use gvr_core::codec::{decode, encode, Latent};
use gvr_core::flow::{augment_with_noise, ode_sample, ode_sample_traced, VelocityField};
use gvr_core::media::Clip;
use gvr_core::rng::randn;
use gvr_core::{Error, Result, Rng, Tensor};

use crate::data::{from_model_space, to_model_space};
use crate::net::{Conditioning, GvrModel};

pub fn tensor_hash(t: &Tensor) -> u64 {
    let mut h = DefaultHasher::new();
    for &d in t.shape() {
        h.write_usize(d);
    }
    for v in t.data() {
        h.write_u32(v.to_bits());
    }
    h.finish()
}

/// Wraps a model and records a hash of the condition at every evaluation.
struct Watched<'a> {
    model: &'a GvrModel,
    hashes: RefCell<Vec<u64>>,
}

impl VelocityField for Watched<'_> {
    type Condition = Conditioning;

    fn evaluate(&self, z_t: &Tensor, t: f64, c: &Conditioning) -> Result<Tensor> {
        self.hashes.borrow_mut().push(tensor_hash(&c.c_aug));
        self.model.forward(z_t, t, c)
    }
}

/// Condition and starting noise for one inference run.
fn prepare(model: &GvrModel, c0: &Tensor, aug_level: f64, rng: &mut Rng, text: Option<Tensor>) -> Result<(Conditioning, Tensor)> {
    if c0.rank() != 4 {
        return Err(Error::shape("infer", format!("expected Tl x Cl x h x w, got {:?}", c0.shape())));
    }
    let up = model.config.upsample;
    let aug_eps = randn(rng, c0.shape())?;
    let cond = Conditioning {
        c_aug: augment_with_noise(c0, aug_level, &aug_eps)?,
        aug_level,
        text,
    };
    let z_shape = [c0.dim(0), c0.dim(1), c0.dim(2) * up, c0.dim(3) * up];
    Ok((cond, randn(rng, &z_shape)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOutput {
    pub latent: Tensor,
    /// Hash of the condition seen at each denoising step.
    pub condition_hashes: Vec<u64>,
}

/// Samples a high-resolution latent (model space) from a low-resolution one.
pub fn infer_watched(
    model: &GvrModel,
    c0: &Tensor,
    steps: usize,
    aug_level: f64,
    rng: &mut Rng,
    text: Option<Tensor>,
) -> Result<InferOutput> {
    let (cond, z) = prepare(model, c0, aug_level, rng, text)?;
    let start = tensor_hash(&cond.c_aug);
    let watched = Watched {
        model,
        hashes: RefCell::new(Vec::with_capacity(steps)),
    };
    let latent = ode_sample(&watched, &z, steps, &cond)?;
    let condition_hashes = watched.hashes.into_inner();
    if let Some(i) = condition_hashes.iter().position(|&h| h != start) {
        return Err(Error::invalid("infer", format!("condition changed at step {i}")));
    }
    Ok(InferOutput {
        latent,
        condition_hashes,
    })
}

pub fn infer(model: &GvrModel, c0: &Tensor, steps: usize, aug_level: f64, rng: &mut Rng, text: Option<Tensor>) -> Result<Tensor> {
    Ok(infer_watched(model, c0, steps, aug_level, rng, text)?.latent)
}

/// Encodes `lr`, runs [`infer`] and decodes the result to pixels.
pub fn infer_clip(model: &GvrModel, lr: &Clip, steps: usize, aug_level: f64, seed: u64) -> Result<Clip> {
    let c0 = to_model_space(&encode(lr, model.config.codec)?.data);
    let z = infer(model, &c0, steps, aug_level, &mut Rng::new(seed, 4), None)?;
    decode(&Latent::new(from_model_space(&z), model.config.codec)?, lr.frame_rate())
}

/// Clean estimates of every step for each low-resolution latent. Clip `i`
/// draws from `Rng::new(seed, 5).fork(i)`.
pub fn collect_trace(
    model: &GvrModel,
    lr_latents: &[Tensor],
    steps: usize,
    aug_level: f64,
    seed: u64,
) -> Result<Vec<Vec<Tensor>>> {
    lr_latents
        .par_iter()
        .enumerate()
        .map(|(i, c0)| {
            let mut rng = Rng::new(seed, 5).fork(i as u64);
            let (cond, z) = prepare(model, c0, aug_level, &mut rng, None)?;
            Ok(ode_sample_traced(model, &z, steps, &cond)?.1)
        })
        .collect()
}
