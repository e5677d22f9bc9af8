//! Rectified-flow math: the linear noising path, the flow-matching loss,
//! Euler ODE sampling, model-guided degradation and noise augmentation.
//!
//! Time runs from `t = 0` (clean) to `t = 1` (pure noise):
//! `z_t = (1 - t) z_0 + t eps`, with velocity `dz/dt = eps - z_0`.

pub mod sampler;

pub use sampler::{
    build_detail_aware_sampler, sample_timestep, sample_timestep_uniform, DeltaNorm, DetailAwareOptions,
    TimestepDistribution,
};

use crate::error::{Error, Result};
use crate::rng::{randn, Rng};
use crate::tensor::Tensor;

/// Discrete timestep for a continuous level, `round(1000 t)`.
pub fn discrete_timestep(t: f64) -> u32 {
    (1000.0 * t).round() as u32
}

fn check_unit(t: f64, op: &'static str) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(op, format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub z_t: Tensor,
    pub t: f64,
}

impl FlowState {
    pub fn timestep(&self) -> u32 {
        discrete_timestep(self.t)
    }
}

fn broadcast_pair(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(Tensor, Tensor)> {
    match (a.numel(), b.numel()) {
        (1, n) if n != 1 => Ok((Tensor::full(b.shape().to_vec(), a.data()[0]), b.clone())),
        (n, 1) if n != 1 => Ok((a.clone(), Tensor::full(a.shape().to_vec(), b.data()[0]))),
        _ => {
            a.expect_same_shape(b, op)?;
            Ok((a.clone(), b.clone()))
        }
    }
}

/// `z_t = (1 - t) z0 + t eps`; single-element operands broadcast.
pub fn add_noise(z0: &Tensor, t: f64, eps: &Tensor) -> Result<FlowState> {
    check_unit(t, "add_noise")?;
    let (z0, eps) = broadcast_pair(z0, eps, "add_noise")?;
    let t32 = t as f32;
    let z_t = z0.zip_map(&eps, "add_noise", |z, e| (1.0 - t32) * z + t32 * e)?;
    Ok(FlowState { z_t, t })
}

/// Regression target of the flow-matching loss, `eps - z0`.
pub fn velocity_target(z0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.sub(z0)
}

/// Clean-signal estimate `z_t - t v`.
pub fn predict_clean(z_t: &Tensor, t: f64, v: &Tensor) -> Result<Tensor> {
    check_unit(t, "predict_clean")?;
    z_t.lerp_with(1.0, v, -(t as f32))
}

/// A velocity model `v(z_t, t, condition)`.
pub trait VelocityField {
    type Condition: ?Sized;

    fn evaluate(&self, z_t: &Tensor, t: f64, condition: &Self::Condition) -> Result<Tensor>;
}

/// The exact constant velocity `eps - z0` of one noising path.
#[derive(Clone, Debug)]
pub struct OracleLinearVelocity {
    velocity: Tensor,
}

impl OracleLinearVelocity {
    pub fn new(z0: &Tensor, eps: &Tensor) -> Result<Self> {
        Ok(Self {
            velocity: velocity_target(z0, eps)?,
        })
    }
}

impl VelocityField for OracleLinearVelocity {
    type Condition = ();

    fn evaluate(&self, z_t: &Tensor, _t: f64, _: &()) -> Result<Tensor> {
        z_t.expect_same_shape(&self.velocity, "OracleLinearVelocity")?;
        Ok(self.velocity.clone())
    }
}

/// Fixed affine field `v = rate (z - anchor)`. Integrating toward `t = 0`
/// shrinks `z` toward `anchor`, so stronger corruption is never undone.
#[derive(Clone, Copy, Debug)]
pub struct ContractiveToyVelocity {
    pub rate: f32,
    pub anchor: f32,
}

impl Default for ContractiveToyVelocity {
    fn default() -> Self {
        Self { rate: 1.0, anchor: 0.0 }
    }
}

impl VelocityField for ContractiveToyVelocity {
    type Condition = ();

    fn evaluate(&self, z_t: &Tensor, _t: f64, _: &()) -> Result<Tensor> {
        Ok(z_t.map(|z| self.rate * (z - self.anchor)))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroVelocity;

impl VelocityField for ZeroVelocity {
    type Condition = ();

    fn evaluate(&self, z_t: &Tensor, _t: f64, _: &()) -> Result<Tensor> {
        Ok(Tensor::zeros(z_t.shape().to_vec()))
    }
}

/// Mean squared error between `eps - z0` and the model velocity at `z_t`.
pub fn cfm_loss<M: VelocityField + ?Sized>(
    model: &M,
    z0: &Tensor,
    eps: &Tensor,
    t: f64,
    condition: &M::Condition,
) -> Result<f64> {
    let state = add_noise(z0, t, eps)?;
    let v = model.evaluate(&state.z_t, t, condition)?;
    let target = velocity_target(z0, eps)?;
    target.expect_same_shape(&v, "cfm_loss")?;
    let sq: f64 = target
        .data()
        .iter()
        .zip(v.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sq / target.numel() as f64)
}

/// Euler integration of `dz/dt = v` from `t_start` down to 0 in `steps`
/// uniform steps. With `trace`, the clean estimate of every step is kept.
pub fn integrate<M: VelocityField + ?Sized>(
    model: &M,
    z_start: &Tensor,
    t_start: f64,
    steps: usize,
    condition: &M::Condition,
    mut trace: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::invalid("ode_sample", "steps must be >= 1"));
    }
    check_unit(t_start, "ode_sample")?;
    let mut z = z_start.clone();
    let dt = t_start / steps as f64;
    for i in 0..steps {
        let t = t_start * (1.0 - i as f64 / steps as f64);
        let v = model.evaluate(&z, t, condition)?;
        z.expect_same_shape(&v, "ode_sample")?;
        if let Some(trace) = trace.as_deref_mut() {
            trace.push(predict_clean(&z, t, &v)?);
        }
        z = z.lerp_with(1.0, &v, -(dt as f32))?;
        if !z.is_finite() {
            return Err(Error::NonFinite {
                step: i,
                detail: format!("sample diverged at t = {t:.4}"),
            });
        }
    }
    Ok(z)
}

/// Integrates from pure noise `z_T` at `t = 1` to `t = 0`.
pub fn ode_sample<M: VelocityField + ?Sized>(
    model: &M,
    z_t: &Tensor,
    steps: usize,
    condition: &M::Condition,
) -> Result<Tensor> {
    integrate(model, z_t, 1.0, steps, condition, None)
}

/// [`ode_sample`] that also returns the clean estimate of every step.
pub fn ode_sample_traced<M: VelocityField + ?Sized>(
    model: &M,
    z_t: &Tensor,
    steps: usize,
    condition: &M::Condition,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut trace = Vec::with_capacity(steps);
    let z = integrate(model, z_t, 1.0, steps, condition, Some(&mut trace))?;
    Ok((z, trace))
}

/// Model-guided degradation with explicit noise: blend `c0` with `eps` at
/// ratio `alpha`, then denoise from `t = alpha` to 0.
pub fn sdedit_degrade_with_noise<M: VelocityField + ?Sized>(
    model: &M,
    c0: &Tensor,
    alpha: f64,
    steps: usize,
    eps: &Tensor,
    condition: &M::Condition,
) -> Result<Tensor> {
    check_unit(alpha, "sdedit_degrade")?;
    if steps == 0 {
        return Err(Error::invalid("sdedit_degrade", "steps must be >= 1"));
    }
    if alpha == 0.0 {
        return Ok(c0.clone());
    }
    let state = add_noise(c0, alpha, eps)?;
    integrate(model, &state.z_t, alpha, steps, condition, None)
}

pub fn sdedit_degrade<M: VelocityField + ?Sized>(
    model: &M,
    c0: &Tensor,
    alpha: f64,
    steps: usize,
    rng: &mut Rng,
    condition: &M::Condition,
) -> Result<Tensor> {
    let eps = randn(rng, c0.shape())?;
    sdedit_degrade_with_noise(model, c0, alpha, steps, &eps, condition)
}

/// Interval from which the conditioning noise level is drawn.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseAugmentation {
    pub lo: f64,
    pub hi: f64,
}

impl NoiseAugmentation {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(
                "noise augmentation",
                format!("interval [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"),
            ));
        }
        Ok(Self { lo, hi })
    }

    pub fn draw_level(&self, rng: &mut Rng) -> f64 {
        rng.uniform_in(self.lo, self.hi).clamp(self.lo, self.hi)
    }
}

/// Blends `c` with fresh noise at a level `a ~ U[lo, hi]`, returning the
/// noisy condition and `a`.
pub fn apply_noise_augmentation(c: &Tensor, interval: NoiseAugmentation, rng: &mut Rng) -> Result<(Tensor, f64)> {
    NoiseAugmentation::new(interval.lo, interval.hi)?;
    let a = interval.draw_level(rng);
    let eps = randn(rng, c.shape())?;
    Ok((augment_with_noise(c, a, &eps)?, a))
}

/// `(1 - a) c + a eps`.
pub fn augment_with_noise(c: &Tensor, a: f64, eps: &Tensor) -> Result<Tensor> {
    check_unit(a, "noise augmentation")?;
    if a == 0.0 {
        return Ok(c.clone());
    }
    c.lerp_with(1.0 - a as f32, eps, a as f32)
}
