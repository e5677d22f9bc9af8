//! The velocity network: conditioning path, token fusion, DiT blocks with
//! adaptive layer norm, output projection and a time-gated skip.

use std::collections::HashMap;

use gvr_core::attention::{layer_plan, GridLayout};
use gvr_core::autodiff::{Tape, Var};
use gvr_core::conv::Conv3dSpec;
use gvr_core::flow::{discrete_timestep, VelocityField};
use gvr_core::{Error, Result, Scalar, Tensor};

use crate::config::GvrConfig;
use crate::params::ParamSet;

/// Everything besides `z_t` and `t` that the network reads.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// Noise-augmented low-resolution latent `[Tl, Cl, h, w]`.
    pub c_aug: Tensor,
    pub aug_level: f64,
    /// Text slot of length `text_dim`; `None` is the null prompt.
    pub text: Option<Tensor>,
}

/// Sinusoidal features of a discrete step: `sin` halves then `cos` halves.
pub fn sinusoidal<T: Scalar>(step: u32, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(vec![1, dim], |i| {
        if i >= 2 * half {
            return T::zero();
        }
        let k = i % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = step as f64 * freq;
        T::of(if i < half { arg.sin() } else { arg.cos() })
    })
}

/// `[Tl, C, H, W]` to `[Tl * H * W, C]` tokens.
pub fn to_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (t, c, h, w) = dims4(x, "to_tokens")?;
    x.permute(&[0, 2, 3, 1])?.reshape(vec![t * h * w, c])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<T: Scalar>(tokens: &Tensor<T>, frames: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let c = tokens.dim(1);
    tokens.reshape(vec![frames, h, w, c])?.permute(&[0, 3, 1, 2])
}

fn dims4<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [t, c, h, w] => Ok((*t, *c, *h, *w)),
        s => Err(Error::shape(op, format!("expected Tl x C x H x W, got {s:?}"))),
    }
}

/// Inputs of one forward pass, in the tape's scalar type.
pub struct NetInputs<T: Scalar> {
    pub z_t: Tensor<T>,
    pub t: f64,
    pub c_aug: Tensor<T>,
    pub aug_level: f64,
    pub text: Tensor<T>,
}

/// Parameters recorded on a tape, addressed by name.
pub struct TapeParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl TapeParams {
    /// Records every parameter, as trainable or constant.
    pub fn record<T: Scalar>(tape: &mut Tape<T>, params: &ParamSet, trainable: bool) -> Self {
        Self::record_cast(tape, params.names(), params.tensors().iter().map(|t| t.cast::<T>()), trainable)
    }

    pub fn record_cast<T: Scalar>(
        tape: &mut Tape<T>,
        names: &[String],
        tensors: impl Iterator<Item = Tensor<T>>,
        trainable: bool,
    ) -> Self {
        let vars = tensors
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { vars, index }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, p: &TapeParams, x: Var, prefix: &str) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{prefix}.weight")))?;
    tape.add_row(y, p.get(&format!("{prefix}.bias")))
}

/// `layer_norm(x) * (1 + scale) + shift`.
fn modulate<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.layer_norm(x, T::of(1e-6))?;
    let s = tape.add_scalar(scale, T::one());
    let y = tape.mul_row(n, s)?;
    tape.add_row(y, shift)
}

/// Checks the noisy latent and conditioning shapes against the config.
pub fn check_inputs<T: Scalar>(cfg: &GvrConfig, z_t: &Tensor<T>, c_aug: &Tensor<T>, text: &Tensor<T>) -> Result<()> {
    let (tl, cl, h, w) = dims4(z_t, "forward")?;
    let (ctl, ccl, ch, cw) = dims4(c_aug, "forward")?;
    if cl != cfg.latent_channels() {
        return Err(Error::shape(
            "forward",
            format!("latent has {cl} channels, config expects {}", cfg.latent_channels()),
        ));
    }
    if (ctl, ccl, ch * cfg.upsample, cw * cfg.upsample) != (tl, cl, h, w) {
        return Err(Error::shape(
            "forward",
            format!(
                "condition {:?} does not match latent {:?} at upsample x{}",
                c_aug.shape(),
                z_t.shape(),
                cfg.upsample
            ),
        ));
    }
    if text.numel() != cfg.text_dim {
        return Err(Error::shape(
            "forward",
            format!("text slot has {} values, expected {}", text.numel(), cfg.text_dim),
        ));
    }
    Ok(())
}

/// Records the network on `tape` and returns the velocity tokens `[N, Cl]`.
pub fn build<T: Scalar>(tape: &mut Tape<T>, cfg: &GvrConfig, p: &TapeParams, inp: &NetInputs<T>) -> Result<Var> {
    check_inputs(cfg, &inp.z_t, &inp.c_aug, &inp.text)?;
    let (tl, cl, h, w) = dims4(&inp.z_t, "forward")?;
    let (d, n) = (cfg.width, tl * h * w);
    let spec = Conv3dSpec::same(cfg.cond_kernel)?;

    let c = tape.constant(inp.c_aug.permute(&[1, 0, 2, 3])?);
    let c = tape.conv3d(c, p.get("cond_in.kernel"), p.get("cond_in.bias"), spec)?;
    let c = tape.bilinear(c, h, w)?;
    let c = tape.conv3d(c, p.get("cond_out.kernel"), p.get("cond_out.bias"), spec)?;
    let c = tape.reshape(c, vec![d, n])?;
    let c = tape.transpose(c)?;

    let z_tokens = tape.constant(to_tokens(&inp.z_t)?);
    let fused = tape.concat_cols(z_tokens, c)?;
    let mut x = linear(tape, p, fused, "in_proj")?;

    let steps = sinusoidal::<T>(discrete_timestep(inp.t), d)
        .add(&sinusoidal::<T>(discrete_timestep(inp.aug_level), d))?;
    let e = tape.constant(steps);
    let e = linear(tape, p, e, "embed.fc1")?;
    let e = tape.silu(e);
    let e = linear(tape, p, e, "embed.fc2")?;
    let text = tape.constant(inp.text.reshape(vec![1, cfg.text_dim])?);
    let text = tape.matmul(text, p.get("text.weight"))?;
    let e = tape.add(e, text)?;
    let se = tape.silu(e);

    let layout = GridLayout {
        frames: tl,
        height: h,
        width: w,
    };
    for l in 0..cfg.depth {
        let prefix = format!("blocks.{l}");
        let m = linear(tape, p, se, &format!("{prefix}.mod"))?;
        let chunk = |tape: &mut Tape<T>, i: usize| tape.slice_cols(m, i * d, d);
        let (shift1, scale1, gate1) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?);
        let (shift2, scale2, gate2) = (chunk(tape, 3)?, chunk(tape, 4)?, chunk(tape, 5)?);

        let hn = modulate(tape, x, shift1, scale1)?;
        let qkv = linear(tape, p, hn, &format!("{prefix}.qkv"))?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, d)?;
        let v = tape.slice_cols(qkv, 2 * d, d)?;
        let plan = layer_plan(layout, &cfg.attention, l, tape.value(q), tape.value(k), cfg.heads)?;
        let a = tape.attention(q, k, v, cfg.heads, plan)?;
        let a = linear(tape, p, a, &format!("{prefix}.attn_out"))?;
        let a = tape.mul_row(a, gate1)?;
        x = tape.add(x, a)?;

        let hn = modulate(tape, x, shift2, scale2)?;
        let f = linear(tape, p, hn, &format!("{prefix}.ff1"))?;
        let f = tape.silu(f);
        let f = linear(tape, p, f, &format!("{prefix}.ff2"))?;
        let f = tape.mul_row(f, gate2)?;
        x = tape.add(x, f)?;
    }

    let m = linear(tape, p, se, "final.mod")?;
    let shift = tape.slice_cols(m, 0, d)?;
    let scale = tape.slice_cols(m, d, d)?;
    let x = modulate(tape, x, shift, scale)?;
    let out = linear(tape, p, x, "out_proj")?;
    let gate = linear(tape, p, se, "skip")?;
    let skip = tape.mul_row(z_tokens, gate)?;
    debug_assert_eq!(tape.value(out).shape(), &[n, cl]);
    tape.add(out, skip)
}

/// Mean squared error between velocity tokens and `target` tokens.
pub fn token_loss<T: Scalar>(tape: &mut Tape<T>, v: Var, target: &Tensor<T>) -> Result<Var> {
    let t = tape.constant(target.clone());
    let diff = tape.sub(v, t)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GvrModel {
    pub config: GvrConfig,
    pub params: ParamSet,
}

impl GvrModel {
    pub fn new(config: GvrConfig, seed: u64) -> Result<Self> {
        let params = ParamSet::init(&config, &gvr_core::Rng::new(seed, 0))?;
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn null_text(&self) -> Tensor {
        Tensor::zeros(vec![self.config.text_dim])
    }

    /// Velocity `v(z_t, t | condition)`, shaped like `z_t`.
    pub fn forward(&self, z_t: &Tensor, t: f64, cond: &Conditioning) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let p = TapeParams::record(&mut tape, &self.params, false);
        let inputs = NetInputs {
            z_t: z_t.clone(),
            t,
            c_aug: cond.c_aug.clone(),
            aug_level: cond.aug_level,
            text: cond.text.clone().unwrap_or_else(|| self.null_text()),
        };
        let v = build(&mut tape, &self.config, &p, &inputs)?;
        from_tokens(tape.value(v), z_t.dim(0), z_t.dim(2), z_t.dim(3))
    }
}

impl VelocityField for GvrModel {
    type Condition = Conditioning;

    fn evaluate(&self, z_t: &Tensor, t: f64, condition: &Conditioning) -> Result<Tensor> {
        self.forward(z_t, t, condition)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gvr_core::rng::{randn, Rng};

    fn small() -> GvrConfig {
        GvrConfig {
            width: 16,
            heads: 2,
            depth: 2,
            ..GvrConfig::default()
        }
    }

    #[test]
    fn token_layout_round_trip() {
        let x = randn::<f32>(&mut Rng::new(1, 0), &[2, 5, 3, 4]).unwrap();
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[24, 5]);
        // Token (frame 1, y 2, x 3) channel 4.
        assert_eq!(t.data()[(12 + 2 * 4 + 3) * 5 + 4], x.data()[((5 + 4) * 3 + 2) * 4 + 3]);
        assert_eq!(from_tokens(&t, 2, 3, 4).unwrap(), x);
    }

    #[test]
    fn sinusoid_starts_at_sin0_cos0() {
        let s = sinusoidal::<f64>(0, 8);
        assert_eq!(s.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn output_shape_and_zero_init() {
        let cfg = small();
        let model = GvrModel::new(cfg.clone(), 3).unwrap();
        let mut rng = Rng::new(4, 0);
        let z = randn::<f32>(&mut rng, &[2, cfg.latent_channels(), 4, 6]).unwrap();
        let c = randn::<f32>(&mut rng, &[2, cfg.latent_channels(), 2, 3]).unwrap();
        let cond = Conditioning {
            c_aug: c,
            aug_level: 0.4,
            text: None,
        };
        let v = model.forward(&z, 0.7, &cond).unwrap();
        assert_eq!(v.shape(), z.shape());
        assert!(v.data().iter().all(|&x| x == 0.0));
        let bad = Conditioning {
            c_aug: Tensor::zeros(vec![2, cfg.latent_channels(), 4, 6]),
            ..cond
        };
        assert!(model.forward(&z, 0.7, &bad).is_err());
    }
}
