//! Named parameter storage and initialization.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use gvr_core::rng::{randn, Rng};
use gvr_core::{Error, Result, Tensor};

use crate::config::GvrConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zero,
    /// Normal with standard deviation `1 / sqrt(fan_in)`.
    Fan(usize),
}

fn specs(cfg: &GvrConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, cl) = (cfg.width, cfg.latent_channels());
    let [kt, kh, kw] = cfg.cond_kernel;
    let taps = kt * kh * kw;
    let hidden = cfg.mlp_ratio * d;
    let mut s = vec![
        ("cond_in.kernel".to_string(), vec![d, cl, kt, kh, kw], Init::Fan(cl * taps)),
        ("cond_in.bias".into(), vec![d], Init::Zero),
        ("cond_out.kernel".into(), vec![d, d, kt, kh, kw], Init::Fan(d * taps)),
        ("cond_out.bias".into(), vec![d], Init::Zero),
        ("in_proj.weight".into(), vec![cl + d, d], Init::Fan(cl + d)),
        ("in_proj.bias".into(), vec![d], Init::Zero),
        ("embed.fc1.weight".into(), vec![d, d], Init::Fan(d)),
        ("embed.fc1.bias".into(), vec![d], Init::Zero),
        ("embed.fc2.weight".into(), vec![d, d], Init::Fan(d)),
        ("embed.fc2.bias".into(), vec![d], Init::Zero),
        ("text.weight".into(), vec![cfg.text_dim, d], Init::Fan(cfg.text_dim.max(1))),
    ];
    for l in 0..cfg.depth {
        let b = |n: &str| format!("blocks.{l}.{n}");
        s.extend([
            (b("mod.weight"), vec![d, 6 * d], Init::Zero),
            (b("mod.bias"), vec![6 * d], Init::Zero),
            (b("qkv.weight"), vec![d, 3 * d], Init::Fan(d)),
            (b("qkv.bias"), vec![3 * d], Init::Zero),
            (b("attn_out.weight"), vec![d, d], Init::Fan(d)),
            (b("attn_out.bias"), vec![d], Init::Zero),
            (b("ff1.weight"), vec![d, hidden], Init::Fan(d)),
            (b("ff1.bias"), vec![hidden], Init::Zero),
            (b("ff2.weight"), vec![hidden, d], Init::Fan(hidden)),
            (b("ff2.bias"), vec![d], Init::Zero),
        ]);
    }
    s.extend([
        ("final.mod.weight".into(), vec![d, 2 * d], Init::Zero),
        ("final.mod.bias".into(), vec![2 * d], Init::Zero),
        ("out_proj.weight".into(), vec![d, cl], Init::Zero),
        ("out_proj.bias".into(), vec![cl], Init::Zero),
        ("skip.weight".into(), vec![d, cl], Init::Zero),
        ("skip.bias".into(), vec![cl], Init::Zero),
    ]);
    s
}

/// Parameters in a fixed, config-determined order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn init(cfg: &GvrConfig, rng: &Rng) -> Result<Self> {
        cfg.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (i, (name, shape, init)) in specs(cfg).into_iter().enumerate() {
            let t = match init {
                Init::Zero => Tensor::zeros(shape),
                Init::Fan(fan) => randn::<f32>(&mut rng.fork(i as u64), &shape)?.scale(1.0 / (fan as f32).sqrt()),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::from_parts(names, tensors))
    }

    /// Names and shapes a config's parameters must have, in order.
    pub fn layout(cfg: &GvrConfig) -> Vec<(String, Vec<usize>)> {
        specs(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    /// Rebuilds a set from named tensors, checking them against `cfg`.
    pub fn from_named(cfg: &GvrConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = specs(cfg);
        if expected.len() != named.len() {
            return Err(Error::invalid(
                "parameters",
                format!("expected {} tensors, found {}", expected.len(), named.len()),
            ));
        }
        for ((name, shape, _), (got_name, t)) in expected.iter().zip(&named) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::invalid(
                    "parameters",
                    format!("expected {name} {shape:?}, found {got_name} {:?}", t.shape()),
                ));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self::from_parts(names, tensors))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
