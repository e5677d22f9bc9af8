//! Checkpoint files: a `GVRM` header with the config and its digest, then
//! named parameter blocks in the latent container format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use gvr_core::codec::{read_latent_block, write_latent_block};
use gvr_core::{Error, Result, Tensor};

use crate::config::GvrConfig;
use crate::net::GvrModel;
use crate::params::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GVRM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn config_digest(cfg: &GvrConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).into()
}

fn u32_le(n: usize, what: &str) -> std::io::Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("{what} too large")))
}

pub fn save_checkpoint(model: &GvrModel, step: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_vec(&model.config).expect("config serializes");
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut body = || -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&config_digest(&model.config))?;
        w.write_all(&u32_le(json.len(), "config")?)?;
        w.write_all(&json)?;
        w.write_all(&(step as u64).to_le_bytes())?;
        w.write_all(&u32_le(model.params.len(), "parameter list")?)?;
        for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
            w.write_all(&u32_le(name.len(), "name")?)?;
            w.write_all(name.as_bytes())?;
            write_latent_block(&mut w, &t.reshape(vec![t.numel()]).expect("flat view"))?;
        }
        w.flush()
    };
    body().map_err(io)
}

/// Loads a model and the step it was saved at.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(GvrModel, usize)> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let bad = |d: String| Error::format(path, d);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected GVRM")));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(io)?;
    let version = u32::from_le_bytes(u32b);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Unsupported {
            path: path.into(),
            detail: format!("checkpoint version {version}"),
        });
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest).map_err(io)?;
    r.read_exact(&mut u32b).map_err(io)?;
    let mut json = vec![0u8; u32::from_le_bytes(u32b) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let config: GvrConfig = serde_json::from_slice(&json).map_err(|e| bad(format!("config: {e}")))?;
    if config_digest(&config) != digest {
        return Err(bad("config digest mismatch".into()));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(io)?;
    let step = u64::from_le_bytes(u64b) as usize;
    r.read_exact(&mut u32b).map_err(io)?;
    let count = u32::from_le_bytes(u32b) as usize;
    let layout = ParamSet::layout(&config);
    if count != layout.len() {
        return Err(bad(format!("{count} parameter blocks, config needs {}", layout.len())));
    }
    let mut named = Vec::with_capacity(count);
    for (expected, shape) in layout {
        r.read_exact(&mut u32b).map_err(io)?;
        let mut name = vec![0u8; u32::from_le_bytes(u32b) as usize];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8".into()))?;
        if name != expected {
            return Err(bad(format!("found parameter {name}, expected {expected}")));
        }
        let flat: Tensor = read_latent_block(&mut r, path)?;
        let t = flat
            .reshape(shape.clone())
            .map_err(|_| bad(format!("{name}: {} values for shape {shape:?}", flat.numel())))?;
        named.push((name, t));
    }
    let params = ParamSet::from_named(&config, named)?;
    Ok((GvrModel { config, params }, step))
}
