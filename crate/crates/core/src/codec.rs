//! Lossless space-time patchify codec standing in for a video autoencoder.
//!
//! Frame 0 forms latent frame 0 alone; every following group of `ft` frames
//! forms one latent frame. Each `fs x fs` pixel patch of every frame in a
//! group folds into channels, indexed `((f * 3 + c) * fs + dy) * fs + dx`
//! for frame `f` of the group and color `c`. The single-frame group leaves
//! the channels of `f > 0` at zero, so every latent frame has the same
//! channel count.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::Clip;
use crate::resample::bilinear_resize;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecDescriptor {
    /// Spatial patch size.
    pub fs: usize,
    /// Frames per latent frame after the first.
    pub ft: usize,
}

impl Default for CodecDescriptor {
    fn default() -> Self {
        Self { fs: 8, ft: 4 }
    }
}

impl CodecDescriptor {
    pub fn channels(&self) -> usize {
        3 * self.fs * self.fs * self.ft
    }

    /// Latent frames for a clip of `frames` frames.
    pub fn latent_frames(&self, frames: usize) -> Result<usize> {
        if frames == 0 || (frames - 1) % self.ft != 0 {
            return Err(Error::invalid(
                "latent codec",
                format!(
                    "frame count {frames} invalid: (T - 1) must be divisible by {}",
                    self.ft
                ),
            ));
        }
        Ok(1 + (frames - 1) / self.ft)
    }

    /// Source frames covered by `latent_frames` latent frames.
    pub fn source_frames(&self, latent_frames: usize) -> usize {
        1 + (latent_frames.max(1) - 1) * self.ft
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        if h % self.fs != 0 || w % self.fs != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "latent codec",
                format!("frame size {h}x{w} invalid: H and W must be divisible by {}", self.fs),
            ));
        }
        Ok(())
    }

    /// Source frame range of latent frame `l`.
    fn group(&self, l: usize) -> (usize, usize) {
        if l == 0 {
            (0, 1)
        } else {
            (1 + (l - 1) * self.ft, self.ft)
        }
    }
}

/// `Tl x Cl x Hl x Wl` latent plus the codec that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub data: Tensor,
    pub codec: CodecDescriptor,
}

impl Latent {
    pub fn new(data: Tensor, codec: CodecDescriptor) -> Result<Self> {
        if data.rank() != 4 || data.dim(1) != codec.channels() {
            return Err(Error::shape(
                "Latent",
                format!("expected Tl x {} x Hl x Wl, got {:?}", codec.channels(), data.shape()),
            ));
        }
        Ok(Self { data, codec })
    }

    pub fn frames(&self) -> usize {
        self.data.dim(0)
    }

    pub fn height(&self) -> usize {
        self.data.dim(2)
    }

    pub fn width(&self) -> usize {
        self.data.dim(3)
    }
}

pub fn encode(clip: &Clip, codec: CodecDescriptor) -> Result<Latent> {
    let (t, h, w) = (clip.len(), clip.height(), clip.width());
    let tl = codec.latent_frames(t)?;
    codec.check_spatial(h, w)?;
    let fs = codec.fs;
    let (hl, wl, cl) = (h / fs, w / fs, codec.channels());
    let px = clip.frames().data();
    let mut out = vec![0.0f32; tl * cl * hl * wl];
    for l in 0..tl {
        let (first, count) = codec.group(l);
        for f in 0..count {
            let frame = &px[(first + f) * h * w * 3..(first + f + 1) * h * w * 3];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let ch = ((f * 3 + c) * fs + y % fs) * fs + x % fs;
                        out[((l * cl + ch) * hl + y / fs) * wl + x / fs] = frame[(y * w + x) * 3 + c];
                    }
                }
            }
        }
    }
    Latent::new(Tensor::new(vec![tl, cl, hl, wl], out)?, codec)
}

pub fn decode(latent: &Latent, frame_rate: f64) -> Result<Clip> {
    let codec = latent.codec;
    let fs = codec.fs;
    let (tl, cl, hl, wl) = (latent.frames(), codec.channels(), latent.height(), latent.width());
    let (t, h, w) = (codec.source_frames(tl), hl * fs, wl * fs);
    let z = latent.data.data();
    let mut px = vec![0.0f32; t * h * w * 3];
    for l in 0..tl {
        let (first, count) = codec.group(l);
        for f in 0..count {
            let frame = &mut px[(first + f) * h * w * 3..(first + f + 1) * h * w * 3];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let ch = ((f * 3 + c) * fs + y % fs) * fs + x % fs;
                        frame[(y * w + x) * 3 + c] = z[((l * cl + ch) * hl + y / fs) * wl + x / fs];
                    }
                }
            }
        }
    }
    Clip::clamped(Tensor::new(vec![t, h, w, 3], px)?, frame_rate)
}

/// Bilinear upsampling of every channel plane of every latent frame.
pub fn upsample_condition(lr: &Latent, target_h: usize, target_w: usize) -> Result<Latent> {
    if target_h < lr.height() || target_w < lr.width() {
        return Err(Error::invalid(
            "upsample_condition",
            format!(
                "target {target_h}x{target_w} is smaller than source {}x{}",
                lr.height(),
                lr.width()
            ),
        ));
    }
    Latent::new(bilinear_resize(&lr.data, target_h, target_w)?, lr.codec)
}

pub const LATENT_MAGIC: &[u8; 4] = b"GVRL";
pub const LATENT_VERSION: u32 = 1;
/// Magic, version and four extents.
pub const LATENT_HEADER_BYTES: usize = 24;

/// Serializes a tensor of rank 1 to 4 as a latent block. Lower ranks are
/// padded with leading unit extents.
pub fn write_latent_block(out: &mut impl Write, tensor: &Tensor) -> std::io::Result<()> {
    if tensor.rank() == 0 || tensor.rank() > 4 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("latent blocks hold rank 1 to 4, got {:?}", tensor.shape()),
        ));
    }
    let mut extents = vec![1u32; 4 - tensor.rank()];
    extents.extend(tensor.shape().iter().map(|&d| d as u32));
    let mut buf = Vec::with_capacity(LATENT_HEADER_BYTES + tensor.numel() * 4);
    buf.extend_from_slice(LATENT_MAGIC);
    buf.extend_from_slice(&LATENT_VERSION.to_le_bytes());
    for e in extents {
        buf.extend_from_slice(&e.to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

/// Reads one latent block; the result always has rank 4.
pub fn read_latent_block(input: &mut impl Read, path: &Path) -> Result<Tensor> {
    let mut header = [0u8; LATENT_HEADER_BYTES];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::format(path, "truncated latent header"))?;
    if &header[..4] != LATENT_MAGIC {
        return Err(Error::format(path, "bad latent magic"));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != LATENT_VERSION {
        return Err(Error::Unsupported {
            path: path.to_path_buf(),
            detail: format!("latent version {}", word(0)),
        });
    }
    let shape: Vec<usize> = (1..5).map(|i| word(i) as usize).collect();
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    input
        .read_exact(&mut raw)
        .map_err(|_| Error::format(path, "truncated latent payload"))?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_latent(latent: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_latent_block(&mut buf, latent).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_latent(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = &bytes[..];
    let t = read_latent_block(&mut cursor, path)?;
    if !cursor.is_empty() {
        return Err(Error::format(path, "trailing bytes after latent payload"));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn clip(t: usize, h: usize, w: usize, seed: u64) -> Clip {
        let mut rng = Rng::new(seed, 0);
        Clip::new(Tensor::from_fn(vec![t, h, w, 3], |_| rng.uniform() as f32), 24.0).unwrap()
    }

    #[test]
    fn latent_lengths() {
        let c = CodecDescriptor::default();
        assert_eq!(c.latent_frames(17).unwrap(), 5);
        assert_eq!(c.latent_frames(77).unwrap(), 20);
        assert_eq!(c.channels(), 768);
        let err = c.latent_frames(16).unwrap_err().to_string();
        assert!(err.contains("divisible by 4"), "{err}");
    }

    #[test]
    fn round_trip_is_bitwise() {
        let x = clip(9, 16, 24, 1);
        let z = encode(&x, CodecDescriptor::default()).unwrap();
        assert_eq!(z.data.shape(), &[3, 768, 2, 3]);
        assert_eq!(decode(&z, 24.0).unwrap(), x);
    }

    #[test]
    fn first_latent_frame_pads_with_zeros() {
        let z = encode(&clip(5, 8, 8, 2), CodecDescriptor::default()).unwrap();
        let first = z.data.slice_outer(0, 1).unwrap();
        assert!(first.data()[192..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        let err = encode(&clip(5, 12, 16, 3), CodecDescriptor::default()).unwrap_err().to_string();
        assert!(err.contains("divisible by 8"), "{err}");
    }

    #[test]
    fn upsample_condition_contract() {
        let z = encode(&clip(5, 16, 16, 4), CodecDescriptor::default()).unwrap();
        assert_eq!(upsample_condition(&z, 2, 2).unwrap(), z);
        assert!(upsample_condition(&z, 1, 4).is_err());
        let c = Latent::new(Tensor::full(vec![1, 768, 2, 2], 0.3), z.codec).unwrap();
        let u = upsample_condition(&c, 4, 4).unwrap();
        assert!(u.data.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
        // Ramp [[0, 1], [2, 3]] in every plane: per-axis weights 0, .25, .75, 1.
        let ramp = Tensor::from_fn(vec![1, 768, 2, 2], |i| (i % 4) as f32);
        let u = upsample_condition(&Latent::new(ramp, z.codec).unwrap(), 4, 4).unwrap();
        let axis = [0.0f32, 0.25, 0.75, 1.0];
        for (i, &v) in u.data.data()[..16].iter().enumerate() {
            assert!((v - (2.0 * axis[i / 4] + axis[i % 4])).abs() < 1e-6);
        }
    }

    #[test]
    fn latent_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.gvrl");
        let t = Tensor::from_fn(vec![2, 3, 4, 5], |i| i as f32 * 0.5 - 3.0);
        write_latent(&t, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, LATENT_HEADER_BYTES + 120 * 4);
        assert_eq!(read_latent(&path).unwrap(), t);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(19))]
        #[test]
        fn shape_contract_holds(k in 1usize..=19) {
            let t = 4 * k + 1;
            let c = CodecDescriptor::default();
            prop_assert_eq!(c.latent_frames(t).unwrap(), 1 + (t - 1) / 4);
            prop_assert_eq!(c.source_frames(1 + (t - 1) / 4), t);
        }

        #[test]
        fn encode_decode_is_identity(k in 0usize..3, hb in 1usize..3, wb in 1usize..3, seed in 0u64..1000) {
            let x = clip(4 * k + 1, 8 * hb, 8 * wb, seed);
            let z = encode(&x, CodecDescriptor::default()).unwrap();
            prop_assert_eq!(decode(&z, 24.0).unwrap(), x);
        }
    }
}
