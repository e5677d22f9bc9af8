//! Block-adaptive linear motion blur.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::sample_bilinear;
use crate::tensor::Tensor;

use super::blend::{flow_at, planes};

/// Half-width of the cross-fade band around each block.
const FADE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurKernelSpec {
    pub length: usize,
    pub theta: f32,
    pub weights: Vec<f32>,
}

impl BlurKernelSpec {
    /// Box kernel of `round(2m)` taps clamped to [3, 31], rounded up to odd.
    pub fn for_motion(magnitude: f32, theta: f32) -> Self {
        let mut length = ((2.0 * magnitude).round() as usize).clamp(3, 31);
        if length % 2 == 0 {
            length += 1;
        }
        Self {
            length,
            theta,
            weights: vec![1.0 / length as f32; length],
        }
    }

    /// Signed offsets of the taps along the kernel direction.
    pub fn offsets(&self) -> impl Iterator<Item = f32> + '_ {
        let half = (self.length as f32 - 1.0) / 2.0;
        (0..self.length).map(move |j| j as f32 - half)
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

fn tent(p: usize, lo: usize, hi: usize) -> f32 {
    let p = p as f32 + 0.5;
    let d = (p - (lo as f32 - FADE as f32)).min(hi as f32 + FADE as f32 - p);
    (d / (2 * FADE) as f32).clamp(0.0, 1.0)
}

/// Blurs each block whose mean flow magnitude exceeds `tau` along its mean
/// flow direction. Moving blocks cross-fade over a band of `2 * FADE`
/// pixels; pixels of static blocks are copied.
pub fn motion_blur(frame: &Tensor, flow: &Tensor, block: usize, tau: f32) -> Result<Tensor> {
    let (h, w) = match frame.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::shape("motion_blur", format!("expected H x W x 3, got {s:?}"))),
    };
    if flow.shape() != [h, w, 2] {
        return Err(Error::shape("motion_blur", "flow and frame sizes differ"));
    }
    if block == 0 {
        return Err(Error::invalid("motion_blur", "block size must be >= 1"));
    }
    let mut moving = Vec::new();
    for y0 in (0..h).step_by(block) {
        for x0 in (0..w).step_by(block) {
            let b = Block {
                x0,
                y0,
                x1: (x0 + block).min(w),
                y1: (y0 + block).min(h),
            };
            let (mut mag, mut vx, mut vy) = (0.0f64, 0.0f64, 0.0f64);
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    let f = flow_at(flow, w, x, y);
                    mag += f[0].hypot(f[1]) as f64;
                    vx += f[0] as f64;
                    vy += f[1] as f64;
                }
            }
            let n = ((b.x1 - b.x0) * (b.y1 - b.y0)) as f64;
            let m = (mag / n) as f32;
            if m > tau {
                let theta = (vy as f32).atan2(vx as f32);
                moving.push((b, BlurKernelSpec::for_motion(m, theta)));
            }
        }
    }
    if moving.is_empty() {
        return Ok(frame.clone());
    }
    let src = planes(frame);
    let mut acc = vec![0.0f32; h * w * 3];
    let mut norm = vec![0.0f32; h * w];
    let mut is_moving = vec![false; h * w];
    for (b, kernel) in &moving {
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                is_moving[y * w + x] = true;
            }
        }
        let (s, c) = kernel.theta.sin_cos();
        let ys = b.y0.saturating_sub(FADE)..(b.y1 + FADE).min(h);
        let xs = b.x0.saturating_sub(FADE)..(b.x1 + FADE).min(w);
        for y in ys {
            let wy = tent(y, b.y0, b.y1);
            for x in xs.clone() {
                let wgt = wy * tent(x, b.x0, b.x1);
                if wgt <= 0.0 {
                    continue;
                }
                let mut px = [0.0f32; 3];
                for (off, &tap) in kernel.offsets().zip(&kernel.weights) {
                    let sx = x as f32 + off * c;
                    let sy = y as f32 + off * s;
                    for ch in 0..3 {
                        px[ch] += tap * sample_bilinear(&src[ch], h, w, sx, sy);
                    }
                }
                let i = y * w + x;
                norm[i] += wgt;
                for ch in 0..3 {
                    acc[i * 3 + ch] += wgt * px[ch];
                }
            }
        }
    }
    let mut out = frame.to_vec();
    for i in 0..h * w {
        if is_moving[i] {
            for ch in 0..3 {
                out[i * 3 + ch] = acc[i * 3 + ch] / norm[i];
            }
        }
    }
    Tensor::new(vec![h, w, 3], out)
}
