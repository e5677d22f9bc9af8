//! Coarse-to-fine inverse-search optical flow.
//!
//! Flow at `x` is the motion `d` with `prev(x - d) ≈ curr(x)`: `x - d` is
//! where the content of the current frame sat in the previous one.
//!
//! At each pyramid level, 8x8 patches on a stride-4 grid run
//! inverse-compositional Lucas-Kanade from the upsampled coarser flow, and
//! the patch displacements are blended into a dense field weighted by
//! inverse photometric error.

use crate::error::{Error, Result};
use crate::resample::{bicubic_resize, bilinear_resize, sample_bilinear};
use crate::tensor::Tensor;

const PATCH: usize = 8;
const STRIDE: usize = 4;
const ITERATIONS: usize = 16;
const MIN_SIDE: usize = 32;

/// Rec.601 luma of an `H x W x 3` frame, or a copy of an `H x W` frame.
pub fn luma(frame: &Tensor) -> Result<Vec<f32>> {
    match frame.shape() {
        [_, _, 3] => Ok(frame
            .data()
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()),
        [_, _] => Ok(frame.to_vec()),
        s => Err(Error::shape("luma", format!("expected H x W x 3 or H x W, got {s:?}"))),
    }
}

/// Number of pyramid halvings, `ceil(log2(min(H, W) / 16))`, at least 0.
pub fn pyramid_levels(h: usize, w: usize) -> usize {
    let ratio = h.min(w) as f64 / 16.0;
    if ratio <= 1.0 {
        0
    } else {
        ratio.log2().ceil() as usize
    }
}

struct Plane {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Plane {
    fn at(&self, x: f32, y: f32) -> f32 {
        sample_bilinear(&self.data, self.h, self.w, x, y)
    }

    fn px(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    fn halve(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let t = Tensor::new(vec![self.h, self.w], self.data.clone()).expect("plane shape");
        let r = bicubic_resize(&t, h, w).expect("valid extents");
        Plane { h, w, data: r.into_vec() }
    }
}

/// Patch origins along one axis, the last one flush with the border.
fn patch_origins(n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=n - PATCH).step_by(STRIDE).collect();
    if *v.last().expect("n >= PATCH") != n - PATCH {
        v.push(n - PATCH);
    }
    v
}

fn refine_level(prev: &Plane, curr: &Plane, init: &[[f32; 2]]) -> Vec<[f32; 2]> {
    let (h, w) = (curr.h, curr.w);
    let mut acc = vec![[0.0f64; 3]; h * w];
    for &y0 in &patch_origins(h) {
        for &x0 in &patch_origins(w) {
            // Template gradients by central differences, clamped at borders.
            let mut grads = [[0.0f32; 2]; PATCH * PATCH];
            let (mut hxx, mut hxy, mut hyy) = (0.0f64, 0.0f64, 0.0f64);
            let mut d = [0.0f32; 2];
            for j in 0..PATCH {
                for i in 0..PATCH {
                    let (x, y) = (x0 + i, y0 + j);
                    let gx = (curr.px((x + 1).min(w - 1), y) - curr.px(x.saturating_sub(1), y)) * 0.5;
                    let gy = (curr.px(x, (y + 1).min(h - 1)) - curr.px(x, y.saturating_sub(1))) * 0.5;
                    grads[j * PATCH + i] = [gx, gy];
                    hxx += (gx * gx) as f64;
                    hxy += (gx * gy) as f64;
                    hyy += (gy * gy) as f64;
                    let f = init[y * w + x];
                    d[0] += f[0];
                    d[1] += f[1];
                }
            }
            let n = (PATCH * PATCH) as f32;
            d = [d[0] / n, d[1] / n];
            let det = hxx * hyy - hxy * hxy;
            let trace = hxx + hyy;
            if det > 1e-9 * trace.max(1e-12) * trace.max(1e-12) && trace > 1e-8 {
                for _ in 0..ITERATIONS {
                    let (mut bx, mut by) = (0.0f64, 0.0f64);
                    for j in 0..PATCH {
                        for i in 0..PATCH {
                            let (x, y) = (x0 + i, y0 + j);
                            let r = prev.at(x as f32 - d[0], y as f32 - d[1]) - curr.px(x, y);
                            let g = grads[j * PATCH + i];
                            bx += (g[0] * r) as f64;
                            by += (g[1] * r) as f64;
                        }
                    }
                    let dx = (hyy * bx - hxy * by) / det;
                    let dy = (hxx * by - hxy * bx) / det;
                    d[0] += dx as f32;
                    d[1] += dy as f32;
                    if dx * dx + dy * dy < 1e-6 {
                        break;
                    }
                }
            }
            for j in 0..PATCH {
                for i in 0..PATCH {
                    let (x, y) = (x0 + i, y0 + j);
                    let r = (prev.at(x as f32 - d[0], y as f32 - d[1]) - curr.px(x, y)).abs();
                    let wgt = 1.0 / (r as f64).max(0.01);
                    let a = &mut acc[y * w + x];
                    a[0] += wgt * d[0] as f64;
                    a[1] += wgt * d[1] as f64;
                    a[2] += wgt;
                }
            }
        }
    }
    acc.iter().map(|a| [(a[0] / a[2]) as f32, (a[1] / a[2]) as f32]).collect()
}

/// Upsamples a flow field to `h x w`, scaling vectors by the size ratio.
fn upsample_flow(flow: &[[f32; 2]], fh: usize, fw: usize, h: usize, w: usize) -> Vec<[f32; 2]> {
    let planar: Vec<f32> = (0..2).flat_map(|c| flow.iter().map(move |v| v[c])).collect();
    let t = Tensor::new(vec![2, fh, fw], planar).expect("flow shape");
    let up = bilinear_resize(&t, h, w).expect("valid extents");
    let (sx, sy) = (w as f32 / fw as f32, h as f32 / fh as f32);
    let d = up.data();
    (0..h * w).map(|i| [d[i] * sx, d[h * w + i] * sy]).collect()
}

/// Dense flow between two same-size frames (`H x W x 3` or `H x W`),
/// returned as `H x W x 2` with `(dx, dy)` per pixel.
pub fn estimate_flow(prev: &Tensor, curr: &Tensor) -> Result<Tensor> {
    prev.expect_same_shape(curr, "estimate_flow")?;
    let (h, w) = (curr.dim(0), curr.dim(1));
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::invalid(
            "estimate_flow",
            format!("frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"),
        ));
    }
    let mut prevs = vec![Plane { h, w, data: luma(prev)? }];
    let mut currs = vec![Plane { h, w, data: luma(curr)? }];
    for _ in 0..pyramid_levels(h, w) {
        let (p, c) = (prevs.last().expect("base").halve(), currs.last().expect("base").halve());
        if p.h < PATCH || p.w < PATCH {
            break;
        }
        prevs.push(p);
        currs.push(c);
    }
    let top = prevs.len() - 1;
    let mut flow = vec![[0.0f32; 2]; prevs[top].h * prevs[top].w];
    let (mut fh, mut fw) = (prevs[top].h, prevs[top].w);
    for level in (0..=top).rev() {
        let (lh, lw) = (prevs[level].h, prevs[level].w);
        if (fh, fw) != (lh, lw) {
            flow = upsample_flow(&flow, fh, fw, lh, lw);
            (fh, fw) = (lh, lw);
        }
        flow = refine_level(&prevs[level], &currs[level], &flow);
    }
    let limit = h.max(w) as f32;
    let data = flow
        .iter()
        .flat_map(|v| v.map(|c| if c.is_finite() { c.clamp(-limit, limit) } else { 0.0 }))
        .collect();
    Tensor::new(vec![h, w, 2], data)
}
