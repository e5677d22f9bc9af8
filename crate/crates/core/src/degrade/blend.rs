//! Motion masks, ellipse sampling and flow-guided color blending.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::sample_bilinear;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Pixels whose flow magnitude exceeds `tau`, after a 3x3 closing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl MotionMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }
}

fn flow_dims(flow: &Tensor) -> Result<(usize, usize)> {
    match flow.shape() {
        [h, w, 2] => Ok((*h, *w)),
        s => Err(Error::shape("flow", format!("expected H x W x 2, got {s:?}"))),
    }
}

pub fn flow_at(flow: &Tensor, w: usize, x: usize, y: usize) -> [f32; 2] {
    let i = (y * w + x) * 2;
    [flow.data()[i], flow.data()[i + 1]]
}

/// 3x3 max (`dilate`) or min filter; out-of-frame neighbors are ignored.
fn morph(mask: &[bool], h: usize, w: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = !dilate;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let m = mask[ny * w + nx];
                    v = if dilate { v || m } else { v && m };
                }
            }
            out[y * w + x] = v;
        }
    }
    out
}

pub fn motion_mask(flow: &Tensor, tau: f32) -> Result<MotionMask> {
    if !(tau > 0.0) {
        return Err(Error::invalid("motion_mask", format!("tau must be > 0, got {tau}")));
    }
    let (h, w) = flow_dims(flow)?;
    let raw: Vec<bool> = flow
        .data()
        .chunks_exact(2)
        .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt() > tau)
        .collect();
    let closed = morph(&morph(&raw, h, w, true), h, w, false);
    Ok(MotionMask {
        height: h,
        width: w,
        mask: closed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    pub cx: f32,
    pub cy: f32,
    /// Semi-major axis, along `theta`.
    pub a: f32,
    pub b: f32,
    pub theta: f32,
    pub strength: f32,
}

impl EllipseSpec {
    /// Normalized elliptical distance: 0 at the center, 1 on the boundary.
    pub fn distance(&self, x: f32, y: f32) -> f32 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    /// Blend weight `max(0, 1 - d)`.
    pub fn weight(&self, x: f32, y: f32) -> f32 {
        (1.0 - self.distance(x, y)).max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub density: f64,
    pub strength_min: f64,
    pub strength_max: f64,
}

pub fn semi_major(magnitude: f32) -> f32 {
    (2.0 * magnitude).clamp(4.0, 32.0)
}

/// Draws ellipses centered on mask pixels. Their count is
/// `ceil(density * masked area / mean ellipse area)`, where the mean area is
/// taken over the ellipses every masked pixel would produce.
pub fn sample_ellipses(mask: &MotionMask, flow: &Tensor, rng: &mut Rng, params: &EllipseParams) -> Result<Vec<EllipseSpec>> {
    if !(params.density > 0.0 && params.density <= 1.0) {
        return Err(Error::invalid("sample_ellipses", format!("density {} outside (0, 1]", params.density)));
    }
    if !(0.0 <= params.strength_min && params.strength_min <= params.strength_max && params.strength_max <= 1.0) {
        return Err(Error::invalid("sample_ellipses", "strength range must lie in [0, 1]"));
    }
    let (h, w) = flow_dims(flow)?;
    if (h, w) != (mask.height, mask.width) {
        return Err(Error::shape("sample_ellipses", "mask and flow sizes differ"));
    }
    let pixels: Vec<usize> = (0..h * w).filter(|&i| mask.mask[i]).collect();
    if pixels.is_empty() {
        return Ok(Vec::new());
    }
    let mean_area = pixels
        .iter()
        .map(|&i| {
            let f = flow_at(flow, w, i % w, i / w);
            let a = semi_major(f[0].hypot(f[1])) as f64;
            std::f64::consts::PI * a * a / 2.0
        })
        .sum::<f64>()
        / pixels.len() as f64;
    let count = (params.density * pixels.len() as f64 / mean_area).ceil() as usize;
    Ok((0..count)
        .map(|_| {
            let i = pixels[rng.index(pixels.len())];
            let (x, y) = (i % w, i / w);
            let f = flow_at(flow, w, x, y);
            let a = semi_major(f[0].hypot(f[1]));
            EllipseSpec {
                cx: x as f32,
                cy: y as f32,
                a,
                b: a / 2.0,
                theta: f[1].atan2(f[0]),
                strength: rng.uniform_in(params.strength_min, params.strength_max) as f32,
            }
        })
        .collect())
}

fn frame_dims(frame: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match frame.shape() {
        [h, w, 3] => Ok((*h, *w)),
        s => Err(Error::shape(op, format!("expected H x W x 3, got {s:?}"))),
    }
}

/// Splits an interleaved RGB frame into three planes.
pub fn planes(frame: &Tensor) -> [Vec<f32>; 3] {
    let mut p = [Vec::new(), Vec::new(), Vec::new()];
    for px in frame.data().chunks_exact(3) {
        for c in 0..3 {
            p[c].push(px[c]);
        }
    }
    p
}

/// Blends each ellipse's color, sampled from `prev` around the flow-mapped
/// center, into `curr`. Ellipses apply in order; pixels outside all of
/// them are untouched.
pub fn blend_colors(
    curr: &Tensor,
    prev: &Tensor,
    flow: &Tensor,
    ellipses: &[EllipseSpec],
    samples: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let (h, w) = frame_dims(curr, "blend_colors")?;
    curr.expect_same_shape(prev, "blend_colors")?;
    if flow_dims(flow)? != (h, w) {
        return Err(Error::shape("blend_colors", "flow and frame sizes differ"));
    }
    if ellipses.is_empty() {
        return Ok(curr.clone());
    }
    if samples == 0 {
        return Err(Error::invalid("blend_colors", "need at least one color sample"));
    }
    let prev_planes = planes(prev);
    let mut out = curr.to_vec();
    for e in ellipses {
        let (xi, yi) = (
            (e.cx.round() as usize).min(w - 1),
            (e.cy.round() as usize).min(h - 1),
        );
        let f = flow_at(flow, w, xi, yi);
        let sigma = e.a / 4.0;
        let mut color = [0.0f32; 3];
        for _ in 0..samples {
            let sx = e.cx - f[0] + sigma * rng.normal() as f32;
            let sy = e.cy - f[1] + sigma * rng.normal() as f32;
            for c in 0..3 {
                color[c] += sample_bilinear(&prev_planes[c], h, w, sx, sy);
            }
        }
        color.iter_mut().for_each(|c| *c /= samples as f32);
        let reach = e.a.ceil() as i64 + 1;
        let (x0, x1) = ((e.cx as i64 - reach).max(0), (e.cx as i64 + reach).min(w as i64 - 1));
        let (y0, y1) = ((e.cy as i64 - reach).max(0), (e.cy as i64 + reach).min(h as i64 - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let wgt = e.weight(x as f32, y as f32) * e.strength;
                if wgt <= 0.0 {
                    continue;
                }
                let i = (y as usize * w + x as usize) * 3;
                for c in 0..3 {
                    out[i + c] = (1.0 - wgt) * out[i + c] + wgt * color[c];
                }
            }
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_flow(h: usize, w: usize, fx: f32, fy: f32) -> Tensor {
        Tensor::from_fn(vec![h, w, 2], |i| if i % 2 == 0 { fx } else { fy })
    }

    #[test]
    fn masks_of_simple_fields() {
        assert!(motion_mask(&uniform_flow(8, 8, 0.0, 0.0), 1.5).unwrap().is_empty());
        assert_eq!(motion_mask(&uniform_flow(8, 8, 3.0, 0.0), 1.5).unwrap().count(), 64);
        let half = Tensor::from_fn(vec![10, 12, 2], |i| if i % 2 == 0 && (i / 2) % 12 >= 6 { 3.0 } else { 0.0 });
        let m = motion_mask(&half, 1.5).unwrap();
        for y in 0..10 {
            for x in 0..12 {
                assert_eq!(m.get(x, y), x >= 6);
            }
        }
        assert!(motion_mask(&half, 0.0).is_err());
    }

    #[test]
    fn ellipses_follow_mask_and_flow() {
        let flow = uniform_flow(32, 32, 5.0, 0.0);
        let mut mask = motion_mask(&flow, 1.5).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                mask.mask[y * 32 + x] = x < 10;
            }
        }
        let params = EllipseParams {
            density: 1.0,
            strength_min: 0.3,
            strength_max: 0.7,
        };
        let es = sample_ellipses(&mask, &flow, &mut Rng::new(1, 0), &params).unwrap();
        // 320 pixels, ellipses of area pi * 10 * 5.
        assert_eq!(es.len(), (320.0 / (std::f64::consts::PI * 50.0)).ceil() as usize);
        for e in &es {
            assert!(mask.get(e.cx as usize, e.cy as usize));
            assert!(e.theta.abs() <= 1e-6);
            assert_eq!((e.a, e.b), (10.0, 5.0));
            assert!((0.3..=0.7).contains(&e.strength));
        }
        let empty = motion_mask(&uniform_flow(32, 32, 0.0, 0.0), 1.5).unwrap();
        assert!(sample_ellipses(&empty, &flow, &mut Rng::new(1, 0), &params).unwrap().is_empty());
    }

    #[test]
    fn blending_closed_form() {
        let (h, w) = (33, 33);
        let red = Tensor::from_fn(vec![h, w, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let blue = Tensor::from_fn(vec![h, w, 3], |i| if i % 3 == 2 { 1.0 } else { 0.0 });
        let flow = uniform_flow(h, w, 0.0, 0.0);
        let e = EllipseSpec {
            cx: 16.0,
            cy: 16.0,
            a: 10.0,
            b: 5.0,
            theta: 0.0,
            strength: 1.0,
        };
        let out = blend_colors(&blue, &red, &flow, &[e], 16, &mut Rng::new(2, 0)).unwrap();
        let px = |x: usize, y: usize| &out.data()[(y * w + x) * 3..(y * w + x) * 3 + 3];
        assert!((px(16, 16)[0] - 1.0).abs() < 1e-6);
        for dx in 0..=12usize {
            let wgt = (1.0 - dx as f32 / 10.0).max(0.0);
            let p = px(16 + dx, 16);
            assert!((p[0] - wgt).abs() < 1e-6 && (p[2] - (1.0 - wgt)).abs() < 1e-6);
        }
        assert_eq!(px(16, 21), &[0.0, 0.0, 1.0]);
        assert_eq!(blend_colors(&blue, &red, &flow, &[], 16, &mut Rng::new(2, 0)).unwrap(), blue);
    }
}
