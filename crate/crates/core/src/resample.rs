//! Separable resampling over the two trailing dimensions.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One output sample as a weighted sum of input samples along an axis.
#[derive(Clone, Debug)]
struct Taps {
    start: usize,
    weights: Vec<f64>,
}

/// Linear interpolation weights with half-pixel centers (align_corners = false).
fn bilinear_axis(n_in: usize, n_out: usize) -> Vec<Taps> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            if i1 == i0 {
                Taps {
                    start: i0,
                    weights: vec![1.0],
                }
            } else {
                Taps {
                    start: i0,
                    weights: vec![1.0 - frac, frac],
                }
            }
        })
        .collect()
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Bicubic weights; when shrinking, the kernel is stretched by the scale
/// factor so the result is antialiased. Border taps are clamped into range.
fn bicubic_axis(n_in: usize, n_out: usize) -> Vec<Taps> {
    let scale = n_in as f64 / n_out as f64;
    let support_scale = scale.max(1.0);
    let support = 2.0 * support_scale;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut weights = vec![0.0; n_in];
            let mut total = 0.0;
            for i in lo..=hi {
                let w = cubic((i as f64 + 0.5 - center) / support_scale);
                if w == 0.0 {
                    continue;
                }
                let clamped = i.clamp(0, n_in as isize - 1) as usize;
                weights[clamped] += w;
                total += w;
            }
            let first = weights.iter().position(|&w| w != 0.0).unwrap_or(0);
            let last = weights.iter().rposition(|&w| w != 0.0).unwrap_or(0);
            Taps {
                start: first,
                weights: weights[first..=last].iter().map(|w| w / total).collect(),
            }
        })
        .collect()
}

fn trailing_dims<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::shape(op, format!("need at least 2 dims, got {:?}", x.shape())));
    }
    let r = x.rank();
    let (h, w) = (x.dim(r - 2), x.dim(r - 1));
    if h == 0 || w == 0 {
        return Err(Error::shape(op, "empty input plane"));
    }
    Ok((x.numel() / (h * w), h, w))
}

fn apply<T: Scalar>(x: &Tensor<T>, rows: &[Taps], cols: &[Taps]) -> Tensor<T> {
    let r = x.rank();
    let (h, w) = (x.dim(r - 2), x.dim(r - 1));
    let planes = x.numel() / (h * w);
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut tmp = vec![0.0f64; h * ow];
    for p in 0..planes {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, tap) in cols.iter().enumerate() {
                let mut s = 0.0;
                for (j, &wt) in tap.weights.iter().enumerate() {
                    s += wt * plane[y * w + tap.start + j].as_f64();
                }
                tmp[y * ow + ox] = s;
            }
        }
        for tap in rows {
            for ox in 0..ow {
                let mut s = 0.0;
                for (i, &wt) in tap.weights.iter().enumerate() {
                    s += wt * tmp[(tap.start + i) * ow + ox];
                }
                out.push(T::of(s));
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out).expect("resample shape")
}

/// Transpose of [`apply`]: scatters output-space values back to input space.
fn apply_adjoint<T: Scalar>(g: &Tensor<T>, in_h: usize, in_w: usize, rows: &[Taps], cols: &[Taps]) -> Tensor<T> {
    let r = g.rank();
    let (oh, ow) = (rows.len(), cols.len());
    let planes = g.numel() / (oh * ow);
    let mut out = vec![T::zero(); planes * in_h * in_w];
    let mut tmp = vec![0.0f64; in_h * ow];
    for p in 0..planes {
        let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for (oy, tap) in rows.iter().enumerate() {
            for (i, &wt) in tap.weights.iter().enumerate() {
                for ox in 0..ow {
                    tmp[(tap.start + i) * ow + ox] += wt * gp[oy * ow + ox].as_f64();
                }
            }
        }
        let op = &mut out[p * in_h * in_w..(p + 1) * in_h * in_w];
        for y in 0..in_h {
            for (ox, tap) in cols.iter().enumerate() {
                let v = tmp[y * ow + ox];
                for (j, &wt) in tap.weights.iter().enumerate() {
                    op[y * in_w + tap.start + j] += T::of(wt * v);
                }
            }
        }
    }
    let mut shape = g.shape().to_vec();
    shape[r - 2] = in_h;
    shape[r - 1] = in_w;
    Tensor::new(shape, out).expect("resample adjoint shape")
}

/// Bilinear resize of the two trailing dimensions (e.g. `T x C x H x W`),
/// half-pixel centers, edge clamped.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, new_h: usize, new_w: usize) -> Result<Tensor<T>> {
    let (_, h, w) = trailing_dims(x, "bilinear_resize")?;
    if new_h == 0 || new_w == 0 {
        return Err(Error::invalid("bilinear_resize", "target extents must be >= 1"));
    }
    if (h, w) == (new_h, new_w) {
        return Ok(x.clone());
    }
    Ok(apply(x, &bilinear_axis(h, new_h), &bilinear_axis(w, new_w)))
}

/// Adjoint of [`bilinear_resize`] with respect to its input.
pub fn bilinear_resize_adjoint<T: Scalar>(g: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (_, oh, ow) = trailing_dims(g, "bilinear_resize_adjoint")?;
    if (oh, ow) == (in_h, in_w) {
        return Ok(g.clone());
    }
    Ok(apply_adjoint(g, in_h, in_w, &bilinear_axis(in_h, oh), &bilinear_axis(in_w, ow)))
}

/// Antialiased bicubic resize of the two trailing dimensions.
pub fn bicubic_resize<T: Scalar>(x: &Tensor<T>, new_h: usize, new_w: usize) -> Result<Tensor<T>> {
    let (_, h, w) = trailing_dims(x, "bicubic_resize")?;
    if new_h == 0 || new_w == 0 {
        return Err(Error::invalid("bicubic_resize", "target extents must be >= 1"));
    }
    if (h, w) == (new_h, new_w) {
        return Ok(x.clone());
    }
    Ok(apply(x, &bicubic_axis(h, new_h), &bicubic_axis(w, new_w)))
}

/// Bilinear sample of a row-major `h x w` plane at a real position,
/// clamping to the border.
#[inline]
pub fn sample_bilinear(plane: &[f32], h: usize, w: usize, x: f32, y: f32) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}
