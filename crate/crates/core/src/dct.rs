//! Orthonormal 2D DCT-II by dense basis matrices.
//!
//! Frames here are small (latent planes, at most 256 on a side), so the
//! O(N^3) matrix form is fast enough and trivially exact to reason about.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Orthonormal DCT-II basis, `basis[k * n + i] = a_k cos(pi (2i + 1) k / 2n)`.
pub fn dct_basis(n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * n];
    let nf = n as f64;
    for k in 0..n {
        let a = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            let v = a * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * nf)).cos();
            out[k * n + i] = v as f32;
        }
    }
    out
}

/// Cached bases for one frame size.
#[derive(Clone, Debug)]
pub struct DctPlan {
    h: usize,
    w: usize,
    basis_h: Vec<f32>,
    basis_w: Vec<f32>,
}

impl DctPlan {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::invalid("dct2d", "frame extents must be >= 1"));
        }
        Ok(Self {
            h,
            w,
            basis_h: dct_basis(h),
            basis_w: dct_basis(w),
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Forward transform of one row-major `h x w` plane: `C_h X C_w^T`.
    pub fn forward_plane(&self, plane: &[f32]) -> Vec<f32> {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![0.0f32; h * w];
        gemm(false, false, h, h, w, &self.basis_h, plane, &mut tmp, false);
        let mut out = vec![0.0f32; h * w];
        gemm(false, true, h, w, w, &tmp, &self.basis_w, &mut out, false);
        out
    }

    /// Inverse transform: `C_h^T Y C_w`.
    pub fn inverse_plane(&self, coeffs: &[f32]) -> Vec<f32> {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![0.0f32; h * w];
        gemm(true, false, h, h, w, &self.basis_h, coeffs, &mut tmp, false);
        let mut out = vec![0.0f32; h * w];
        gemm(false, false, h, w, w, &tmp, &self.basis_w, &mut out, false);
        out
    }
}

fn check_2d(frame: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if frame.rank() != 2 {
        return Err(Error::shape(
            op,
            format!("expected an H x W frame, got {:?}", frame.shape()),
        ));
    }
    Ok((frame.dim(0), frame.dim(1)))
}

pub fn dct2d(frame: &Tensor) -> Result<Tensor> {
    let (h, w) = check_2d(frame, "dct2d")?;
    let plan = DctPlan::new(h, w)?;
    Tensor::new(vec![h, w], plan.forward_plane(frame.data()))
}

pub fn idct2d(coeffs: &Tensor) -> Result<Tensor> {
    let (h, w) = check_2d(coeffs, "idct2d")?;
    let plan = DctPlan::new(h, w)?;
    Tensor::new(vec![h, w], plan.inverse_plane(coeffs.data()))
}
