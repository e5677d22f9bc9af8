//! Cross-correlation in 2D and 3D via im2col + GEMM.
//!
//! Layouts are channel-first without a batch axis: 3D inputs are
//! `[C, T, H, W]`, kernels `[C_out, C_in, kt, kh, kw]`.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    /// Stride 1 with "same" zero padding; kernel extents must be odd.
    pub fn same(kernel: [usize; 3]) -> Result<Self> {
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid(
                "conv",
                format!("same padding needs odd kernel extents, got {kernel:?}"),
            ));
        }
        Ok(Self {
            stride: [1; 3],
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    spec: Conv3dSpec,
}

impl Geometry {
    fn new<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, spec: Conv3dSpec) -> Result<Self> {
        if x.rank() != 4 || kernel.rank() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("input {:?} / kernel {:?}", x.shape(), kernel.shape()),
            ));
        }
        if x.dim(0) != kernel.dim(1) {
            return Err(Error::shape(
                "conv3d",
                format!(
                    "input has {} channels but kernel expects {}",
                    x.dim(0),
                    kernel.dim(1)
                ),
            ));
        }
        if spec.stride.iter().any(|&s| s == 0) {
            return Err(Error::invalid("conv3d", "stride must be >= 1"));
        }
        let input = [x.dim(1), x.dim(2), x.dim(3)];
        let k = [kernel.dim(2), kernel.dim(3), kernel.dim(4)];
        let mut output = [0; 3];
        for d in 0..3 {
            let padded = input[d] + 2 * spec.padding[d];
            if padded < k[d] {
                return Err(Error::shape(
                    "conv3d",
                    format!("kernel {k:?} larger than padded input {input:?}"),
                ));
            }
            output[d] = (padded - k[d]) / spec.stride[d] + 1;
        }
        Ok(Self {
            cin: x.dim(0),
            input,
            kernel: k,
            output,
            spec,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    /// Input coordinate feeding output position `o` through kernel tap `k`.
    #[inline]
    fn source(&self, d: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.spec.stride[d] + k) as isize - self.spec.padding[d] as isize;
        (pos >= 0 && (pos as usize) < self.input[d]).then_some(pos as usize)
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [it, ih, iw] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.output;
        let p = self.cols();
        for c in 0..self.cin {
            for a in 0..kt {
                for b in 0..kh {
                    for e in 0..kw {
                        let row = ((c * kt + a) * kh + b) * kw + e;
                        for zo in 0..ot {
                            let Some(zi) = self.source(0, zo, a) else { continue };
                            for yo in 0..oh {
                                let Some(yi) = self.source(1, yo, b) else { continue };
                                for xo in 0..ow {
                                    let Some(xi) = self.source(2, xo, e) else { continue };
                                    let col = (zo * oh + yo) * ow + xo;
                                    let src = ((c * it + zi) * ih + yi) * iw + xi;
                                    f(row * p + col, src);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.rows() * self.cols()];
        self.for_each_tap(|dst, src| cols[dst] = x[src]);
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let mut x = vec![T::zero(); self.cin * self.input.iter().product::<usize>()];
        self.for_each_tap(|dst, src| x[src] += cols[dst]);
        x
    }
}

/// 3D cross-correlation. `x: [C_in, T, H, W]`, `kernel: [C_out, C_in, kt, kh, kw]`.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv3dSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x, kernel, spec)?;
    let cout = kernel.dim(0);
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv3d", format!("bias {:?} for {cout} outputs", b.shape())));
        }
    }
    let cols = g.im2col(x.data());
    let (k, p) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); cout * p];
    gemm(false, false, cout, k, p, kernel.data(), &cols, &mut out, false);
    if let Some(b) = bias {
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
        }
    }
    let [ot, oh, ow] = g.output;
    Tensor::new(vec![cout, ot, oh, ow], out)
}

/// Gradients of [`conv3d`] given the upstream gradient `grad_out`.
pub struct Conv3dGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: Conv3dSpec,
) -> Result<Conv3dGrads<T>> {
    let g = Geometry::new(x, kernel, spec)?;
    let cout = kernel.dim(0);
    let (k, p) = (g.rows(), g.cols());
    if grad_out.numel() != cout * p {
        return Err(Error::shape("conv3d_backward", format!("grad {:?}", grad_out.shape())));
    }
    let cols = g.im2col(x.data());
    let mut dk = vec![T::zero(); cout * k];
    gemm(false, true, cout, p, k, grad_out.data(), &cols, &mut dk, false);
    let mut dcols = vec![T::zero(); k * p];
    gemm(true, false, k, cout, p, kernel.data(), grad_out.data(), &mut dcols, false);
    let dx = g.col2im(&dcols);
    let db = (0..cout)
        .map(|o| grad_out.data()[o * p..(o + 1) * p].iter().copied().sum())
        .collect();
    Ok(Conv3dGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        kernel: Tensor::new(kernel.shape().to_vec(), dk)?,
        bias: Tensor::new(vec![cout], db)?,
    })
}

/// 2D cross-correlation. `x: [C_in, H, W]`, `kernel: [C_out, C_in, kh, kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 2],
    padding: [usize; 2],
) -> Result<Tensor<T>> {
    if x.rank() != 3 || kernel.rank() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} / kernel {:?}", x.shape(), kernel.shape()),
        ));
    }
    let x3 = x.reshape(vec![x.dim(0), 1, x.dim(1), x.dim(2)])?;
    let k3 = kernel.reshape(vec![kernel.dim(0), kernel.dim(1), 1, kernel.dim(2), kernel.dim(3)])?;
    let spec = Conv3dSpec {
        stride: [1, stride[0], stride[1]],
        padding: [0, padding[0], padding[1]],
    };
    let y = conv3d(&x3, &k3, bias, spec).map_err(|e| match e {
        Error::Shape { detail, .. } => Error::shape("conv2d", detail),
        other => other,
    })?;
    let s = y.shape().to_vec();
    y.reshape(vec![s[0], s[2], s[3]])
}
