use super::{LayerGrads, Scalar, Tensor};
use crate::{Error, Result};

/// Spatial bookkeeping for a square-kernel 2-D convolution over one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(c_in: usize, height: usize, width: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::dim("conv2d", format!("kernel size {kernel} must be odd")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if height + 2 * padding < kernel || width + 2 * padding < kernel {
            return Err(Error::dim(
                "conv2d",
                format!("input {height}x{width} with padding {padding} is smaller than kernel {kernel}"),
            ));
        }
        Ok(Self {
            c_in,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel) / stride + 1,
            out_w: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    /// Reduction length `C_in·K·K`.
    pub fn fan_in(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.height * self.width
    }
}

/// Unfolds one `[C,H,W]` sample into a `[P, C·K·K]` patch matrix, one row per
/// output position. Each row is laid out input-channel major, then kernel
/// row, then kernel column. Out-of-bounds taps take `pad_value`.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry, pad_value: T) -> Vec<T> {
    let m = g.fan_in();
    let mut cols = vec![pad_value; g.positions() * m];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * m..][..m];
            let mut j = 0;
            for c in 0..g.c_in {
                let plane = &input[c * g.height * g.width..][..g.height * g.width];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                            row[j] = plane[iy as usize * g.width + ix as usize];
                        }
                        j += 1;
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
/// Padding taps are dropped.
pub fn col2im<T: Scalar>(d_cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let m = g.fan_in();
    let mut out = vec![T::zero(); g.input_len()];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &d_cols[(oy * g.out_w + ox) * m..][..m];
            let mut j = 0;
            for c in 0..g.c_in {
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                            out[c * g.height * g.width + iy as usize * g.width + ix as usize] =
                                out[c * g.height * g.width + iy as usize * g.width + ix as usize] + row[j];
                        }
                        j += 1;
                    }
                }
            }
        }
    }
    out
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `out[r, p] = Σ_j rows[r, j] · cols[p, j]`, accumulated in `j` order.
pub(crate) fn rows_times_cols<T: Scalar>(rows: &[T], cols: &[T], m: usize) -> Vec<T> {
    let n_rows = rows.len() / m;
    let n_cols = cols.len() / m;
    let mut out = Vec::with_capacity(n_rows * n_cols);
    for r in 0..n_rows {
        let wr = &rows[r * m..][..m];
        for p in 0..n_cols {
            out.push(dot(wr, &cols[p * m..][..m]));
        }
    }
    out
}

/// Accumulates `d_rows[r, :] += Σ_p d_out[r, p] · cols[p, :]` over positions in order.
pub(crate) fn accumulate_row_grads<T: Scalar>(d_out: &[T], cols: &[T], m: usize, d_rows: &mut [T]) {
    let n_cols = cols.len() / m;
    let n_rows = d_rows.len() / m;
    for r in 0..n_rows {
        let dr = &mut d_rows[r * m..][..m];
        for p in 0..n_cols {
            let g = d_out[r * n_cols + p];
            if g != T::zero() {
                axpy(g, &cols[p * m..][..m], dr);
            }
        }
    }
}

/// `d_cols[p, :] = Σ_r d_out[r, p] · rows[r, :]`, accumulated over rows in order.
pub(crate) fn cols_grad<T: Scalar>(d_out: &[T], rows: &[T], m: usize, n_cols: usize) -> Vec<T> {
    let n_rows = rows.len() / m;
    let mut d_cols = vec![T::zero(); n_cols * m];
    for p in 0..n_cols {
        let dc = &mut d_cols[p * m..][..m];
        for r in 0..n_rows {
            let g = d_out[r * n_cols + p];
            if g != T::zero() {
                axpy(g, &rows[r * m..][..m], dc);
            }
        }
    }
    d_cols
}

pub(crate) fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    input.expect_rank(3, "conv2d")?;
    weight.expect_rank(4, "conv2d")?;
    let (ws, is) = (weight.shape(), input.shape());
    if ws[1] != is[0] {
        return Err(Error::dim(
            "conv2d",
            format!("weight C_in {} (axis 1) != input channels {} (axis 0)", ws[1], is[0]),
        ));
    }
    if ws[2] != ws[3] {
        return Err(Error::dim(
            "conv2d",
            format!("kernel must be square, got {}x{} (axes 2,3)", ws[2], ws[3]),
        ));
    }
    ConvGeometry::new(is[0], is[1], is[2], ws[2], stride, padding)
}

/// Cross-correlation of one `[C_in,H,W]` sample with `[C_out,C_in,K,K]` weights.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weight, stride, padding)?;
    let cols = im2col(input.data(), &g, T::zero());
    let out = rows_times_cols(weight.data(), &cols, g.fan_in());
    Tensor::new(vec![weight.shape()[0], g.out_h, g.out_w], out)
}

/// Exact analytic gradients of [`conv2d_forward`] for one sample.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    d_output: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<LayerGrads<T>> {
    let g = conv_geometry(input, weight, stride, padding)?;
    let c_out = weight.shape()[0];
    d_output.expect_shape(&[c_out, g.out_h, g.out_w], "conv2d_backward")?;
    let m = g.fan_in();
    let cols = im2col(input.data(), &g, T::zero());
    let mut d_weight = vec![T::zero(); weight.len()];
    accumulate_row_grads(d_output.data(), &cols, m, &mut d_weight);
    let d_cols = cols_grad(d_output.data(), weight.data(), m, g.positions());
    let d_input = col2im(&d_cols, &g);
    Ok(LayerGrads {
        d_weight: Tensor::new(weight.shape().to_vec(), d_weight)?,
        d_input: Tensor::new(input.shape().to_vec(), d_input)?,
        d_alpha: None,
    })
}
