//! Same-padding 2-D cross-correlation (stride 1) via im2col + GEMM.

use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

fn check_conv<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (cin, h, w) = input.chw()?;
    let (cout, kcin, kh, kw) = match kernel.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::InvalidShape {
                shape: kernel.shape().to_vec(),
                reason: "conv2d kernel must be [C_out, C_in, kH, kW]".into(),
            })
        }
    };
    if kcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d (kernel C_in vs input C)",
            lhs: kernel.shape().to_vec(),
            rhs: input.shape().to_vec(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 || kh != kw || padding != (kh - 1) / 2 {
        return Err(Error::InvalidShape {
            shape: kernel.shape().to_vec(),
            reason: format!(
                "conv2d needs a square odd kernel with padding (k-1)/2, got padding {padding}"
            ),
        });
    }
    if bias.shape() != [cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d (bias vs C_out)",
            lhs: bias.shape().to_vec(),
            rhs: vec![cout],
        });
    }
    Ok((cin, h, w, cout, kh, kw))
}

/// Unfold `[C, H, W]` into `[C·kh·kw, H·W]` columns with zero padding.
fn im2col<T: Element>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    // valid x range such that 0 <= x + kj - pad < w
                    let x0 = pad.saturating_sub(kj);
                    let x1 = (w + pad).saturating_sub(kj).min(w);
                    for x in x0..x1 {
                        dst[x] = src[x + kj - pad];
                    }
                }
            }
        }
    }
    cols
}

/// Fold columns back, accumulating overlapping contributions.
fn col2im<T: Element>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<T> {
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    let x0 = pad.saturating_sub(kj);
                    let x1 = (w + pad).saturating_sub(kj).min(w);
                    for xx in x0..x1 {
                        dst[xx + kj - pad] += src[xx];
                    }
                }
            }
        }
    }
    x
}

/// `out[co] = bias[co] + Σ_ci kernel[co, ci] ⋆ input[ci]`, spatial size preserved.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let (cin, h, w, cout, k, _) = check_conv(input, kernel, bias, padding)?;
    let hw = h * w;
    let mut out = Vec::with_capacity(cout * hw);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, hw));
    }
    let kk = cin * k * k;
    if k == 1 {
        gemm(
            cout,
            kk,
            hw,
            kernel.data(),
            false,
            input.data(),
            false,
            T::one(),
            &mut out,
        );
    } else {
        let cols = im2col(input.data(), cin, h, w, k, padding);
        gemm(
            cout,
            kk,
            hw,
            kernel.data(),
            false,
            &cols,
            false,
            T::one(),
            &mut out,
        );
    }
    Tensor::new(vec![cout, h, w], out)
}

pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let (cin, h, w) = input.chw()?;
    let [cout, _, k, _] = kernel.shape()[..] else {
        unreachable!("kernel shape checked in forward")
    };
    let hw = h * w;
    let kk = cin * k * k;
    let dout = grad_out.data();

    let bias: Vec<T> = dout
        .chunks(hw)
        .map(|row| row.iter().copied().sum())
        .collect();

    let mut dkernel = vec![T::zero(); cout * kk];
    let mut dcols = vec![T::zero(); kk * hw];
    if k == 1 {
        gemm(
            cout,
            hw,
            kk,
            dout,
            false,
            input.data(),
            true,
            T::zero(),
            &mut dkernel,
        );
        gemm(
            kk,
            cout,
            hw,
            kernel.data(),
            true,
            dout,
            false,
            T::zero(),
            &mut dcols,
        );
    } else {
        let cols = im2col(input.data(), cin, h, w, k, padding);
        gemm(
            cout,
            hw,
            kk,
            dout,
            false,
            &cols,
            true,
            T::zero(),
            &mut dkernel,
        );
        gemm(
            kk,
            cout,
            hw,
            kernel.data(),
            true,
            dout,
            false,
            T::zero(),
            &mut dcols,
        );
        dcols = col2im(&dcols, cin, h, w, k, padding);
    }
    Ok(Conv2dGrads {
        input: Tensor::new(vec![cin, h, w], dcols)?,
        kernel: Tensor::new(kernel.shape().to_vec(), dkernel)?,
        bias: Tensor::new(vec![cout], bias)?,
    })
}
