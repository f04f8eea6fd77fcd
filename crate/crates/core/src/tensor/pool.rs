//! 2×2 stride-2 max pooling that records argmax positions, and the matching
//! index-guided unpooling.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Argmax position of every pooled cell, as a flat `y * W + x` offset into the
/// corresponding channel of the pre-pool map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    channels: usize,
    /// Pooled extents.
    h: usize,
    w: usize,
    /// Pre-pool extents.
    src_h: usize,
    src_w: usize,
    indices: Vec<u32>,
}

impl PoolIndices {
    pub fn new(channels: usize, src_h: usize, src_w: usize, indices: Vec<u32>) -> Result<Self> {
        let (h, w) = (src_h / 2, src_w / 2);
        if !src_h.is_multiple_of(2) || !src_w.is_multiple_of(2) || h == 0 || w == 0 {
            return Err(Error::OddPoolInput { h: src_h, w: src_w });
        }
        if indices.len() != channels * h * w {
            return Err(Error::InvalidShape {
                shape: vec![channels, h, w],
                reason: format!(
                    "expected {} indices, got {}",
                    channels * h * w,
                    indices.len()
                ),
            });
        }
        Ok(Self {
            channels,
            h,
            w,
            src_h,
            src_w,
            indices,
        })
    }

    /// `[C, h, w]` of the pooled map.
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.h, self.w]
    }

    /// `(H, W)` of the pre-pool map.
    pub fn source_hw(&self) -> (usize, usize) {
        (self.src_h, self.src_w)
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.indices
    }

    pub fn as_mut_slice(&mut self) -> &mut [u32] {
        &mut self.indices
    }

    /// True when every index lies inside its own 2×2 window.
    pub fn is_window_consistent(&self) -> bool {
        let per = self.h * self.w;
        self.indices.iter().enumerate().all(|(i, &idx)| {
            let cell = i % per;
            let (py, px) = (cell / self.w, cell % self.w);
            let (y, x) = (idx as usize / self.src_w, idx as usize % self.src_w);
            y / 2 == py && x / 2 == px && y < self.src_h
        })
    }
}

pub fn max_pool2d<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddPoolInput { h, w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for py in 0..oh {
            for px in 0..ow {
                let base = 2 * py * w + 2 * px;
                // row-major scan; strict `>` keeps the smallest flat index on ties
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if plane[cand] > plane[best] {
                        best = cand;
                    }
                }
                out.push(plane[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((
        Tensor::new(vec![c, oh, ow], out)?,
        PoolIndices::new(c, h, w, idx)?,
    ))
}

/// Routes each pooled gradient to its argmax.
pub fn max_pool2d_backward<T: Element>(
    indices: &PoolIndices,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    scatter(grad_out, indices, "max_pool2d backward")
}

/// Zero-initialized upsampling that places each input value at its recorded index.
pub fn max_unpool2d<T: Element>(input: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    scatter(input, indices, "max_unpool2d")
}

/// Adjoint of the scatter: gather the gradient at the recorded positions.
pub fn max_unpool2d_backward<T: Element>(
    indices: &PoolIndices,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [c, h, w] = indices.shape();
    let (sh, sw) = indices.source_hw();
    if grad_out.shape() != [c, sh, sw] {
        return Err(Error::ShapeMismatch {
            op: "max_unpool2d backward",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![c, sh, sw],
        });
    }
    let g = grad_out.data();
    let per = h * w;
    let data = indices
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &idx)| g[(i / per) * sh * sw + idx as usize])
        .collect();
    Tensor::new(vec![c, h, w], data)
}

fn scatter<T: Element>(
    input: &Tensor<T>,
    indices: &PoolIndices,
    op: &'static str,
) -> Result<Tensor<T>> {
    let [c, h, w] = indices.shape();
    if input.shape() != [c, h, w] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: input.shape().to_vec(),
            rhs: vec![c, h, w],
        });
    }
    let (sh, sw) = indices.source_hw();
    let plane = sh * sw;
    let mut out = vec![T::zero(); c * plane];
    let per = h * w;
    for (i, (&v, &idx)) in input.data().iter().zip(indices.as_slice()).enumerate() {
        let idx = idx as usize;
        if idx >= plane {
            return Err(Error::PoolIndexOutOfBounds {
                index: idx,
                h: sh,
                w: sw,
            });
        }
        out[(i / per) * plane + idx] = v;
    }
    Tensor::new(vec![c, sh, sw], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window() {
        let x = Tensor::<f32>::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let (y, idx) = max_pool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.as_slice(), &[3]);
    }

    #[test]
    fn ties_pick_smallest_index() {
        let x = Tensor::<f32>::full(&[2, 4, 4], 0.5);
        let (y, idx) = max_pool2d(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        assert_eq!(&idx.as_slice()[..4], &[0, 2, 8, 10]);
        assert!(idx.is_window_consistent());
    }

    #[test]
    fn odd_extent_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4]);
        let err = max_pool2d(&x).unwrap_err();
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn gradient_goes_to_argmax_only() {
        let x = Tensor::<f32>::new(vec![1, 2, 2], vec![1., 7., 3., 4.]).unwrap();
        let (_, idx) = max_pool2d(&x).unwrap();
        let g =
            max_pool2d_backward(&idx, &Tensor::scalar(1.0).reshape(&[1, 1, 1]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn unpool_places_maxima() {
        let x = Tensor::<f32>::new(vec![1, 2, 4], vec![1., 5., 2., 0., 3., 4., 9., 1.]).unwrap();
        let (y, idx) = max_pool2d(&x).unwrap();
        let u = max_unpool2d(&y, &idx).unwrap();
        assert_eq!(u.data(), &[0., 5., 0., 0., 0., 0., 9., 0.]);
        let back = max_unpool2d_backward(&idx, &Tensor::from_fn(&[1, 2, 4], |i| i as f32)).unwrap();
        assert_eq!(back.data(), &[1., 6.]);
    }

    #[test]
    fn out_of_bounds_index_is_an_error() {
        let idx = PoolIndices::new(1, 2, 2, vec![4]).unwrap();
        let y = Tensor::<f32>::full(&[1, 1, 1], 1.0);
        assert!(matches!(
            max_unpool2d(&y, &idx),
            Err(Error::PoolIndexOutOfBounds { index: 4, .. })
        ));
    }
}
