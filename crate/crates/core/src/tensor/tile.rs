//! Channel concatenation and spatial crop/tile, the building blocks of dense
//! connectivity and region-wise processing.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Stack `[C_i, H, W]` maps along channels in argument order.
pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or_else(|| Error::InvalidShape {
        shape: vec![],
        reason: "concat_channels needs at least one input".into(),
    })?;
    let (_, h, w) = first.chw()?;
    let mut channels = 0;
    for t in inputs {
        let (c, th, tw) = t.chw()?;
        if (th, tw) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for t in inputs {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Spatial window `[:, y0..y0+h, x0..x0+w]`.
pub fn crop<T: Element>(
    x: &Tensor<T>,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (c, sh, sw) = x.chw()?;
    if h == 0 || w == 0 || y0 + h > sh || x0 + w > sw {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("crop window {h}x{w} at ({y0}, {x0}) does not fit"),
        });
    }
    let src = x.data();
    let mut data = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for y in y0..y0 + h {
            let row = (ci * sh + y) * sw;
            data.extend_from_slice(&src[row + x0..row + x0 + w]);
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Assemble `k²` equal tiles, given in row-major grid order, into one map.
pub fn tile_grid<T: Element>(tiles: &[&Tensor<T>], k: usize) -> Result<Tensor<T>> {
    if k == 0 || tiles.len() != k * k {
        return Err(Error::InvalidShape {
            shape: vec![tiles.len()],
            reason: format!("tile_grid needs {} tiles for a {k}x{k} grid", k * k),
        });
    }
    let (c, th, tw) = tiles[0].chw()?;
    for t in tiles {
        if t.shape() != tiles[0].shape() {
            return Err(Error::ShapeMismatch {
                op: "tile_grid",
                lhs: tiles[0].shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    let (h, w) = (th * k, tw * k);
    let mut data = vec![T::zero(); c * h * w];
    for (r, tile) in tiles.iter().enumerate() {
        let (gy, gx) = (r / k, r % k);
        let src = tile.data();
        for ci in 0..c {
            for y in 0..th {
                let dst = (ci * h + gy * th + y) * w + gx * tw;
                let s = (ci * th + y) * tw;
                data[dst..dst + tw].copy_from_slice(&src[s..s + tw]);
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_single_is_identity() {
        let a = Tensor::<f32>::from_fn(&[2, 3, 3], |i| i as f32);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn concat_preserves_order() {
        let a = Tensor::<f32>::full(&[1, 2, 2], 1.0);
        let b = Tensor::<f32>::full(&[1, 2, 2], 2.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(c.data(), &[1., 1., 1., 1., 2., 2., 2., 2.]);
    }

    #[test]
    fn concat_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 2, 2]);
        let b = Tensor::<f32>::zeros(&[1, 2, 3]);
        let err = concat_channels(&[&a, &b]).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 3]"), "{err}");
    }

    #[test]
    fn crop_then_tile_roundtrip() {
        let x = Tensor::<f32>::from_fn(&[2, 4, 6], |i| i as f32);
        let tiles: Vec<_> = (0..4)
            .map(|r| crop(&x, (r / 2) * 2, (r % 2) * 3, 2, 3).unwrap())
            .collect();
        let refs: Vec<_> = tiles.iter().collect();
        assert_eq!(tile_grid(&refs, 2).unwrap(), x);
    }
}
