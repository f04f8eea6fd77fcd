//! Image pairs, preprocessing, synthetic rain and on-disk datasets.

mod dataset;
mod io;
mod rain;
mod scene;

pub use dataset::{list_pngs, pair_dirs, write_manifest, Dataset, ManifestRow};
pub use io::{load_image, rgb_to_tensor, save_image, tensor_to_rgb};
pub use rain::{apply_layer, rain_layer, synth_rain, RainLayer, RainParams};
pub use scene::procedural_scene;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images whose long side exceeds this are downscaled before use.
pub const MAX_LONG_SIDE: usize = 512;
/// Spatial extents must be multiples of this (three 2×2 poolings).
pub const SIZE_MULTIPLE: usize = 8;

/// Reflect padding added around an image, in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad {
    /// Padding that brings `h × w` up to the next multiple of 8, with the odd
    /// pixel on the bottom/right.
    pub fn to_multiple(h: usize, w: usize) -> Self {
        let split = |n: usize| {
            let total = n.next_multiple_of(SIZE_MULTIPLE) - n;
            (total / 2, total - total / 2)
        };
        let ((top, bottom), (left, right)) = (split(h), split(w));
        Self {
            top,
            bottom,
            left,
            right,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }

    fn mirrored(self) -> Self {
        Self {
            left: self.right,
            right: self.left,
            ..self
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub rainy: Tensor,
    pub clean: Tensor,
    pub id: String,
    pub pad: Pad,
}

impl ImagePair {
    pub fn new(rainy: Tensor, clean: Tensor, id: impl Into<String>) -> Self {
        Self {
            rainy,
            clean,
            id: id.into(),
            pad: Pad::default(),
        }
    }
}

/// Maps an out-of-range coordinate back into `0..n` by mirroring about the
/// edge pixels, repeating the mirror for pads wider than the image.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

pub fn reflect_pad(t: &Tensor, pad: Pad) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if pad.is_zero() {
        return Ok(t.clone());
    }
    let (oh, ow) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
    let data = t.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let sy = reflect(y as isize - pad.top as isize, h);
        let sx = reflect(x as isize - pad.left as isize, w);
        data[(ch * h + sy) * w + sx]
    }))
}

/// Removes `pad` again; the inverse of [`reflect_pad`].
pub fn unpad(t: &Tensor, pad: Pad) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if pad.top + pad.bottom >= h || pad.left + pad.right >= w {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("padding {pad:?} leaves no pixels"),
        });
    }
    let (oh, ow) = (h - pad.top - pad.bottom, w - pad.left - pad.right);
    let data = t.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        data[(ch * h + y + pad.top) * w + x + pad.left]
    }))
}

/// Bilinear resampling with pixel-centre alignment.
pub fn resize_bilinear(t: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if (oh, ow) == (h, w) {
        return Ok(t.clone());
    }
    let axis = |o: usize, n: usize, out: usize| {
        let s = ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let rows: Vec<_> = (0..oh).map(|y| axis(y, h, oh)).collect();
    let cols: Vec<_> = (0..ow).map(|x| axis(x, w, ow)).collect();
    let data = t.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let ((y0, y1, fy), (x0, x1, fx)) = (rows[y], cols[x]);
        let at = |yy: usize, xx: usize| data[(ch * h + yy) * w + xx];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Target size after capping the long side at [`MAX_LONG_SIDE`].
pub fn capped_size(h: usize, w: usize) -> (usize, usize) {
    let long = h.max(w);
    if long <= MAX_LONG_SIDE {
        return (h, w);
    }
    let scale = |n: usize| ((n * MAX_LONG_SIDE) as f64 / long as f64).round().max(1.0) as usize;
    (scale(h), scale(w))
}

/// Resize cap, reflect padding to a multiple of 8 and, in train mode, a
/// horizontal flip with probability 0.5 shared by both images.
pub fn prepare(pair: &ImagePair, train_mode: bool, rng: &mut impl Rng) -> Result<ImagePair> {
    if pair.rainy.shape() != pair.clean.shape() {
        return Err(Error::ShapeMismatch {
            op: "image pair",
            lhs: pair.rainy.shape().to_vec(),
            rhs: pair.clean.shape().to_vec(),
        });
    }
    let (_, h, w) = pair.rainy.chw()?;
    let (rh, rw) = capped_size(h, w);
    let pad = Pad::to_multiple(rh, rw);
    let step = |t: &Tensor| reflect_pad(&resize_bilinear(t, rh, rw)?, pad);
    let mut out = ImagePair {
        rainy: step(&pair.rainy)?,
        clean: step(&pair.clean)?,
        id: pair.id.clone(),
        pad,
    };
    if train_mode && rng.gen_bool(0.5) {
        out.rainy = out.rainy.flip_horizontal();
        out.clean = out.clean.flip_horizontal();
        out.pad = out.pad.mirrored();
    }
    Ok(out)
}

/// Pads a single image for inference, returning the pad to undo afterwards.
pub fn pad_for_network(t: &Tensor) -> Result<(Tensor, Pad)> {
    let (_, h, w) = t.chw()?;
    let pad = Pad::to_multiple(h, w);
    Ok((reflect_pad(t, pad)?, pad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pad_split() {
        let p = Pad::to_multiple(100, 37);
        assert_eq!((p.top, p.bottom, p.left, p.right), (2, 2, 1, 2));
        assert!(Pad::to_multiple(512, 512).is_zero());
    }

    #[test]
    fn reflect_excludes_edge() {
        let t = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let pad = Pad {
            left: 2,
            right: 3,
            ..Pad::default()
        };
        let p = reflect_pad(&t, pad).unwrap();
        assert_eq!(p.data(), &[3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0, 2.0]);
        assert_eq!(unpad(&p, pad).unwrap(), t);
    }

    #[test]
    fn single_pixel_pads_to_constant() {
        let t = Tensor::full(&[3, 1, 1], 0.3);
        let (p, pad) = pad_for_network(&t).unwrap();
        assert_eq!(p.shape(), &[3, 8, 8]);
        assert!(p.data().iter().all(|&v| v == 0.3));
        assert_eq!(unpad(&p, pad).unwrap(), t);
    }

    #[test]
    fn cap_keeps_aspect() {
        assert_eq!(capped_size(512, 512), (512, 512));
        assert_eq!(capped_size(1024, 600), (512, 300));
        assert_eq!(capped_size(300, 2048), (75, 512));
    }

    #[test]
    fn resize_constant_and_identity() {
        let t = Tensor::full(&[3, 20, 30], 0.25);
        let r = resize_bilinear(&t, 7, 11).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let g = Tensor::from_fn(&[1, 4, 4], |i| i as f32);
        assert_eq!(resize_bilinear(&g, 4, 4).unwrap(), g);
        // 2× downscale of a ramp averages neighbouring pairs
        let ramp = Tensor::from_fn(&[1, 1, 4], |i| i as f32);
        assert_eq!(resize_bilinear(&ramp, 1, 2).unwrap().data(), &[0.5, 2.5]);
    }

    #[test]
    fn large_input_is_capped_and_padded() {
        let t = Tensor::full(&[3, 700, 300], 0.5);
        let pair = ImagePair::new(t.clone(), t, "big");
        let out = prepare(&pair, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // 700×300 → 512×219 → 512×224
        assert_eq!(out.rainy.shape(), &[3, 512, 224]);
        assert_eq!(out.pad, Pad::to_multiple(512, 219));
    }

    #[test]
    fn flip_moves_both_images() {
        let mut rainy = Tensor::zeros(&[3, 8, 8]);
        let mut clean = Tensor::zeros(&[3, 8, 8]);
        rainy.set(&[0, 2, 1], 1.0);
        clean.set(&[0, 2, 1], 1.0);
        let pair = ImagePair::new(rainy, clean, "m");
        let mut flipped = 0;
        for seed in 0..32 {
            let out = prepare(&pair, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(out.rainy, out.clean);
            if out.rainy.get(&[0, 2, 6]) == 1.0 {
                flipped += 1;
            } else {
                assert_eq!(out.rainy.get(&[0, 2, 1]), 1.0);
            }
        }
        assert!(flipped > 4 && flipped < 28, "{flipped}");
    }
}
