//! 8-bit RGB PNG input and output.

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_error(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Loads an 8-bit RGB PNG as a `[3, H, W]` tensor with values `byte / 255`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(image_error(path, "file not found"));
    }
    let reader = ImageReader::open(path)?
        .with_guessed_format()
        .map_err(|e| image_error(path, e))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(image_error(path, "not a PNG file"));
    }
    let img = match reader.decode().map_err(|e| image_error(path, e))? {
        DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(image_error(
                path,
                format!(
                    "unsupported pixel format {:?}, expected 8-bit RGB",
                    other.color()
                ),
            ))
        }
    };
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Quantizes a `[3, H, W]` tensor: clamp to [0, 1], scale by 255, round half up.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "an RGB image needs 3 channels".into(),
        });
    }
    let data = t.data();
    let mut raw = vec![0u8; h * w * 3];
    for (p, px) in raw.chunks_exact_mut(3).enumerate() {
        for (ch, byte) in px.iter_mut().enumerate() {
            let v = data[ch * h * w + p].clamp(0.0, 1.0);
            *byte = (v * 255.0 + 0.5).floor() as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from extents"))
}

pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extremes_map_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut img = RgbImage::new(2, 1);
        img.put_pixel(1, 0, image::Rgb([255, 255, 255]));
        img.save(&path).unwrap();
        let t = load_image(&path).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.get(&[0, 0, 0]), 0.0);
        assert_eq!(t.get(&[2, 0, 1]), 1.0);
    }

    #[test]
    fn rounding_is_half_up() {
        let t = Tensor::new(vec![3, 1, 1], vec![0.5 / 255.0, 1.49 / 255.0, 2.0]).unwrap();
        assert_eq!(tensor_to_rgb(&t).unwrap().as_raw(), &[1, 1, 255]);
    }

    #[test]
    fn rejects_grayscale_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        image::GrayImage::new(3, 3).save(&path).unwrap();
        let err = load_image(&path).unwrap_err().to_string();
        assert!(err.contains("8-bit RGB"), "{err}");
        assert!(load_image(&dir.path().join("none.png")).is_err());
    }
}
