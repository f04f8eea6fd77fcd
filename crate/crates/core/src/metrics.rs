//! PSNR and SSIM on the BT.601 luminance channel.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Full-range BT.601 luma of a `[3, H, W]` image.
pub fn rgb_to_y(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "luminance needs an RGB image".into(),
        });
    }
    let d = t.data();
    let n = h * w;
    Ok(Tensor::from_fn(&[1, h, w], |i| {
        (0.299 * d[i] as f64 + 0.587 * d[n + i] as f64 + 0.114 * d[2 * n + i] as f64) as f32
    }))
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `10·log10(1 / MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian filter over every fully contained window position.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..k).map(|j| g[j] * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..k).map(|j| g[j] * rows[(oy + j) * ow + ox]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM of two single-channel images (dynamic range 1).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (c, h, w) = a.chw()?;
    if c != 1 {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: "ssim expects a single channel".into(),
        });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels"),
        });
    }
    let g = gaussian_window();
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &g);
    let my = filter_valid(&y, h, w, &g);
    let sxx = filter_valid(&prod(&x, &x), h, w, &g);
    let syy = filter_valid(&prod(&y, &y), h, w, &g);
    let sxy = filter_valid(&prod(&x, &y), h, w, &g);
    let (c1, c2) = (SSIM_K1.powi(2), SSIM_K2.powi(2));
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Scores a restored RGB image against its ground truth on luminance.
pub fn score(id: &str, restored: &Tensor, truth: &Tensor) -> Result<ImageScore> {
    let clamped = restored.clamp(0.0, 1.0);
    let (a, b) = (rgb_to_y(&clamped)?, rgb_to_y(truth)?);
    Ok(ImageScore {
        id: id.to_string(),
        psnr: psnr(&a, &b)?,
        ssim: ssim(&a, &b)?,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ImageScore>,
}

impl EvalReport {
    /// Mean PSNR over finite entries; `None` if every entry is infinite.
    pub fn mean_psnr(&self) -> Option<f64> {
        let finite: Vec<f64> = self
            .rows
            .iter()
            .map(|r| r.psnr)
            .filter(|p| p.is_finite())
            .collect();
        (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        (!self.rows.is_empty())
            .then(|| self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64)
    }

    pub fn infinite_count(&self) -> usize {
        self.rows.iter().filter(|r| r.psnr.is_infinite()).count()
    }

    pub fn to_tsv(&self) -> String {
        let fmt_psnr = |p: Option<f64>| match p {
            Some(v) if v.is_finite() => format!("{v:.4}"),
            _ => "inf".to_string(),
        };
        let mut out = String::from("id\tpsnr_db\tssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{:.6}", r.id, fmt_psnr(Some(r.psnr)), r.ssim);
        }
        let mean_ssim = self.mean_ssim().map_or("nan".into(), |s| format!("{s:.6}"));
        let _ = writeln!(out, "MEAN\t{}\t{}", fmt_psnr(self.mean_psnr()), mean_ssim);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_weights() {
        let px = |r, g, b| Tensor::new(vec![3, 1, 1], vec![r, g, b]).unwrap();
        assert!((rgb_to_y(&px(1.0, 1.0, 1.0)).unwrap().item() - 1.0).abs() < 1e-7);
        assert_eq!(rgb_to_y(&px(0.0, 0.0, 0.0)).unwrap().item(), 0.0);
        assert_eq!(rgb_to_y(&px(1.0, 0.0, 0.0)).unwrap().item(), 0.299);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::full(&[1, 4, 4], 0.2);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Tensor::full(&[1, 4, 4], 0.7);
        assert!((psnr(&a, &b).unwrap() - 6.0206).abs() < 1e-4);
        assert!(psnr(&a, &Tensor::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn window_is_normalised() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
    }

    #[test]
    fn ssim_rejects_small() {
        let a = Tensor::zeros(&[1, 10, 20]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn report_mean_skips_infinite() {
        let report = EvalReport {
            rows: vec![
                ImageScore {
                    id: "a".into(),
                    psnr: 20.0,
                    ssim: 0.5,
                },
                ImageScore {
                    id: "b".into(),
                    psnr: f64::INFINITY,
                    ssim: 1.0,
                },
            ],
        };
        assert_eq!(report.mean_psnr(), Some(20.0));
        assert_eq!(report.infinite_count(), 1);
        let tsv = report.to_tsv();
        assert!(tsv.contains("b\tinf\t1.000000"));
        assert!(tsv.ends_with("MEAN\t20.0000\t0.750000\n"), "{tsv}");
    }
}
