use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nledn_core::metrics::{psnr, score, ssim, EvalReport, ImageScore};
use nledn_core::Tensor;

/// Per-window SSIM with an explicitly built 2-D Gaussian, no separability.
fn ssim_reference(a: &Tensor, b: &Tensor) -> f64 {
    let (_, h, w) = a.chw().unwrap();
    let mut g = [[0f64; 11]; 11];
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let total: f64 = g.iter().flatten().sum();
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, row) in g.iter().enumerate() {
                for (j, &gij) in row.iter().enumerate() {
                    let wgt = gij / total;
                    let p = a.get(&[0, y0 + i, x0 + j]) as f64;
                    let q = b.get(&[0, y0 + i, x0 + j]) as f64;
                    ma += wgt * p;
                    mb += wgt * q;
                    saa += wgt * p * p;
                    sbb += wgt * q * q;
                    sab += wgt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn ssim_matches_windowed_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (h, w) in [(11, 11), (16, 23), (30, 14)] {
        let a = Tensor::from_fn(&[1, h, w], |_| rng.gen::<f32>());
        let b = Tensor::from_fn(&[1, h, w], |i| {
            (a.data()[i] + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0)
        });
        let (fast, slow) = (ssim(&a, &b).unwrap(), ssim_reference(&a, &b));
        assert!((fast - slow).abs() < 1e-10, "{fast} {slow}");
    }
}

#[test]
fn inverted_halves_are_anticorrelated() {
    let a = Tensor::from_fn(&[1, 16, 16], |i| if i % 16 < 8 { 0.0 } else { 1.0 });
    let b = a.map(|v| 1.0 - v);
    assert!(ssim(&a, &b).unwrap() < 0.0);
}

#[test]
fn constant_images_follow_luminance_term() {
    for (ma, mb) in [(0.2f32, 0.7f32), (0.5, 0.0), (0.9, 0.4)] {
        let a = Tensor::full(&[1, 12, 12], ma);
        let b = Tensor::full(&[1, 12, 12], mb);
        let (x, y) = (ma as f64, mb as f64);
        let closed = (2.0 * x * y + 1e-4) / (x * x + y * y + 1e-4);
        assert!((ssim(&a, &b).unwrap() - closed).abs() < 1e-6);
    }
}

#[test]
fn uniform_error_psnr() {
    let a = Tensor::from_fn(&[1, 20, 20], |i| 0.3 + (i % 7) as f32 * 0.05);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 0.01);
}

#[test]
fn score_uses_luminance_and_clamps() {
    // a restored image overshooting 1.0 is scored as 1.0
    let truth = Tensor::full(&[3, 12, 12], 1.0);
    let over = Tensor::full(&[3, 12, 12], 1.3);
    let s = score("x", &over, &truth).unwrap();
    assert_eq!(s.psnr, f64::INFINITY);
    // pure chroma shift that keeps luminance fixed is invisible
    let grey = Tensor::full(&[3, 12, 12], 0.5);
    let tinted = Tensor::from_fn(&[3, 12, 12], |i| match i / 144 {
        0 => 0.5 + 0.1 * 0.587,
        1 => 0.5 - 0.1 * 0.299,
        _ => 0.5,
    });
    assert!(score("y", &tinted, &grey).unwrap().psnr > 60.0);
}

#[test]
fn report_mean_row_is_arithmetic_mean() {
    let rows: Vec<ImageScore> = (0..5)
        .map(|i| ImageScore {
            id: format!("{i}"),
            psnr: 20.0 + i as f64,
            ssim: 0.5 + 0.1 * i as f64,
        })
        .collect();
    let report = EvalReport { rows };
    assert_eq!(report.mean_psnr(), Some(22.0));
    assert!((report.mean_ssim().unwrap() - 0.7).abs() < 1e-12);
    assert!(report
        .to_tsv()
        .lines()
        .last()
        .unwrap()
        .starts_with("MEAN\t22.0000\t0.700000"));
}
