//! Procedural rain streaks: Gaussian-profile line segments accumulated into
//! a non-negative brightness layer that is added to a clean image.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ImagePair;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Streaks extend at most this many σ to the side before being cut off.
const PROFILE_RADIUS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RainParams {
    pub streak_count: usize,
    /// Dominant direction in degrees from horizontal, drawn once per image.
    pub angle: (f64, f64),
    /// Per-streak deviation from the dominant direction, degrees.
    pub angle_jitter: f64,
    /// Segment length in pixels.
    pub length: (f64, f64),
    /// σ of the cross profile in pixels.
    pub width: (f64, f64),
    /// Peak additive brightness.
    pub intensity: (f64, f64),
    pub seed: u64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            streak_count: 120,
            angle: (60.0, 120.0),
            angle_jitter: 4.0,
            length: (8.0, 30.0),
            width: (0.4, 1.2),
            intensity: (0.15, 0.45),
            seed: 0,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| {
            if !(lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max) {
                return Err(Error::Config(format!(
                    "rain {name} range [{lo}, {hi}] must satisfy {min} <= lo <= hi <= {max}"
                )));
            }
            Ok(())
        };
        range("angle", self.angle, 0.0, 180.0)?;
        range("length", self.length, f64::MIN_POSITIVE, f64::MAX)?;
        range("width", self.width, f64::MIN_POSITIVE, f64::MAX)?;
        range("intensity", self.intensity, 0.0, 0.6)?;
        if !(self.angle_jitter >= 0.0 && self.angle_jitter.is_finite()) {
            return Err(Error::Config("rain angle_jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// A rendered streak layer `[1, H, W]` and the dominant angle it was drawn with.
#[derive(Clone, Debug)]
pub struct RainLayer {
    pub map: Tensor,
    pub angle: f64,
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

pub fn rain_layer(h: usize, w: usize, params: &RainParams) -> Result<RainLayer> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let base = draw(&mut rng, params.angle);
    let mut acc = vec![0f64; h * w];
    for _ in 0..params.streak_count {
        let jitter = draw(&mut rng, (-params.angle_jitter, params.angle_jitter));
        let theta = (base + jitter).to_radians();
        let len = draw(&mut rng, params.length);
        let sigma = draw(&mut rng, params.width);
        let peak = draw(&mut rng, params.intensity);
        // centres may fall slightly outside so streaks also enter from the edges
        let cx = rng.gen_range(-0.1..1.1) * w as f64;
        let cy = rng.gen_range(-0.1..1.1) * h as f64;
        if peak == 0.0 {
            continue;
        }
        let (dx, dy) = (theta.cos(), -theta.sin());
        let (x0, y0) = (cx - dx * len / 2.0, cy - dy * len / 2.0);
        let (x1, y1) = (cx + dx * len / 2.0, cy + dy * len / 2.0);
        let reach = PROFILE_RADIUS * sigma + 1.0;
        let clip = |v: f64, n: usize| v.max(0.0).min(n as f64 - 1.0) as usize;
        let (xa, xb) = (clip(x0.min(x1) - reach, w), clip(x0.max(x1) + reach, w));
        let (ya, yb) = (clip(y0.min(y1) - reach, h), clip(y0.max(y1) + reach, h));
        if x0.max(x1) + reach < 0.0 || y0.max(y1) + reach < 0.0 {
            continue;
        }
        for py in ya..=yb {
            for px in xa..=xb {
                // pixel centre distance to the segment
                let (qx, qy) = (px as f64 + 0.5 - x0, py as f64 + 0.5 - y0);
                let t = ((qx * dx + qy * dy) / len).clamp(0.0, 1.0) * len;
                let d2 = (qx - t * dx).powi(2) + (qy - t * dy).powi(2);
                if d2 <= (PROFILE_RADIUS * sigma).powi(2) {
                    acc[py * w + px] += peak * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    let map = Tensor::new(vec![1, h, w], acc.into_iter().map(|v| v as f32).collect())?;
    Ok(RainLayer { map, angle: base })
}

/// `rainy = clamp(clean + S, 0, 1)` with the streak layer broadcast to RGB.
pub fn synth_rain(clean: &Tensor, params: &RainParams, id: &str) -> Result<ImagePair> {
    let (_, h, w) = clean.chw()?;
    let layer = rain_layer(h, w, params)?;
    Ok(apply_layer(clean, &layer.map, id))
}

pub fn apply_layer(clean: &Tensor, streaks: &Tensor, id: &str) -> ImagePair {
    let plane = streaks.numel();
    let s = streaks.data();
    let data = clean.data();
    let rainy = Tensor::from_fn(clean.shape(), |i| (data[i] + s[i % plane]).clamp(0.0, 1.0));
    ImagePair::new(rainy, clean.clone(), id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grey() -> Tensor {
        Tensor::full(&[3, 24, 20], 0.4)
    }

    #[test]
    fn no_streaks_is_identity() {
        let none = RainParams {
            streak_count: 0,
            ..Default::default()
        };
        assert_eq!(synth_rain(&grey(), &none, "a").unwrap().rainy, grey());
        let dark = RainParams {
            intensity: (0.0, 0.0),
            ..Default::default()
        };
        assert_eq!(synth_rain(&grey(), &dark, "a").unwrap().rainy, grey());
    }

    #[test]
    fn layer_is_nonnegative_and_seeded() {
        let p = RainParams {
            seed: 11,
            ..Default::default()
        };
        let a = rain_layer(40, 30, &p).unwrap();
        let b = rain_layer(40, 30, &p).unwrap();
        assert_eq!(a.map, b.map);
        assert!(a.map.data().iter().all(|&v| v >= 0.0));
        assert!(a.map.data().iter().any(|&v| v > 0.05));
        let c = rain_layer(40, 30, &RainParams { seed: 12, ..p }).unwrap();
        assert_ne!(a.map, c.map);
    }

    #[test]
    fn vertical_streak_is_narrow() {
        let p = RainParams {
            streak_count: 1,
            angle: (90.0, 90.0),
            angle_jitter: 0.0,
            length: (200.0, 200.0),
            width: (0.5, 0.5),
            intensity: (0.5, 0.5),
            seed: 3,
        };
        let m = rain_layer(16, 16, &p).unwrap().map;
        // every lit row has the same column profile
        let lit: Vec<usize> = (0..16).filter(|&x| m.get(&[0, 8, x]) > 0.01).collect();
        assert!(!lit.is_empty() && lit.len() <= 3, "{lit:?}");
        for y in 0..16 {
            assert!((m.get(&[0, y, lit[0]]) - m.get(&[0, 8, lit[0]])).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_ranges() {
        let p = RainParams {
            intensity: (0.2, 0.9),
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = RainParams {
            length: (5.0, 2.0),
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
