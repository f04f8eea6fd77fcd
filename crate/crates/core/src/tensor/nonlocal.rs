//! Non-local feature enhancement over every position of a feature map.
//!
//! With `θ = Wθ·F`, `φ = Wφ·F`, `g = Wg·F` (1×1 projections to `C'` channels),
//! the pairwise logits are `f_ij = θ_iᵀ φ_j` and the response at `i` is
//! `y_i = Σ_j w_ij g_j`. The weights are either a row softmax of `f` or the
//! logits divided by their row sum.

use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

/// Magnitude floor for the row sum in [`AffinityMode::RawSum`].
pub const RAW_SUM_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AffinityMode {
    /// `w_ij = exp(f_ij) / Σ_j exp(f_ij)`.
    #[default]
    Softmax,
    /// `w_ij = f_ij / Σ_j f_ij`, denominator clamped away from zero.
    RawSum,
}

impl AffinityMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AffinityMode::Softmax => "softmax",
            AffinityMode::RawSum => "raw-sum",
        }
    }
}

impl std::str::FromStr for AffinityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(AffinityMode::Softmax),
            "raw-sum" | "raw_sum" | "rawsum" => Ok(AffinityMode::RawSum),
            other => Err(Error::Config(format!("unknown affinity mode `{other}`"))),
        }
    }
}

struct Dims {
    c: usize,
    ce: usize,
    h: usize,
    w: usize,
}

fn check<T: Element>(f: &Tensor<T>, wts: [&Tensor<T>; 3]) -> Result<Dims> {
    let (c, h, w) = f.chw()?;
    let ce = wts[0].shape()[0];
    for wt in wts {
        if wt.shape() != [ce, c, 1, 1] {
            return Err(Error::ShapeMismatch {
                op: "nonlocal embedding",
                lhs: wt.shape().to_vec(),
                rhs: vec![ce, c, 1, 1],
            });
        }
    }
    Ok(Dims { c, ce, h, w })
}

fn guarded(z: f64) -> (f64, bool) {
    if z.abs() < RAW_SUM_EPSILON {
        (
            RAW_SUM_EPSILON.copysign(if z == 0.0 { 1.0 } else { z }),
            true,
        )
    } else {
        (z, false)
    }
}

struct Forward<T> {
    theta: Vec<T>,
    phi: Vec<T>,
    g: Vec<T>,
    logits: Vec<T>,
    weights: Vec<T>,
}

fn project<T: Element>(w: &Tensor<T>, f: &Tensor<T>, d: &Dims) -> Vec<T> {
    let n = d.h * d.w;
    let mut out = vec![T::zero(); d.ce * n];
    gemm(
        d.ce,
        d.c,
        n,
        w.data(),
        false,
        f.data(),
        false,
        T::zero(),
        &mut out,
    );
    out
}

fn forward_parts<T: Element>(
    f: &Tensor<T>,
    wt: &Tensor<T>,
    wp: &Tensor<T>,
    wg: Option<&Tensor<T>>,
    mode: AffinityMode,
    d: &Dims,
) -> Forward<T> {
    let n = d.h * d.w;
    let theta = project(wt, f, d);
    let phi = project(wp, f, d);
    let g = wg.map(|wg| project(wg, f, d)).unwrap_or_default();
    let mut logits = vec![T::zero(); n * n];
    gemm(
        n,
        d.ce,
        n,
        &theta,
        true,
        &phi,
        false,
        T::zero(),
        &mut logits,
    );
    let mut weights = logits.clone();
    for row in weights.chunks_mut(n) {
        match mode {
            AffinityMode::Softmax => {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                let inv = T::one() / total;
                row.iter_mut().for_each(|v| *v *= inv);
            }
            AffinityMode::RawSum => {
                let z: f64 = row.iter().map(|v| v.as_f64()).sum();
                let inv = T::from_f64(1.0 / guarded(z).0);
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
    Forward {
        theta,
        phi,
        g,
        logits,
        weights,
    }
}

/// Row-normalized affinity matrix `[HW, HW]` (row `i` holds the weights of position `i`).
pub fn affinity_weights<T: Element>(
    f: &Tensor<T>,
    w_theta: &Tensor<T>,
    w_phi: &Tensor<T>,
    mode: AffinityMode,
) -> Result<Tensor<T>> {
    let d = check(f, [w_theta, w_phi, w_phi])?;
    let n = d.h * d.w;
    let fw = forward_parts(f, w_theta, w_phi, None, mode, &d);
    Tensor::new(vec![n, n], fw.weights)
}

/// Non-local response `[C', H, W]`.
pub fn nonlocal_apply<T: Element>(
    f: &Tensor<T>,
    w_theta: &Tensor<T>,
    w_phi: &Tensor<T>,
    w_g: &Tensor<T>,
    mode: AffinityMode,
) -> Result<Tensor<T>> {
    let d = check(f, [w_theta, w_phi, w_g])?;
    let n = d.h * d.w;
    let fw = forward_parts(f, w_theta, w_phi, Some(w_g), mode, &d);
    let mut y = vec![T::zero(); d.ce * n];
    gemm(
        d.ce,
        n,
        n,
        &fw.g,
        false,
        &fw.weights,
        true,
        T::zero(),
        &mut y,
    );
    Tensor::new(vec![d.ce, d.h, d.w], y)
}

pub struct NonLocalGrads<T> {
    pub input: Tensor<T>,
    pub w_theta: Tensor<T>,
    pub w_phi: Tensor<T>,
    pub w_g: Tensor<T>,
}

pub fn nonlocal_backward<T: Element>(
    f: &Tensor<T>,
    w_theta: &Tensor<T>,
    w_phi: &Tensor<T>,
    w_g: &Tensor<T>,
    mode: AffinityMode,
    grad_out: &Tensor<T>,
) -> Result<NonLocalGrads<T>> {
    let d = check(f, [w_theta, w_phi, w_g])?;
    let n = d.h * d.w;
    if grad_out.shape() != [d.ce, d.h, d.w] {
        return Err(Error::ShapeMismatch {
            op: "nonlocal backward",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![d.ce, d.h, d.w],
        });
    }
    let fw = forward_parts(f, w_theta, w_phi, Some(w_g), mode, &d);
    let dy = grad_out.data();

    let mut dg = vec![T::zero(); d.ce * n];
    gemm(
        d.ce,
        n,
        n,
        dy,
        false,
        &fw.weights,
        false,
        T::zero(),
        &mut dg,
    );
    // dA_ij = dy_i · g_j, then reuse the buffer for dS
    let mut ds = vec![T::zero(); n * n];
    gemm(n, d.ce, n, dy, true, &fw.g, false, T::zero(), &mut ds);
    for (i, row) in ds.chunks_mut(n).enumerate() {
        let w = &fw.weights[i * n..(i + 1) * n];
        match mode {
            AffinityMode::Softmax => {
                let dot: T = row.iter().zip(w).map(|(&a, &b)| a * b).sum();
                row.iter_mut()
                    .zip(w)
                    .for_each(|(r, &b)| *r = b * (*r - dot));
            }
            AffinityMode::RawSum => {
                let s = &fw.logits[i * n..(i + 1) * n];
                let z: f64 = s.iter().map(|v| v.as_f64()).sum();
                let (zg, clamped) = guarded(z);
                let inv = T::from_f64(1.0 / zg);
                // dS_ij = (dA_ij − Σ_k dA_ik w_ik) / Z; a clamped Z is constant
                let corr = if clamped {
                    T::zero()
                } else {
                    row.iter().zip(w).map(|(&a, &b)| a * b).sum::<T>()
                };
                row.iter_mut().for_each(|r| *r = (*r - corr) * inv);
            }
        }
    }
    let mut dtheta = vec![T::zero(); d.ce * n];
    gemm(
        d.ce,
        n,
        n,
        &fw.phi,
        false,
        &ds,
        true,
        T::zero(),
        &mut dtheta,
    );
    let mut dphi = vec![T::zero(); d.ce * n];
    gemm(
        d.ce,
        n,
        n,
        &fw.theta,
        false,
        &ds,
        false,
        T::zero(),
        &mut dphi,
    );

    let wgrad = |dproj: &[T]| -> Result<Tensor<T>> {
        let mut out = vec![T::zero(); d.ce * d.c];
        gemm(
            d.ce,
            n,
            d.c,
            dproj,
            false,
            f.data(),
            true,
            T::zero(),
            &mut out,
        );
        Tensor::new(vec![d.ce, d.c, 1, 1], out)
    };
    let mut dinput = vec![T::zero(); d.c * n];
    gemm(
        d.c,
        d.ce,
        n,
        w_theta.data(),
        true,
        &dtheta,
        false,
        T::zero(),
        &mut dinput,
    );
    gemm(
        d.c,
        d.ce,
        n,
        w_phi.data(),
        true,
        &dphi,
        false,
        T::one(),
        &mut dinput,
    );
    gemm(
        d.c,
        d.ce,
        n,
        w_g.data(),
        true,
        &dg,
        false,
        T::one(),
        &mut dinput,
    );

    Ok(NonLocalGrads {
        input: Tensor::new(vec![d.c, d.h, d.w], dinput)?,
        w_theta: wgrad(&dtheta)?,
        w_phi: wgrad(&dphi)?,
        w_g: wgrad(&dg)?,
    })
}
