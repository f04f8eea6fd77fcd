//! Central finite-difference checks of the tape's analytic gradients, run in
//! 64-bit precision.
//!
//! Each check builds a scalar loss from a kernel's output (projected onto a
//! fixed random direction), differentiates it with [`Graph::backward`] and
//! compares every probed input entry against `(L(x+h) − L(x−h)) / 2h`
//! evaluated by forward passes only.
//!
//! A probe whose ±h evaluations land on different sides of a ReLU, pooling or
//! MAE kink has no meaningful central difference; such probes are detected
//! through [`Graph::activation_pattern`] and replaced by fresh draws.

use std::time::Instant;

use rand::distributions::{Distribution, Uniform};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{InitScheme, ModelConfig, NlednModel, Params};
use crate::tensor::{AffinityMode, Graph, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const KERNEL_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
const DENOMINATOR_FLOOR: f64 = 1e-8;
/// Probes per input tensor for kernel checks.
const PROBES_PER_INPUT: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// `C=4, g=2, L=2` on a 16×16 input.
    Micro,
    /// `C=8, g=4, L=3` on a 32×32 input.
    Small,
}

impl std::str::FromStr for Scale {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Scale::Micro),
            "small" => Ok(Scale::Small),
            other => Err(crate::Error::Config(format!(
                "unknown scale `{other}` (micro|small)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    /// Name of a check whose analytic gradient is scaled by 1.01 (negative control).
    pub perturb: Option<String>,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub worst_rel_err: f64,
    pub tolerance: f64,
    pub probes: usize,
    /// Probes redrawn because they straddled a kink.
    pub skipped: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckReport::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckReport> {
        self.checks.iter().filter(|c| !c.passed())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares analytic and numeric gradients of `build(inputs)` projected onto
/// a random direction. `probes` limits the entries checked per input.
pub fn check_kernel(
    name: &str,
    inputs: &[Tensor<f64>],
    build: &Build<'_>,
    probes: usize,
    seed: u64,
    options: &Options,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let dist = Uniform::new_inclusive(-1.0, 1.0);
    let direction = Tensor::from_fn(&out_shape, |_| dist.sample(&mut rng));

    type Eval = (f64, Vec<u32>, Option<Vec<Tensor<f64>>>);
    let loss = |inputs: &[Tensor<f64>], grad: bool| -> Result<Eval> {
        let mut g = Graph::new();
        let vars: Vec<_> = inputs
            .iter()
            .map(|t| g.leaf(t.clone().with_grad(grad)))
            .collect();
        let out = build(&mut g, &vars)?;
        let dir = g.leaf(direction.clone());
        let prod = g.mul(out, dir)?;
        let l = g.sum(prod);
        let value = g.value(l).item();
        let pattern = g.activation_pattern();
        if !grad {
            return Ok((value, pattern, None));
        }
        let mut grads = g.backward(l)?;
        let gs = vars
            .iter()
            .map(|v| grads.take(*v).expect("leaf gradient"))
            .collect();
        Ok((value, pattern, Some(gs)))
    };

    let (_, base, analytic) = loss(inputs, true)?;
    let analytic = analytic.expect("requested");
    let factor = if options.perturb.as_deref() == Some(name) {
        1.01
    } else {
        1.0
    };

    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut skipped = 0;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        // visit entries in random order until `probes` smooth ones are found
        let order = sample(&mut rng, n, n).into_vec();
        let mut accepted = 0;
        for j in order {
            if accepted == probes {
                break;
            }
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let (plus, p_plus, _) = loss(&work, false)?;
            work[i].data_mut()[j] = orig - STEP;
            let (minus, p_minus, _) = loss(&work, false)?;
            work[i].data_mut()[j] = orig;
            if p_plus != base || p_minus != base {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[i].data()[j] * factor, numeric));
            accepted += 1;
        }
        count += accepted;
    }
    Ok(CheckReport {
        name: name.to_string(),
        worst_rel_err: worst,
        tolerance: KERNEL_TOLERANCE,
        probes: count,
        skipped,
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let d = Uniform::new_inclusive(lo, hi);
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// Every differentiable kernel on random inputs in [−1, 1].
pub fn kernel_suite(seed: u64, options: &Options) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| uniform(shape, -1.0, 1.0, &mut rng);
    let mut reports = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, build: &Build<'_>| -> Result<()> {
        let r = check_kernel(name, &inputs, build, PROBES_PER_INPUT, seed, options)?;
        reports.push(r);
        Ok(())
    };

    run(
        "conv2d_3x3",
        vec![u(&[3, 6, 5]), u(&[4, 3, 3, 3]), u(&[4])],
        &|g, v| g.conv2d(v[0], v[1], v[2], 1),
    )?;
    run(
        "conv2d_1x1",
        vec![u(&[5, 4, 4]), u(&[3, 5, 1, 1]), u(&[3])],
        &|g, v| g.conv2d(v[0], v[1], v[2], 0),
    )?;
    run("max_pool2d", vec![u(&[2, 6, 4])], &|g, v| {
        Ok(g.max_pool2d(v[0])?.0)
    })?;
    let pool_src = u(&[2, 6, 4]);
    let (_, indices) = crate::tensor::max_pool2d(&pool_src)?;
    run("max_unpool2d", vec![u(&[2, 3, 2])], &|g, v| {
        g.max_unpool2d(v[0], &indices)
    })?;
    run(
        "nonlocal_softmax",
        vec![
            u(&[3, 4, 4]),
            u(&[2, 3, 1, 1]),
            u(&[2, 3, 1, 1]),
            u(&[2, 3, 1, 1]),
        ],
        &|g, v| g.nonlocal(v[0], v[1], v[2], v[3], AffinityMode::Softmax),
    )?;
    // positive features and embeddings keep every row sum far from the ε guard
    let mut pos = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let raw_inputs = vec![
        uniform(&[3, 3, 3], 0.2, 1.0, &mut pos),
        uniform(&[2, 3, 1, 1], 0.2, 1.0, &mut pos),
        uniform(&[2, 3, 1, 1], 0.2, 1.0, &mut pos),
        uniform(&[2, 3, 1, 1], -1.0, 1.0, &mut pos),
    ];
    run("nonlocal_raw_sum", raw_inputs, &|g, v| {
        g.nonlocal(v[0], v[1], v[2], v[3], AffinityMode::RawSum)
    })?;
    run(
        "concat_channels",
        vec![u(&[2, 3, 3]), u(&[1, 3, 3]), u(&[3, 3, 3])],
        &|g, v| g.concat(v),
    )?;
    run("crop_tile", vec![u(&[2, 4, 6])], &|g, v| {
        let tiles = (0..4)
            .map(|r| g.crop(v[0], (r / 2) * 2, (r % 2) * 3, 2, 3))
            .collect::<Result<Vec<_>>>()?;
        let swapped = [tiles[3], tiles[2], tiles[1], tiles[0]];
        g.tile(&swapped, 2)
    })?;
    run("relu", vec![u(&[2, 5, 5])], &|g, v| Ok(g.relu(v[0])))?;
    run("tanh", vec![u(&[2, 5, 5])], &|g, v| Ok(g.tanh(v[0])))?;
    run("add", vec![u(&[2, 3, 3]), u(&[2, 3, 3])], &|g, v| {
        g.add(v[0], v[1])
    })?;
    run("mul", vec![u(&[2, 3, 3]), u(&[2, 3, 3])], &|g, v| {
        g.mul(v[0], v[1])
    })?;
    run(
        "scale",
        vec![u(&[2, 3, 3])],
        &|g, v| Ok(g.scale(v[0], -1.7)),
    )?;
    run("mae", vec![u(&[3, 4, 4]), u(&[3, 4, 4])], &|g, v| {
        g.mae(v[0], v[1])
    })?;
    Ok(reports)
}

/// Gradient of the MAE training loss w.r.t. a sample of network parameters.
pub fn network_check(
    config: ModelConfig,
    size: usize,
    samples: usize,
    seed: u64,
    options: &Options,
) -> Result<CheckReport> {
    let model = NlednModel::<f64>::init(config, InitScheme::Randomized)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = uniform(&[3, size, size], 0.0, 1.0, &mut rng);
    let target = uniform(&[3, size, size], 0.0, 1.0, &mut rng);

    type Eval = (f64, Vec<u32>, Option<Params<Tensor<f64>>>);
    let loss = |params: &Params<Tensor<f64>>, grad: bool| -> Result<Eval> {
        let m = NlednModel {
            config: model.config.clone(),
            params: params.clone(),
        };
        let mut g = Graph::new();
        let pv = m.bind(&mut g, grad);
        let x = g.leaf(input.clone());
        let y = g.leaf(target.clone());
        let out = m.forward(&mut g, &pv, x)?;
        let l = g.mae(out.restored, y)?;
        let value = g.value(l).item();
        let pattern = g.activation_pattern();
        if !grad {
            return Ok((value, pattern, None));
        }
        let mut grads = g.backward(l)?;
        let gp = pv.map(|_, v| grads.take(*v).expect("param gradient"));
        Ok((value, pattern, Some(gp)))
    };

    let (_, base, analytic) = loss(&model.params, true)?;
    let analytic = analytic.expect("requested");
    let flat: Vec<(String, Tensor<f64>)> = analytic
        .entries()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let total: usize = flat.iter().map(|(_, t)| t.numel()).sum();
    let factor = if options.perturb.as_deref() == Some("network") {
        1.01
    } else {
        1.0
    };

    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut skipped = 0;
    for flat_idx in sample(&mut rng, total, total).into_vec() {
        if accepted == samples {
            break;
        }
        let mut rem = flat_idx;
        let mut which = 0;
        while rem >= flat[which].1.numel() {
            rem -= flat[which].1.numel();
            which += 1;
        }
        let target_name = &flat[which].0;
        let perturbed = |delta: f64| {
            let mut p = model.params.clone();
            p.visit_mut(|name, t| {
                if name == target_name {
                    t.data_mut()[rem] += delta;
                }
            });
            p
        };
        let (plus, p_plus, _) = loss(&perturbed(STEP), false)?;
        let (minus, p_minus, _) = loss(&perturbed(-STEP), false)?;
        if p_plus != base || p_minus != base {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = flat[which].1.data()[rem] * factor;
        worst = worst.max(relative_error(a, numeric));
        accepted += 1;
    }
    Ok(CheckReport {
        name: "network".into(),
        worst_rel_err: worst,
        tolerance: NETWORK_TOLERANCE,
        probes: accepted,
        skipped,
    })
}

pub fn network_config(scale: Scale) -> (ModelConfig, usize) {
    match scale {
        Scale::Micro => (ModelConfig::micro(), 16),
        Scale::Small => (
            ModelConfig {
                base_channels: 8,
                growth_rate: 4,
                dense_layers_per_block: 3,
                ..ModelConfig::default()
            },
            32,
        ),
    }
}

/// Kernel suite plus the end-to-end check at the given scale.
pub fn run_suite(scale: Scale, seed: u64, options: &Options) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut checks = kernel_suite(seed, options)?;
    let (config, size) = network_config(scale);
    checks.push(network_check(
        ModelConfig { seed, ..config },
        size,
        32,
        seed,
        options,
    )?);
    Ok(SuiteReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.01) - 0.01 / 1.01).abs() < 1e-12);
    }

    #[test]
    fn perturbed_kernel_is_caught() {
        let options = Options {
            perturb: Some("tanh".into()),
        };
        let reports = kernel_suite(3, &options).unwrap();
        for r in &reports {
            assert_eq!(
                r.passed(),
                r.name != "tanh",
                "{}: {:e}",
                r.name,
                r.worst_rel_err
            );
        }
    }

    #[test]
    fn kink_straddling_probe_is_skipped() {
        // relu at exactly 0: ±h lands on both sides
        let x = Tensor::<f64>::new(vec![1, 1, 1], vec![0.0]).unwrap();
        let r = check_kernel(
            "relu",
            &[x],
            &|g, v| Ok(g.relu(v[0])),
            1,
            0,
            &Options::default(),
        )
        .unwrap();
        assert_eq!((r.probes, r.skipped), (0, 1));
    }
}
