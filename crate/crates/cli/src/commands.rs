use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use nledn_core::checkpoint;
use nledn_core::data::{
    apply_layer, list_pngs, load_image, pad_for_network, pair_dirs, procedural_scene, rain_layer,
    save_image, unpad, write_manifest, Dataset, ManifestRow, RainParams,
};
use nledn_core::gradcheck::{self, Options};
use nledn_core::metrics::{score, EvalReport};
use nledn_core::model::{InitScheme, ModelConfig, NlednModel};
use nledn_core::train::{self, apply_config_file, ConfigFile, TrainConfig, TrainState};
use nledn_core::Tensor;

use crate::{
    Command, DescribeArgs, EvalArgs, GradcheckArgs, InferArgs, ModelFlags, ScenesArgs, SynthArgs,
    TrainArgs,
};

/// A bad flag combination or value, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(command: Command) -> Result<ExitCode> {
    let result = thread_count().and_then(|_| match command {
        Command::Synth(a) => synth(a).map(|_| ExitCode::SUCCESS),
        Command::Scenes(a) => scenes(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => train_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Infer(a) => infer(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval(a).map(|_| ExitCode::SUCCESS),
        Command::Describe(a) => describe(a).map(|_| ExitCode::SUCCESS),
        Command::Gradcheck(a) => gradcheck(a),
    });
    match result {
        Ok(code) => Ok(code),
        Err(e) if e.is::<UsageError>() => {
            eprintln!("usage error: {e}");
            Ok(ExitCode::from(1))
        }
        Err(e) => Err(e),
    }
}

/// Worker threads for per-image parallel work, from `NLEDN_THREADS` (default 1).
fn thread_count() -> Result<usize> {
    match std::env::var("NLEDN_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            usage(format!(
                "NLEDN_THREADS must be a positive integer, got `{v}`"
            ))
        }),
        Err(_) => Ok(1),
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let base = RainParams {
        streak_count: a.streaks,
        angle: (a.angle_min, a.angle_max),
        length: (a.length_min, a.length_max),
        width: (a.width_min, a.width_max),
        intensity: (a.intensity_min, a.intensity_max),
        ..RainParams::default()
    };
    base.validate().map_err(|e| usage(e.to_string()))?;
    if a.count == 0 {
        return Err(usage("--count must be >= 1"));
    }
    let cleans: Vec<_> = list_pngs(&a.clean_dir)?.into_iter().collect();
    if cleans.is_empty() {
        bail!("no PNG images in {}", a.clean_dir.display());
    }
    fs::create_dir_all(a.out_dir.join("rainy"))?;
    fs::create_dir_all(a.out_dir.join("clean"))?;
    let mut seeds = ChaCha8Rng::seed_from_u64(a.seed);
    let mut rows = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let (stem, path) = &cleans[i % cleans.len()];
        let clean = load_image(path)?;
        let (_, h, w) = clean.chw()?;
        let params = RainParams {
            seed: seeds.next_u64(),
            ..base.clone()
        };
        let layer = rain_layer(h, w, &params)?;
        let id = format!("{i:05}_{stem}");
        let pair = apply_layer(&clean, &layer.map, &id);
        save_image(
            &pair.rainy,
            &a.out_dir.join("rainy").join(format!("{id}.png")),
        )?;
        save_image(
            &pair.clean,
            &a.out_dir.join("clean").join(format!("{id}.png")),
        )?;
        rows.push(ManifestRow {
            id,
            seed: params.seed,
            streak_count: params.streak_count,
            angle: layer.angle,
        });
    }
    write_manifest(&a.out_dir.join("manifest.tsv"), &rows)?;
    info!("wrote {} pairs to {}", rows.len(), a.out_dir.display());
    Ok(())
}

fn scenes(a: ScenesArgs) -> Result<()> {
    if a.count == 0 || a.height == 0 || a.width == 0 {
        return Err(usage("--count, --height and --width must be >= 1"));
    }
    fs::create_dir_all(&a.out_dir)?;
    for i in 0..a.count {
        let img = procedural_scene(a.height, a.width, a.seed.wrapping_add(i as u64));
        save_image(&img, &a.out_dir.join(format!("scene_{i:04}.png")))?;
    }
    info!("wrote {} scenes to {}", a.count, a.out_dir.display());
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    if let Some(p) = path {
        let file = ConfigFile::read(p).map_err(|e| usage(e.to_string()))?;
        apply_config_file(file, &mut model, &mut train).map_err(|e| usage(e.to_string()))?;
    }
    Ok((model, train))
}

fn apply_model_flags(mut cfg: ModelConfig, f: &ModelFlags) -> Result<ModelConfig> {
    if f.micro {
        let micro = ModelConfig::micro();
        cfg.base_channels = micro.base_channels;
        cfg.growth_rate = micro.growth_rate;
        cfg.dense_layers_per_block = micro.dense_layers_per_block;
    }
    if let Some(v) = f.base_channels {
        cfg.base_channels = v;
    }
    if let Some(v) = f.growth_rate {
        cfg.growth_rate = v;
    }
    if let Some(v) = f.dense_layers {
        cfg.dense_layers_per_block = v;
    }
    if let Some(v) = f.affinity {
        cfg.affinity_mode = v;
    }
    if let Some(v) = f.variant {
        cfg = v.configure(&cfg);
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn model_flags_set(f: &ModelFlags) -> bool {
    f.variant.is_some()
        || f.micro
        || f.base_channels.is_some()
        || f.growth_rate.is_some()
        || f.dense_layers.is_some()
        || f.affinity.is_some()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (model_cfg, mut train_cfg) = read_config(a.config.as_deref())?;
    if let Some(v) = a.max_steps {
        train_cfg.max_steps = v;
    }
    if let Some(v) = a.lr_init {
        train_cfg.lr_init = v;
        train_cfg.lr_floor = train_cfg.lr_floor.min(v);
    }
    if let Some(v) = a.checkpoint_every {
        train_cfg.checkpoint_every = v;
    }
    let mut model_cfg = apply_model_flags(model_cfg, &a.model)?;
    if let Some(s) = a.seed {
        train_cfg.seed = s;
        model_cfg.seed = s;
    }
    train_cfg.validate().map_err(|e| usage(e.to_string()))?;
    if a.resume.is_some() && model_flags_set(&a.model) {
        return Err(usage(
            "model flags cannot be combined with --resume; the checkpoint fixes the architecture",
        ));
    }

    let dataset = Dataset::open(&a.data)?;
    let (mut model, mut state) = match &a.resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            let state = ck
                .state
                .with_context(|| format!("{} has no training state to resume", path.display()))?;
            // data order follows the run being resumed unless overridden
            if a.seed.is_none() {
                train_cfg.seed = ck.model.config.seed;
            }
            info!("resuming from {} at step {}", path.display(), state.step);
            (ck.model, state)
        }
        None => {
            let model = NlednModel::init(model_cfg, InitScheme::ZeroResidual)?;
            let state = TrainState::new(&model, &train_cfg);
            (model, state)
        }
    };
    info!(
        "training {} parameters on {} pairs for {} steps",
        model.parameter_count(),
        dataset.len(),
        train_cfg.max_steps.saturating_sub(state.step)
    );
    let log_every = (train_cfg.max_steps / 20).max(1);
    let summary = train::train(
        &mut model,
        &mut state,
        &dataset,
        &train_cfg,
        Some(&a.out),
        &mut |r| {
            if r.step % log_every == 0 {
                info!("step {} loss {:.5} lr {:.2e}", r.step, r.loss, r.lr);
            }
        },
    )?;
    info!(
        "ran {} steps, {} checkpoints in {}",
        summary.steps_run,
        summary.checkpoints.len(),
        a.out.display()
    );
    Ok(())
}

fn input_images(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    if input.is_dir() {
        let files: Vec<_> = list_pngs(input)?.into_iter().collect();
        if files.is_empty() {
            bail!("no PNG images in {}", input.display());
        }
        Ok(files)
    } else {
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("bad input path {}", input.display()))?;
        Ok(vec![(stem.to_string(), input.to_path_buf())])
    }
}

/// Pads to a multiple of 8, runs the network and crops back.
fn restore(model: &NlednModel, image: &Tensor) -> Result<(Tensor, Tensor)> {
    let (padded, pad) = pad_for_network(image)?;
    let (restored, rain) = model.infer(&padded)?;
    Ok((unpad(&restored, pad)?, unpad(&rain, pad)?))
}

fn infer(a: InferArgs) -> Result<()> {
    if !a.input.exists() {
        return Err(usage(format!("--in {} does not exist", a.input.display())));
    }
    let model = checkpoint::load(&a.ckpt)?.model;
    let images = input_images(&a.input)?;
    fs::create_dir_all(&a.out)?;
    if a.dump_rainmap {
        fs::create_dir_all(a.out.join("rainmap"))?;
    }
    let pool = thread_pool()?;
    pool.install(|| {
        images.par_iter().try_for_each(|(id, path)| -> Result<()> {
            let (restored, rain) = restore(&model, &load_image(path)?)?;
            save_image(&restored, &a.out.join(format!("{id}.png")))?;
            if a.dump_rainmap {
                let shown = rain.map(|r| (r + 1.0) / 2.0);
                save_image(&shown, &a.out.join("rainmap").join(format!("{id}.png")))?;
            }
            Ok(())
        })
    })?;
    info!("restored {} images into {}", images.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (source, model) = match (&a.pred_dir, &a.ckpt, &a.rainy_dir) {
        (Some(pred), None, None) => (pred.clone(), None),
        (None, Some(ckpt), Some(rainy)) => (rainy.clone(), Some(ckpt.clone())),
        _ => return Err(usage("pass either --pred-dir, or --ckpt with --rainy-dir")),
    };
    let model = model
        .map(|p| checkpoint::load(&p))
        .transpose()?
        .map(|c| c.model);
    let pairs = pair_dirs(&source, &a.gt_dir)?;
    if pairs.is_empty() {
        bail!("no PNG images in {}", a.gt_dir.display());
    }
    let pool = thread_pool()?;
    let rows = pool.install(|| {
        pairs
            .par_iter()
            .map(|(id, src, gt)| -> Result<_> {
                let input = load_image(src)?;
                let truth = load_image(gt)?;
                let pred = match &model {
                    Some(m) => restore(m, &input)?.0,
                    None => input,
                };
                Ok(score(id, &pred, &truth)?)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let report = EvalReport { rows };
    if report.infinite_count() > 0 {
        warn!(
            "{} identical image(s) have infinite PSNR and are excluded from the mean",
            report.infinite_count()
        );
    }
    let tsv = report.to_tsv();
    match &a.out {
        Some(path) => fs::write(path, tsv)?,
        None => print!("{tsv}"),
    }
    Ok(())
}

fn describe(a: DescribeArgs) -> Result<()> {
    let config = match &a.ckpt {
        Some(path) => {
            if model_flags_set(&a.model) {
                return Err(usage("model flags cannot be combined with --ckpt"));
            }
            checkpoint::load(path)?.model.config
        }
        None => apply_model_flags(read_config(a.config.as_deref())?.0, &a.model)?,
    };
    let model = NlednModel::<f32>::init(config.clone(), InitScheme::ZeroResidual)?;
    println!("base_channels\t{}", config.base_channels);
    println!("growth_rate\t{}", config.growth_rate);
    println!("dense_layers_per_block\t{}", config.dense_layers_per_block);
    println!("blocks\t{}", config.block_count());
    println!("block_grids\t{:?}", config.block_grids());
    println!("nonlocal\t{}", config.nonlocal_enabled);
    println!("dense_connections\t{}", config.dense_connections_enabled);
    println!("pooling\t{}", config.pooling_enabled);
    println!("affinity\t{}", config.affinity_mode.as_str());
    println!("tensors\t{}", model.params.len());
    println!("parameters\t{}", config.parameter_count());
    if model.parameter_count() != config.parameter_count() {
        bail!(
            "instantiated model has {} parameters, closed form says {}",
            model.parameter_count(),
            config.parameter_count()
        );
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let options = Options { perturb: a.perturb };
    let report = gradcheck::run_suite(a.scale, a.seed, &options)?;
    println!("check\tworst_rel_err\ttolerance\tprobes\tskipped\tstatus");
    for c in &report.checks {
        println!(
            "{}\t{:.3e}\t{:.0e}\t{}\t{}\t{}",
            c.name,
            c.worst_rel_err,
            c.tolerance,
            c.probes,
            c.skipped,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("elapsed_s\t{:.2}", report.seconds);
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        let failed: Vec<_> = report.failures().map(|c| c.name.as_str()).collect();
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(ExitCode::from(2))
    }
}
