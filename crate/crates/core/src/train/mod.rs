//! MAE training with Adam, the plateau learning-rate schedule, periodic
//! checkpoints and exact resumption.
//!
//! Every source of randomness is a pure function of `(seed, step)`: the visit
//! order is a per-epoch permutation and the flip draw uses a per-step stream.
//! A run resumed from a checkpoint at step `k` therefore replays the same
//! samples as an uninterrupted run.

mod adam;
mod config_file;
mod schedule;

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{AdamConfig, AdamState};
pub use config_file::ConfigFile;
pub use schedule::{Plateau, PlateauConfig};

use crate::checkpoint;
use crate::data::{prepare, Dataset, ImagePair};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, NlednModel};
use crate::tensor::{Graph, Tensor};

pub use crate::tensor::mae as mae_loss;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_floor: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience: u64,
    pub ema_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Zero disables periodic checkpoints; the first and last are always written.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Prepared samples buffered ahead of the training thread.
    pub queue_capacity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 5e-4,
            lr_floor: 1e-4,
            lr_decay_factor: 0.9,
            plateau_patience: 500,
            ema_decay: 0.99,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1,
            max_steps: 10_000,
            checkpoint_every: 1000,
            seed: 0,
            queue_capacity: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr_init) {
            return fail("need 0 < lr_floor <= lr_init");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return fail("need 0 < lr_decay_factor < 1");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail("need 0 <= ema_decay < 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("need beta1, beta2 in [0, 1)");
        }
        // written so that NaN fails
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("need eps > 0 and weight_decay >= 0");
        }
        if self.batch_size != 1 {
            return fail("batch_size must be 1");
        }
        if self.plateau_patience == 0 || self.queue_capacity == 0 {
            return fail("plateau_patience and queue_capacity must be >= 1");
        }
        Ok(())
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            lr_init: self.lr_init,
            lr_floor: self.lr_floor,
            decay_factor: self.lr_decay_factor,
            patience: self.plateau_patience,
            ema_decay: self.ema_decay,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Applies every recognised key of `file` to the two configs and rejects the rest.
pub fn apply_config_file(
    mut file: ConfigFile,
    model: &mut ModelConfig,
    train: &mut TrainConfig,
) -> Result<()> {
    macro_rules! set {
        ($target:expr, $($field:ident),+) => {
            $(if let Some(v) = file.take(stringify!($field))? {
                $target.$field = v;
            })+
        };
    }
    set!(
        train,
        lr_init,
        lr_floor,
        lr_decay_factor,
        plateau_patience,
        ema_decay,
        weight_decay,
        beta1,
        beta2,
        eps,
        batch_size,
        max_steps,
        checkpoint_every,
        queue_capacity
    );
    // one seed drives both initialisation and data order
    if let Some(v) = file.take::<u64>("seed")? {
        train.seed = v;
        model.seed = v;
    }
    set!(
        model,
        base_channels,
        growth_rate,
        dense_layers_per_block,
        nonlocal_enabled,
        dense_connections_enabled,
        pooling_enabled,
        num_blocks,
        affinity_mode
    );
    if let Some(v) = file.take_list("encoder_grids")? {
        model.encoder_grids = v;
    }
    if let Some(v) = file.take_list("decoder_grids")? {
        model.decoder_grids = v;
    }
    file.finish()
}

/// Optimizer and schedule state carried across steps and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub plateau: Plateau,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(model: &NlednModel, cfg: &TrainConfig) -> Self {
        Self {
            step: 0,
            plateau: Plateau::new(&cfg.plateau()),
            adam: AdamState::new(&model.params),
        }
    }
}

/// Random-access training pairs.
pub trait PairSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<ImagePair>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairSource for Dataset {
    fn len(&self) -> usize {
        Dataset::len(self)
    }

    fn load(&self, index: usize) -> Result<ImagePair> {
        Dataset::load(self, index)
    }
}

impl PairSource for Vec<ImagePair> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn load(&self, index: usize) -> Result<ImagePair> {
        Ok(self[index].clone())
    }
}

/// Index of the pair visited at `step`: epochs walk a seeded permutation.
pub fn sample_index(len: usize, seed: u64, step: u64) -> usize {
    let epoch = step / len as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order[(step % len as u64) as usize]
}

/// The prepared training sample for `step`.
pub fn step_sample(source: &dyn PairSource, seed: u64, step: u64) -> Result<ImagePair> {
    let pair = source.load(sample_index(source.len(), seed, step))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf11b);
    rng.set_stream(step);
    prepare(&pair, true, &mut rng)
}

/// Loss and parameter gradients for one pair.
pub fn loss_and_grads(
    model: &NlednModel,
    rainy: &Tensor,
    clean: &Tensor,
) -> Result<(f64, crate::model::Params<Tensor>)> {
    let mut graph = Graph::new();
    let params = model.bind(&mut graph, true);
    let x = graph.leaf(rainy.clone());
    let y = graph.leaf(clean.clone());
    let out = model.forward(&mut graph, &params, x)?;
    let loss = graph.mae(out.restored, y)?;
    let value = graph.value(loss).item() as f64;
    if !value.is_finite() {
        return Ok((value, params.map(|_, _| Tensor::scalar(0.0))));
    }
    let mut grads = graph.backward(loss)?;
    let grads = params.map(|_, v| grads.take(*v).expect("parameter gradient"));
    Ok((value, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based number of the step just completed.
    pub step: u64,
    pub loss: f64,
    /// Rate used for this step.
    pub lr: f64,
    pub elapsed: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub last_loss: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.tsv";
pub const LATEST: &str = "latest.ckpt";
pub const LAST_GOOD: &str = "last_good.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

struct Output {
    dir: PathBuf,
    log: BufWriter<std::fs::File>,
}

impl Output {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let fresh = std::fs::metadata(&path).map_or(true, |m| m.len() == 0);
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut log = BufWriter::new(file);
        if fresh {
            writeln!(log, "step\tloss\tlr\telapsed_s")?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
        })
    }

    fn checkpoint(&mut self, model: &NlednModel, state: &TrainState) -> Result<PathBuf> {
        self.log.flush()?;
        let path = self.dir.join(checkpoint_name(state.step));
        checkpoint::save(&path, model, Some(state))?;
        checkpoint::save(&self.dir.join(LATEST), model, Some(state))?;
        Ok(path)
    }
}

/// Runs optimizer steps until `state.step == cfg.max_steps`.
///
/// With an output directory, a TSV log is appended and checkpoints are
/// written at the starting step (fresh runs only), every `checkpoint_every`
/// steps and at the end. A non-finite loss stops the run after saving the
/// most recent state that still produced a finite loss.
pub fn train(
    model: &mut NlednModel,
    state: &mut TrainState,
    source: &dyn PairSource,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Config(
            "training needs at least one image pair".into(),
        ));
    }
    let mut out = out_dir.map(Output::open).transpose()?;
    let mut summary = TrainSummary::default();
    if let Some(o) = &mut out {
        if state.step == 0 {
            summary.checkpoints.push(o.checkpoint(model, state)?);
        }
    }
    let (plateau_cfg, adam_cfg) = (cfg.plateau(), cfg.adam());
    let start = Instant::now();
    let first = state.step;
    let (tx, rx) = sync_channel::<Result<ImagePair>>(cfg.queue_capacity);

    std::thread::scope(|scope| -> Result<()> {
        scope.spawn(move || {
            for step in first..cfg.max_steps {
                if tx.send(step_sample(source, cfg.seed, step)).is_err() {
                    break;
                }
            }
        });
        // owning the receiver here drops it on early return, unblocking the producer
        let rx = rx;
        let mut last_good: Option<(NlednModel, TrainState)> = None;
        for sample in rx.iter() {
            let pair = sample?;
            let lr = state.plateau.lr;
            let (loss, grads) = loss_and_grads(model, &pair.rainy, &pair.clean)?;
            if !loss.is_finite() {
                if let (Some(o), Some((m, s))) = (&out, &last_good) {
                    checkpoint::save(&o.dir.join(LAST_GOOD), m, Some(s))?;
                }
                return Err(Error::NonFiniteLoss {
                    step: state.step + 1,
                });
            }
            if out.is_some() {
                last_good = Some((model.clone(), state.clone()));
            }
            state
                .adam
                .update(&mut model.params, &grads, lr, &adam_cfg)?;
            state.plateau.observe(loss, &plateau_cfg);
            state.step += 1;
            summary.steps_run += 1;
            summary.last_loss = Some(loss);
            let record = StepRecord {
                step: state.step,
                loss,
                lr,
                elapsed: start.elapsed().as_secs_f64(),
            };
            on_step(&record);
            if let Some(o) = &mut out {
                writeln!(
                    o.log,
                    "{}\t{:.6}\t{:.6e}\t{:.3}",
                    record.step, record.loss, record.lr, record.elapsed
                )?;
                let periodic =
                    cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every);
                if periodic || state.step == cfg.max_steps {
                    summary.checkpoints.push(o.checkpoint(model, state)?);
                }
            }
        }
        Ok(())
    })?;
    if let Some(o) = &mut out {
        o.log.flush()?;
    }
    Ok(summary)
}
