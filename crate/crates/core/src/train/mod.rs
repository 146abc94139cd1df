//! Alternating D/G optimization, the learning-rate schedule, the epoch
//! loop with validation and checkpoints, and baseline construction.

pub mod adam;
pub mod checkpoint;
pub mod step;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use vaeinfo_tensor::Array;

pub use adam::{Adam, AdamConfig};
pub use step::{train_step, uses_discriminator};

use crate::error::{Error, Result};
use crate::eval::{evaluate_model, ApndResult};
use crate::losses::{LossReport, LossWeights};
use crate::model::{stack, Model, ModelConfig, ModelKind};
use crate::raster::{lognorm_forward, RasterImage, RasterMode};
use crate::rng::substream;
use crate::sim::{Dataset, Example, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lr0: f64,
    pub decay_rate: f64,
    /// Staircase steps per epoch.
    pub decay_segments_per_epoch: usize,
    pub lambda: LossWeights,
    pub seed: u64,
    pub task: RasterMode,
    pub model_kind: ModelKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            lr0: 1e-3,
            decay_rate: 0.95,
            decay_segments_per_epoch: 5,
            lambda: LossWeights::default(),
            seed: 0,
            task: RasterMode::Crm,
            model_kind: ModelKind::VaeInfoCgan,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be ≥ 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Domain(format!("lr0 = {} must be > 0", self.lr0)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Domain(format!("decay_rate = {} must lie in (0, 1]", self.decay_rate)));
        }
        if self.decay_segments_per_epoch == 0 {
            return Err(Error::Domain("decay_segments_per_epoch must be ≥ 1".into()));
        }
        self.lambda.validate()
    }
}

/// Everything needed to continue training bitwise: noise and shuffling
/// streams are keyed by `step` and `epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    /// Updates applied so far.
    pub step: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub model: Model,
    pub adam_d: Adam,
    pub adam_g: Adam,
}

impl TrainingState {
    pub fn new(model: Model) -> Self {
        Self { step: 0, epoch: 0, model, adam_d: Adam::default(), adam_g: Adam::default() }
    }
}

/// `lr0 · decay_rate^⌊step / (steps_per_epoch / segments)⌋`.
pub fn lr_at_step(step: u64, steps_per_epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if steps_per_epoch < cfg.decay_segments_per_epoch {
        return Err(Error::Domain(format!(
            "{steps_per_epoch} steps per epoch cannot hold {} decay segments",
            cfg.decay_segments_per_epoch
        )));
    }
    let segment = steps_per_epoch as f64 / cfg.decay_segments_per_epoch as f64;
    let k = (step as f64 / segment).floor();
    Ok(cfg.lr0 * cfg.decay_rate.powf(k))
}

/// Fresh model of a baseline kind; the main model is rejected.
pub fn build_baseline(kind: ModelKind, cfg: ModelConfig, seed: u64) -> Result<Model> {
    if kind == ModelKind::VaeInfoCgan {
        return Err(Error::Domain(format!("{kind} is not a baseline")));
    }
    Model::new(cfg, kind, seed)
}

/// Model shapes for a dataset and task.
pub fn model_config_for(dataset: &Dataset, task: RasterMode, width_scale: f64) -> ModelConfig {
    ModelConfig::for_image(dataset.config.size, task.channels(), width_scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step { step: u64, epoch: usize, lr: f64, losses: LossReport, wall_time: f64 },
    Epoch { epoch: usize, step: u64, val_apnd: ApndResult, checkpoint: Option<PathBuf>, wall_time: f64 },
}

/// Lognorm targets `[N, c, S, S]` and roads `[N, 1, S, S]` of `examples`.
pub fn batch_arrays(examples: &[&Example], task: RasterMode) -> Result<(Array, Array)> {
    let xs: Vec<RasterImage> = examples.iter().map(|e| lognorm_forward(e.target(task))).collect::<Result<_>>()?;
    let xr: Vec<&RasterImage> = xs.iter().collect();
    let yr: Vec<&RasterImage> = examples.iter().map(|e| &e.road).collect();
    Ok((stack(&xr), stack(&yr)))
}

/// Where the epoch loop writes; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct OutputDir(pub Option<PathBuf>);

impl OutputDir {
    pub fn checkpoint(&self, epoch: usize) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join("checkpoints").join(format!("epoch-{epoch:04}.ckpt")))
    }

    pub fn best(&self) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join("best.ckpt"))
    }
}

/// The epoch with the lowest validation APND so far (earliest on ties).
#[derive(Clone, Debug)]
pub struct BestEpoch {
    pub epoch: usize,
    pub val_apnd: f64,
    pub model: Model,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainingState,
    pub log: Vec<LogRecord>,
    pub best: Option<BestEpoch>,
}

/// Recovers the best epoch up to `epoch` from an earlier run's log and checkpoints.
fn previous_best(out: &OutputDir, epoch: usize) -> Result<Option<BestEpoch>> {
    let Some(dir) = &out.0 else { return Ok(None) };
    let path = dir.join("train_log.jsonl");
    let Ok(text) = fs::read_to_string(&path) else { return Ok(None) };
    let mut scores = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let LogRecord::Epoch { epoch: e, val_apnd, .. } = serde_json::from_str(line)? {
            if e <= epoch {
                scores.insert(e, val_apnd.mean_percent);
            }
        }
    }
    let best = scores.into_iter().fold(None, |b: Option<(usize, f64)>, (e, v)| match b {
        Some((_, bv)) if bv <= v => b,
        _ => Some((e, v)),
    });
    match best.and_then(|(e, v)| out.checkpoint(e).map(|p| (e, v, p))) {
        Some((epoch, val_apnd, p)) if p.exists() => Ok(Some(BestEpoch { epoch, val_apnd, model: checkpoint::load_model(p)? })),
        _ => Ok(None),
    }
}

/// Runs epochs `state.epoch..cfg.epochs`. Each epoch shuffles the training
/// split with a stream keyed by the epoch, drops the incomplete tail
/// batch, scores validation APND, and writes a checkpoint and JSONL log
/// lines under `out`. The model of the best validation epoch is kept and
/// written to `best.ckpt`.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, mut state: TrainingState, out: &OutputDir) -> Result<TrainOutcome> {
    cfg.validate()?;
    if state.model.kind != cfg.model_kind {
        return Err(Error::Contract(format!("state holds {} but config trains {}", state.model.kind, cfg.model_kind)));
    }
    let train_set = dataset.split(Split::Train);
    let val_set = dataset.split(Split::Val);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Domain("dataset needs non-empty train and val splits".into()));
    }
    let steps_per_epoch = train_set.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Domain(format!("batch size {} exceeds the {} training examples", cfg.batch_size, train_set.len())));
    }
    lr_at_step(0, steps_per_epoch, cfg)?;
    if state.step != (state.epoch * steps_per_epoch) as u64 {
        return Err(Error::Contract(format!("state at step {} is not an epoch boundary", state.step)));
    }

    let mut log_file = match &out.0 {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            let f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut emit = |rec: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        if let Some((f, path)) = &mut log_file {
            let mut line = serde_json::to_vec(&rec)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(&*path, e))?;
        }
        log.push(rec);
        Ok(())
    };

    let started = Instant::now();
    let mut last_good = if state.epoch > 0 { out.checkpoint(state.epoch) } else { None };
    let mut best = if state.epoch > 0 { previous_best(out, state.epoch)? } else { None };
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order = train_set.clone();
        order.shuffle(&mut substream(cfg.seed, &format!("shuffle/{epoch}")));
        for batch in order.chunks_exact(cfg.batch_size) {
            let lr = lr_at_step(state.step, steps_per_epoch, cfg)?;
            let (x, y) = batch_arrays(batch, cfg.task)?;
            let step = state.step;
            let losses = train_step(&mut state, cfg, lr, &x, &y).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(match &last_good {
                    Some(p) => format!("{msg}; last good checkpoint: {}", p.display()),
                    None => format!("{msg}; no checkpoint written yet"),
                }),
                other => other,
            })?;
            emit(LogRecord::Step { step, epoch, lr, losses, wall_time: started.elapsed().as_secs_f64() }, &mut log)?;
        }
        state.epoch += 1;
        let (val_apnd, _) = evaluate_model(&state.model, cfg.task, &val_set, &val_set, cfg.seed)?;
        let ckpt = out.checkpoint(state.epoch);
        if let Some(p) = &ckpt {
            checkpoint::save_state(&state, cfg, p)?;
            last_good = Some(p.clone());
        }
        if best.as_ref().is_none_or(|b| val_apnd.mean_percent < b.val_apnd) {
            if let Some(p) = out.best() {
                checkpoint::save_model(&state.model, p)?;
            }
            best = Some(BestEpoch { epoch: state.epoch, val_apnd: val_apnd.mean_percent, model: state.model.clone() });
        }
        let wall_time = started.elapsed().as_secs_f64();
        emit(LogRecord::Epoch { epoch: state.epoch, step: state.step, val_apnd, checkpoint: ckpt, wall_time }, &mut log)?;
    }
    if let Some(dir) = &out.0 {
        checkpoint::save_state(&state, cfg, dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome { state, log, best })
}

/// Starts a run from a fresh model.
pub fn train_new(cfg: &TrainConfig, model_cfg: ModelConfig, dataset: &Dataset, out: &OutputDir) -> Result<TrainOutcome> {
    let model = Model::new(model_cfg, cfg.model_kind, cfg.seed)?;
    train(cfg, dataset, TrainingState::new(model), out)
}

/// Continues from a checkpoint written by [`train`].
pub fn resume(path: &Path, dataset: &Dataset, epochs: Option<usize>, out: &OutputDir) -> Result<TrainOutcome> {
    let (state, mut cfg) = checkpoint::load_state(path)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    train(&cfg, dataset, state, out)
}

/// Validation APND per completed epoch, in order.
pub fn val_curve(log: &[LogRecord]) -> Vec<f64> {
    log.iter()
        .filter_map(|r| match r {
            LogRecord::Epoch { val_apnd, .. } => Some(val_apnd.mean_percent),
            _ => None,
        })
        .collect()
}

/// Loss reports of every step, in order.
pub fn loss_trajectory(log: &[LogRecord]) -> Vec<LossReport> {
    log.iter()
        .filter_map(|r| match r {
            LogRecord::Step { losses, .. } => Some(*losses),
            _ => None,
        })
        .collect()
}
