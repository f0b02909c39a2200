//! Mini-batch training of the joint objective and its single-branch ablations.
//!
//! Batch order is a pure function of `(seed, epoch)`, and optimiser state
//! lives in checkpoints, so a resumed run continues bit-identically.

use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::forge::LoadedSample;
use crate::metrics::{self, EvalThresholds};
use crate::model::{Branch, Model};
use crate::objective::{self, LossWeights, Objective, SegSamples, TrainSample};
use crate::optim::{self, OptimizerConfig, OptimizerState};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    #[default]
    Joint,
    NoSeg,
    NoDet,
}

impl BranchMode {
    pub fn branches(self) -> Vec<Branch> {
        match self {
            BranchMode::Joint => vec![Branch::Detection, Branch::Segmentation],
            BranchMode::NoSeg => vec![Branch::Detection],
            BranchMode::NoDet => vec![Branch::Segmentation],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BranchMode::Joint => "joint",
            BranchMode::NoSeg => "no-seg",
            BranchMode::NoDet => "no-det",
        }
    }
}

impl std::str::FromStr for BranchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(BranchMode::Joint),
            "no-seg" => Ok(BranchMode::NoSeg),
            "no-det" => Ok(BranchMode::NoDet),
            other => Err(Error::Validation(format!(
                "unknown branch mode `{other}` (expected joint, no-seg or no-det)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub branch: BranchMode,
    /// Explicit training seed; when absent it is derived from the run seed.
    pub seed: Option<u64>,
    /// Validation every this many steps; 0 disables.
    pub eval_interval: u64,
    /// Checkpoint every this many steps; 0 disables.
    pub checkpoint_interval: u64,
    pub seg_samples: SegSamples,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            branch: BranchMode::Joint,
            seed: None,
            eval_interval: 0,
            checkpoint_interval: 0,
            seg_samples: SegSamples::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Validation("steps and batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Validation(format!("learning rate {} must be positive", o.learning_rate)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.epsilon <= 0.0 {
            return Err(Error::Validation("optimizer betas must lie in [0, 1) and epsilon be positive".into()));
        }
        self.weights.validate()
    }

    pub fn objective(&self) -> Objective {
        Objective {
            weights: self.weights,
            detection: self.branch != BranchMode::NoDet,
            segmentation: self.branch != BranchMode::NoSeg,
            seg_samples: self.seg_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub l_total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_det: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_seg: Option<f64>,
    pub lr: f64,
    /// Seconds since the trainer was created.
    pub wall_time: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_iou: Option<f64>,
}

/// Index batches for one epoch: a `(seed, epoch)`-keyed shuffle cut into
/// consecutive chunks; the last one may be short.
pub fn make_batches(n: usize, batch_size: usize, seed_val: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive_indexed(seed_val, "epoch", epoch)));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Where the trainer writes its side outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Validation data used for periodic evaluation and best-checkpoint selection.
pub struct Validation<'a> {
    pub samples: &'a [LoadedSample],
    pub thresholds: EvalThresholds,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optimizer: OptimizerState,
    pub step: u64,
    seed: u64,
    active: Vec<Range<usize>>,
    epoch_cache: Option<(u64, Vec<Vec<usize>>)>,
    last_checkpoint: Option<PathBuf>,
    best: Option<(f64, u64)>,
    started: Instant,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, train_seed: u64) -> Result<Self> {
        let optimizer = OptimizerState::new(model.param_count());
        Self::assemble(model, config, train_seed, optimizer, 0)
    }

    /// Continues from `ckpt`. The training seed stored in the checkpoint
    /// takes precedence so the data order is preserved.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = ckpt.model()?;
        Self::assemble(model, config, ckpt.train_seed, ckpt.optimizer, ckpt.step)
    }

    fn assemble(model: Model<f32>, config: TrainConfig, seed_val: u64, optimizer: OptimizerState, step: u64) -> Result<Self> {
        config.validate()?;
        for b in config.branch.branches() {
            if !model.config.has(b) {
                return Err(Error::Validation(format!(
                    "branch mode {} needs the {b:?} branch, which the model lacks",
                    config.branch.as_str()
                )));
            }
        }
        if optimizer.first_moment.len() != model.param_count() {
            return Err(Error::Dimension("optimizer state does not match the model".into()));
        }
        let mut active = vec![model.arch.encoder_params.clone()];
        if config.branch != BranchMode::NoDet {
            active.push(model.arch.head_params.clone());
        }
        if config.branch != BranchMode::NoSeg {
            active.push(model.arch.decoder_params.clone());
        }
        Ok(Self {
            config,
            model,
            optimizer,
            step,
            seed: seed_val,
            active,
            epoch_cache: None,
            last_checkpoint: None,
            best: None,
            started: Instant::now(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, &self.optimizer, self.seed, self.step)
    }

    /// Best validation score seen so far and the step it was reached at.
    pub fn best(&self) -> Option<(f64, u64)> {
        self.best
    }

    fn batch_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        let per_epoch = n.div_ceil(self.config.batch_size) as u64;
        let epoch = self.step / per_epoch;
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.epoch_cache = Some((epoch, make_batches(n, self.config.batch_size, self.seed, epoch)?));
        }
        let (_, batches) = self.epoch_cache.as_ref().unwrap();
        Ok(batches[(self.step % per_epoch) as usize].clone())
    }

    /// One optimisation step on the next batch of `data`.
    pub fn step_once(&mut self, data: &[TrainSample<f32>]) -> Result<TrainLogRecord> {
        if data.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        let idx = self.batch_indices(data.len())?;
        let batch: Vec<TrainSample<f32>> = idx.iter().map(|&i| data[i].clone()).collect();
        let (report, grads) = match objective::loss_and_grad(&self.model, &batch, &self.config.objective()) {
            Ok(r) => r,
            Err(Error::Numerical(_)) => {
                return Err(Error::NonFiniteLoss { step: self.step + 1, last_checkpoint: self.last_checkpoint.clone() })
            }
            Err(e) => return Err(e),
        };
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step: self.step + 1, last_checkpoint: self.last_checkpoint.clone() });
        }
        optim::apply(&self.config.optimizer, &mut self.optimizer, &mut self.model.params, &grads, &self.active);
        self.step += 1;
        Ok(TrainLogRecord {
            step: self.step,
            l_total: report.l_total,
            l_det: report.l_det,
            l_seg: report.l_seg,
            lr: self.config.optimizer.learning_rate,
            wall_time: self.started.elapsed().as_secs_f64(),
            val_acc: None,
            val_iou: None,
        })
    }

    /// Trains until `config.steps`, writing the log and checkpoints if asked.
    /// Returns the records produced by this call.
    pub fn run(
        &mut self,
        data: &[TrainSample<f32>],
        outputs: &TrainOutputs,
        validation: Option<&Validation<'_>>,
    ) -> Result<Vec<TrainLogRecord>> {
        self.run_until(self.config.steps, data, outputs, validation)
    }

    pub fn run_until(
        &mut self,
        until: u64,
        data: &[TrainSample<f32>],
        outputs: &TrainOutputs,
        validation: Option<&Validation<'_>>,
    ) -> Result<Vec<TrainLogRecord>> {
        if data.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        let mut log = match &outputs.log {
            Some(path) => {
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                // a resumed run appends to the existing stream
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(self.step > 0)
                    .write(true)
                    .truncate(self.step == 0)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                Some((path.clone(), BufWriter::new(file)))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.step < until {
            let mut rec = self.step_once(data)?;
            let cfg = &self.config;
            if let Some(v) = validation {
                if cfg.eval_interval > 0 && (self.step % cfg.eval_interval == 0 || self.step == until) {
                    let report = metrics::evaluate(&self.model, v.samples, &v.thresholds)?;
                    rec.val_acc = report.acc_all();
                    rec.val_iou = report.iou_all();
                    let score = rec.val_iou.or(rec.val_acc).unwrap_or(0.0);
                    if self.best.map_or(true, |(b, _)| score > b) {
                        self.best = Some((score, self.step));
                        if let Some(dir) = &outputs.checkpoint_dir {
                            self.checkpoint().save(&dir.join("best.ckpt"))?;
                        }
                    }
                }
            }
            if let Some(dir) = &outputs.checkpoint_dir {
                if cfg.checkpoint_interval > 0 && self.step % cfg.checkpoint_interval == 0 {
                    let path = checkpoint_path(dir, self.step);
                    self.checkpoint().save(&path)?;
                    self.last_checkpoint = Some(path);
                }
            }
            if let Some((path, w)) = &mut log {
                writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&*path, e))?;
            }
            records.push(rec);
        }
        if let Some((path, mut w)) = log {
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(records)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

/// Reads a training log, one record per line.
pub fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Log text with every `wall_time` field zeroed, for run-to-run comparison.
pub fn log_without_wall_time(path: &Path) -> Result<String> {
    let mut out = String::new();
    for mut r in read_log(path)? {
        r.wall_time = 0.0;
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    Ok(out)
}
