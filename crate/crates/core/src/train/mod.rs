//! Pretraining driver: schedules, AdamW, gradient accumulation with
//! per-mini-batch center and EMA updates, checkpoints and JSONL logs.

mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentConfig, AugmentError, ViewSet};
use crate::numcore::{NdArray, NumError, Real, Tape};
use crate::ssl::{ema_update, evaluate_views, CenterState, LossReport, LossWeights, SslError, TemperatureConfig};
use crate::vit3d::{write_checkpoint, Checkpoint, ModelConfig, ModelError, ModelParams};
use crate::volio::Volume;

pub use optim::AdamW;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss at mini-batch {minibatch}: {report:?}")]
    NonFiniteLoss { minibatch: usize, report: Box<LossReport> },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("teacher forward recorded {0} differentiable nodes")]
    TeacherGradient(usize),
    #[error("view producer stopped early")]
    Producer,
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Mini-batches (of one volume) per epoch; defaults to the dataset size.
    pub steps_per_epoch: Option<usize>,
    /// Mini-batches per optimizer step.
    pub accumulation: usize,
    pub lr: Real,
    pub warmup_epochs: usize,
    /// Learning rate at the last optimizer step, as a fraction of `lr`.
    pub final_lr_fraction: Real,
    pub weight_decay: Real,
    pub momentum_start: Real,
    pub momentum_end: Real,
    pub center_momentum: Real,
    pub temperature: TemperatureConfig,
    pub loss: LossWeights,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<Real>,
    pub update_center: bool,
    pub update_teacher: bool,
    /// Bounded queue depth of the background view producer; 0 builds views inline.
    pub prefetch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            steps_per_epoch: None,
            accumulation: 8,
            lr: 5e-4,
            warmup_epochs: 10,
            final_lr_fraction: 0.0,
            weight_decay: 0.04,
            momentum_start: 0.996,
            momentum_end: 1.0,
            center_momentum: 0.9,
            temperature: TemperatureConfig::default(),
            loss: LossWeights::default(),
            grad_clip: None,
            update_center: true,
            update_teacher: true,
            prefetch: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.accumulation == 0 {
            return bad("accumulation must be at least 1".into());
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad(format!("final_lr_fraction {} outside [0, 1]", self.final_lr_fraction));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0 <= self.momentum_start && self.momentum_start <= self.momentum_end && self.momentum_end <= 1.0) {
            return bad(format!("momentum ramp {} -> {} must lie in [0, 1]", self.momentum_start, self.momentum_end));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return bad(format!("center_momentum {} outside [0, 1)", self.center_momentum));
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive".into());
        }
        if !(self.loss.rec >= 0.0) {
            return bad(format!("loss.rec {} must be non-negative", self.loss.rec));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        self.temperature.validate()?;
        Ok(())
    }
}

/// Step counts derived from a config and dataset size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: Real,
    pub final_lr: Real,
    pub minibatches_per_epoch: usize,
    pub total_minibatches: usize,
    /// Optimizer steps, `floor(total_minibatches / accumulation)`.
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub momentum_start: Real,
    pub momentum_end: Real,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, minibatches_per_epoch: usize) -> Self {
        let total_minibatches = cfg.epochs * minibatches_per_epoch;
        Self {
            base_lr: cfg.lr,
            final_lr: cfg.lr * cfg.final_lr_fraction,
            minibatches_per_epoch,
            total_minibatches,
            total_steps: total_minibatches / cfg.accumulation,
            warmup_steps: cfg.warmup_epochs * minibatches_per_epoch / cfg.accumulation,
            momentum_start: cfg.momentum_start,
            momentum_end: cfg.momentum_end,
        }
    }
}

/// Linear warmup from 0, then cosine decay reaching `final_lr` at the last optimizer step.
pub fn lr_at(step: usize, s: &Schedule) -> Real {
    if step < s.warmup_steps {
        return s.base_lr * step as Real / s.warmup_steps as Real;
    }
    let span = s.total_steps.saturating_sub(1).saturating_sub(s.warmup_steps).max(1);
    let t = ((step - s.warmup_steps) as Real / span as Real).min(1.0);
    let ramp = 0.5 * (1.0 - (std::f64::consts::PI as Real * t).cos());
    s.base_lr - (s.base_lr - s.final_lr) * ramp
}

/// Cosine ramp from `momentum_start` to `momentum_end` over all mini-batches.
pub fn momentum_at(minibatch: usize, s: &Schedule) -> Real {
    let span = s.total_minibatches.saturating_sub(1).max(1);
    let t = (minibatch as Real / span as Real).min(1.0);
    let ramp = 0.5 * (1.0 - (std::f64::consts::PI as Real * t).cos());
    s.momentum_start + (s.momentum_end - s.momentum_start) * ramp
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinibatchLog {
    pub epoch: usize,
    pub minibatch: usize,
    /// Optimizer steps completed after this mini-batch.
    pub optimizer_step: usize,
    pub lr: Real,
    pub momentum: Real,
    pub teacher_temperature: Real,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Student gradients for one view set, teacher logits for the centers, and
/// the loss report. Gradients are unscaled.
#[allow(clippy::too_many_arguments)]
pub fn compute_gradients(
    student: &ModelParams,
    teacher: &ModelParams,
    center: &CenterState,
    model: &ModelConfig,
    views: &ViewSet,
    tau_s: Real,
    tau_t: Real,
    weights: &LossWeights,
) -> Result<(Vec<NdArray>, crate::ssl::StepOutputs), TrainError> {
    let mut tape = Tape::new();
    let vars = student.to_tape(&mut tape, true);
    let out = evaluate_views(&mut tape, &vars, teacher, model, views, center, tau_s, tau_t, weights)?;
    if out.teacher_grad_nodes != 0 {
        return Err(TrainError::TeacherGradient(out.teacher_grad_nodes));
    }
    let mut grads = tape.backward(out.loss)?;
    let g = vars
        .values()
        .into_iter()
        .zip(student.values())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| NdArray::zeros(p.shape())))
        .collect();
    Ok((g, out))
}

/// Mutable training state advanced one mini-batch at a time.
pub struct Trainer {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub schedule: Schedule,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub center: CenterState,
    pub optimizer: AdamW,
    names: Vec<String>,
    accum: Vec<NdArray>,
    pending: usize,
    minibatch: usize,
}

impl Trainer {
    /// Student initialised from `cfg.seed`; the teacher starts as a copy.
    pub fn new(model: &ModelConfig, cfg: &TrainConfig, minibatches_per_epoch: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        let student = ModelParams::init(model, cfg.seed)?;
        Self::from_student(model, cfg, minibatches_per_epoch, student)
    }

    pub fn from_student(
        model: &ModelConfig,
        cfg: &TrainConfig,
        minibatches_per_epoch: usize,
        student: ModelParams,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if minibatches_per_epoch == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let accum = student.values().iter().map(|p| NdArray::zeros(p.shape())).collect();
        Ok(Self {
            model: model.clone(),
            cfg: cfg.clone(),
            schedule: Schedule::new(cfg, minibatches_per_epoch),
            teacher: student.clone(),
            center: CenterState::new(model.out_dim, cfg.center_momentum)?,
            optimizer: AdamW::new(student.values(), cfg.weight_decay),
            names: student.names(),
            accum,
            pending: 0,
            minibatch: 0,
            student,
        })
    }

    pub fn minibatches_done(&self) -> usize {
        self.minibatch
    }

    pub fn optimizer_steps(&self) -> usize {
        self.optimizer.step as usize
    }

    /// True when no gradient is waiting for an optimizer step.
    pub fn grads_are_zero(&self) -> bool {
        self.accum.iter().all(|g| g.data().iter().all(|&v| v == 0.0))
    }

    /// Loss, backward, center and EMA updates, then an optimizer step every
    /// `accumulation` mini-batches.
    pub fn step(&mut self, views: &ViewSet) -> Result<MinibatchLog, TrainError> {
        let s = self.schedule;
        let epoch = self.minibatch / s.minibatches_per_epoch;
        let tau_t = self.cfg.temperature.teacher_at(self.minibatch as f64 / s.minibatches_per_epoch as f64);
        let (grads, out) = compute_gradients(
            &self.student,
            &self.teacher,
            &self.center,
            &self.model,
            views,
            self.cfg.temperature.student,
            tau_t,
            &self.cfg.loss,
        )?;
        if !out.report.total.is_finite() {
            return Err(TrainError::NonFiniteLoss { minibatch: self.minibatch, report: Box::new(out.report) });
        }
        let scale = 1.0 / self.cfg.accumulation as Real;
        for (a, g) in self.accum.iter_mut().zip(&grads) {
            for (a, g) in a.data_mut().iter_mut().zip(g.data()) {
                *a += scale * g;
            }
        }
        self.pending += 1;

        if self.cfg.update_center {
            self.center.update(&out.teacher_global, &out.teacher_patch)?;
        }
        let momentum = momentum_at(self.minibatch, &s);
        if self.cfg.update_teacher {
            ema_update(&mut self.teacher, &self.student, momentum)?;
        }

        let lr = lr_at(self.optimizer_steps(), &s);
        if self.pending == self.cfg.accumulation {
            if let Some(max) = self.cfg.grad_clip {
                clip_global_norm(&mut self.accum, max);
            }
            let mut params = self.student.values_mut();
            self.optimizer.update(&self.names, &mut params, &self.accum, lr)?;
            for a in &mut self.accum {
                a.data_mut().fill(0.0);
            }
            self.pending = 0;
        }
        let log = MinibatchLog {
            epoch,
            minibatch: self.minibatch,
            optimizer_step: self.optimizer_steps(),
            lr,
            momentum,
            teacher_temperature: tau_t,
            report: out.report,
        };
        self.minibatch += 1;
        Ok(log)
    }

    /// Student, teacher and both centers.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_models(&self.model, self.optimizer.step, &self.student, &self.teacher);
        let k = self.model.out_dim;
        c.push("center.global", NdArray::from_vec(&[k], self.center.global.clone()).expect("center length is K"));
        c.push("center.patch", NdArray::from_vec(&[k], self.center.patch.clone()).expect("center length is K"));
        c
    }
}

fn clip_global_norm(grads: &mut [NdArray], max: Real) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<Real>().sqrt();
    if norm > max {
        let f = max / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
}

/// Volume index and augmentation seed for every mini-batch, in order.
/// Each epoch visits a fresh permutation, cycling if the epoch is longer
/// than the dataset.
pub fn minibatch_plan(n_volumes: usize, cfg: &TrainConfig) -> Vec<(usize, u64)> {
    let per_epoch = cfg.steps_per_epoch.unwrap_or(n_volumes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut plan = Vec::with_capacity(cfg.epochs * per_epoch);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = Vec::with_capacity(per_epoch);
        while order.len() < per_epoch {
            let mut perm: Vec<usize> = (0..n_volumes).collect();
            perm.shuffle(&mut rng);
            order.extend(perm);
        }
        order.truncate(per_epoch);
        plan.extend(order.into_iter().map(|i| (i, rng.random::<u64>())));
    }
    plan
}

/// Where and how often the loop persists state.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

pub struct TrainOutcome {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub center: CenterState,
    pub logs: Vec<MinibatchLog>,
    pub optimizer_steps: usize,
    /// Epoch with the lowest mean total loss, and that loss.
    pub best_epoch: usize,
    pub best_loss: Real,
    pub final_checkpoint: Checkpoint,
}

/// Full pretraining run over preprocessed volumes.
pub fn train_loop(
    data: &[Volume],
    model: &ModelConfig,
    augment: &AugmentConfig,
    cfg: &TrainConfig,
    output: &TrainOutput,
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    cfg.validate()?;
    augment.validate()?;
    model.validate()?;
    if augment.patch != model.patch {
        return Err(TrainError::Config(format!(
            "augment.patch {} differs from model.patch {}",
            augment.patch, model.patch
        )));
    }
    let plan = minibatch_plan(data.len(), cfg);
    let per_epoch = cfg.steps_per_epoch.unwrap_or(data.len());
    let mut trainer = Trainer::new(model, cfg, per_epoch)?;

    let mut log_file = match &output.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(TRAIN_LOG);
            Some((fs::File::create(&path).map_err(io_err(&path))?, path))
        }
        None => None,
    };

    let mut logs = Vec::with_capacity(plan.len());
    let mut best = (0usize, Real::INFINITY);
    let mut epoch_sum = 0.0;
    let mut run = |views: ViewSet, logs: &mut Vec<MinibatchLog>| -> Result<(), TrainError> {
        let log = trainer.step(&views)?;
        if let Some((f, path)) = &mut log_file {
            let line = serde_json::to_string(&log).expect("log serializes");
            writeln!(f, "{line}").map_err(io_err(path))?;
        }
        epoch_sum += log.report.total;
        let done = trainer.minibatches_done();
        if done % per_epoch == 0 {
            let epoch = done / per_epoch - 1;
            let mean = epoch_sum / per_epoch as Real;
            epoch_sum = 0.0;
            let ck = write_checkpoint(&trainer.checkpoint());
            if let Some(dir) = &output.dir {
                let last = dir.join(LAST_CHECKPOINT);
                fs::write(&last, &ck).map_err(io_err(&last))?;
                if mean < best.1 {
                    let path = dir.join(BEST_CHECKPOINT);
                    fs::write(&path, &ck).map_err(io_err(&path))?;
                }
            }
            if mean < best.1 {
                best = (epoch, mean);
            }
        }
        logs.push(log);
        Ok(())
    };

    if cfg.prefetch == 0 {
        for &(i, seed) in &plan {
            run(make_views(&data[i], augment, seed)?, &mut logs)?;
        }
    } else {
        let shared: Arc<Vec<Volume>> = Arc::new(data.to_vec());
        let aug = augment.clone();
        let jobs = plan.clone();
        let (tx, rx) = sync_channel::<Result<ViewSet, AugmentError>>(cfg.prefetch);
        let producer = std::thread::spawn(move || {
            for (i, seed) in jobs {
                if tx.send(make_views(&shared[i], &aug, seed)).is_err() {
                    break;
                }
            }
        });
        let result = (|| -> Result<(), TrainError> {
            for _ in 0..plan.len() {
                let views = rx.recv().map_err(|_| TrainError::Producer)??;
                run(views, &mut logs)?;
            }
            Ok(())
        })();
        drop(rx);
        producer.join().map_err(|_| TrainError::Producer)?;
        result?;
    }

    if let Some((mut f, path)) = log_file {
        f.flush().map_err(io_err(&path))?;
    }
    let final_checkpoint = trainer.checkpoint();
    Ok(TrainOutcome {
        optimizer_steps: trainer.optimizer_steps(),
        final_checkpoint,
        student: trainer.student,
        teacher: trainer.teacher,
        center: trainer.center,
        logs,
        best_epoch: best.0,
        best_loss: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> Schedule {
        // 101 steps with 10 of warmup: the decay spans steps 10..=100.
        let cfg = TrainConfig { epochs: 101, warmup_epochs: 10, accumulation: 1, ..TrainConfig::default() };
        Schedule::new(&cfg, 1)
    }

    #[test]
    fn learning_rate_landmarks() {
        let s = schedule();
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(10, &s), 5e-4);
        assert!((lr_at(55, &s) - 2.5e-4).abs() < 1e-9);
        assert_eq!(lr_at(100, &s), 0.0);
    }

    #[test]
    fn plan_is_a_permutation_per_epoch() {
        let cfg = TrainConfig { epochs: 3, seed: 4, ..TrainConfig::default() };
        let plan = minibatch_plan(5, &cfg);
        assert_eq!(plan.len(), 15);
        for e in 0..3 {
            let mut idx: Vec<usize> = plan[e * 5..(e + 1) * 5].iter().map(|p| p.0).collect();
            idx.sort();
            assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        }
        assert_eq!(plan, minibatch_plan(5, &cfg));
    }
}
