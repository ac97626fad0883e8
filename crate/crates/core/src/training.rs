//! Optimization: Adamax, learning-rate schedules, parameter EMA, the fit and
//! finetune loops, checkpoints and the metrics stream.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{dataset_bound, ssl_error_rate, BoundSummary};
use crate::hierarchy::Model;
use crate::nn::ParamMeta;
use crate::objectives::{
    bound_eval, energy_2d_eval, ssl_labeled_eval, ssl_unlabeled_eval, EnergyPrior, EvalSettings, Evaluation, ObjectiveConfig,
    ObjectiveReport,
};
use crate::potentials::PotentialId;
use crate::rng::{Noise, RandomSource, RngState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"BIVACKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMethod {
    #[default]
    Adamax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// Always `learning_rate`.
    #[default]
    Constant,
    /// Linear ramp from `start` to `peak` over `warmup_steps`, then
    /// geometric decay to `end` over `decay_steps`; `end` afterwards.
    WarmupThenExponential { start: f64, peak: f64, end: f64, warmup_steps: u64, decay_steps: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub method: OptimizerMethod,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: Schedule,
    /// Global gradient norm ceiling.
    pub grad_clip: f64,
    pub ema_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: OptimizerMethod::Adamax,
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule: Schedule::Constant,
            grad_clip: 100.0,
            ema_decay: 0.9995,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit_open = |v: f64| v > 0.0 && v < 1.0;
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("optimizer.learning_rate", "must be finite and >= 0"));
        }
        if !unit_open(self.beta1) {
            return Err(Error::config("optimizer.beta1", "must lie in (0, 1)"));
        }
        if !unit_open(self.beta2) {
            return Err(Error::config("optimizer.beta2", "must lie in (0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("optimizer.epsilon", "must be > 0"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("optimizer.grad_clip", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("optimizer.ema_decay", "must lie in [0, 1]"));
        }
        if let Schedule::WarmupThenExponential { start, peak, end, .. } = self.schedule {
            if !(start > 0.0 && peak > 0.0 && end > 0.0) {
                return Err(Error::config("optimizer.schedule", "rates must be > 0"));
            }
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::WarmupThenExponential { start, peak, end, warmup_steps, decay_steps } => {
                if step < warmup_steps {
                    start + (peak - start) * step as f64 / warmup_steps as f64
                } else if decay_steps == 0 {
                    end
                } else {
                    let f = ((step - warmup_steps) as f64 / decay_steps as f64).min(1.0);
                    peak * (end / peak).powf(f)
                }
            }
        }
    }
}

/// Adamax moments.
#[derive(Clone, Debug)]
pub struct Adamax<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub u: Vec<Tensor<T>>,
}

impl<T: Scalar> Adamax<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { t: 0, m: zeros(), u: zeros() }
    }

    /// One descent step on `params` along `grads`.
    pub fn update(&mut self, cfg: &OptimizerConfig, lr: f64, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        self.t += 1;
        let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
        let step = T::c(lr / (1.0 - cfg.beta1.powi(self.t.min(i32::MAX as u64) as i32)));
        let eps = T::c(cfg.epsilon);
        for (((p, g), m), u) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.u) {
            let (p, g, m, u) = (p.data_mut(), g.data(), m.data_mut(), u.data_mut());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                u[i] = (b2 * u[i]).max(g[i].abs());
                p[i] -= step * m[i] / (u[i] + eps);
            }
        }
    }
}

/// Shadow copy of the parameters for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T> {
    pub decay: f64,
    pub shadow: Vec<Tensor<T>>,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(decay: f64, params: &[Tensor<T>]) -> Self {
        Self { decay, shadow: params.to_vec() }
    }

    /// `shadow ← d·shadow + (1−d)·params` with `d = decay`.
    pub fn update(&mut self, params: &[Tensor<T>]) -> Result<()> {
        self.update_with(self.decay, params)
    }

    pub fn update_with(&mut self, decay: f64, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::Shape(format!("{} parameters for {} shadows", params.len(), self.shadow.len())));
        }
        if let Some((s, p)) = self.shadow.iter().zip(params).find(|(s, p)| s.shape() != p.shape()) {
            return Err(Error::Shape(format!("shadow {:?} vs parameter {:?}", s.shape(), p.shape())));
        }
        let (d, e) = (T::c(decay), T::c(1.0 - decay));
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + e * b;
            }
        }
        Ok(())
    }

    /// A copy of `model` carrying the shadow values.
    pub fn apply_to(&self, model: &Model<T>) -> Result<Model<T>> {
        let mut m = model.clone();
        let metas = m.params().metas().to_vec();
        m.params_mut().load_values(&metas, self.shadow.clone()).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(m)
    }
}

/// Functional form of [`EmaState::update`].
pub fn ema_update<T: Scalar>(mut state: EmaState<T>, params: &[Tensor<T>]) -> Result<EmaState<T>> {
    state.update(params)?;
    Ok(state)
}

/// Decay actually used at update `t`: small early on so the shadow tracks
/// the fast-moving parameters of a fresh run, `decay` in the long run.
pub fn warm_ema_decay(decay: f64, t: u64) -> f64 {
    decay.min((1.0 + t as f64) / (10.0 + t as f64))
}

/// What a training run maximizes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainObjective {
    /// Free-bits ELBO.
    #[default]
    Elbo,
    /// 2D density matching with `exp(-β U)` as top prior; β ramps linearly
    /// from `beta_start` to 1 over `anneal_steps`.
    Energy2d { potential: PotentialId, beta_start: f64, anneal_steps: u64 },
    /// Labeled plus unlabeled objectives; each step also draws a labeled
    /// batch of `labeled_batch` examples.
    SemiSupervised { labeled_batch: usize },
}

impl TrainObjective {
    pub fn beta_at(&self, step: u64) -> Option<f64> {
        match *self {
            Self::Energy2d { beta_start, anneal_steps, .. } => {
                let f = if anneal_steps == 0 { 1.0 } else { (step as f64 / anneal_steps as f64).min(1.0) };
                Some(beta_start + (1.0 - beta_start) * f)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub rng: RngState,
    /// Best validation bound seen so far (higher is better).
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub learning_rate: f64,
    pub objective: f64,
    pub bound: f64,
    pub per_layer_kl: Vec<f64>,
    pub grad_norm: f64,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub split: String,
    pub step: u64,
    pub epoch: usize,
    pub objective: f64,
    pub bound: f64,
    pub per_layer_kl: Vec<f64>,
    pub bits_per_dim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_rate: Option<f64>,
    pub wallclock: f64,
}

/// Per-layer state at the moment a non-finite value appeared.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Diagnostics {
    pub step: u64,
    pub objective: f64,
    pub reconstruction: f64,
    pub per_layer_kl: Vec<f64>,
    pub nonfinite_gradients: Vec<String>,
    pub parameter_norms: Vec<(String, f64)>,
    /// Set when the failure happened inside the forward pass; the per-layer
    /// figures then come from the last successful step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward_error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct FitPlan {
    pub epochs: usize,
    pub batch_size: usize,
    /// Truncates each epoch; required in effect for streamed data.
    pub steps_per_epoch: Option<usize>,
    pub eval_batch: usize,
    /// Evaluate on at most this many validation examples.
    pub eval_limit: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// Echoed into every checkpoint header.
    pub experiment: serde_json::Value,
}

impl Default for FitPlan {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 48,
            steps_per_epoch: None,
            eval_batch: 100,
            eval_limit: None,
            checkpoint_dir: None,
            metrics_path: None,
            experiment: serde_json::Value::Null,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FitData<'a> {
    pub train: &'a Dataset,
    pub valid: Option<&'a Dataset>,
    pub labeled: Option<&'a Dataset>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub initial_bound: f64,
    pub best_bound: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

/// Owns everything a run needs to continue: model, optimizer, EMA, RNG.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub ema: EmaState<T>,
    pub adamax: Adamax<T>,
    pub optimizer: OptimizerConfig,
    pub objective: ObjectiveConfig,
    pub task: TrainObjective,
    pub state: TrainState,
    /// Resolved classification weight for semi-supervised runs.
    pub ssl_alpha: f64,
    rng: RandomSource,
    last_kl: Vec<f64>,
}

fn bound_settings(cfg: &ObjectiveConfig, train: bool) -> EvalSettings {
    EvalSettings { repeats: 1, ..EvalSettings::from_config(cfg, train) }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, optimizer: OptimizerConfig, objective: ObjectiveConfig, task: TrainObjective, seed: u64) -> Result<Self> {
        optimizer.validate()?;
        objective.validate(model.config().num_layers)?;
        if let TrainObjective::Energy2d { beta_start, .. } = task {
            if !(0.1..=1.0).contains(&beta_start) {
                return Err(Error::config("objective.beta_start", "must lie in [0.1, 1]"));
            }
        }
        if matches!(task, TrainObjective::SemiSupervised { .. }) && !model.has_classifier() {
            return Err(Error::config("model.num_classes", "semi-supervised training needs a classifier"));
        }
        let rng = RandomSource::new(seed);
        let values = model.params().values();
        Ok(Self {
            ema: EmaState::new(optimizer.ema_decay, values),
            adamax: Adamax::new(values),
            state: TrainState { step: 0, epoch: 0, rng: rng.state(), best_metric: None, best_epoch: None },
            ssl_alpha: objective.ssl_alpha.unwrap_or(0.0),
            model,
            optimizer,
            objective,
            task,
            rng,
            last_kl: Vec::new(),
        })
    }

    pub fn rng(&mut self) -> &mut RandomSource {
        &mut self.rng
    }

    /// The model with EMA parameters; the training parameters are untouched.
    pub fn eval_model(&self) -> Result<Model<T>> {
        self.ema.apply_to(&self.model)
    }

    fn graph_objective(&mut self, g: &mut Graph<T>, batch: &Batch<T>, labeled: Option<&Batch<T>>) -> Result<(Var, Evaluation)> {
        let settings = bound_settings(&self.objective, true);
        let rows = batch.x.shape()[0];
        match self.task.clone() {
            TrainObjective::Elbo => {
                let mut noise = Noise::single(&mut self.rng, rows);
                let ev = bound_eval(g, &self.model, &batch.x, batch.labels.as_deref().filter(|_| self.model.has_classifier()), &mut noise, &settings)?;
                Ok((ev.objective, ev))
            }
            TrainObjective::Energy2d { potential, .. } => {
                let beta = self.task.beta_at(self.state.step).expect("energy task");
                let mut noise = Noise::single(&mut self.rng, rows);
                let ev = energy_2d_eval(g, &self.model, &batch.x, &mut noise, potential, beta, &settings)?;
                Ok((ev.objective, ev))
            }
            TrainObjective::SemiSupervised { .. } => {
                let lb = labeled.ok_or_else(|| Error::InvalidValue("semi-supervised step needs a labeled batch".into()))?;
                let labels = lb.labels.as_deref().ok_or_else(|| Error::InvalidValue("labeled batch carries no labels".into()))?;
                let lab = {
                    let mut noise = Noise::single(&mut self.rng, lb.x.shape()[0]);
                    ssl_labeled_eval(g, &self.model, &lb.x, labels, &mut noise, self.ssl_alpha, &settings)?.0
                };
                let unl = {
                    let mut noise = Noise::single(&mut self.rng, rows);
                    ssl_unlabeled_eval(g, &self.model, &batch.x, &mut noise, &settings)?.0
                };
                let obj = g.add(lab.objective, unl.objective);
                Ok((obj, unl))
            }
        }
    }

    fn diagnostics(&self, r: Option<ObjectiveReport>, objective: f64, bad: Vec<String>, forward_error: Option<String>) -> Diagnostics {
        let (reconstruction, per_layer_kl) = match r {
            Some(r) => (r.reconstruction, r.analytic_kl),
            None => (f64::NAN, self.last_kl.clone()),
        };
        Diagnostics {
            step: self.state.step,
            objective,
            reconstruction,
            per_layer_kl,
            nonfinite_gradients: bad,
            parameter_norms: self
                .model
                .params()
                .metas()
                .iter()
                .zip(self.model.params().values())
                .map(|(m, v)| (m.name.clone(), v.sq_norm().f64().sqrt()))
                .collect(),
            forward_error,
        }
    }

    /// One gradient step. Initializes the model from this batch first if
    /// it has not been initialized.
    pub fn step(&mut self, batch: &Batch<T>, labeled: Option<&Batch<T>>) -> Result<StepReport> {
        if !self.model.is_initialized() {
            let init = labeled.unwrap_or(batch);
            self.model.initialize(&init.x, init.labels.as_deref(), &mut self.rng)?;
            self.ema = EmaState::new(self.optimizer.ema_decay, self.model.params().values());
        }
        let lr = self.optimizer.learning_rate_at(self.state.step);
        let mut g = Graph::new();
        let (objective, ev) = match self.graph_objective(&mut g, batch, labeled) {
            Ok(v) => v,
            Err(Error::Numerical(msg)) => {
                let d = self.diagnostics(None, f64::NAN, Vec::new(), Some(msg));
                return Err(Error::Numerical(format!("non-finite objective: {}", serde_json::to_string(&d)?)));
            }
            Err(e) => return Err(e),
        };
        let value = g.scalar_value(objective).f64();
        if !value.is_finite() {
            let d = self.diagnostics(Some(ev.report(&g)), value, Vec::new(), None);
            return Err(Error::Numerical(format!("non-finite objective: {}", serde_json::to_string(&d)?)));
        }
        let loss = g.neg(objective);
        let mut grad_map = g.backward(loss).into_params();
        let params = self.model.params();
        let mut grads: Vec<Tensor<T>> =
            (0..params.len()).map(|i| grad_map.remove(&i).unwrap_or_else(|| Tensor::zeros(params.get(i).shape()))).collect();
        let bad: Vec<String> =
            grads.iter().enumerate().filter(|(_, t)| !t.all_finite()).map(|(i, _)| params.meta(i).name.clone()).collect();
        if !bad.is_empty() {
            let d = self.diagnostics(Some(ev.report(&g)), value, bad, None);
            return Err(Error::Numerical(format!("non-finite gradient: {}", serde_json::to_string(&d)?)));
        }
        let norm = grads.iter().map(|t| t.sq_norm().f64()).sum::<f64>().sqrt();
        if norm > self.optimizer.grad_clip {
            let s = T::c(self.optimizer.grad_clip / norm);
            for t in &mut grads {
                for v in t.data_mut() {
                    *v *= s;
                }
            }
        }
        let report = ev.report(&g);
        self.adamax.update(&self.optimizer, lr, self.model.params_mut().values_mut(), &grads);
        let decay = warm_ema_decay(self.ema.decay, self.adamax.t);
        self.ema.update_with(decay, self.model.params().values())?;
        self.state.step += 1;
        self.state.rng = self.rng.state();
        self.last_kl = report.analytic_kl.clone();
        Ok(StepReport {
            step: self.state.step,
            learning_rate: lr,
            objective: value,
            bound: report.bound,
            per_layer_kl: report.analytic_kl,
            grad_norm: norm,
        })
    }

    fn labeled_batch(&mut self, data: &FitData<'_>) -> Result<Option<Batch<T>>> {
        let TrainObjective::SemiSupervised { labeled_batch } = self.task else { return Ok(None) };
        let set = data.labeled.ok_or_else(|| Error::config("dataset.labeled", "semi-supervised training needs labeled data"))?;
        let idx: Vec<usize> = (0..labeled_batch).map(|_| self.rng.below(set.len())).collect();
        Ok(Some(set.batch(&idx, &mut self.rng)?))
    }

    /// Trains one epoch; returns the mean training objective.
    pub fn train_epoch(&mut self, data: &FitData<'_>, plan: &FitPlan) -> Result<f64> {
        let mut blocks = data.train.epoch_order(plan.batch_size, Some(&mut self.rng))?;
        if let Some(s) = plan.steps_per_epoch {
            blocks.truncate(s);
        }
        let mut total = 0.0;
        for idx in &blocks {
            let batch = data.train.batch(idx, &mut self.rng)?;
            let labeled = self.labeled_batch(data)?;
            total += self.step(&batch, labeled.as_ref())?.objective;
        }
        self.state.epoch += 1;
        self.state.rng = self.rng.state();
        Ok(total / blocks.len().max(1) as f64)
    }

    /// Validation bound with EMA parameters, drawn from a fixed stream of its
    /// own so the training stream is not disturbed.
    pub fn validate(&self, set: &Dataset, plan: &FitPlan) -> Result<(BoundSummary, Option<f64>)> {
        let model = self.eval_model()?;
        let mut rng = RandomSource::new(self.rng.seed() ^ 0x5eed_0000);
        let set = match plan.eval_limit {
            Some(n) => set.take(n)?,
            None => set.clone(),
        };
        let settings = EvalSettings {
            energy: match self.task {
                TrainObjective::Energy2d { potential, .. } => Some(EnergyPrior { potential, beta: 1.0 }),
                _ => None,
            },
            ..bound_settings(&self.objective, false)
        };
        let summary = dataset_bound(&model, &set, plan.eval_batch, &mut rng, &settings)?;
        let err = if model.has_classifier() && set.labels().is_some() {
            Some(ssl_error_rate(&model, &set, plan.eval_batch, &mut rng)?)
        } else {
            None
        };
        Ok((summary, err))
    }

    /// Trains until `plan.epochs` epochs have run in total, evaluating and
    /// checkpointing after each.
    pub fn fit(&mut self, data: &FitData<'_>, plan: &FitPlan) -> Result<TrainState> {
        let start = Instant::now();
        let mut sink = MetricsSink::open(plan.metrics_path.as_deref())?;
        while self.state.epoch < plan.epochs {
            let objective = self.train_epoch(data, plan)?;
            let eval_set = data.valid.unwrap_or(data.train);
            let (summary, error_rate) = self.validate(eval_set, plan)?;
            let improved = self.state.best_metric.is_none_or(|b| summary.bound > b);
            if improved {
                self.state.best_metric = Some(summary.bound);
                self.state.best_epoch = Some(self.state.epoch);
            }
            sink.write(&MetricsRecord {
                split: "valid".into(),
                step: self.state.step,
                epoch: self.state.epoch,
                objective,
                bound: summary.bound,
                per_layer_kl: summary.per_layer_kl.clone(),
                bits_per_dim: summary.bits_per_dim,
                error_rate,
                wallclock: start.elapsed().as_secs_f64(),
            })?;
            if let Some(dir) = &plan.checkpoint_dir {
                fs::create_dir_all(dir)?;
                self.save(&dir.join("last.ckpt"), &plan.experiment)?;
                if improved {
                    self.save(&dir.join("best.ckpt"), &plan.experiment)?;
                }
            }
        }
        Ok(self.state.clone())
    }

    /// Continues with free bits switched off until the validation bound has
    /// not improved for `patience` epochs (or `max_epochs` ran), then
    /// restores the best parameters.
    pub fn finetune(&mut self, data: &FitData<'_>, plan: &FitPlan, patience: usize, max_epochs: usize) -> Result<FinetuneReport> {
        if patience == 0 {
            return Err(Error::config("finetune.patience", "must be at least 1"));
        }
        self.objective.free_bits = 0.0;
        let valid = data.valid.unwrap_or(data.train);
        let mut sink = MetricsSink::open(plan.metrics_path.as_deref())?;
        let start = Instant::now();
        let initial = self.validate(valid, plan)?.0.bound;
        let mut best = (initial, self.state.epoch, self.model.clone(), self.ema.clone(), self.adamax.clone());
        let mut stale = 0;
        let mut run = 0;
        while run < max_epochs && stale < patience {
            let objective = self.train_epoch(data, plan)?;
            run += 1;
            let (summary, error_rate) = self.validate(valid, plan)?;
            sink.write(&MetricsRecord {
                split: "finetune".into(),
                step: self.state.step,
                epoch: self.state.epoch,
                objective,
                bound: summary.bound,
                per_layer_kl: summary.per_layer_kl.clone(),
                bits_per_dim: summary.bits_per_dim,
                error_rate,
                wallclock: start.elapsed().as_secs_f64(),
            })?;
            if summary.bound > best.0 {
                best = (summary.bound, self.state.epoch, self.model.clone(), self.ema.clone(), self.adamax.clone());
                stale = 0;
            } else {
                stale += 1;
            }
        }
        let (best_bound, best_epoch, model, ema, adamax) = best;
        self.model = model;
        self.ema = ema;
        self.adamax = adamax;
        self.state.best_metric = Some(best_bound);
        self.state.best_epoch = Some(best_epoch);
        if let Some(dir) = &plan.checkpoint_dir {
            fs::create_dir_all(dir)?;
            self.save(&dir.join("finetuned.ckpt"), &plan.experiment)?;
        }
        Ok(FinetuneReport { initial_bound: initial, best_bound, epochs_run: run, best_epoch })
    }

    /// Writes a checkpoint: magic, version, JSON header, then little-endian
    /// parameter, shadow and moment blobs.
    pub fn save(&self, path: &Path, experiment: &serde_json::Value) -> Result<()> {
        let mut payload = Vec::new();
        for section in [self.model.params().values(), &self.ema.shadow[..], &self.adamax.m[..], &self.adamax.u[..]] {
            for t in section {
                payload.extend(T::to_le_bytes_vec(t.data()));
            }
        }
        let header = CheckpointHeader {
            dtype: T::DTYPE.into(),
            model: self.model.config().clone(),
            initialized: self.model.is_initialized(),
            params: self.model.params().metas().to_vec(),
            sections: vec!["params".into(), "ema".into(), "adamax_m".into(), "adamax_u".into()],
            payload_sha256: hex(&Sha256::digest(&payload)),
            optimizer: self.optimizer.clone(),
            objective: self.objective.clone(),
            task: self.task.clone(),
            ssl_alpha: self.ssl_alpha,
            adamax_t: self.adamax.t,
            ema_decay: self.ema.decay,
            train: self.state.clone(),
            experiment: experiment.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u64).to_le_bytes())?;
            w.write_all(&header)?;
            w.write_all(&payload)?;
            w.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save`]; returns it with the
    /// stored experiment echo.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (header, payload) = read_checkpoint(path)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("checkpoint holds {} values, expected {}", header.dtype, T::DTYPE)));
        }
        let mut model = Model::<T>::new(header.model.clone(), &mut RandomSource::new(0))?;
        let size = std::mem::size_of::<T>();
        let per_section: usize = header.params.iter().map(|m| m.shape.iter().product::<usize>()).sum();
        if payload.len() != 4 * per_section * size {
            return Err(Error::Checkpoint(format!("payload has {} bytes, expected {}", payload.len(), 4 * per_section * size)));
        }
        let mut offset = 0;
        let mut section = || {
            header
                .params
                .iter()
                .map(|m| {
                    let n: usize = m.shape.iter().product();
                    let vals = T::from_le_bytes_slice(&payload[offset..offset + n * size]);
                    offset += n * size;
                    Tensor::new(m.shape.clone(), vals)
                })
                .collect::<Result<Vec<_>>>()
        };
        let params = section()?;
        let shadow = section()?;
        let m = section()?;
        let u = section()?;
        model.params_mut().load_values(&header.params, params)?;
        model.set_initialized(header.initialized);
        let trainer = Self {
            model,
            ema: EmaState { decay: header.ema_decay, shadow },
            adamax: Adamax { t: header.adamax_t, m, u },
            optimizer: header.optimizer,
            objective: header.objective,
            task: header.task,
            ssl_alpha: header.ssl_alpha,
            rng: RandomSource::from_state(&header.train.rng),
            state: header.train,
            last_kl: Vec::new(),
        };
        Ok((trainer, header.experiment))
    }
}

/// Loads a checkpoint and finetunes it; see [`Trainer::finetune`].
pub fn finetune<T: Scalar>(
    checkpoint: &Path,
    data: &FitData<'_>,
    plan: &FitPlan,
    patience: usize,
    max_epochs: usize,
) -> Result<(Trainer<T>, FinetuneReport)> {
    if !checkpoint.is_file() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", checkpoint.display())));
    }
    let (mut trainer, _) = Trainer::<T>::load(checkpoint)?;
    let report = trainer.finetune(data, plan, patience, max_epochs)?;
    Ok((trainer, report))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    dtype: String,
    model: ModelConfig,
    initialized: bool,
    params: Vec<ParamMeta>,
    sections: Vec<String>,
    payload_sha256: String,
    optimizer: OptimizerConfig,
    objective: ObjectiveConfig,
    task: TrainObjective,
    ssl_alpha: f64,
    adamax_t: u64,
    ema_decay: f64,
    train: TrainState,
    experiment: serde_json::Value,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + hlen {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..20 + hlen])?;
    let payload = bytes.split_off(20 + hlen);
    if hex(&Sha256::digest(&payload)) != header.payload_sha256 {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }
    Ok((header, payload))
}

/// Header fields of a checkpoint, read without restoring parameters.
#[derive(Clone, Debug)]
pub struct CheckpointInfo {
    /// `"f32"` or `"f64"`.
    pub dtype: String,
    pub model: ModelConfig,
    pub experiment: serde_json::Value,
    pub train: TrainState,
}

pub fn checkpoint_info(path: &Path) -> Result<CheckpointInfo> {
    let (h, _) = read_checkpoint(path)?;
    Ok(CheckpointInfo { dtype: h.dtype, model: h.model, experiment: h.experiment, train: h.train })
}

/// Line-delimited JSON metrics, appended.
pub struct MetricsSink {
    out: Option<BufWriter<File>>,
}

impl MetricsSink {
    pub fn open(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?))
            }
            None => None,
        };
        Ok(Self { out })
    }

    pub fn write<R: Serialize>(&mut self, record: &R) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            serde_json::to_writer(&mut *w, record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
