//! Training and evaluation objectives.
//!
//! Every objective is available at two levels: a graph-level function that
//! returns differentiable variables (used by training and gradient checks),
//! and a value-level convenience that runs a fresh graph in evaluation mode.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::distributions::{categorical_log_prob_rows, gaussian_kl, one_hot};
use crate::error::{Error, Result};
use crate::hierarchy::{HierarchyState, Model, PassOptions};
use crate::nn::Ctx;
use crate::potentials::{potential_u_graph, PotentialId};
use crate::rng::{Noise, RandomSource};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the per-variable KL terms of a bound are estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Analytic Gaussian KL where it is unbiased, sampled log-ratio for
    /// variables whose conditional prior depends on later draws.
    #[default]
    Auto,
    /// Analytic KL for every variable.
    Analytic,
    /// Sampled `log q(z) - log p(z)` for every variable.
    LogRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Free bits λ in nats per stochastic variable.
    pub free_bits: f64,
    /// Importance samples for evaluation.
    pub iw_samples: usize,
    /// Importance samples per forward pass.
    pub iw_chunk: usize,
    /// Classification weight; `None` uses `0.1 · (train size / labeled count)`.
    pub ssl_alpha: Option<f64>,
    pub anomaly_k: usize,
    pub mc_samples: usize,
    pub kl_estimator: KlEstimator,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            free_bits: 0.0,
            iw_samples: 1000,
            iw_chunk: 50,
            ssl_alpha: None,
            anomaly_k: 0,
            mc_samples: 1,
            kl_estimator: KlEstimator::Auto,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(self.free_bits.is_finite() && self.free_bits >= 0.0) {
            return Err(Error::config("objective.free_bits", "must be finite and >= 0"));
        }
        if self.iw_samples == 0 {
            return Err(Error::config("objective.iw_samples", "must be at least 1"));
        }
        if self.iw_chunk == 0 {
            return Err(Error::config("objective.iw_chunk", "must be at least 1"));
        }
        if self.mc_samples == 0 {
            return Err(Error::config("objective.mc_samples", "must be at least 1"));
        }
        if let Some(a) = self.ssl_alpha {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::config("objective.ssl_alpha", "must be finite and >= 0"));
            }
        }
        if self.anomaly_k > num_layers {
            return Err(Error::config("objective.anomaly_k", format!("must lie in 0..={num_layers}")));
        }
        Ok(())
    }

    /// The classification weight for a dataset with `total` examples of
    /// which `labeled` carry labels.
    pub fn resolved_alpha(&self, total: usize, labeled: usize) -> f64 {
        self.ssl_alpha.unwrap_or(0.1 * total as f64 / labeled.max(1) as f64)
    }
}

/// Batch summary of a bound, in nats per datapoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub bound: f64,
    pub reconstruction: f64,
    /// KL terms entering the bound, per variable.
    pub kl: Vec<f64>,
    /// Analytic `KL(q‖p)` per variable (zero for variables drawn from priors).
    pub analytic_kl: Vec<f64>,
    /// Value of the optimized objective (after free-bits clamping).
    pub objective: f64,
    /// Bound per example, averaged over Monte Carlo repeats.
    pub per_example: Vec<f64>,
}

/// Differentiable pieces of a bound over `repeats · N` rows.
#[derive(Clone, Debug)]
pub struct BoundTerms {
    pub reconstruction: Var,
    pub kl: Vec<Option<Var>>,
    pub analytic_kl: Vec<Option<Var>>,
    pub rows: Var,
}

/// Graph-level evaluation of an objective.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Scalar to maximize.
    pub objective: Var,
    pub terms: BoundTerms,
    pub repeats: usize,
    pub state: Option<HierarchyState>,
}

/// Same arithmetic as [`Graph::mean_all`], so reported and optimized means agree bit for bit.
fn mean_of<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    let t = g.value(v);
    (t.sum() * (T::one() / T::c(t.len().max(1) as f64))).f64()
}

impl Evaluation {
    pub fn report<T: Scalar>(&self, g: &Graph<T>) -> ObjectiveReport {
        let rows = g.value(self.terms.rows);
        let total = rows.len();
        let n = total / self.repeats;
        let mut per_example = vec![0.0; n];
        for (i, v) in rows.data().iter().enumerate() {
            per_example[i % n] += v.f64() / self.repeats as f64;
        }
        let opt = |v: &Option<Var>| v.map(|v| mean_of(g, v)).unwrap_or(0.0);
        ObjectiveReport {
            bound: mean_of(g, self.terms.rows),
            reconstruction: mean_of(g, self.terms.reconstruction),
            kl: self.terms.kl.iter().map(opt).collect(),
            analytic_kl: self.terms.analytic_kl.iter().map(opt).collect(),
            objective: g.scalar_value(self.objective).f64(),
            per_example,
        }
    }
}

/// Replaces the top prior with the unnormalized density `exp(-β U(z_L))`.
#[derive(Clone, Copy, Debug)]
pub struct EnergyPrior {
    pub potential: PotentialId,
    pub beta: f64,
}

/// Assembles reconstruction and KL terms from an evaluated pass.
pub fn bound_terms<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    state: &HierarchyState,
    x: &Tensor<T>,
    estimator: KlEstimator,
    energy: Option<EnergyPrior>,
) -> Result<BoundTerms> {
    let mut reconstruction = state.likelihood.log_prob(g, x)?;
    if let Some(c) = model.config().num_classes {
        // uniform class prior log p(y)
        reconstruction = g.offset(reconstruction, T::c(-(c as f64).ln()));
    }
    let specs = model.variables();
    let top = specs.len() - 1;
    let mut kl = Vec::with_capacity(specs.len());
    let mut analytic_kl = Vec::with_capacity(specs.len());
    let mut rows = reconstruction;
    for (v, rec) in state.latents.iter().enumerate() {
        let Some(q) = rec.posterior else {
            kl.push(None);
            analytic_kl.push(None);
            continue;
        };
        let analytic = gaussian_kl(g, &q, &rec.prior)?;
        let term = match (energy, v == top) {
            (Some(e), true) => {
                let lq = q.log_prob(g, rec.z)?;
                let u = potential_u_graph(g, e.potential, rec.z)?;
                let bu = g.scale(u, T::c(e.beta));
                g.add(lq, bu)
            }
            _ => {
                let use_analytic = match estimator {
                    KlEstimator::Analytic => true,
                    KlEstimator::LogRatio => false,
                    KlEstimator::Auto => specs[v].analytic_kl,
                };
                if use_analytic {
                    analytic
                } else {
                    let lq = q.log_prob(g, rec.z)?;
                    let lp = rec.prior.log_prob(g, rec.z)?;
                    g.sub(lq, lp)
                }
            }
        };
        rows = g.sub(rows, term);
        kl.push(Some(term));
        analytic_kl.push(Some(analytic));
    }
    if !g.value(rows).all_finite() {
        return Err(Error::Numerical("bound is not finite".into()));
    }
    Ok(BoundTerms { reconstruction, kl, analytic_kl, rows })
}

/// Mean bound with per-variable free bits `max(λ, KL)`; `λ = 0` is the plain mean bound.
pub fn free_bits_objective<T: Scalar>(g: &mut Graph<T>, terms: &BoundTerms, lambda: f64) -> Var {
    if lambda == 0.0 {
        return g.mean_all(terms.rows);
    }
    let mut obj = g.mean_all(terms.reconstruction);
    for k in terms.kl.iter().flatten() {
        let m = g.mean_all(*k);
        let c = g.clamp_min(m, T::c(lambda));
        obj = g.sub(obj, c);
    }
    obj
}

/// Settings shared by the graph-level bound evaluations.
#[derive(Clone, Copy, Debug)]
pub struct EvalSettings {
    pub repeats: usize,
    pub free_bits: f64,
    pub estimator: KlEstimator,
    pub train: bool,
    pub prior_below: usize,
    pub energy: Option<EnergyPrior>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            repeats: 1,
            free_bits: 0.0,
            estimator: KlEstimator::Auto,
            train: false,
            prior_below: 0,
            energy: None,
        }
    }
}

impl EvalSettings {
    pub fn from_config(cfg: &ObjectiveConfig, train: bool) -> Self {
        Self {
            repeats: cfg.mc_samples,
            free_bits: cfg.free_bits,
            estimator: cfg.kl_estimator,
            train,
            ..Self::default()
        }
    }
}

fn repeat_labels(labels: Option<&[usize]>, times: usize) -> Option<Vec<usize>> {
    labels.map(|y| y.repeat(times))
}

/// Graph-level (free-bits) ELBO, or the partial-inference bound when
/// `settings.prior_below > 0`. `noise` must supply `repeats · N` rows.
pub fn bound_eval<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    x: &Tensor<T>,
    labels: Option<&[usize]>,
    noise: &mut Noise<'_>,
    settings: &EvalSettings,
) -> Result<Evaluation> {
    if settings.repeats == 0 {
        return Err(Error::InvalidValue("mc_samples must be at least 1".into()));
    }
    if !(settings.free_bits.is_finite() && settings.free_bits >= 0.0) {
        return Err(Error::InvalidValue(format!("free bits must be >= 0, got {}", settings.free_bits)));
    }
    if settings.prior_below > model.config().num_layers {
        return Err(Error::InvalidValue(format!(
            "k = {} outside 0..={}",
            settings.prior_below,
            model.config().num_layers
        )));
    }
    let xr = x.repeat_batch(settings.repeats);
    let yr = repeat_labels(labels, settings.repeats);
    let opts = PassOptions { prior_below: settings.prior_below, train: settings.train, ..PassOptions::default() };
    let state = model.infer(g, &xr, noise, yr.as_deref(), &opts)?;
    let terms = bound_terms(g, model, &state, &xr, settings.estimator, settings.energy)?;
    let objective = free_bits_objective(g, &terms, settings.free_bits);
    Ok(Evaluation { objective, terms, repeats: settings.repeats, state: Some(state) })
}

fn run_report<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    rng: &mut RandomSource,
    settings: &EvalSettings,
) -> Result<ObjectiveReport> {
    let mut g = Graph::new();
    let mut noise = Noise::single(rng, x.shape()[0] * settings.repeats.max(1));
    let ev = bound_eval(&mut g, model, x, None, &mut noise, settings)?;
    Ok(ev.report(&g))
}

/// Monte Carlo ELBO with `mc_samples` draws per datapoint.
pub fn elbo<T: Scalar>(model: &Model<T>, x: &Tensor<T>, rng: &mut RandomSource, mc_samples: usize) -> Result<ObjectiveReport> {
    run_report(model, x, rng, &EvalSettings { repeats: mc_samples, ..EvalSettings::default() })
}

/// ELBO whose optimized value clamps each variable's batch-mean KL at `λ`.
pub fn free_bits_elbo<T: Scalar>(model: &Model<T>, x: &Tensor<T>, rng: &mut RandomSource, lambda: f64) -> Result<ObjectiveReport> {
    run_report(model, x, rng, &EvalSettings { free_bits: lambda, ..EvalSettings::default() })
}

/// Partial-inference bound `L^{>k}`: layers `1..=k` are drawn from their
/// conditional priors and contribute no KL term.
pub fn anomaly_bound<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    rng: &mut RandomSource,
    k: usize,
    mc_samples: usize,
) -> Result<ObjectiveReport> {
    run_report(model, x, rng, &EvalSettings { repeats: mc_samples, prior_below: k, ..EvalSettings::default() })
}

/// Log importance weights `log p(x,z) - log q(z|x)` for a block of samples,
/// one stream per sample; returns `[N, streams]`.
pub fn log_weights<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    x: &Tensor<T>,
    streams: &mut [RandomSource],
    train: bool,
) -> Result<Var> {
    let n = x.shape()[0];
    let c = streams.len();
    let mut noise = Noise::new(streams, n);
    let settings = EvalSettings { repeats: c, estimator: KlEstimator::LogRatio, train, ..EvalSettings::default() };
    let ev = bound_eval(g, model, x, None, &mut noise, &settings)?;
    let w = g.reshape(ev.terms.rows, &[c, n]);
    Ok(g.transpose(w))
}

/// Differentiable importance-weighted bound per datapoint (`[N]`), evaluated
/// in chunks of `chunk` samples on one graph.
pub fn iw_bound_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    x: &Tensor<T>,
    rng: &mut RandomSource,
    k: usize,
    chunk: usize,
    train: bool,
) -> Result<Var> {
    if k == 0 || chunk == 0 {
        return Err(Error::InvalidValue("K and chunk size must be positive".into()));
    }
    let mut streams = rng.split(k);
    let mut parts = Vec::new();
    for start in (0..k).step_by(chunk) {
        let end = (start + chunk).min(k);
        parts.push(log_weights(g, model, x, &mut streams[start..end], train)?);
    }
    let all = g.concat(&parts);
    let lse = g.logsumexp(all);
    Ok(g.offset(lse, T::c(-(k as f64).ln())))
}

/// Importance-weighted bound with `K` samples, streamed in chunks so that
/// memory does not grow with `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IwReport {
    pub bound: f64,
    pub per_example: Vec<f64>,
}

pub fn iw_bound<T: Scalar>(model: &Model<T>, x: &Tensor<T>, rng: &mut RandomSource, k: usize, chunk: usize) -> Result<IwReport> {
    if k == 0 || chunk == 0 {
        return Err(Error::InvalidValue("K and chunk size must be positive".into()));
    }
    let n = x.shape()[0];
    let mut streams = rng.split(k);
    let mut max = vec![f64::NEG_INFINITY; n];
    let mut acc = vec![0.0f64; n];
    for start in (0..k).step_by(chunk) {
        let end = (start + chunk).min(k);
        let mut g = Graph::new();
        let w = log_weights(&mut g, model, x, &mut streams[start..end], false)?;
        let wv = g.value(w);
        let c = end - start;
        for row in 0..n {
            for j in 0..c {
                let v = wv.data()[row * c + j].f64();
                if v.is_nan() {
                    return Err(Error::Numerical("NaN importance weight".into()));
                }
                if v > max[row] {
                    acc[row] = acc[row] * (max[row] - v).exp() + 1.0;
                    max[row] = v;
                } else {
                    acc[row] += (v - max[row]).exp();
                }
            }
        }
    }
    let per_example: Vec<f64> = max.iter().zip(&acc).map(|(m, a)| m + a.ln() - (k as f64).ln()).collect();
    if per_example.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("importance-weighted bound is not finite".into()));
    }
    let bound = per_example.iter().sum::<f64>() / n as f64;
    Ok(IwReport { bound, per_example })
}

/// Labeled semi-supervised objective: class-conditional ELBO of `log p(x, y)`
/// plus `α · log q(y | x, z_bu)`. Returns the evaluation and per-row
/// classifier log-probabilities of the true labels.
pub fn ssl_labeled_eval<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    noise: &mut Noise<'_>,
    alpha: f64,
    settings: &EvalSettings,
) -> Result<(Evaluation, Var)> {
    let classes = model.config().num_classes.ok_or_else(|| Error::Model("model has no classifier".into()))?;
    let n = x.shape()[0];
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), n)));
    }
    let y = g.constant(one_hot::<T>(labels, classes)?);
    let opts = PassOptions { train: settings.train, ..PassOptions::default() };
    let mut ctx = Ctx::new(g, model.params(), noise, settings.train);
    let bu = model.bottom_up(&mut ctx, x, 1.0)?;
    let log_probs = model.classify(&mut ctx, x, &bu)?;
    let state = model.top_down(&mut ctx, Some(&bu), None, Some(y), n, &opts)?;
    drop(ctx);
    let terms = bound_terms(g, model, &state, x, settings.estimator, None)?;
    let log_qy = categorical_log_prob_rows(g, log_probs, labels)?;
    let bound = free_bits_objective(g, &terms, settings.free_bits);
    let cls = g.mean_all(log_qy);
    let cls = g.scale(cls, T::c(alpha));
    let objective = g.add(bound, cls);
    Ok((Evaluation { objective, terms, repeats: 1, state: Some(state) }, log_qy))
}

/// Unlabeled semi-supervised objective: exact enumeration over classes,
/// `Σ_y q(y|x) · bound(x, y) + H(q(y|x))` per row. Returns the evaluation and
/// the classifier log-probabilities `[N, C]`.
pub fn ssl_unlabeled_eval<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    x: &Tensor<T>,
    noise: &mut Noise<'_>,
    settings: &EvalSettings,
) -> Result<(Evaluation, Var)> {
    let classes = model.config().num_classes.ok_or_else(|| Error::Model("model has no classifier".into()))?;
    let n = x.shape()[0];
    let opts = PassOptions { train: settings.train, ..PassOptions::default() };
    let mut ctx = Ctx::new(g, model.params(), noise, settings.train);
    let bu = model.bottom_up(&mut ctx, x, 1.0)?;
    let log_probs = model.classify(&mut ctx, x, &bu)?;
    let mut states = Vec::with_capacity(classes);
    for c in 0..classes {
        let y = ctx.g.constant(one_hot::<T>(&vec![c; n], classes)?);
        states.push(model.top_down(&mut ctx, Some(&bu), None, Some(y), n, &opts)?);
    }
    drop(ctx);
    let probs = g.exp(log_probs);
    let mut rows: Option<Var> = None;
    let mut recon: Option<Var> = None;
    let mut kl_acc: Vec<Option<Var>> = vec![None; model.num_variables()];
    let mut an_acc: Vec<Option<Var>> = vec![None; model.num_variables()];
    let weighted = |g: &mut Graph<T>, acc: Option<Var>, w: Var, v: Var| {
        let t = g.mul(w, v);
        match acc {
            Some(a) => g.add(a, t),
            None => t,
        }
    };
    for (c, state) in states.iter().enumerate() {
        let terms = bound_terms(g, model, state, x, settings.estimator, None)?;
        let qc = g.slice(probs, c, 1);
        let qc = g.reshape(qc, &[n]);
        rows = Some(weighted(g, rows, qc, terms.rows));
        recon = Some(weighted(g, recon, qc, terms.reconstruction));
        for v in 0..kl_acc.len() {
            if let Some(k) = terms.kl[v] {
                kl_acc[v] = Some(weighted(g, kl_acc[v], qc, k));
            }
            if let Some(k) = terms.analytic_kl[v] {
                an_acc[v] = Some(weighted(g, an_acc[v], qc, k));
            }
        }
    }
    // entropy −Σ q log q
    let plogp = g.mul(probs, log_probs);
    let neg_h = g.sum_rows(plogp);
    let rows = g.sub(rows.expect("at least one class"), neg_h);
    if !g.value(rows).all_finite() {
        return Err(Error::Numerical("unlabeled bound is not finite".into()));
    }
    let objective = g.mean_all(rows);
    let terms = BoundTerms { reconstruction: recon.expect("class"), kl: kl_acc, analytic_kl: an_acc, rows };
    Ok((Evaluation { objective, terms, repeats: 1, state: None }, log_probs))
}

/// Graph-level bound for the 2D density task: the top prior is replaced by
/// `exp(-β U(z_L))` (unnormalized), every other term as in the ELBO.
pub fn energy_2d_eval<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    x: &Tensor<T>,
    noise: &mut Noise<'_>,
    potential: PotentialId,
    beta: f64,
    settings: &EvalSettings,
) -> Result<Evaluation> {
    if !(0.1..=1.0).contains(&beta) {
        return Err(Error::InvalidValue(format!("annealing weight must lie in [0.1, 1], got {beta}")));
    }
    let top = model.num_variables() - 1;
    if model.latent_shape(top, 1) != [1, 2] {
        return Err(Error::Model("the 2D objective needs a 2-dimensional dense top latent".into()));
    }
    let settings = EvalSettings { energy: Some(EnergyPrior { potential, beta }), ..*settings };
    bound_eval(g, model, x, None, noise, &settings)
}

/// Value of the 2D-density bound on one batch.
pub fn energy_2d_objective<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    rng: &mut RandomSource,
    potential: PotentialId,
    beta: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut noise = Noise::single(rng, x.shape()[0]);
    let ev = energy_2d_eval(&mut g, model, x, &mut noise, potential, beta, &EvalSettings::default())?;
    Ok(mean_of(&g, ev.terms.rows))
}
