//! Metrics and diagnostics: bits/dim, per-layer KL activity, anomaly
//! scores with histogram and KDE series, the 2D grid KL and
//! semi-supervised error rates.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::Likelihood;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hierarchy::{HierarchySample, Model, PassOptions};
use crate::nn::Ctx;
use crate::objectives::{bound_eval, EvalSettings};
use crate::potentials::{potential_u, PotentialId};
use crate::rng::{Noise, RandomSource};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Grid over `(−2, 2)²` used for the 2D density comparison.
pub const GRID_LO: f64 = -2.0;
pub const GRID_HI: f64 = 2.0;
pub const GRID_CELLS: usize = 100;
/// Floor for target-density cells before normalization.
pub const GRID_FLOOR: f64 = 1e-12;
pub const DEFAULT_GRID_SAMPLES: usize = 1_000_000;
pub const HISTOGRAM_BINS: usize = 100;
pub const KDE_BANDWIDTH: f64 = 0.5;

/// `nats / (h·w·c·ln 2)`.
pub fn bits_per_dim(nats: f64, h: usize, w: usize, c: usize) -> Result<f64> {
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::InvalidValue(format!("dimensions must be positive, got {h}×{w}×{c}")));
    }
    Ok(nats / ((h * w * c) as f64 * LN_2))
}

/// Bits/dim for an NLL on an input of the given shape (`[C, H, W]` or `[D]`).
pub fn bits_per_dim_for_shape(nats: f64, shape: &[usize]) -> Result<f64> {
    match shape {
        [c, h, w] => bits_per_dim(nats, *h, *w, *c),
        [d] => bits_per_dim(nats, 1, 1, *d),
        _ => Err(Error::Shape(format!("no bits/dim convention for shape {shape:?}"))),
    }
}

/// Dataset-level summary of a bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub bound: f64,
    pub reconstruction: f64,
    /// Mean analytic `KL(q‖p)` per variable.
    pub per_layer_kl: Vec<f64>,
    /// Bits/dim of `-bound` for discrete-image models.
    pub bits_per_dim: Option<f64>,
    pub per_example: Vec<f64>,
}

fn check_input<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<()> {
    if data.example_shape() != model.config().input_shape.as_slice() {
        return Err(Error::Shape(format!(
            "dataset {} has examples of shape {:?}, model expects {:?}",
            data.label(),
            data.example_shape(),
            model.config().input_shape
        )));
    }
    Ok(())
}

fn reports_bits<T: Scalar>(model: &Model<T>) -> bool {
    model.config().likelihood == Likelihood::Dlm
}

/// Averages a bound over a dataset in order, `batch` examples per pass.
/// Every example draws its noise from its own stream, so results do not
/// depend on how the dataset is batched.
pub fn dataset_bound<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    batch: usize,
    rng: &mut RandomSource,
    settings: &EvalSettings,
) -> Result<BoundSummary> {
    check_input(model, data)?;
    let mut per_example = Vec::with_capacity(data.len());
    let mut recon = 0.0;
    let mut kl = vec![0.0; model.num_variables()];
    let base = rng.next_u64();
    let reps = settings.repeats;
    for idx in data.epoch_order(batch, None)? {
        let b = data.batch::<T>(&idx, rng)?;
        let n = idx.len() as f64;
        let mut g = Graph::new();
        let mut streams: Vec<RandomSource> =
            (0..reps).flat_map(|r| idx.iter().map(move |&i| RandomSource::stream(base, (i * reps + r) as u64))).collect();
        let mut noise = Noise::new(&mut streams, 1);
        let labels = b.labels.as_deref().filter(|_| model.has_classifier());
        let ev = bound_eval(&mut g, model, &b.x, labels, &mut noise, settings)?;
        let r = ev.report(&g);
        recon += r.reconstruction * n;
        for (a, v) in kl.iter_mut().zip(&r.analytic_kl) {
            *a += v * n;
        }
        per_example.extend(r.per_example);
    }
    let total = per_example.len().max(1) as f64;
    let bound = per_example.iter().sum::<f64>() / total;
    let bits = if reports_bits(model) { Some(bits_per_dim_for_shape(-bound, &model.config().input_shape)?) } else { None };
    Ok(BoundSummary {
        bound,
        reconstruction: recon / total,
        per_layer_kl: kl.into_iter().map(|v| v / total).collect(),
        bits_per_dim: bits,
        per_example,
    })
}

/// Mean analytic KL per variable over a dataset, ordered as the model's
/// variables (`z1_bu, z1_td, …, zL` for the bidirectional model).
pub fn layer_activity<T: Scalar>(model: &Model<T>, data: &Dataset, batch: usize, rng: &mut RandomSource) -> Result<Vec<f64>> {
    Ok(dataset_bound(model, data, batch, rng, &EvalSettings::default())?.per_layer_kl)
}

/// Per-variable KL recorded once per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerActivityCurve {
    pub names: Vec<String>,
    pub epochs: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl LayerActivityCurve {
    pub fn new(names: Vec<String>) -> Self {
        Self { names, epochs: Vec::new(), values: Vec::new() }
    }

    pub fn push(&mut self, epoch: usize, values: Vec<f64>) -> Result<()> {
        if values.len() != self.names.len() {
            return Err(Error::Shape(format!("{} KL values for {} variables", values.len(), self.names.len())));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= -1e-9)) {
            return Err(Error::InvalidValue(format!("KL value {v} is negative")));
        }
        self.epochs.push(epoch);
        self.values.push(values);
        Ok(())
    }

    /// Variables whose latest mean KL exceeds `threshold` nats.
    pub fn active(&self, threshold: f64) -> usize {
        self.values.last().map_or(0, |v| v.iter().filter(|&&k| k > threshold).count())
    }
}

/// Fixed-range histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Values outside `[lo, hi]` are clamped into the end bins.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins.max(1)];
        let width = (hi - lo) / counts.len() as f64;
        for &v in values {
            let i = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
            let i = (i.max(0.0) as usize).min(counts.len() - 1);
            counts[i] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (0..self.counts.len()).map(|i| self.lo + (i as f64 + 0.5) * w).collect()
    }
}

/// Gaussian kernel density estimate evaluated at `grid`.
pub fn gaussian_kde(values: &[f64], bandwidth: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (values.len().max(1) as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&x| values.iter().map(|&v| (-0.5 * ((x - v) / bandwidth).powi(2)).exp()).sum::<f64>() * norm)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidValue("KS test needs two non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    Ok(KsResult { statistic: d, p_value: kolmogorov_q(lambda) })
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = sign * (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreUnit {
    BitsPerDim,
    Nats,
}

/// Per-example negative partial-inference bounds `-L^{>k}` of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub dataset: String,
    pub k: usize,
    pub unit: ScoreUnit,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl AnomalyScore {
    fn new(dataset: String, k: usize, unit: ScoreUnit, scores: Vec<f64>) -> Self {
        let n = scores.len().max(1) as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { dataset, k, unit, scores, mean, std: var.sqrt() }
    }
}

/// Plot-ready series for one `k`: shared-range histograms and KDE curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySeries {
    pub k: usize,
    pub in_hist: Histogram,
    pub out_hist: Histogram,
    pub grid: Vec<f64>,
    pub in_kde: Vec<f64>,
    pub out_kde: Vec<f64>,
    pub ks: KsResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub ks: Vec<usize>,
    pub unit: ScoreUnit,
    pub in_dist: Vec<AnomalyScore>,
    pub out_dist: Vec<AnomalyScore>,
    pub series: Vec<AnomalySeries>,
}

/// Scores every example of `data` for each `k`, each with `mc` draws.
pub fn anomaly_scores<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    ks: &[usize],
    batch: usize,
    mc: usize,
    rng: &mut RandomSource,
) -> Result<Vec<AnomalyScore>> {
    check_input(model, data)?;
    let layers = model.config().num_layers;
    if let Some(bad) = ks.iter().find(|&&k| k > layers) {
        return Err(Error::InvalidValue(format!("k = {bad} outside 0..={layers}")));
    }
    let unit = if reports_bits(model) { ScoreUnit::BitsPerDim } else { ScoreUnit::Nats };
    let shape = model.config().input_shape.clone();
    ks.iter()
        .map(|&k| {
            let settings = EvalSettings { repeats: mc, prior_below: k, ..EvalSettings::default() };
            let s = dataset_bound(model, data, batch, rng, &settings)?;
            let scores = s
                .per_example
                .iter()
                .map(|b| match unit {
                    ScoreUnit::Nats => Ok(-b),
                    ScoreUnit::BitsPerDim => bits_per_dim_for_shape(-b, &shape),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AnomalyScore::new(data.label().to_string(), k, unit, scores))
        })
        .collect()
}

/// Scores an in-distribution and an out-of-distribution set and builds the
/// histogram/KDE series and a KS test per `k`.
pub fn anomaly_report<T: Scalar>(
    model: &Model<T>,
    in_dist: &Dataset,
    out_dist: &Dataset,
    ks: &[usize],
    batch: usize,
    mc: usize,
    rng: &mut RandomSource,
) -> Result<AnomalyReport> {
    let a = anomaly_scores(model, in_dist, ks, batch, mc, rng)?;
    let b = anomaly_scores(model, out_dist, ks, batch, mc, rng)?;
    let mut series = Vec::with_capacity(ks.len());
    for (sa, sb) in a.iter().zip(&b) {
        let all = sa.scores.iter().chain(&sb.scores);
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.05).max(1e-9);
        let (lo, hi) = (lo - pad, hi + pad);
        let grid: Vec<f64> = (0..200).map(|i| lo + (hi - lo) * i as f64 / 199.0).collect();
        series.push(AnomalySeries {
            k: sa.k,
            in_hist: Histogram::new(&sa.scores, lo, hi, HISTOGRAM_BINS),
            out_hist: Histogram::new(&sb.scores, lo, hi, HISTOGRAM_BINS),
            in_kde: gaussian_kde(&sa.scores, KDE_BANDWIDTH, &grid),
            out_kde: gaussian_kde(&sb.scores, KDE_BANDWIDTH, &grid),
            grid,
            ks: ks_two_sample(&sa.scores, &sb.scores)?,
        });
    }
    let unit = a.first().map_or(ScoreUnit::Nats, |s| s.unit);
    Ok(AnomalyReport { ks: ks.to_vec(), unit, in_dist: a, out_dist: b, series })
}

/// The `k` columns reported by default: `L−2, L−4, L−6, 0`, skipping
/// values that would fall below 1.
pub fn default_anomaly_ks(num_layers: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = [2, 4, 6].iter().filter(|&&d| num_layers > d).map(|&d| num_layers - d).collect();
    ks.push(0);
    ks
}

fn cell_of(v: f64) -> Option<usize> {
    if !(GRID_LO..GRID_HI).contains(&v) {
        return None;
    }
    let w = (GRID_HI - GRID_LO) / GRID_CELLS as f64;
    Some((((v - GRID_LO) / w) as usize).min(GRID_CELLS - 1))
}

/// Target `exp(-U)` at the cell centres, floored and normalized; row-major
/// with the first coordinate as row.
pub fn grid_target(potential: PotentialId) -> Vec<f64> {
    let w = (GRID_HI - GRID_LO) / GRID_CELLS as f64;
    let centre = |i: usize| GRID_LO + (i as f64 + 0.5) * w;
    let u: Vec<f64> =
        (0..GRID_CELLS * GRID_CELLS).map(|c| potential_u(potential, [centre(c / GRID_CELLS), centre(c % GRID_CELLS)])).collect();
    let umin = u.iter().copied().fold(f64::INFINITY, f64::min);
    let p: Vec<f64> = u.iter().map(|v| (umin - v).exp()).collect();
    let z: f64 = p.iter().sum();
    let p: Vec<f64> = p.iter().map(|v| (v / z).max(GRID_FLOOR)).collect();
    let z: f64 = p.iter().sum();
    p.into_iter().map(|v| v / z).collect()
}

/// Sample counts per grid cell, laid out like [`grid_target`]; samples
/// outside the grid are dropped.
pub fn grid_histogram(samples: &[[f64; 2]]) -> Vec<usize> {
    let mut counts = vec![0usize; GRID_CELLS * GRID_CELLS];
    for s in samples {
        if let (Some(i), Some(j)) = (cell_of(s[0]), cell_of(s[1])) {
            counts[i * GRID_CELLS + j] += 1;
        }
    }
    counts
}

/// Histogram estimate of `KL(q‖p)` on the `100×100` grid over `(−2,2)²`.
/// Samples outside the grid are dropped.
pub fn grid_kl_estimate_with(samples: &[[f64; 2]], potential: PotentialId, min_samples: usize) -> Result<f64> {
    if samples.len() < min_samples {
        return Err(Error::InvalidValue(format!("{} samples, at least {min_samples} required", samples.len())));
    }
    let counts = grid_histogram(samples);
    let inside: usize = counts.iter().sum();
    if inside == 0 {
        return Err(Error::InvalidValue("every sample lies outside the grid".into()));
    }
    let p = grid_target(potential);
    let kl = counts
        .iter()
        .zip(&p)
        .filter(|(&c, _)| c > 0)
        .map(|(&c, &p)| {
            let q = c as f64 / inside as f64;
            q * (q / p).ln()
        })
        .sum();
    Ok(kl)
}

/// [`grid_kl_estimate_with`] at the default minimum of `1e6` samples.
pub fn grid_kl_estimate(samples: &[[f64; 2]], potential: PotentialId) -> Result<f64> {
    grid_kl_estimate_with(samples, potential, DEFAULT_GRID_SAMPLES)
}

/// Exact draws from the grid-normalized target: a cell by its mass, then a
/// uniform point inside it.
pub fn sample_grid_target(potential: PotentialId, n: usize, rng: &mut RandomSource) -> Vec<[f64; 2]> {
    let p = grid_target(potential);
    let mut cdf = Vec::with_capacity(p.len());
    let mut acc = 0.0;
    for v in &p {
        acc += v;
        cdf.push(acc);
    }
    let w = (GRID_HI - GRID_LO) / GRID_CELLS as f64;
    (0..n)
        .map(|_| {
            let u = rng.uniform() * acc;
            let c = cdf.partition_point(|&v| v < u).min(p.len() - 1);
            let (i, j) = (c / GRID_CELLS, c % GRID_CELLS);
            [GRID_LO + (i as f64 + rng.uniform()) * w, GRID_LO + (j as f64 + rng.uniform()) * w]
        })
        .collect()
}

/// Draws of the top latent `z_L ~ q(z_L | x)` with `x ~ N(0, I)`, the
/// aggregate posterior compared against the target density.
pub fn posterior_samples_2d<T: Scalar>(model: &Model<T>, n: usize, batch: usize, rng: &mut RandomSource) -> Result<Vec<[f64; 2]>> {
    let top = model.num_variables() - 1;
    if model.latent_shape(top, 1) != [1, 2] {
        return Err(Error::Model("posterior samples need a 2-dimensional dense top latent".into()));
    }
    let dim = model.config().input_shape.iter().product::<usize>();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let b = batch.min(n - out.len()).max(1);
        let x: Tensor<T> = rng.normal_tensor(&[b, dim]);
        let x = x.reshape(&[b].iter().chain(&model.config().input_shape).copied().collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let mut noise = Noise::single(rng, b);
        let state = model.infer(&mut g, &x, &mut noise, None, &PassOptions::default())?;
        let z = g.value(state.latents[top].z);
        out.extend(z.data().chunks_exact(2).map(|c| [c[0].f64(), c[1].f64()]));
    }
    Ok(out)
}

/// Fraction of rows whose argmax differs from the label.
pub fn error_rate_from_log_probs(log_probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if log_probs.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("{} rows for {} labels", log_probs.len(), labels.len())));
    }
    let wrong = log_probs
        .iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i);
            best != Some(y)
        })
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Classifier log-probabilities `[N][C]` with one bottom-up draw.
pub fn class_log_probs<T: Scalar>(model: &Model<T>, x: &Tensor<T>, rng: &mut RandomSource) -> Result<Vec<Vec<f64>>> {
    if !model.has_classifier() {
        return Err(Error::Model("model has no classifier head".into()));
    }
    let n = x.shape()[0];
    let mut g = Graph::new();
    let mut noise = Noise::single(rng, n);
    let mut ctx = Ctx::new(&mut g, model.params(), &mut noise, false);
    let bu = model.bottom_up(&mut ctx, x, 1.0)?;
    let lp = model.classify(&mut ctx, x, &bu)?;
    let t = g.value(lp);
    Ok(t.data().chunks(t.row_len()).map(|r| r.iter().map(|v| v.f64()).collect()).collect())
}

/// Classification error over a labeled dataset.
pub fn ssl_error_rate<T: Scalar>(model: &Model<T>, data: &Dataset, batch: usize, rng: &mut RandomSource) -> Result<f64> {
    if !model.has_classifier() {
        return Err(Error::Model("model has no classifier head".into()));
    }
    check_input(model, data)?;
    let mut wrong = 0.0;
    for idx in data.epoch_order(batch, None)? {
        let b = data.batch::<T>(&idx, rng)?;
        let labels = b.labels.ok_or_else(|| Error::InvalidValue(format!("{} carries no labels", data.label())))?;
        let lp = class_log_probs(model, &b.x, rng)?;
        wrong += error_rate_from_log_probs(&lp, &labels)? * labels.len() as f64;
    }
    Ok(wrong / data.len().max(1) as f64)
}

fn argmax_rows(log_probs: &[Vec<f64>]) -> Vec<usize> {
    log_probs
        .iter()
        .map(|r| r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i))
        .collect()
}

/// Likelihood means of `n` draws from the generative model with prior noise
/// scaled by `temperature`. Class-conditional models cycle through the
/// classes row by row.
pub fn prior_samples<T: Scalar>(model: &Model<T>, n: usize, temperature: f64, rng: &mut RandomSource) -> Result<Tensor<T>> {
    if !(temperature.is_finite() && temperature >= 0.0) {
        return Err(Error::InvalidValue(format!("temperature {temperature} must be finite and >= 0")));
    }
    let labels: Option<Vec<usize>> = model.config().num_classes.map(|c| (0..n).map(|i| i % c).collect());
    let mut g = Graph::new();
    let mut noise = Noise::single(rng, n);
    let empty = HierarchySample::empty(model.num_variables());
    let state = model.generate(&mut g, n, &empty, &mut noise, labels.as_deref(), temperature)?;
    Ok(state.likelihood.mean(&g))
}

/// Infers latents for `x`, keeps the variables of layers above `level` and
/// regenerates everything below from the conditional priors. `level = 0`
/// keeps every latent.
pub fn reconstruct_above<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    level: usize,
    temperature: f64,
    rng: &mut RandomSource,
) -> Result<Tensor<T>> {
    let layers = model.config().num_layers;
    if level >= layers {
        return Err(Error::InvalidValue(format!("layer index {level} outside 0..{layers}")));
    }
    let n = x.shape().first().copied().unwrap_or(0);
    let labels = if model.has_classifier() { Some(argmax_rows(&class_log_probs(model, x, rng)?)) } else { None };
    let mut g = Graph::new();
    let mut noise = Noise::single(rng, n);
    let state = model.infer(&mut g, x, &mut noise, labels.as_deref(), &PassOptions::default())?;
    let kept = HierarchySample::from_state(&g, &state).keep_above(model.variables(), level);
    let mut g = Graph::new();
    let mut noise = Noise::single(rng, n);
    let out = model.generate(&mut g, n, &kept, &mut noise, labels.as_deref(), temperature)?;
    Ok(out.likelihood.mean(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Variant};

    #[test]
    fn bits_per_dim_reference_values() {
        assert_eq!(bits_per_dim(0.0, 32, 32, 3).unwrap(), 0.0);
        assert!((bits_per_dim(2129.35, 32, 32, 3).unwrap() - 1.0).abs() < 1e-4);
        assert!((bits_per_dim(6643.6, 32, 32, 3).unwrap() - 3.12).abs() < 5e-3);
        assert!(bits_per_dim(1.0, 0, 32, 3).is_err());
        let (a, b) = (123.4, 567.8);
        let sum = bits_per_dim(a + b, 28, 28, 1).unwrap();
        let parts = bits_per_dim(a, 28, 28, 1).unwrap() + bits_per_dim(b, 28, 28, 1).unwrap();
        assert!((sum - parts).abs() < 1e-12);
    }

    #[test]
    fn ks_detects_shift_and_accepts_null() {
        let mut rng = RandomSource::new(4);
        let a: Vec<f64> = (0..2000).map(|_| rng.standard_normal()).collect();
        let b: Vec<f64> = (0..2000).map(|_| rng.standard_normal()).collect();
        let c: Vec<f64> = (0..2000).map(|_| rng.standard_normal() + 0.3).collect();
        assert!(ks_two_sample(&a, &b).unwrap().p_value > 0.01);
        assert!(ks_two_sample(&a, &c).unwrap().p_value < 1e-6);
        let same = ks_two_sample(&a, &a).unwrap();
        assert_eq!(same.statistic, 0.0);
        assert_eq!(same.p_value, 1.0);
    }

    #[test]
    fn histogram_and_kde_normalization() {
        let v = [0.1, 0.2, 0.25, 0.9, 5.0, -3.0];
        let h = Histogram::new(&v, 0.0, 1.0, 10);
        assert_eq!(h.counts.iter().sum::<usize>(), v.len());
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[2], 2);
        assert_eq!(h.counts[9], 2);
        let grid: Vec<f64> = (0..4001).map(|i| -10.0 + i as f64 * 0.005).collect();
        let kde = gaussian_kde(&[0.0, 1.0], 0.5, &grid);
        let mass: f64 = kde.iter().sum::<f64>() * 0.005;
        assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grid_kl_self_consistency() {
        let mut rng = RandomSource::new(11);
        let s = sample_grid_target(PotentialId::StandardGaussian, 1_000_000, &mut rng);
        let kl = grid_kl_estimate(&s, PotentialId::StandardGaussian).unwrap();
        assert!((0.0..=0.05).contains(&kl), "{kl}");
    }

    #[test]
    fn grid_kl_of_a_point_mass() {
        // All samples in one cell: KL = -ln p̂(cell).
        let s = vec![[0.01, 0.01]; 1000];
        let kl = grid_kl_estimate_with(&s, PotentialId::StandardGaussian, 1).unwrap();
        let p = grid_target(PotentialId::StandardGaussian);
        let cell = cell_of(0.01).unwrap() * GRID_CELLS + cell_of(0.01).unwrap();
        assert!((kl + p[cell].ln()).abs() < 1e-12);
        assert!(grid_kl_estimate_with(&[[3.0, 0.0]], PotentialId::U1, 1).is_err());
        assert!(grid_kl_estimate(&s, PotentialId::U1).is_err());
    }

    #[test]
    fn grid_kl_order_invariant() {
        let mut rng = RandomSource::new(1);
        let mut s = sample_grid_target(PotentialId::U2, 20_000, &mut rng);
        let a = grid_kl_estimate_with(&s, PotentialId::U1, 1).unwrap();
        s.reverse();
        let b = grid_kl_estimate_with(&s, PotentialId::U1, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_classifier_error_near_chance() {
        let mut rng = RandomSource::new(2);
        let n = 20_000;
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        // ties broken by random jitter, i.e. a uniform random guess
        let lp: Vec<Vec<f64>> = (0..n).map(|_| (0..10).map(|_| -10f64.ln() + 1e-9 * rng.uniform()).collect()).collect();
        let e = error_rate_from_log_probs(&lp, &labels).unwrap();
        assert!((e - 0.9).abs() < 0.01, "{e}");
        let perfect: Vec<Vec<f64>> = labels.iter().map(|&y| (0..10).map(|c| if c == y { 0.0 } else { -50.0 }).collect()).collect();
        assert_eq!(error_rate_from_log_probs(&perfect, &labels).unwrap(), 0.0);
    }

    #[test]
    fn default_ks_mirror_table_columns() {
        assert_eq!(default_anomaly_ks(6), vec![4, 2, 0]);
        assert_eq!(default_anomaly_ks(15), vec![13, 11, 9, 0]);
    }

    fn toy() -> (Model<f64>, Dataset) {
        let cfg = ModelConfig::dense(Variant::Biva, 3, &[2, 2], 5, 1);
        let model = Model::new(cfg, &mut RandomSource::new(3)).unwrap();
        let mut rng = RandomSource::new(5);
        let d = Dataset::from_reals("toy", vec![3], (0..30 * 3).map(|_| rng.standard_normal()).collect(), None).unwrap();
        (model, d)
    }

    #[test]
    fn activity_nonnegative_and_batch_invariant() {
        let (model, d) = toy();
        let a = layer_activity(&model, &d, 30, &mut RandomSource::new(1)).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|&k| k >= 0.0));
        let b = layer_activity(&model, &d, 7, &mut RandomSource::new(1)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn anomaly_k0_matches_elbo_and_shapes_checked() {
        let (model, d) = toy();
        let scores = anomaly_scores(&model, &d, &[0], 30, 1, &mut RandomSource::new(8)).unwrap();
        let el = dataset_bound(&model, &d, 7, &mut RandomSource::new(8), &EvalSettings::default()).unwrap();
        for (s, e) in scores[0].scores.iter().zip(&el.per_example) {
            assert_eq!(*s, -e);
        }
        let other = Dataset::from_reals("o", vec![4], vec![0.0; 8], None).unwrap();
        assert!(matches!(anomaly_scores(&model, &other, &[0], 4, 1, &mut RandomSource::new(1)), Err(Error::Shape(_))));
        let mut rng = RandomSource::new(1);
        let rep = anomaly_report(&model, &d, &d, &[0, 1], 10, 1, &mut rng).unwrap();
        assert_eq!(rep.series.len(), 2);
        assert_eq!(rep.series[0].in_hist.counts.len(), HISTOGRAM_BINS);
    }

    #[test]
    fn missing_classifier_is_an_error() {
        let (model, d) = toy();
        assert!(matches!(ssl_error_rate(&model, &d, 10, &mut RandomSource::new(0)), Err(Error::Model(_))));
    }

    #[test]
    fn sampling_shapes_and_level_checks() {
        let (model, d) = toy();
        let mut rng = RandomSource::new(3);
        let a = prior_samples(&model, 5, 0.0, &mut RandomSource::new(1)).unwrap();
        let b = prior_samples(&model, 5, 0.0, &mut RandomSource::new(2)).unwrap();
        assert_eq!(a.shape(), [5, 3]);
        assert_eq!(a, b);
        assert!(prior_samples(&model, 2, -1.0, &mut rng).is_err());
        let x = d.batch::<f64>(&[0, 1, 2], &mut rng).unwrap().x;
        let layers = model.config().num_layers;
        for level in 0..layers {
            assert_eq!(reconstruct_above(&model, &x, level, 1.0, &mut rng).unwrap().shape(), [3, 3]);
        }
        assert!(reconstruct_above(&model, &x, layers, 1.0, &mut rng).is_err());
    }
}
