//! The five commands. Each takes resolved arguments, writes its outputs
//! under a run directory and returns a summary for printing.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use biva::data::load_dataset;
use biva::evaluation::{
    anomaly_report, default_anomaly_ks, grid_histogram, grid_kl_estimate_with, grid_target, posterior_samples_2d, prior_samples,
    reconstruct_above, AnomalyReport, GRID_CELLS, GRID_HI, GRID_LO,
};
use biva::objectives::iw_bound;
use biva::training::{checkpoint_info, read_metrics, FinetuneReport, FitData, FitPlan, MetricsRecord, TrainObjective};
use biva::{Dataset, DatasetName, DatasetSpec, Likelihood, Model, RandomSource, Scalar, Split, Tensor, Trainer, Variant};

use crate::config::{ExperimentConfig, Precision};
use crate::error::{CliError, Result};
use crate::output::{self, fmt, fmt_opt, write_csv, write_json};
use crate::plot;

const LABEL_SALT: u64 = 0x1abe_1000;
const GRID_SALT: u64 = 0x2d2d;
const IW_SALT: u64 = 0x1e3_0000;
const ANOMALY_SALT: u64 = 0xa20_0000;

/// Outcome of one training seed, also written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub variant: String,
    pub parameters: usize,
    pub epochs: usize,
    pub steps: u64,
    pub valid_bound: Option<f64>,
    pub valid_bits_per_dim: Option<f64>,
    pub test_bound: Option<f64>,
    pub test_bits_per_dim: Option<f64>,
    pub test_error_rate: Option<f64>,
    /// Grid KL of the aggregate top posterior, energy runs only.
    pub grid_kl: Option<f64>,
    pub finetune: Option<FinetuneReport>,
    /// Final per-variable KL on the validation data.
    pub per_layer_kl: Vec<f64>,
    pub variables: Vec<String>,
    pub seconds: f64,
}

impl RunSummary {
    /// Variables whose mean KL exceeds `threshold` nats.
    pub fn active(&self, threshold: f64) -> usize {
        self.per_layer_kl.iter().filter(|&&k| k > threshold).count()
    }
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub dir: PathBuf,
    pub summary: RunSummary,
}

fn seed_config(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig { seeds: vec![seed], ..cfg.clone() }
}

fn with_root(spec: &DatasetSpec, root: Option<&Path>) -> DatasetSpec {
    match root {
        Some(r) => DatasetSpec { root: Some(r.to_path_buf()), ..spec.clone() },
        None => spec.clone(),
    }
}

/// Trains every seed of `cfg`, writing the resolved config echo first.
pub fn train(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    output::ensure_dir(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join(output::CONFIG_ECHO), cfg.echo()?)?;
    cfg.seeds
        .iter()
        .map(|&seed| match cfg.training.precision {
            Precision::F32 => train_seed::<f32>(cfg, seed),
            Precision::F64 => train_seed::<f64>(cfg, seed),
        })
        .collect()
}

/// One seed: fit, optional finetune, test scoring, density scoring and the
/// activity table.
pub fn train_seed<T: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let start = Instant::now();
    let dir = output::ensure_dir(&cfg.seed_dir(seed))?;
    let metrics = dir.join(output::METRICS);
    if metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    let train = load_dataset(&cfg.dataset.with_split(Split::Train))?;
    let valid = load_dataset(&cfg.dataset.with_split(Split::Valid))?;
    let labeled = match cfg.training.labeled_per_class {
        Some(per_class) if matches!(cfg.training.task, TrainObjective::SemiSupervised { .. }) => {
            let idx = train.balanced_label_subset(per_class, &mut RandomSource::new(seed ^ LABEL_SALT))?;
            Some(train.subset(&idx)?.with_label(format!("{}:labeled", train.label())))
        }
        _ => None,
    };
    let model = Model::<T>::new(cfg.model.clone(), &mut RandomSource::new(seed))?;
    let parameters = model.parameter_count();
    let variables = cfg.model.variable_names();
    let mut trainer = Trainer::new(model, cfg.optimizer.clone(), cfg.objective.clone(), cfg.training.task.clone(), seed)?;
    if let Some(l) = &labeled {
        trainer.ssl_alpha = cfg.objective.resolved_alpha(train.len(), l.len());
    }
    let plan = FitPlan {
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch_size,
        steps_per_epoch: cfg.training.steps_per_epoch,
        eval_batch: cfg.training.eval_batch,
        eval_limit: cfg.training.eval_limit,
        checkpoint_dir: Some(dir.join(output::CHECKPOINTS)),
        metrics_path: Some(metrics.clone()),
        experiment: seed_config(cfg, seed).to_json()?,
    };
    let data = FitData { train: &train, valid: Some(&valid), labeled: labeled.as_ref() };
    trainer.fit(&data, &plan).map_err(|e| divergence(&dir, e))?;
    let finetune = match &cfg.training.finetune {
        Some(f) => Some(trainer.finetune(&data, &plan, f.patience, f.max_epochs).map_err(|e| divergence(&dir, e))?),
        None => None,
    };

    let records = read_metrics(&metrics)?;
    let last = records.last();
    let mut summary = RunSummary {
        seed,
        variant: cfg.model.variant.name().to_string(),
        parameters,
        epochs: trainer.state.epoch,
        steps: trainer.state.step,
        valid_bound: last.map(|r| r.bound),
        valid_bits_per_dim: last.and_then(|r| r.bits_per_dim),
        test_bound: None,
        test_bits_per_dim: None,
        test_error_rate: None,
        grid_kl: None,
        finetune,
        per_layer_kl: last.map(|r| r.per_layer_kl.clone()).unwrap_or_default(),
        variables: variables.clone(),
        seconds: 0.0,
    };
    if finetune_changed_params(&summary) {
        // finetuning restores the best epoch, which may precede the last record
        let (s, _) = trainer.validate(&valid, &plan)?;
        summary.valid_bound = Some(s.bound);
        summary.valid_bits_per_dim = s.bits_per_dim;
        summary.per_layer_kl = s.per_layer_kl;
    }
    if cfg.training.evaluate_test && cfg.dataset.name != DatasetName::Density2d {
        let test = load_dataset(&cfg.dataset.with_split(Split::Test))?;
        let (s, err) = trainer.validate(&test, &plan)?;
        summary.test_bound = Some(s.bound);
        summary.test_bits_per_dim = s.bits_per_dim;
        summary.test_error_rate = err;
    }
    if let TrainObjective::Energy2d { potential, .. } = cfg.training.task {
        let model = trainer.eval_model()?;
        let n = cfg.evaluation.grid_kl_samples;
        let samples = posterior_samples_2d(&model, n, cfg.evaluation.sample_batch, &mut RandomSource::new(seed ^ GRID_SALT))?;
        summary.grid_kl = Some(grid_kl_estimate_with(&samples, potential, n)?);
        write_density_plot(&dir, &samples, potential)?;
    }
    output::write_activity(&dir, &variables, &records)?;
    summary.seconds = start.elapsed().as_secs_f64();
    write_json(&dir.join(output::SUMMARY), &summary)?;
    Ok(SeedRun { dir, summary })
}

/// Moves the per-layer dump of a diverged run into `diagnostics.json` and
/// keeps the error message short.
fn divergence(dir: &Path, e: biva::Error) -> CliError {
    if let biva::Error::Numerical(msg) = &e {
        if let Some((head, json)) = msg.split_once(": {") {
            let path = dir.join("diagnostics.json");
            let body = format!("{{{json}");
            let pretty = serde_json::from_str::<serde_json::Value>(&body).and_then(|v| serde_json::to_string_pretty(&v)).unwrap_or(body);
            if fs::write(&path, pretty + "\n").is_ok() {
                return CliError::Core(biva::Error::Numerical(format!("{head}; per-layer diagnostics in {}", path.display())));
            }
        }
    }
    CliError::Core(e)
}

fn finetune_changed_params(s: &RunSummary) -> bool {
    s.finetune.as_ref().is_some_and(|f| f.epochs_run > 0)
}

fn write_density_plot(dir: &Path, samples: &[[f64; 2]], potential: biva::PotentialId) -> Result<()> {
    let plots = output::plots_dir(dir)?;
    let counts = grid_histogram(samples);
    let target = grid_target(potential);
    let w = (GRID_HI - GRID_LO) / GRID_CELLS as f64;
    let centre = |i: usize| GRID_LO + (i as f64 + 0.5) * w;
    write_csv(
        &plots.join("density_grid.csv"),
        &["z1", "z2", "count", "target"],
        (0..GRID_CELLS * GRID_CELLS).map(|c| {
            let (i, j) = (c / GRID_CELLS, c % GRID_CELLS);
            vec![fmt(centre(i)), fmt(centre(j)), counts[c].to_string(), fmt(target[c])]
        }),
    )?;
    plot::heatmap(&plots.join("density_posterior.png"), &counts, GRID_CELLS, 4)?;
    let scaled: Vec<usize> = target.iter().map(|p| (p * 1e9) as usize).collect();
    plot::heatmap(&plots.join("density_target.png"), &scaled, GRID_CELLS, 4)
}

// ---------------------------------------------------------------------------
// Checkpoint-driven commands

/// A restored checkpoint with whatever experiment echo it carries.
pub struct Loaded<T: Scalar> {
    pub trainer: Trainer<T>,
    pub experiment: Option<ExperimentConfig>,
    pub run_dir: PathBuf,
}

fn load<T: Scalar>(checkpoint: &Path) -> Result<Loaded<T>> {
    let (trainer, echo) = Trainer::<T>::load(checkpoint)?;
    let experiment = if echo.is_null() { None } else { ExperimentConfig::from_json(&echo).ok() };
    Ok(Loaded { trainer, experiment, run_dir: output::run_dir_of(checkpoint) })
}

fn checkpoint_precision(checkpoint: &Path) -> Result<Precision> {
    if !checkpoint.is_file() {
        return Err(CliError::Usage(format!("missing checkpoint {}", checkpoint.display())));
    }
    match checkpoint_info(checkpoint)?.dtype.as_str() {
        "f64" => Ok(Precision::F64),
        _ => Ok(Precision::F32),
    }
}

/// Picks the dataset: explicit name, else the one the checkpoint trained on.
fn dataset_for(name: Option<DatasetName>, split: Split, root: Option<&Path>, exp: Option<&ExperimentConfig>) -> Result<DatasetSpec> {
    let base = match (name, exp) {
        (Some(n), Some(e)) if n == e.dataset.name => e.dataset.clone(),
        (Some(n), _) => DatasetSpec::new(n, split),
        (None, Some(e)) => e.dataset.clone(),
        (None, None) => return Err(CliError::Usage("the checkpoint records no dataset; pass --dataset".into())),
    };
    Ok(with_root(&base.with_split(split), root))
}

fn limited(set: Dataset, limit: Option<usize>) -> Result<Dataset> {
    Ok(match limit {
        Some(n) if n < set.len() => set.take(n)?,
        _ => set,
    })
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: Option<DatasetName>,
    pub split: Split,
    pub k: usize,
    pub chunk: usize,
    pub batch: Option<usize>,
    pub limit: Option<usize>,
    pub output: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
}

/// One row of the evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub dataset: String,
    pub split: String,
    pub k: usize,
    pub seed: u64,
    pub bound: f64,
    pub nll: f64,
    pub bits_per_dim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub rows: Vec<BoundRow>,
    pub error_rate: Option<f64>,
}

impl EvalReport {
    /// Rows formatted like a results table: `BIVA, L_1e3   78.59`.
    pub fn table(&self) -> String {
        let unit = if self.rows.iter().any(|r| r.bits_per_dim.is_some()) { "bits/dim" } else { "nats" };
        let mut s = format!("{:<16} {:>12}  ({unit}, {})\n", "model", "-log p(x) <=", self.rows.first().map_or("", |r| r.dataset.as_str()));
        for r in &self.rows {
            let v = r.bits_per_dim.unwrap_or(r.nll);
            s.push_str(&format!("{:<16} {:>12.2}\n", format!("{}, L_{}", self.variant, k_label(r.k)), v));
        }
        if let Some(e) = self.error_rate {
            s.push_str(&format!("error rate {:.2}%\n", 100.0 * e));
        }
        s
    }
}

/// `1000` as `1e3`, `5000` as `5e3`; other counts verbatim.
pub fn k_label(k: usize) -> String {
    if k >= 1000 && k.is_power_of_ten_multiple() {
        let e = (k as f64).log10().floor() as u32;
        let m = k / 10usize.pow(e);
        format!("{m}e{e}")
    } else {
        k.to_string()
    }
}

trait PowerOfTenMultiple {
    fn is_power_of_ten_multiple(self) -> bool;
}

impl PowerOfTenMultiple for usize {
    fn is_power_of_ten_multiple(self) -> bool {
        let e = (self as f64).log10().floor() as u32;
        let p = 10usize.pow(e);
        self % p == 0
    }
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport> {
    match checkpoint_precision(&args.checkpoint)? {
        Precision::F32 => eval_typed::<f32>(args),
        Precision::F64 => eval_typed::<f64>(args),
    }
}

fn eval_typed<T: Scalar>(args: &EvalArgs) -> Result<EvalReport> {
    if args.k == 0 || args.chunk == 0 {
        return Err(CliError::Usage("K and the chunk size must be at least 1".into()));
    }
    let loaded = load::<T>(&args.checkpoint)?;
    let exp = loaded.experiment.as_ref();
    let spec = dataset_for(args.dataset, args.split, args.data_root.as_deref(), exp)?;
    let limit = args.limit.or(exp.and_then(|e| e.training.eval_limit));
    let set = limited(load_dataset(&spec)?, limit)?;
    let batch = args.batch.or(exp.map(|e| e.training.eval_batch)).unwrap_or(100);
    let plan = FitPlan { eval_batch: batch, eval_limit: None, ..FitPlan::default() };
    let trainer = &loaded.trainer;
    let seed = trainer.state.rng.seed;
    let (l1, error_rate) = trainer.validate(&set, &plan)?;
    let shape = trainer.model.config().input_shape.clone();
    let bits = |nll: f64| -> Result<Option<f64>> {
        Ok(if trainer.model.config().likelihood == Likelihood::Dlm {
            Some(biva::evaluation::bits_per_dim_for_shape(nll, &shape)?)
        } else {
            None
        })
    };
    let row = |k: usize, bound: f64| -> Result<BoundRow> {
        Ok(BoundRow {
            dataset: spec.name.to_string(),
            split: spec.split.as_str().to_string(),
            k,
            seed,
            bound,
            nll: -bound,
            bits_per_dim: bits(-bound)?,
        })
    };
    let mut rows = vec![row(1, l1.bound)?];
    if args.k > 1 {
        if matches!(trainer.task, TrainObjective::Energy2d { .. }) {
            return Err(CliError::Usage("importance-weighted bounds are not available for energy-prior models".into()));
        }
        if trainer.model.has_classifier() {
            return Err(CliError::Usage("importance-weighted bounds are not available for class-conditional models".into()));
        }
        let model = trainer.eval_model()?;
        let mut rng = RandomSource::new(seed ^ IW_SALT);
        let mut total = 0.0;
        for idx in set.epoch_order(batch, None)? {
            let b = set.batch::<T>(&idx, &mut rng)?;
            let r = iw_bound(&model, &b.x, &mut rng, args.k, args.chunk)?;
            total += r.per_example.iter().sum::<f64>();
        }
        rows.push(row(args.k, total / set.len().max(1) as f64)?);
    }
    let report = EvalReport { variant: trainer.model.config().variant.name().to_string(), rows, error_rate };
    let out = output::ensure_dir(&args.output.clone().unwrap_or(loaded.run_dir))?;
    write_json(&out.join("eval.json"), &report)?;
    write_csv(
        &out.join("eval.csv"),
        &["dataset", "split", "k", "seed", "bound", "nll", "bits_per_dim"],
        report.rows.iter().map(|r| {
            vec![r.dataset.clone(), r.split.clone(), r.k.to_string(), r.seed.to_string(), fmt(r.bound), fmt(r.nll), fmt_opt(r.bits_per_dim)]
        }),
    )?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct AnomalyArgs {
    pub checkpoint: PathBuf,
    pub in_dataset: Option<DatasetName>,
    pub out_dataset: DatasetName,
    pub split: Split,
    pub ks: Option<Vec<usize>>,
    pub mc: Option<usize>,
    pub batch: Option<usize>,
    pub limit: Option<usize>,
    pub output: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
}

pub fn anomaly(args: &AnomalyArgs) -> Result<AnomalyReport> {
    match checkpoint_precision(&args.checkpoint)? {
        Precision::F32 => anomaly_typed::<f32>(args),
        Precision::F64 => anomaly_typed::<f64>(args),
    }
}

fn anomaly_typed<T: Scalar>(args: &AnomalyArgs) -> Result<AnomalyReport> {
    let loaded = load::<T>(&args.checkpoint)?;
    let exp = loaded.experiment.as_ref();
    let layers = loaded.trainer.model.config().num_layers;
    let ks = args.ks.clone().unwrap_or_else(|| default_anomaly_ks(layers));
    if let Some(bad) = ks.iter().find(|&&k| k > layers) {
        return Err(CliError::Usage(format!("k = {bad} exceeds the {layers} stochastic layers")));
    }
    let in_spec = dataset_for(args.in_dataset, args.split, args.data_root.as_deref(), exp)?;
    let out_spec = dataset_for(Some(args.out_dataset), args.split, args.data_root.as_deref(), exp)?;
    let in_set = limited(load_dataset(&in_spec)?, args.limit)?;
    let out_set = limited(load_dataset(&out_spec)?, args.limit)?;
    let model = loaded.trainer.eval_model()?;
    let batch = args.batch.or(exp.map(|e| e.training.eval_batch)).unwrap_or(100);
    let mc = args.mc.or(exp.map(|e| e.evaluation.anomaly_mc)).unwrap_or(1);
    let seed = loaded.trainer.state.rng.seed;
    let report = anomaly_report(&model, &in_set, &out_set, &ks, batch, mc, &mut RandomSource::new(seed ^ ANOMALY_SALT))?;

    let out = output::ensure_dir(&args.output.clone().unwrap_or(loaded.run_dir))?;
    write_json(&out.join("anomaly.json"), &report)?;
    write_csv(
        &out.join("anomaly.csv"),
        &["dataset", "k", "seed", "unit", "mean", "std", "count"],
        report.in_dist.iter().chain(&report.out_dist).map(|s| {
            vec![
                s.dataset.clone(),
                s.k.to_string(),
                seed.to_string(),
                format!("{:?}", s.unit).to_lowercase(),
                fmt(s.mean),
                fmt(s.std),
                s.scores.len().to_string(),
            ]
        }),
    )?;
    let plots = output::plots_dir(&out)?;
    for s in &report.series {
        let centers = s.in_hist.bin_centers();
        write_csv(
            &plots.join(format!("anomaly_hist_k{}.csv", s.k)),
            &["score", "in_count", "out_count"],
            centers.iter().enumerate().map(|(i, c)| vec![fmt(*c), s.in_hist.counts[i].to_string(), s.out_hist.counts[i].to_string()]),
        )?;
        write_csv(
            &plots.join(format!("anomaly_kde_k{}.csv", s.k)),
            &["score", "in_density", "out_density"],
            s.grid.iter().enumerate().map(|(i, g)| vec![fmt(*g), fmt(s.in_kde[i]), fmt(s.out_kde[i])]),
        )?;
        plot::histograms(&plots.join(format!("anomaly_k{}.png", s.k)), &[&s.in_hist, &s.out_hist])?;
    }
    Ok(report)
}

/// Table of mean scores: one row per dataset, one column per `k`.
pub fn anomaly_table(report: &AnomalyReport) -> String {
    let mut s = format!("{:<24}", "dataset");
    for k in &report.ks {
        s.push_str(&format!(" {:>12}", format!("L>{k}")));
    }
    s.push('\n');
    for scores in [&report.in_dist, &report.out_dist] {
        let name = scores.first().map_or("", |x| x.dataset.as_str());
        s.push_str(&format!("{name:<24}"));
        for x in scores {
            s.push_str(&format!(" {:>12.2}", x.mean));
        }
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Vae,
    Lvae,
    LvaePlus,
    /// LVAE+ with `2L-1` stochastic layers, matching BIVA's variable count.
    LvaePlusDeep,
    Biva,
}

impl AblationVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Vae => "VAE",
            Self::Lvae => "LVAE",
            Self::LvaePlus => "LVAE_PLUS",
            Self::LvaePlusDeep => "LVAE_PLUS_DEEP",
            Self::Biva => "BIVA",
        }
    }

    pub fn apply(self, model: &biva::ModelConfig) -> biva::ModelConfig {
        let mut m = model.clone();
        m.variant = match self {
            Self::Vae => Variant::Vae,
            Self::Lvae => Variant::Lvae,
            Self::LvaePlus | Self::LvaePlusDeep => Variant::LvaePlus,
            Self::Biva => Variant::Biva,
        };
        if self == Self::LvaePlusDeep {
            m = m.deepened();
        }
        m
    }
}

impl FromStr for AblationVariant {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "VAE" => Ok(Self::Vae),
            "LVAE" => Ok(Self::Lvae),
            "LVAE_PLUS" | "LVAE+" => Ok(Self::LvaePlus),
            "LVAE_PLUS_DEEP" | "LVAE+_DEEP" => Ok(Self::LvaePlusDeep),
            "BIVA" => Ok(Self::Biva),
            _ => Err(CliError::Usage(format!("unknown variant `{s}`; choose from VAE, LVAE, LVAE_PLUS, LVAE_PLUS_DEEP, BIVA"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub parameters: usize,
    pub valid_bound: Option<f64>,
    pub valid_bits_per_dim: Option<f64>,
    pub test_bound: Option<f64>,
    pub test_bits_per_dim: Option<f64>,
    pub grid_kl: Option<f64>,
    pub num_variables: usize,
    pub active_variables: usize,
    pub per_layer_kl: Vec<f64>,
}

/// KL above which a variable counts as active.
pub const ACTIVITY_THRESHOLD: f64 = 0.01;

/// Trains each variant from the same base configuration and seed.
pub fn ablate(base: &ExperimentConfig, variants: &[AblationVariant], seed: u64) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(CliError::Usage("list at least one variant".into()));
    }
    output::ensure_dir(&base.output_dir)?;
    let mut rows = Vec::new();
    let mut curves: Vec<(String, Vec<MetricsRecord>)> = Vec::new();
    for &v in variants {
        let cfg = ExperimentConfig {
            model: v.apply(&base.model),
            seeds: vec![seed],
            output_dir: base.output_dir.join(v.name()),
            ..base.clone()
        };
        cfg.validate()?;
        let run = train(&cfg)?.remove(0);
        let s = &run.summary;
        rows.push(AblationRow {
            variant: v.name().to_string(),
            parameters: s.parameters,
            valid_bound: s.valid_bound,
            valid_bits_per_dim: s.valid_bits_per_dim,
            test_bound: s.test_bound,
            test_bits_per_dim: s.test_bits_per_dim,
            grid_kl: s.grid_kl,
            num_variables: s.per_layer_kl.len(),
            active_variables: s.active(ACTIVITY_THRESHOLD),
            per_layer_kl: s.per_layer_kl.clone(),
        });
        curves.push((v.name().to_string(), read_metrics(&run.dir.join(output::METRICS))?));
    }
    let out = &base.output_dir;
    write_json(&out.join("ablation.json"), &rows)?;
    write_csv(
        &out.join("ablation.csv"),
        &["variant", "seed", "parameters", "valid_bound", "valid_bits_per_dim", "test_bound", "test_bits_per_dim", "grid_kl", "num_variables", "active_variables"],
        rows.iter().map(|r| {
            vec![
                r.variant.clone(),
                seed.to_string(),
                r.parameters.to_string(),
                fmt_opt(r.valid_bound),
                fmt_opt(r.valid_bits_per_dim),
                fmt_opt(r.test_bound),
                fmt_opt(r.test_bits_per_dim),
                fmt_opt(r.grid_kl),
                r.num_variables.to_string(),
                r.active_variables.to_string(),
            ]
        }),
    )?;
    let plots = output::plots_dir(out)?;
    write_csv(
        &plots.join("activity_final.csv"),
        &["variant", "variable", "kl"],
        rows.iter().flat_map(|r| r.per_layer_kl.iter().enumerate().map(move |(i, k)| vec![r.variant.clone(), (i + 1).to_string(), fmt(*k)])),
    )?;
    let series: Vec<Vec<(f64, f64)>> =
        rows.iter().map(|r| r.per_layer_kl.iter().enumerate().map(|(i, &k)| ((i + 1) as f64, k)).collect()).collect();
    plot::lines(&plots.join("activity_final.png"), &series)?;
    write_csv(
        &plots.join("activity_by_epoch.csv"),
        &["variant", "split", "epoch", "variable", "kl"],
        curves.iter().flat_map(|(name, recs)| {
            recs.iter().flat_map(move |r| {
                r.per_layer_kl
                    .iter()
                    .enumerate()
                    .map(move |(i, k)| vec![name.clone(), r.split.clone(), r.epoch.to_string(), (i + 1).to_string(), fmt(*k)])
            })
        }),
    )?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<16} {:>10} {:>12} {:>12} {:>8}\n", "variant", "params", "bound", "test", "active");
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>10} {:>12} {:>12} {:>8}\n",
            r.variant,
            r.parameters,
            r.valid_bound.map_or("-".into(), |b| format!("{b:.2}")),
            r.test_bound.map_or("-".into(), |b| format!("{b:.2}")),
            format!("{}/{}", r.active_variables, r.num_variables)
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Sampling

#[derive(Clone, Debug)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub temperatures: Vec<f64>,
    pub count: usize,
    /// Layers `i` for which `z_{>i}` is inferred and kept.
    pub fixed_above: Vec<usize>,
    pub dataset: Option<DatasetName>,
    pub split: Split,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub files: Vec<PathBuf>,
}

pub fn sample(args: &SampleArgs) -> Result<SampleReport> {
    match checkpoint_precision(&args.checkpoint)? {
        Precision::F32 => sample_typed::<f32>(args),
        Precision::F64 => sample_typed::<f64>(args),
    }
}

fn temp_tag(t: f64) -> String {
    format!("{t:.2}").replace('.', "p")
}

/// Writes `[N, ...]` outputs as one CSV row per example and, for images, a
/// grid figure.
fn emit<T: Scalar>(stem: &Path, x: &Tensor<T>, likelihood: Likelihood, cols: usize, files: &mut Vec<PathBuf>) -> Result<()> {
    let n = x.shape()[0];
    let per = x.len() / n.max(1);
    let csv_path = stem.with_extension("csv");
    let header: Vec<String> = (0..per).map(|i| format!("v{i}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&csv_path, &header, x.data().chunks(per.max(1)).map(|r| r.iter().map(|v| fmt(v.f64())).collect::<Vec<_>>()))?;
    files.push(csv_path);
    if x.shape().len() == 4 {
        let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let png = stem.with_extension("png");
        plot::image_grid(&plot::to_pixels(x, likelihood)?, c, h, w, cols)?.save(&png)?;
        files.push(png);
    }
    Ok(())
}

fn stack_rows<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data: Vec<T> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Reorders `[block][row]` into `[row][block]` so each grid row shows one
/// input next to its reconstructions.
fn interleave<T: Scalar>(blocks: &[Tensor<T>]) -> Result<Tensor<T>> {
    let n = blocks[0].shape()[0];
    let per = blocks[0].len() / n.max(1);
    let mut data = Vec::with_capacity(blocks.len() * blocks[0].len());
    for r in 0..n {
        for b in blocks {
            data.extend_from_slice(&b.data()[r * per..(r + 1) * per]);
        }
    }
    let mut shape = blocks[0].shape().to_vec();
    shape[0] = n * blocks.len();
    Ok(Tensor::new(shape, data)?)
}

fn sample_typed<T: Scalar>(args: &SampleArgs) -> Result<SampleReport> {
    let loaded = load::<T>(&args.checkpoint)?;
    let model = loaded.trainer.eval_model()?;
    let layers = model.config().num_layers;
    if let Some(bad) = args.fixed_above.iter().find(|&&i| i >= layers) {
        return Err(CliError::Usage(format!("layer index {bad} outside 0..{layers}")));
    }
    if args.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    if let Some(t) = args.temperatures.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(CliError::Usage(format!("temperature {t} must be finite and >= 0")));
    }
    let seed = args.seed.unwrap_or(loaded.trainer.state.rng.seed);
    let likelihood = model.config().likelihood;
    let cols = (args.count as f64).sqrt().ceil() as usize;
    let out = output::ensure_dir(&args.output.clone().unwrap_or(loaded.run_dir.join("samples")))?;
    let mut files = Vec::new();
    let mut sweep = Vec::new();
    for &t in &args.temperatures {
        let x = prior_samples(&model, args.count, t, &mut RandomSource::new(seed))?;
        emit(&out.join(format!("prior_t{}", temp_tag(t))), &x, likelihood, cols, &mut files)?;
        sweep.push(x);
    }
    if !sweep.is_empty() && sweep[0].shape().len() == 4 {
        // one row per temperature
        let grid = stack_rows(&sweep)?;
        let (c, h, w) = (grid.shape()[1], grid.shape()[2], grid.shape()[3]);
        let png = out.join("prior_temperatures.png");
        plot::image_grid(&plot::to_pixels(&grid, likelihood)?, c, h, w, args.count)?.save(&png)?;
        files.push(png);
    }
    if !args.fixed_above.is_empty() {
        let exp = loaded.experiment.as_ref();
        let spec = dataset_for(args.dataset, args.split, args.data_root.as_deref(), exp)?;
        let set = load_dataset(&spec)?;
        let n = args.count.min(set.len());
        let mut rng = RandomSource::new(seed);
        let idx: Vec<usize> = (0..n).collect();
        let x = set.batch::<T>(&idx, &mut rng)?.x;
        let mut blocks = vec![x.clone()];
        for &i in &args.fixed_above {
            let r = reconstruct_above(&model, &x, i, 1.0, &mut RandomSource::new(seed ^ i as u64))?;
            emit(&out.join(format!("fixed_above_{i}")), &r, likelihood, cols, &mut files)?;
            blocks.push(r);
        }
        if x.shape().len() == 4 {
            let grid = interleave(&blocks)?;
            let (c, h, w) = (grid.shape()[1], grid.shape()[2], grid.shape()[3]);
            let png = out.join("fixed_above.png");
            plot::image_grid(&plot::to_pixels(&grid, likelihood)?, c, h, w, blocks.len())?.save(&png)?;
            files.push(png);
        }
    }
    write_json(&out.join("samples.json"), &SampleReport { files: files.clone() })?;
    Ok(SampleReport { files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_labels() {
        assert_eq!(k_label(1), "1");
        assert_eq!(k_label(1000), "1e3");
        assert_eq!(k_label(5000), "5e3");
        assert_eq!(k_label(1500), "1500");
        assert_eq!(k_label(64), "64");
    }

    #[test]
    fn variants_parse_and_deepen() {
        assert_eq!("lvae_plus_deep".parse::<AblationVariant>().unwrap(), AblationVariant::LvaePlusDeep);
        assert!("flow".parse::<AblationVariant>().is_err());
        let m = biva::ModelConfig::dense(Variant::Biva, 2, &[2, 2, 2], 8, 1);
        let deep = AblationVariant::LvaePlusDeep.apply(&m);
        assert_eq!(deep.variant, Variant::LvaePlus);
        assert_eq!(deep.num_variables(), m.num_variables());
        assert_eq!(AblationVariant::Lvae.apply(&m).num_variables(), 3);
    }

    #[test]
    fn interleave_puts_blocks_side_by_side() {
        let a = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[10.0, 20.0]).unwrap();
        let t = interleave(&[a, b]).unwrap();
        assert_eq!(t.data(), [1.0, 10.0, 2.0, 20.0]);
    }
}
