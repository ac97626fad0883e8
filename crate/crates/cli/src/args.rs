use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use toml::Value;

use biva::training::TrainObjective;
use biva::{DatasetName, Split, Variant};

use crate::commands::{AblationVariant, AnomalyArgs, EvalArgs, SampleArgs};
use crate::config::{ExperimentConfig, Override};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "biva", version, about = "Train and evaluate hierarchical VAEs with bidirectional inference")]
pub struct Cli {
    /// Dataset directory (default: $BIVA_DATA_ROOT, then ./data).
    #[arg(long, global = true, value_name = "DIR")]
    pub data_root: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per configured seed.
    Train(TrainArgs),
    /// Score a checkpoint with the ELBO and an importance-weighted bound.
    Eval(EvalCmd),
    /// Compare L>k anomaly scores between two datasets.
    Anomaly(AnomalyCmd),
    /// Train several model variants under one configuration.
    Ablate(AblateCmd),
    /// Draw prior samples and partial reconstructions.
    Sample(SampleCmd),
}

/// Config sources shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct ConfigSource {
    /// TOML configuration file.
    pub config: Option<PathBuf>,
    /// Built-in recipe: binary6, natural15, natural20, density2d, ssl100.
    #[arg(long)]
    pub recipe: Option<String>,
    #[arg(long)]
    pub dataset: Option<DatasetName>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Override any field, e.g. `--set training.batch_size=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigSource {
    fn overrides(&self, root: Option<&Path>) -> Result<Vec<Override>> {
        let mut o = Vec::new();
        if let Some(d) = self.dataset {
            o.push(Override::new("dataset.name", Value::String(d.as_str().into())));
        }
        if let Some(e) = self.epochs {
            o.push(Override::new("training.epochs", Value::Integer(e as i64)));
        }
        if let Some(p) = &self.output {
            o.push(Override::new("output_dir", Value::String(p.display().to_string())));
        }
        if let Some(r) = root {
            o.push(Override::new("dataset.root", Value::String(r.display().to_string())));
        }
        for s in &self.set {
            o.push(Override::parse(s)?);
        }
        Ok(o)
    }

    fn resolve(&self, extra: Vec<Override>, root: Option<&Path>) -> Result<ExperimentConfig> {
        let mut o = self.overrides(root)?;
        o.extend(extra);
        ExperimentConfig::resolve(self.config.as_deref(), self.recipe.as_deref(), &o)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Energy potential 1..=4 for density runs.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=4))]
    pub potential: Option<u32>,
    /// Run only this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
}

impl TrainArgs {
    pub fn experiment(&self, root: Option<&Path>) -> Result<ExperimentConfig> {
        let mut extra = Vec::new();
        if let Some(s) = self.seed {
            extra.push(Override::new("seeds", Value::Array(vec![Value::Integer(s as i64)])));
        }
        if let Some(v) = self.variant {
            extra.push(Override::new("model.variant", Value::String(v.name().into())));
        }
        if let Some(p) = self.potential {
            extra.push(Override::new("training.task.potential", Value::String(format!("U{p}"))));
        }
        let cfg = self.source.resolve(extra, root)?;
        if self.potential.is_some() && !matches!(cfg.training.task, TrainObjective::Energy2d { .. }) {
            return Err(CliError::config("training.task.potential", "only energy-objective runs take a potential"));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    pub checkpoint: PathBuf,
    /// Defaults to the dataset the checkpoint was trained on.
    #[arg(long)]
    pub dataset: Option<DatasetName>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Importance samples for the tighter bound; 1 reports the ELBO only.
    #[arg(short = 'k', long = "k", default_value_t = 1000)]
    pub k: usize,
    /// Importance samples per forward pass.
    #[arg(long, default_value_t = 50)]
    pub chunk: usize,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Score only the first N examples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub output: Option<PathBuf>,
}

impl EvalCmd {
    pub fn resolve(self, data_root: Option<PathBuf>) -> EvalArgs {
        EvalArgs {
            checkpoint: self.checkpoint,
            dataset: self.dataset,
            split: self.split,
            k: self.k,
            chunk: self.chunk,
            batch: self.batch,
            limit: self.limit,
            output: self.output,
            data_root,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnomalyCmd {
    pub checkpoint: PathBuf,
    /// Defaults to the training dataset of the checkpoint.
    #[arg(long)]
    pub in_dataset: Option<DatasetName>,
    #[arg(long)]
    pub out_dataset: DatasetName,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Comma-separated layer indices, e.g. `0,1,2`.
    #[arg(long = "k", value_delimiter = ',')]
    pub ks: Vec<usize>,
    /// Monte Carlo draws per example.
    #[arg(long)]
    pub mc: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub output: Option<PathBuf>,
}

impl AnomalyCmd {
    pub fn resolve(self, data_root: Option<PathBuf>) -> Result<AnomalyArgs> {
        if self.mc == Some(0) {
            return Err(CliError::Usage("--mc must be at least 1".into()));
        }
        Ok(AnomalyArgs {
            checkpoint: self.checkpoint,
            in_dataset: self.in_dataset,
            out_dataset: self.out_dataset,
            split: self.split,
            ks: (!self.ks.is_empty()).then_some(self.ks),
            mc: self.mc,
            batch: self.batch,
            limit: self.limit,
            output: self.output,
            data_root,
        })
    }
}

#[derive(Debug, Args)]
pub struct AblateCmd {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Comma-separated: VAE, LVAE, LVAE_PLUS, LVAE_PLUS_DEEP, BIVA.
    #[arg(long, value_delimiter = ',', default_value = "VAE,LVAE,LVAE_PLUS,LVAE_PLUS_DEEP,BIVA")]
    pub variants: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl AblateCmd {
    pub fn resolve(&self, root: Option<&Path>) -> Result<(ExperimentConfig, Vec<AblationVariant>, u64)> {
        let variants = self.variants.iter().map(|v| v.parse()).collect::<Result<Vec<_>>>()?;
        let cfg = self.source.resolve(Vec::new(), root)?;
        let seed = self.seed.unwrap_or(cfg.seeds[0]);
        Ok((cfg, variants, seed))
    }
}

#[derive(Debug, Args)]
pub struct SampleCmd {
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    pub temperatures: Vec<f64>,
    /// Samples per temperature, and inputs to reconstruct.
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Layers i whose z_{>i} is inferred from data and kept fixed.
    #[arg(long, value_delimiter = ',')]
    pub fixed_above: Vec<usize>,
    /// Inputs for reconstructions; defaults to the training dataset.
    #[arg(long)]
    pub dataset: Option<DatasetName>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub output: Option<PathBuf>,
}

impl SampleCmd {
    pub fn resolve(self, data_root: Option<PathBuf>) -> SampleArgs {
        SampleArgs {
            checkpoint: self.checkpoint,
            temperatures: self.temperatures,
            count: self.count,
            fixed_above: self.fixed_above,
            dataset: self.dataset,
            split: self.split,
            seed: self.seed,
            output: self.output,
            data_root,
        }
    }
}
