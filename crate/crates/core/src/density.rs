//! The 2D-density benchmark: the top latent of a hierarchy is fitted to a
//! target `exp(-U(z))`, and the aggregate posterior of that latent is scored
//! with the grid KL.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Variant};
use crate::data::Dataset;
use crate::error::Result;
use crate::evaluation::{grid_kl_estimate_with, posterior_samples_2d};
use crate::hierarchy::Model;
use crate::objectives::ObjectiveConfig;
use crate::potentials::PotentialId;
use crate::rng::RandomSource;
use crate::scalar::Scalar;
use crate::training::{OptimizerConfig, Schedule, TrainObjective, Trainer};

/// Settings of one benchmark run. The default is the full-size protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityRunConfig {
    pub layers: usize,
    /// Dimension of every latent; the top one is always 2.
    pub latent_dim: usize,
    pub hidden: usize,
    pub iterations: u64,
    pub batch_size: usize,
    pub beta_start: f64,
    pub anneal_steps: u64,
    pub free_bits: f64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub warmup_steps: u64,
    /// Posterior draws for the grid KL.
    pub kl_samples: usize,
    pub sample_batch: usize,
}

impl Default for DensityRunConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            latent_dim: 2,
            hidden: 128,
            iterations: 10_000,
            batch_size: 512,
            beta_start: 0.1,
            anneal_steps: 5_000,
            free_bits: 0.5,
            lr_start: 1e-5,
            lr_peak: 3e-3,
            lr_end: 1e-5,
            warmup_steps: 1_000,
            kl_samples: 1_000_000,
            sample_batch: 4096,
        }
    }
}

impl DensityRunConfig {
    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        let mut dims = vec![self.latent_dim; self.layers];
        if let Some(top) = dims.last_mut() {
            *top = 2;
        }
        let mut cfg = ModelConfig::dense(variant, 2, &dims, self.hidden, 1);
        cfg.weight_norm = true;
        cfg
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.lr_peak,
            schedule: Schedule::WarmupThenExponential {
                start: self.lr_start,
                peak: self.lr_peak,
                end: self.lr_end,
                warmup_steps: self.warmup_steps,
                decay_steps: self.iterations.saturating_sub(self.warmup_steps),
            },
            ..OptimizerConfig::default()
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig { free_bits: self.free_bits, ..ObjectiveConfig::default() }
    }

    pub fn task(&self, potential: PotentialId) -> TrainObjective {
        TrainObjective::Energy2d { potential, beta_start: self.beta_start, anneal_steps: self.anneal_steps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityRun {
    pub variant: Variant,
    pub potential: PotentialId,
    pub seed: u64,
    pub grid_kl: f64,
    /// Training objective averaged over the last 100 steps.
    pub final_objective: f64,
    pub seconds: f64,
}

/// Trains one model and scores its aggregate top posterior.
pub fn run_density<T: Scalar>(
    variant: Variant,
    potential: PotentialId,
    seed: u64,
    cfg: &DensityRunConfig,
) -> Result<(DensityRun, Trainer<T>)> {
    let start = Instant::now();
    let model = Model::<T>::new(cfg.model_config(variant), &mut RandomSource::new(seed))?;
    let mut trainer = Trainer::new(model, cfg.optimizer(), cfg.objective(), cfg.task(potential), seed)?;
    let data = Dataset::gaussian_stream("density2d", 2, cfg.batch_size);
    let idx: Vec<usize> = (0..cfg.batch_size).collect();
    let mut tail = Vec::new();
    for _ in 0..cfg.iterations {
        let batch = data.batch(&idx, trainer.rng())?;
        let r = trainer.step(&batch, None)?;
        tail.push(r.objective);
        if tail.len() > 100 {
            tail.remove(0);
        }
    }
    let model = trainer.eval_model()?;
    let mut rng = RandomSource::new(seed ^ 0x2d2d);
    let samples = posterior_samples_2d(&model, cfg.kl_samples, cfg.sample_batch, &mut rng)?;
    let grid_kl = grid_kl_estimate_with(&samples, potential, cfg.kl_samples)?;
    let final_objective = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    let run = DensityRun { variant, potential, seed, grid_kl, final_objective, seconds: start.elapsed().as_secs_f64() };
    Ok((run, trainer))
}

/// Median of a sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matches_the_protocol() {
        let c = DensityRunConfig::default();
        let m = c.model_config(Variant::Biva);
        m.validate().unwrap();
        assert_eq!(m.num_layers, 5);
        assert_eq!(*m.latent_dims.last().unwrap(), 2);
        assert_eq!(m.feature_widths, vec![128; 5]);
        let o = c.optimizer();
        assert!((o.learning_rate_at(0) - 1e-5).abs() < 1e-15);
        assert!((o.learning_rate_at(1_000) - 3e-3).abs() < 1e-15);
        assert!((o.learning_rate_at(10_000) - 1e-5).abs() < 1e-12);
        let t = c.task(PotentialId::U1);
        assert_eq!(t.beta_at(0), Some(0.1));
        assert_eq!(t.beta_at(5_000), Some(1.0));
    }

    #[test]
    fn tiny_run_produces_a_finite_score() {
        let c = DensityRunConfig {
            layers: 2,
            hidden: 8,
            iterations: 20,
            batch_size: 16,
            anneal_steps: 10,
            warmup_steps: 5,
            kl_samples: 2_000,
            sample_batch: 500,
            ..DensityRunConfig::default()
        };
        let (run, trainer) = run_density::<f64>(Variant::Biva, PotentialId::U2, 3, &c).unwrap();
        assert!(run.grid_kl.is_finite() && run.grid_kl >= 0.0);
        assert_eq!(trainer.state.step, 20);
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
