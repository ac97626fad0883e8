//! Hierarchical variational autoencoders with bidirectional inference.
//!
//! The crate covers four model variants sharing one building framework
//! (a plain stacked VAE, a ladder VAE with and without generative skip
//! connections, and the bidirectional-inference model), their training
//! objectives, an optimization loop with checkpoints, dataset loaders and
//! evaluation utilities.
//!
//! Everything numerical is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.
//!
//! ```
//! use biva::{ModelConfig, Model64, RandomSource, Variant};
//!
//! let cfg = ModelConfig::dense(Variant::Biva, 2, &[2, 2, 2], 16, 1);
//! let model = Model64::new(cfg, &mut RandomSource::new(0)).unwrap();
//! assert_eq!(model.num_variables(), 5);
//! ```

pub mod autodiff;
pub mod config;
pub mod data;
pub mod density;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod hierarchy;
pub mod nn;
pub mod objectives;
pub mod potentials;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use config::{DropoutRates, LatentKind, Likelihood, ModelConfig, Variant};
pub use data::{Dataset, DatasetName, DatasetSpec, Split};
pub use error::{Error, Result};
pub use hierarchy::{build_model, Model};
pub use objectives::{KlEstimator, ObjectiveConfig, ObjectiveReport};
pub use potentials::PotentialId;
pub use rng::RandomSource;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use training::{OptimizerConfig, Trainer};

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
