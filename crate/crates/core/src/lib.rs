//! Probabilistic latent factor modeling for questionnaire-style data.
//!
//! The model places each record at a low-dimensional latent coordinate and
//! explains every field — binary via a logistic link, continuous via a
//! Gaussian — through a shared, approximately column-orthonormal basis.
//! Missing cells simply drop out of the likelihood, which is exactly right
//! under ignorable (MCAR/MAR) missingness.
//!
//! Fitting is Monte-Carlo EM: a random-walk Metropolis E-step samples each
//! record's latent posterior, and a penalized gradient-ascent M-step
//! updates the basis, intercepts, and noise scales. On top of a fitted
//! model the crate offers projection of new records ([`inference`]),
//! missing-cell imputation ([`imputation`]), correlation/regression
//! analysis against external metrics ([`analysis`]), and a synthetic-data
//! generator for end-to-end validation ([`synthetic`]).

pub mod analysis;
pub mod data_model;
pub mod error;
pub mod imputation;
pub mod inference;
pub mod likelihood;
pub mod math;
pub mod optimizer;
pub mod synthetic;

pub use crate::data_model::{Cell, Dataset, FieldKind, FieldSchema};
pub use crate::error::{Error, Result};
pub use crate::imputation::{ImputationMethod, ImputationResult};
pub use crate::inference::{LatentPosterior, SamplerConfig};
pub use crate::likelihood::{LatentPrior, ModelParams};
pub use crate::optimizer::{FitConfig, FitOutput, FitReport};
pub use crate::synthetic::GeneratorSpec;
