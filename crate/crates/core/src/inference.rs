//! E-step machinery: per-record latent posterior sampling and summaries.
//!
//! Each record's latent posterior P(x | row, params) is explored with a
//! random-walk Metropolis chain over exp(row_log_posterior), initialized at
//! the prior mean. Chains are seeded per record from a stable hash of the
//! global seed and the record id, so results do not depend on record order
//! and are bit-reproducible.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data_model::{Cell, Dataset};
use crate::error::{Error, Result};
use crate::likelihood::{
    grad_latent_row, row_log_posterior, LatentPrior, ModelParams,
};
use crate::math::derive_seed;

/// Classic random-walk scaling heuristic, 2.4/sqrt(d).
pub fn default_proposal_scale(d: usize) -> f64 {
    2.4 / (d as f64).sqrt()
}

/// Random-walk Metropolis settings.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Retained draws per record after burn-in.
    pub n_samples: usize,
    /// Discarded initial draws.
    pub burn_in: usize,
    /// Isotropic proposal standard deviation; `None` means 2.4/sqrt(d).
    pub proposal_scale: Option<f64>,
    /// Global seed; per-record streams are derived from it and the record id.
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_samples: 500,
            burn_in: 200,
            proposal_scale: None,
            seed: 0,
        }
    }
}

/// Monte-Carlo summary of one record's latent posterior.
#[derive(Debug, Clone)]
pub struct LatentPosterior {
    /// Retained draws, one row per sample (S × d), in chain order.
    pub samples: DMatrix<f64>,
    /// Empirical mean of the draws.
    pub mean: DVector<f64>,
    /// Empirical covariance of the draws (1/S normalization).
    pub covariance: DMatrix<f64>,
    /// Accepted proposals over all proposals, burn-in included.
    pub acceptance_rate: f64,
}

/// Runs the Metropolis chain for one row (in model field order). The chain
/// starts at the prior mean; `burn_in` draws are discarded and every draw
/// thereafter is retained.
pub fn sample_latent_posterior(
    params: &ModelParams,
    prior: &LatentPrior,
    row: &[Cell],
    config: &SamplerConfig,
) -> Result<LatentPosterior> {
    if config.n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let d = params.d();
    let scale = config
        .proposal_scale
        .unwrap_or_else(|| default_proposal_scale(d));
    if scale <= 0.0 {
        return Err(Error::Config("proposal_scale must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = prior.mu0.clone();
    let mut proposal = DVector::zeros(d);
    let mut lp = row_log_posterior(params, prior, &x, row);
    if !lp.is_finite() {
        return Err(Error::NonFiniteLogPosterior {
            record: String::new(),
        });
    }
    let total = config.burn_in + config.n_samples;
    let mut samples = DMatrix::zeros(config.n_samples, d);
    let mut accepted = 0usize;
    for step in 0..total {
        for t in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            proposal[t] = x[t] + scale * z;
        }
        let lp_new = row_log_posterior(params, prior, &proposal, row);
        if !lp_new.is_finite() {
            return Err(Error::NonFiniteLogPosterior {
                record: String::new(),
            });
        }
        let u: f64 = rng.random();
        if u.ln() < lp_new - lp {
            std::mem::swap(&mut x, &mut proposal);
            lp = lp_new;
            accepted += 1;
        }
        if step >= config.burn_in {
            let s = step - config.burn_in;
            for t in 0..d {
                samples[(s, t)] = x[t];
            }
        }
    }
    let s = config.n_samples as f64;
    let mut mean = DVector::zeros(d);
    for i in 0..config.n_samples {
        for t in 0..d {
            mean[t] += samples[(i, t)];
        }
    }
    mean /= s;
    let mut covariance = DMatrix::zeros(d, d);
    for i in 0..config.n_samples {
        for t in 0..d {
            let dt = samples[(i, t)] - mean[t];
            for u_ in 0..d {
                covariance[(t, u_)] += dt * (samples[(i, u_)] - mean[u_]);
            }
        }
    }
    covariance /= s;
    Ok(LatentPosterior {
        samples,
        mean,
        covariance,
        acceptance_rate: accepted as f64 / total as f64,
    })
}

/// Settings for the deterministic posterior-mode search.
#[derive(Debug, Clone)]
pub struct ModeConfig {
    pub max_iters: usize,
    /// Gradient max-norm below which the search stops. Tolerances much
    /// below ~1e-7 can be unreachable in f64: once a step's improvement
    /// falls under the log-posterior's floating-point resolution the line
    /// search can no longer certify ascent.
    pub tol: f64,
}

impl Default for ModeConfig {
    fn default() -> Self {
        ModeConfig {
            max_iters: 2000,
            tol: 1e-6,
        }
    }
}

/// Result of [`posterior_mode`]; `converged` is false when the gradient
/// tolerance was not reached within `max_iters` (best iterate returned).
#[derive(Debug, Clone)]
pub struct ModeResult {
    pub x: DVector<f64>,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Maximizes `row_log_posterior` over x by gradient ascent with an Armijo
/// backtracking line search, starting at the prior mean.
pub fn posterior_mode(
    params: &ModelParams,
    prior: &LatentPrior,
    row: &[Cell],
    config: &ModeConfig,
) -> ModeResult {
    let mut x = prior.mu0.clone();
    let mut f = row_log_posterior(params, prior, &x, row);
    let mut step = 1.0f64;
    let mut grad = grad_latent_row(params, prior, &x, row);
    for _ in 0..config.max_iters {
        let gnorm = grad.amax();
        if gnorm < config.tol {
            return ModeResult {
                x,
                grad_norm: gnorm,
                converged: true,
            };
        }
        let g2 = grad.dot(&grad);
        step = (step * 2.0).min(1e6);
        loop {
            let candidate = &x + &grad * step;
            let f_new = row_log_posterior(params, prior, &candidate, row);
            if f_new >= f + 1e-4 * step * g2 {
                x = candidate;
                f = f_new;
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                // Line search exhausted; gradient is numerically flat.
                return ModeResult {
                    x,
                    grad_norm: gnorm,
                    converged: false,
                };
            }
        }
        grad = grad_latent_row(params, prior, &x, row);
    }
    let gnorm = grad.amax();
    ModeResult {
        converged: gnorm < config.tol,
        grad_norm: gnorm,
        x,
    }
}

/// Samples every record's posterior in parallel. Per-record seeds come from
/// the stable (seed, record id) hash, so permuting records permutes outputs.
pub fn e_step(
    params: &ModelParams,
    prior: &LatentPrior,
    dataset: &Dataset,
    config: &SamplerConfig,
) -> Result<Vec<LatentPosterior>> {
    let rows = dataset.model_rows();
    let ids = dataset.record_ids();
    rows.par_iter()
        .zip(ids.par_iter())
        .map(|(row, id)| {
            let record_config = SamplerConfig {
                seed: derive_seed(config.seed, id),
                ..config.clone()
            };
            sample_latent_posterior(params, prior, row, &record_config).map_err(|e| match e {
                Error::NonFiniteLogPosterior { .. } => Error::NonFiniteLogPosterior {
                    record: id.clone(),
                },
                other => other,
            })
        })
        .collect()
}

/// Writes per-record posterior means: `record_id,x_1,...,x_d`.
pub fn write_latents_csv<P: AsRef<Path>>(
    record_ids: &[String],
    latents: &DMatrix<f64>,
    path: P,
) -> Result<()> {
    assert_eq!(record_ids.len(), latents.nrows());
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["record_id".to_string()];
    header.extend((1..=latents.ncols()).map(|t| format!("x_{t}")));
    w.write_record(&header)?;
    for (i, id) in record_ids.iter().enumerate() {
        let mut record = vec![id.clone()];
        record.extend((0..latents.ncols()).map(|t| format!("{}", latents[(i, t)])));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Optional per-sample dump: `record_id,sample_index,x_1,...,x_d`.
pub fn write_samples_csv<P: AsRef<Path>>(
    record_ids: &[String],
    posteriors: &[LatentPosterior],
    path: P,
) -> Result<()> {
    assert_eq!(record_ids.len(), posteriors.len());
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let d = posteriors.first().map_or(0, |p| p.samples.ncols());
    let mut header = vec!["record_id".to_string(), "sample_index".to_string()];
    header.extend((1..=d).map(|t| format!("x_{t}")));
    w.write_record(&header)?;
    for (id, posterior) in record_ids.iter().zip(posteriors) {
        for s in 0..posterior.samples.nrows() {
            let mut record = vec![id.clone(), s.to_string()];
            record.extend((0..d).map(|t| format!("{}", posterior.samples[(s, t)])));
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}
