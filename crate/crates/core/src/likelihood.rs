//! Model parameters, the latent prior, and every log-likelihood /
//! log-posterior term with its analytic gradients.
//!
//! The observation model, conditional on a d-dimensional latent vector x:
//! binary field j is Bernoulli with success probability
//! sigmoid(A_j·x + b_j); continuous field j is Gaussian with mean
//! A_j·x + b_j and standard deviation sigma_j. Missing cells contribute
//! likelihood 1, i.e. exactly 0 nats. Rows of `A`/`b` follow the model
//! convention: binary fields first, then continuous fields.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_model::Cell;
use crate::error::{Error, Result};
use crate::math::{clamp_logit, log_sigmoid, sigmoid};

const LOG_2PI: f64 = 1.8378770664093453;

/// Fitted (or true) model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// (m+k) × d basis; row j maps latent coordinates to field j's logit
    /// (binary) or mean (continuous).
    pub a: DMatrix<f64>,
    /// Per-field intercept, length m+k.
    pub b: DVector<f64>,
    /// Per-continuous-field noise standard deviation, length k.
    pub sigma: DVector<f64>,
    /// Field names in model order (binary first, then continuous).
    pub field_names: Vec<String>,
    /// Number of binary fields m; rows [0, m) of `a` are binary rows.
    pub n_binary: usize,
}

impl ModelParams {
    /// Validates dimensions, finiteness and sigma positivity.
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        sigma: DVector<f64>,
        field_names: Vec<String>,
        n_binary: usize,
    ) -> Result<Self> {
        let rows = a.nrows();
        if b.len() != rows || field_names.len() != rows {
            return Err(Error::Config(format!(
                "A has {rows} rows but b has {} entries and {} field names",
                b.len(),
                field_names.len()
            )));
        }
        if n_binary > rows || rows - n_binary != sigma.len() {
            return Err(Error::Config(format!(
                "{rows} fields with {n_binary} binary require {} sigma entries, got {}",
                rows - n_binary.min(rows),
                sigma.len()
            )));
        }
        if a.ncols() == 0 {
            return Err(Error::Config("latent dimension d must be at least 1".into()));
        }
        if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite entry in A or b".into()));
        }
        if sigma.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Config("sigma entries must be finite and positive".into()));
        }
        Ok(ModelParams {
            a,
            b,
            sigma,
            field_names,
            n_binary,
        })
    }

    /// Latent dimension d.
    pub fn d(&self) -> usize {
        self.a.ncols()
    }

    /// Total field count m + k.
    pub fn n_fields(&self) -> usize {
        self.a.nrows()
    }

    /// Linear predictor A_j·x + b_j for field j.
    pub fn linear_predictor(&self, x: &DVector<f64>, j: usize) -> f64 {
        let mut l = self.b[j];
        for t in 0..self.a.ncols() {
            l += self.a[(j, t)] * x[t];
        }
        l
    }
}

/// Multivariate normal prior over latent vectors.
#[derive(Debug, Clone)]
pub struct LatentPrior {
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    inv: DMatrix<f64>,
    log_norm: f64,
}

impl LatentPrior {
    /// Validates symmetry (within 1e-12) and positive-definiteness.
    pub fn new(mu0: DVector<f64>, sigma0: DMatrix<f64>) -> Result<Self> {
        let d = mu0.len();
        if sigma0.nrows() != d || sigma0.ncols() != d {
            return Err(Error::Config(format!(
                "Sigma0 is {}x{} but mu0 has length {d}",
                sigma0.nrows(),
                sigma0.ncols()
            )));
        }
        for i in 0..d {
            for j in 0..d {
                if (sigma0[(i, j)] - sigma0[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Config("Sigma0 is not symmetric within 1e-12".into()));
                }
            }
        }
        let chol = nalgebra::Cholesky::new(sigma0.clone())
            .ok_or_else(|| Error::Config("Sigma0 is not positive-definite".into()))?;
        let log_det: f64 = (0..d).map(|i| chol.l()[(i, i)].ln()).sum::<f64>() * 2.0;
        let log_norm = -0.5 * (d as f64 * LOG_2PI + log_det);
        let inv = chol.inverse();
        Ok(LatentPrior {
            mu0,
            sigma0,
            chol,
            inv,
            log_norm,
        })
    }

    /// Standard-normal prior N(0, I_d), the default.
    pub fn standard(d: usize) -> Self {
        LatentPrior::new(DVector::zeros(d), DMatrix::identity(d, d))
            .expect("identity prior is always valid")
    }

    pub fn d(&self) -> usize {
        self.mu0.len()
    }

    /// Lower Cholesky factor of Sigma0 (for sampling x = mu0 + L z).
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Solves Sigma0 · v = rhs.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    // Allocation-free quadratic form; this sits inside the sampler's hot loop.
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = self.mu0.len();
        let mut quad = 0.0;
        for i in 0..d {
            let di = x[i] - self.mu0[i];
            for j in 0..d {
                quad += di * self.inv[(i, j)] * (x[j] - self.mu0[j]);
            }
        }
        self.log_norm - 0.5 * quad
    }
}

/// Bernoulli success probability for binary field j at latent x, with the
/// logit clamped to ±35 so the result is strictly inside (0, 1).
pub fn bernoulli_prob(params: &ModelParams, x: &DVector<f64>, j: usize) -> f64 {
    assert!(j < params.n_binary, "field {j} is not a binary field");
    sigmoid(clamp_logit(params.linear_predictor(x, j)))
}

/// Log-likelihood of a single cell given latent x. Missing cells contribute
/// exactly 0 nats.
pub fn cell_loglik(params: &ModelParams, x: &DVector<f64>, cell: &Cell, j: usize) -> f64 {
    let value = match cell {
        Cell::Missing => return 0.0,
        Cell::Present(v) => *v,
    };
    if j < params.n_binary {
        let l = clamp_logit(params.linear_predictor(x, j));
        if value == 1.0 {
            log_sigmoid(l)
        } else {
            log_sigmoid(-l)
        }
    } else {
        let sigma = params.sigma[j - params.n_binary];
        let e = (value - params.linear_predictor(x, j)) / sigma;
        -0.5 * LOG_2PI - sigma.ln() - 0.5 * e * e
    }
}

/// Row log-likelihood: sum of cell terms (fields are conditionally
/// independent given x).
pub fn row_loglik(params: &ModelParams, x: &DVector<f64>, row: &[Cell]) -> f64 {
    assert_eq!(row.len(), params.n_fields(), "row length must be m+k");
    row.iter()
        .enumerate()
        .map(|(j, cell)| cell_loglik(params, x, cell, j))
        .sum()
}

/// Multivariate normal log-density of x under the prior.
pub fn latent_log_prior(prior: &LatentPrior, x: &DVector<f64>) -> f64 {
    prior.log_density(x)
}

/// Unnormalized log-posterior of x given one row: row_loglik + log prior.
pub fn row_log_posterior(
    params: &ModelParams,
    prior: &LatentPrior,
    x: &DVector<f64>,
    row: &[Cell],
) -> f64 {
    row_loglik(params, x, row) + latent_log_prior(prior, x)
}

/// Gradient of `row_loglik` with respect to the parameters.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub sigma: DVector<f64>,
}

/// Analytic gradient of `row_loglik` w.r.t. (A, b, sigma). Missing fields
/// contribute zero blocks.
pub fn grad_params_row(params: &ModelParams, x: &DVector<f64>, row: &[Cell]) -> ParamGrad {
    assert_eq!(row.len(), params.n_fields(), "row length must be m+k");
    let d = params.d();
    let m = params.n_binary;
    let mut ga = DMatrix::zeros(params.n_fields(), d);
    let mut gb = DVector::zeros(params.n_fields());
    let mut gs = DVector::zeros(params.sigma.len());
    for (j, cell) in row.iter().enumerate() {
        let value = match cell {
            Cell::Missing => continue,
            Cell::Present(v) => *v,
        };
        if j < m {
            let p = sigmoid(clamp_logit(params.linear_predictor(x, j)));
            let r = value - p;
            gb[j] = r;
            for t in 0..d {
                ga[(j, t)] = r * x[t];
            }
        } else {
            let sigma = params.sigma[j - m];
            let e = (value - params.linear_predictor(x, j)) / sigma;
            let scale = e / sigma;
            gb[j] = scale;
            for t in 0..d {
                ga[(j, t)] = scale * x[t];
            }
            gs[j - m] = (e * e - 1.0) / sigma;
        }
    }
    ParamGrad {
        a: ga,
        b: gb,
        sigma: gs,
    }
}

/// Analytic gradient of `row_log_posterior` with respect to x.
pub fn grad_latent_row(
    params: &ModelParams,
    prior: &LatentPrior,
    x: &DVector<f64>,
    row: &[Cell],
) -> DVector<f64> {
    assert_eq!(row.len(), params.n_fields(), "row length must be m+k");
    let d = params.d();
    let m = params.n_binary;
    let mut g = DVector::zeros(d);
    for (j, cell) in row.iter().enumerate() {
        let value = match cell {
            Cell::Missing => continue,
            Cell::Present(v) => *v,
        };
        let coeff = if j < m {
            value - sigmoid(clamp_logit(params.linear_predictor(x, j)))
        } else {
            let sigma = params.sigma[j - m];
            (value - params.linear_predictor(x, j)) / (sigma * sigma)
        };
        for t in 0..d {
            g[t] += coeff * params.a[(j, t)];
        }
    }
    g - prior.solve(&(x - &prior.mu0))
}

/// On-disk model format: parameters plus the latent prior, with matrices
/// flattened row-major. Serde's f64 formatting is shortest-round-trip, so a
/// save/load cycle reproduces every value bit-for-bit.
#[derive(Serialize, Deserialize)]
struct ModelJson {
    d: usize,
    field_names: Vec<String>,
    #[serde(rename = "A")]
    a: Vec<f64>,
    b: Vec<f64>,
    sigma: Vec<f64>,
    mu0: Vec<f64>,
    #[serde(rename = "Sigma0")]
    sigma0: Vec<f64>,
}

/// Converts a fitted model (params + prior) to its JSON value.
pub fn model_to_json(params: &ModelParams, prior: &LatentPrior) -> serde_json::Value {
    let d = params.d();
    let json = ModelJson {
        d,
        field_names: params.field_names.clone(),
        a: (0..params.n_fields())
            .flat_map(|j| (0..d).map(move |t| (j, t)))
            .map(|(j, t)| params.a[(j, t)])
            .collect(),
        b: params.b.iter().copied().collect(),
        sigma: params.sigma.iter().copied().collect(),
        mu0: prior.mu0.iter().copied().collect(),
        sigma0: (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| prior.sigma0[(i, j)])
            .collect(),
    };
    serde_json::to_value(json).expect("model serialization cannot fail")
}

/// Parses a model JSON value back into params + prior.
pub fn model_from_json(value: &serde_json::Value) -> Result<(ModelParams, LatentPrior)> {
    let json: ModelJson = serde_json::from_value(value.clone())?;
    let rows = json.field_names.len();
    if json.a.len() != rows * json.d {
        return Err(Error::Config(format!(
            "A has {} entries, expected {} x {}",
            json.a.len(),
            rows,
            json.d
        )));
    }
    if json.sigma0.len() != json.d * json.d || json.mu0.len() != json.d {
        return Err(Error::Config("prior dimensions disagree with d".into()));
    }
    if json.sigma.len() > rows {
        return Err(Error::Config("more sigma entries than fields".into()));
    }
    let n_binary = rows - json.sigma.len();
    let a = DMatrix::from_row_slice(rows, json.d, &json.a);
    let b = DVector::from_vec(json.b);
    let sigma = DVector::from_vec(json.sigma);
    let params = ModelParams::new(a, b, sigma, json.field_names, n_binary)?;
    let prior = LatentPrior::new(
        DVector::from_vec(json.mu0),
        DMatrix::from_row_slice(json.d, json.d, &json.sigma0),
    )?;
    Ok((params, prior))
}

/// Saves a model (params + prior) as pretty-printed JSON.
pub fn save_model<P: AsRef<Path>>(
    params: &ModelParams,
    prior: &LatentPrior,
    path: P,
) -> Result<()> {
    let value = model_to_json(params, prior);
    let mut file = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer_pretty(&mut file, &value)?;
    use std::io::Write;
    writeln!(file)?;
    Ok(())
}

/// Loads a model saved by [`save_model`].
pub fn load_model<P: AsRef<Path>>(path: P) -> Result<(ModelParams, LatentPrior)> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    model_from_json(&value)
}
