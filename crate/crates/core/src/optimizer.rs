//! M-step and the outer Monte-Carlo EM loop.
//!
//! The fit alternates a sampling E-step with an M-step that runs full-batch
//! gradient ascent (Armijo backtracking) on the Monte-Carlo estimate of the
//! expected log-likelihood minus `penalty_weight` times the orthonormality
//! penalty ‖AᵀA−I‖_F². Noise sigmas are updated jointly in log-space.
//!
//! E-step chains are re-seeded identically every iteration (common random
//! numbers): the EM update is then a deterministic map of the parameters,
//! so as the iterates settle the sampled chains — and with them the
//! objective estimate — become literally constant, which lets the
//! small-change convergence rule fire exactly rather than hovering at a
//! Monte-Carlo noise floor.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data_model::{Cell, Dataset};
use crate::error::{Error, Result};
use crate::inference::{e_step, LatentPosterior, SamplerConfig};
use crate::likelihood::{latent_log_prior, LatentPrior, ModelParams};
use crate::math::{batch_means_mcse, log_sigmoid, logit, LOGIT_CLAMP};

/// Everything `fit` needs to know.
#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Latent dimension.
    pub d: usize,
    pub max_em_iters: usize,
    /// Convergence threshold on the per-record objective change (nats); the
    /// change must stay below it for 3 consecutive iterations.
    pub em_tol: f64,
    /// Orthonormality budget checked after fitting.
    pub gamma: f64,
    /// Penalty weight; `None` means 10·n (n = record count).
    pub penalty_weight: Option<f64>,
    /// Inner gradient-ascent iteration cap per M-step.
    pub mstep_max_iters: usize,
    /// Inner loop stops early once a step gains at most this many nats;
    /// 0 stops only when the gain underflows to exactly zero.
    pub mstep_tol: f64,
    /// Retained posterior samples per record per E-step.
    pub mc_samples: usize,
    /// Discarded burn-in draws per chain.
    pub burn_in: usize,
    /// Proposal standard deviation; `None` means 2.4/sqrt(d).
    pub proposal_scale: Option<f64>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            d: 2,
            max_em_iters: 200,
            em_tol: 1e-4,
            gamma: 1e-2,
            penalty_weight: None,
            mstep_max_iters: 12,
            mstep_tol: 0.0,
            mc_samples: 500,
            burn_in: 200,
            proposal_scale: None,
            seed: 0,
        }
    }
}

impl FitConfig {
    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_samples: self.mc_samples,
            burn_in: self.burn_in,
            proposal_scale: self.proposal_scale,
            seed: self.seed,
        }
    }

    /// Rejects impossible settings before any data is touched.
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("latent dimension d must be at least 1".into()));
        }
        if self.em_tol <= 0.0 || self.gamma <= 0.0 {
            return Err(Error::Config("em_tol and gamma must be positive".into()));
        }
        if self.mstep_tol < 0.0 {
            return Err(Error::Config("mstep_tol must be nonnegative".into()));
        }
        if let Some(w) = self.penalty_weight {
            if !(w >= 0.0) {
                return Err(Error::Config("penalty_weight must be nonnegative".into()));
            }
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// One EM iteration's reported state.
#[derive(Debug, Clone, Serialize)]
pub struct EmIteration {
    /// Which EM iteration this row describes (0-based).
    pub iter: usize,
    /// Monte-Carlo estimate of the expected log-posterior
    /// Σ_records E[row_loglik + latent_log_prior], after this iteration's
    /// M-step, over this iteration's samples.
    pub objective: f64,
    /// Batch-means Monte-Carlo standard error of `objective`.
    pub mcse: f64,
    /// The M-step's improvement of its penalized objective on this
    /// iteration's samples. Both sides of the difference use identical
    /// samples, so sampling noise cancels; this is the quantity the
    /// stopping rule compares against `em_tol`.
    pub mstep_gain: f64,
    /// Orthonormality penalty ‖AᵀA−I‖_F² of the updated basis.
    pub penalty: f64,
    /// Wall-clock seconds spent on this iteration.
    pub wall_time_s: f64,
}

/// Fit trace: per-iteration records plus the final convergence status.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub iterations: Vec<EmIteration>,
    pub converged: bool,
    pub iterations_run: usize,
    /// Diagnostics such as constant-field flags and line-search failures.
    pub warnings: Vec<String>,
}

impl FitReport {
    /// Writes JSON lines: one object per EM iteration, then one summary
    /// object with the convergence status and warnings.
    pub fn write_jsonl<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::File::create(path.as_ref())?;
        for it in &self.iterations {
            writeln!(f, "{}", serde_json::to_string(it)?)?;
        }
        let summary = serde_json::json!({
            "converged": self.converged,
            "iterations_run": self.iterations_run,
            "warnings": self.warnings,
        });
        writeln!(f, "{}", serde_json::to_string(&summary)?)?;
        Ok(())
    }
}

/// Squared Frobenius distance of AᵀA from the identity.
pub fn orthonormality_penalty(a: &DMatrix<f64>) -> f64 {
    let d = a.ncols();
    let gram = a.transpose() * a;
    let mut pen = 0.0;
    for t in 0..d {
        for u in 0..d {
            let g = gram[(t, u)] - if t == u { 1.0 } else { 0.0 };
            pen += g * g;
        }
    }
    pen
}

/// M-step settings; `fit` derives one from its `FitConfig`.
#[derive(Debug, Clone)]
pub struct MStepConfig {
    pub penalty_weight: f64,
    pub max_iters: usize,
    /// Stop once an accepted step improves the objective by less than this.
    pub tol: f64,
}

/// M-step diagnostics.
#[derive(Debug, Clone)]
pub struct MStepDiag {
    /// Penalized objective (Q − w·penalty) at the entering parameters,
    /// evaluated on the given samples.
    pub entering_objective: f64,
    /// Penalized objective at the returned parameters, same samples;
    /// never below `entering_objective`.
    pub objective: f64,
    /// Accepted ascent steps.
    pub iterations: usize,
    /// Last accepted line-search step size; feeding it back into the next
    /// M-step's `step_hint` skips re-probing the curvature scale.
    pub final_step: f64,
    /// True when the very first line search failed and the entering
    /// parameters were returned unchanged.
    pub line_search_failed: bool,
}

impl MStepDiag {
    /// How much this M-step improved its objective on its own samples.
    /// Identical samples appear on both sides, so Monte-Carlo noise
    /// cancels: this is the clean progress measure the EM stopping rule
    /// watches.
    pub fn gain(&self) -> f64 {
        self.objective - self.entering_objective
    }
}

// ---------------------------------------------------------------------------
// Internal flat representations for the hot loops.

/// Observed cells of one record, split by kind: (model field index, value).
struct ObsRow {
    bin: Vec<(u32, f64)>,
    cont: Vec<(u32, f64)>,
}

fn build_obs(rows: &[Vec<Cell>], n_binary: usize) -> Vec<ObsRow> {
    rows.iter()
        .map(|row| {
            let mut bin = Vec::new();
            let mut cont = Vec::new();
            for (j, cell) in row.iter().enumerate() {
                if let Cell::Present(v) = cell {
                    if j < n_binary {
                        bin.push((j as u32, *v));
                    } else {
                        cont.push((j as u32, *v));
                    }
                }
            }
            ObsRow { bin, cont }
        })
        .collect()
}

/// Posterior samples with consecutive Metropolis rejections collapsed into
/// weights. Averaging over the weighted unique draws reproduces the average
/// over the raw chains exactly; it just skips re-evaluating duplicates.
struct Collapsed {
    d: usize,
    /// Retained chain length S (the Monte-Carlo divisor).
    s: f64,
    /// Unique draws, row-major U×d.
    xs: Vec<f64>,
    /// Run length of each unique draw.
    wt: Vec<f64>,
    /// Per-record [start, end) range over the unique draws.
    offsets: Vec<(usize, usize)>,
}

fn collapse(posteriors: &[LatentPosterior]) -> Collapsed {
    let d = posteriors.first().map_or(0, |p| p.samples.ncols());
    let s = posteriors.first().map_or(1, |p| p.samples.nrows());
    let mut xs = Vec::new();
    let mut wt: Vec<f64> = Vec::new();
    let mut offsets = Vec::with_capacity(posteriors.len());
    for posterior in posteriors {
        let start = wt.len();
        let samples = &posterior.samples;
        for row in 0..samples.nrows() {
            let is_dup = row > 0 && (0..d).all(|t| samples[(row, t)] == samples[(row - 1, t)]);
            if is_dup {
                *wt.last_mut().expect("run seen") += 1.0;
            } else {
                for t in 0..d {
                    xs.push(samples[(row, t)]);
                }
                wt.push(1.0);
            }
        }
        offsets.push((start, wt.len()));
    }
    Collapsed {
        d,
        s: s as f64,
        xs,
        wt,
        offsets,
    }
}

/// Flat parameter vector [A row-major | b | ln σ] for the ascent loop.
struct Theta {
    n_fields: usize,
    d: usize,
    n_binary: usize,
    v: Vec<f64>,
}

impl Theta {
    fn from_params(params: &ModelParams) -> Theta {
        let (p, d) = (params.n_fields(), params.d());
        let mut v = Vec::with_capacity(p * d + p + params.sigma.len());
        for j in 0..p {
            for t in 0..d {
                v.push(params.a[(j, t)]);
            }
        }
        v.extend(params.b.iter());
        v.extend(params.sigma.iter().map(|s| s.ln()));
        Theta {
            n_fields: p,
            d,
            n_binary: params.n_binary,
            v,
        }
    }

    fn to_params(&self, field_names: Vec<String>) -> ModelParams {
        let (p, d) = (self.n_fields, self.d);
        let a = DMatrix::from_row_slice(p, d, &self.v[..p * d]);
        let b = DVector::from_column_slice(&self.v[p * d..p * d + p]);
        let sigma =
            DVector::from_iterator(p - self.n_binary, self.v[p * d + p..].iter().map(|l| l.exp()));
        ModelParams::new(a, b, sigma, field_names, self.n_binary)
            .expect("ascent iterates stay finite")
    }
}

/// Evaluates Q − w·penalty at `theta` over the collapsed samples; fills
/// `grad` (same layout as theta) when provided.
fn penalized_objective(
    theta: &[f64],
    dims: (usize, usize, usize), // (n_fields, d, n_binary)
    obs: &[ObsRow],
    col: &Collapsed,
    weight: f64,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let (p, d, m) = dims;
    let (a, rest) = theta.split_at(p * d);
    let (b, ls) = rest.split_at(p);
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut q = 0.0;
    for (r, row) in obs.iter().enumerate() {
        let (start, end) = col.offsets[r];
        for u in start..end {
            let x = &col.xs[u * d..u * d + d];
            let w_u = col.wt[u];
            for &(j, y) in &row.bin {
                let j = j as usize;
                let mut l = b[j];
                for t in 0..d {
                    l += a[j * d + t] * x[t];
                }
                l = l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                // One exp serves the log-likelihood for both outcomes and
                // the success probability needed by the gradient.
                let (log_sig_pos, log_sig_neg, prob) = if l >= 0.0 {
                    let e = (-l).exp();
                    let l1p = e.ln_1p();
                    (-l1p, -l - l1p, 1.0 / (1.0 + e))
                } else {
                    let e = l.exp();
                    let l1p = e.ln_1p();
                    (l - l1p, -l1p, e / (1.0 + e))
                };
                q += w_u * if y == 1.0 { log_sig_pos } else { log_sig_neg };
                if let Some(g) = grad.as_deref_mut() {
                    let res = w_u * (y - prob);
                    g[p * d + j] += res;
                    for t in 0..d {
                        g[j * d + t] += res * x[t];
                    }
                }
            }
            for &(j, z) in &row.cont {
                let j = j as usize;
                let sig = ls[j - m].exp();
                let mut mu = b[j];
                for t in 0..d {
                    mu += a[j * d + t] * x[t];
                }
                let e = (z - mu) / sig;
                q += w_u * (-0.5 * 1.8378770664093453 - ls[j - m] - 0.5 * e * e);
                if let Some(g) = grad.as_deref_mut() {
                    let scale = w_u * e / sig;
                    g[p * d + j] += scale;
                    for t in 0..d {
                        g[j * d + t] += scale * x[t];
                    }
                    g[p * d + p + (j - m)] += w_u * (e * e - 1.0);
                }
            }
        }
    }
    q /= col.s;
    if let Some(g) = grad.as_deref_mut() {
        for v in g.iter_mut() {
            *v /= col.s;
        }
    }

    // Orthonormality penalty and its gradient 4·A·(AᵀA − I).
    let mut gram = vec![0.0; d * d];
    for j in 0..p {
        for t in 0..d {
            for u in 0..d {
                gram[t * d + u] += a[j * d + t] * a[j * d + u];
            }
        }
    }
    let mut pen = 0.0;
    for t in 0..d {
        for u in 0..d {
            let gv = gram[t * d + u] - if t == u { 1.0 } else { 0.0 };
            gram[t * d + u] = gv;
            pen += gv * gv;
        }
    }
    if let Some(g) = grad.as_deref_mut() {
        for j in 0..p {
            for t in 0..d {
                let mut acc = 0.0;
                for u in 0..d {
                    acc += a[j * d + u] * gram[u * d + t];
                }
                g[j * d + t] -= weight * 4.0 * acc;
            }
        }
    }
    q - weight * pen
}

fn m_step_collapsed(
    obs: &[ObsRow],
    col: &Collapsed,
    current: &ModelParams,
    config: &MStepConfig,
    step_hint: f64,
) -> (ModelParams, MStepDiag) {
    let dims = (current.n_fields(), current.d(), current.n_binary);
    let mut theta = Theta::from_params(current);
    let n_par = theta.v.len();
    let mut grad = vec![0.0; n_par];
    let mut f = penalized_objective(&theta.v, dims, obs, col, config.penalty_weight, Some(&mut grad));
    let entering = f;
    let scale = 1.0 + f.abs();

    // Armijo backtracking with a persistent step size: a step accepted
    // without any halving doubles the next line search's starting point,
    // otherwise the accepted size carries over — the loop adapts to the
    // local curvature instead of re-probing from scratch. Candidates are
    // evaluated with their gradient in the same pass — the accumulation
    // rides along on values the objective needs anyway, and accepted
    // candidates (the common case) then need no second pass.
    let mut step: f64 = if step_hint.is_finite() && step_hint > 0.0 {
        step_hint
    } else {
        1.0
    };
    let mut candidate = vec![0.0; n_par];
    let mut candidate_grad = vec![0.0; n_par];
    let mut accepted = 0;
    let mut stalled = false;
    let mut done = false;
    for _ in 0..config.max_iters {
        let gsq: f64 = grad.iter().map(|g| g * g).sum();
        if gsq.sqrt() <= 1e-12 * scale {
            // Stationary given these samples: the M-step is done.
            break;
        }
        let mut t = step.min(1e6);
        let mut halvings = 0;
        let mut improved = false;
        while t > 1e-18 {
            for i in 0..n_par {
                candidate[i] = theta.v[i] + t * grad[i];
            }
            let f_new = penalized_objective(
                &candidate,
                dims,
                obs,
                col,
                config.penalty_weight,
                Some(&mut candidate_grad),
            );
            if f_new >= f + 1e-4 * t * gsq {
                std::mem::swap(&mut theta.v, &mut candidate);
                std::mem::swap(&mut grad, &mut candidate_grad);
                let gain = f_new - f;
                f = f_new;
                step = if halvings == 0 { t * 2.0 } else { t };
                accepted += 1;
                improved = true;
                // Gain at or below the floor: progress has stalled, stop
                // rather than burn passes.
                done = gain <= config.tol;
                break;
            }
            t *= 0.5;
            halvings += 1;
        }
        if !improved {
            stalled = true;
            break;
        }
        if done {
            break;
        }
    }
    (
        theta.to_params(current.field_names.clone()),
        MStepDiag {
            entering_objective: entering,
            objective: f.max(entering),
            iterations: accepted,
            final_step: step,
            // Failing to improve along a non-negligible gradient before any
            // step was accepted is the pathological case worth flagging.
            line_search_failed: stalled && accepted == 0,
        },
    )
}

/// One M-step: full-batch gradient ascent with Armijo backtracking on the
/// Monte-Carlo expected log-likelihood minus the weighted orthonormality
/// penalty, with sigmas handled in log-space.
///
/// `rows` are model-ordered records (binary fields first) aligned with
/// `posteriors`. The returned parameters never score worse than `current`
/// on the same samples; if the very first line search fails the entering
/// parameters come back unchanged with `line_search_failed` set.
pub fn m_step(
    rows: &[Vec<Cell>],
    posteriors: &[LatentPosterior],
    current: &ModelParams,
    config: &MStepConfig,
) -> (ModelParams, MStepDiag) {
    let obs = build_obs(rows, current.n_binary);
    let col = collapse(posteriors);
    m_step_collapsed(&obs, &col, current, config, 1.0)
}

/// Data-driven starting point: intercepts at the observed logit-prevalence
/// (clamped to ±4) or observed mean, sigmas at the observed standard
/// deviation (floored at 1e-3), and a basis drawn as 0.1-scaled Gaussian
/// noise then QR-orthonormalized.
pub fn initialize_params(dataset: &Dataset, d: usize, seed: u64) -> Result<ModelParams> {
    let p = dataset.n_fields();
    let m = dataset.n_binary();
    if d == 0 || d > p {
        return Err(Error::Config(format!(
            "latent dimension must be in 1..={} (got {})",
            p, d
        )));
    }
    let rows = dataset.model_rows();
    let mut b = DVector::zeros(p);
    let mut sigma = DVector::zeros(p - m);
    for j in 0..p {
        let observed: Vec<f64> = rows
            .iter()
            .filter_map(|row| match row[j] {
                Cell::Present(v) => Some(v),
                Cell::Missing => None,
            })
            .collect();
        if j < m {
            let prevalence = if observed.is_empty() {
                0.5
            } else {
                observed.iter().sum::<f64>() / observed.len() as f64
            };
            b[j] = if prevalence <= 0.0 {
                -4.0
            } else if prevalence >= 1.0 {
                4.0
            } else {
                logit(prevalence).clamp(-4.0, 4.0)
            };
        } else {
            let n_obs = observed.len().max(1) as f64;
            let mean = observed.iter().sum::<f64>() / n_obs;
            let var = observed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_obs;
            b[j] = mean;
            sigma[j - m] = var.sqrt().max(1e-3);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = DMatrix::from_fn(p, d, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
    let a = orthonormalize(&noise);
    ModelParams::new(a, b, sigma, dataset.model_field_names(), m)
}

/// Thin-QR orthonormalization of the columns.
fn orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = a.clone().qr();
    let q = qr.q();
    q.columns(0, a.ncols()).into_owned()
}

/// Per-record pass that scores the retained chains at `params`: returns the
/// summed posterior-mean objective and its pooled batch-means standard error.
fn objective_and_mcse(
    params: &ModelParams,
    prior: &LatentPrior,
    obs: &[ObsRow],
    col: &Collapsed,
) -> (f64, f64) {
    let d = col.d;
    let (p, m) = (params.n_fields(), params.n_binary);
    let theta = Theta::from_params(params);
    let (a, rest) = theta.v.split_at(p * d);
    let (b, ls) = rest.split_at(p);
    let s_len = col.s as usize;
    let mut chain = vec![0.0; s_len];
    let mut total = 0.0;
    let mut mcse_sq = 0.0;
    let mut x = DVector::zeros(d);
    for (r, row) in obs.iter().enumerate() {
        let (start, end) = col.offsets[r];
        let mut pos = 0;
        for u in start..end {
            let xs = &col.xs[u * d..u * d + d];
            let mut lp = 0.0;
            for &(j, y) in &row.bin {
                let j = j as usize;
                let mut l = b[j];
                for t in 0..d {
                    l += a[j * d + t] * xs[t];
                }
                l = l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                lp += if y == 1.0 { log_sigmoid(l) } else { log_sigmoid(-l) };
            }
            for &(j, z) in &row.cont {
                let j = j as usize;
                let sig = ls[j - m].exp();
                let mut mu = b[j];
                for t in 0..d {
                    mu += a[j * d + t] * xs[t];
                }
                let e = (z - mu) / sig;
                lp += -0.5 * 1.8378770664093453 - ls[j - m] - 0.5 * e * e;
            }
            for t in 0..d {
                x[t] = xs[t];
            }
            lp += latent_log_prior(prior, &x);
            // Expand the collapsed run back to chain order for batch means.
            for _ in 0..col.wt[u] as usize {
                chain[pos] = lp;
                pos += 1;
            }
        }
        total += chain.iter().sum::<f64>() / col.s;
        let se = batch_means_mcse(&chain, 25);
        mcse_sq += se * se;
    }
    (total, mcse_sq.sqrt())
}

/// Fit result: parameters, posterior-mean latents (one row per record, in
/// dataset order), and the iteration trace.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub params: ModelParams,
    pub latents: DMatrix<f64>,
    pub report: FitReport,
}

/// Runs Monte-Carlo EM on the dataset.
///
/// Every field must have at least one observed cell. Constant observed
/// fields are fit (the intercept absorbs them) but flagged in the report
/// warnings. A non-finite objective aborts with a diagnostic state dump.
pub fn fit(dataset: &Dataset, config: &FitConfig) -> Result<FitOutput> {
    config.validate()?;
    let started = Instant::now();
    let n = dataset.n_records();
    if n == 0 {
        return Err(Error::Dataset("cannot fit an empty dataset".into()));
    }
    let rows = dataset.model_rows();
    let names = dataset.model_field_names();
    let mut warnings = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let observed: Vec<f64> = rows
            .iter()
            .filter_map(|row| match row[j] {
                Cell::Present(v) => Some(v),
                Cell::Missing => None,
            })
            .collect();
        if observed.is_empty() {
            return Err(Error::Config(format!(
                "field '{}' has no observed cells; drop it before fitting",
                name
            )));
        }
        if observed.iter().all(|v| *v == observed[0]) {
            warnings.push(format!(
                "field '{}' is constant over its observed cells; its loading is weakly identified",
                name
            ));
        }
    }

    let mut params = initialize_params(dataset, config.d, config.seed)?;
    let prior = LatentPrior::standard(config.d);
    let weight = config.penalty_weight.unwrap_or(10.0 * n as f64);
    let mstep_config = MStepConfig {
        penalty_weight: weight,
        max_iters: config.mstep_max_iters,
        tol: config.mstep_tol,
    };
    let obs = build_obs(&rows, params.n_binary);
    let sampler = config.sampler();

    let mut iterations = Vec::new();
    let mut converged = false;
    let mut small_changes = 0;
    let mut iterations_run = 0;
    let mut step_hint = 1.0;
    let mut acceptance_lo = f64::INFINITY;
    let mut acceptance_hi = f64::NEG_INFINITY;
    let mut acceptance_outliers = 0usize;
    for iter in 0..config.max_em_iters {
        let iter_started = Instant::now();
        iterations_run = iter + 1;
        let posteriors = e_step(&params, &prior, dataset, &sampler)?;
        for posterior in &posteriors {
            acceptance_lo = acceptance_lo.min(posterior.acceptance_rate);
            acceptance_hi = acceptance_hi.max(posterior.acceptance_rate);
            if !(0.1..=0.7).contains(&posterior.acceptance_rate) {
                acceptance_outliers += 1;
            }
        }
        let col = collapse(&posteriors);
        let (new_params, diag) = m_step_collapsed(&obs, &col, &params, &mstep_config, step_hint);
        step_hint = diag.final_step;
        if diag.line_search_failed {
            warnings.push(format!(
                "EM iteration {}: M-step line search failed; parameters left unchanged",
                iter
            ));
        }
        let (objective, mcse) = objective_and_mcse(&new_params, &prior, &obs, &col);
        let penalty = orthonormality_penalty(&new_params.a);
        params = new_params;
        iterations.push(EmIteration {
            iter,
            objective,
            mcse,
            mstep_gain: diag.gain(),
            penalty,
            wall_time_s: iter_started.elapsed().as_secs_f64(),
        });
        if !objective.is_finite() {
            let dump = serde_json::json!({
                "iteration": iter,
                "objective": format!("{}", objective),
                "penalty": penalty,
                "b": params.b.iter().copied().collect::<Vec<f64>>(),
                "sigma": params.sigma.iter().copied().collect::<Vec<f64>>(),
                "a_frobenius": params.a.norm(),
                "elapsed_s": started.elapsed().as_secs_f64(),
            })
            .to_string();
            return Err(Error::Divergence {
                iteration: iter,
                dump,
            });
        }
        // Convergence watches the same-sample M-step gain: comparing the
        // objective at the entering and updated parameters on identical
        // samples removes the chain-resampling noise that an
        // across-iteration difference of estimates would carry, so the
        // rule measures optimization progress and nothing else.
        let change = diag.gain().abs() / n as f64;
        if change < config.em_tol {
            small_changes += 1;
        } else {
            small_changes = 0;
        }
        if small_changes >= 3 {
            converged = true;
            break;
        }
    }

    // Out-of-range Metropolis acceptance rates are a mixing diagnostic,
    // not a failure: report them once, summarized.
    if acceptance_outliers > 0 {
        warnings.push(format!(
            "{} of {} record E-steps had a Metropolis acceptance rate outside [0.1, 0.7] \
             (observed range {:.3}..{:.3}); consider adjusting --proposal-scale",
            acceptance_outliers,
            n * iterations_run,
            acceptance_lo,
            acceptance_hi
        ));
    }

    // Score the final parameters with one more E-step so the returned
    // latents (and anything recomputed from the saved model with the same
    // seed) match the fitted parameters exactly.
    let posteriors = e_step(&params, &prior, dataset, &sampler)?;
    let mut latents = DMatrix::zeros(n, config.d);
    for (r, posterior) in posteriors.iter().enumerate() {
        for t in 0..config.d {
            latents[(r, t)] = posterior.mean[t];
        }
    }

    Ok(FitOutput {
        params,
        latents,
        report: FitReport {
            iterations,
            converged,
            iterations_run,
            warnings,
        },
    })
}
