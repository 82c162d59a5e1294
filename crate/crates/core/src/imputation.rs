//! Probability estimates and expected values for missing cells.
//!
//! Imputation is a read-only consumer of a fitted model: it samples the
//! latent posterior given a record's observed cells and scores each missing
//! cell under the model. Nothing here feeds back into fitting.

use std::path::Path;

use rayon::prelude::*;

use crate::data_model::{Cell, Dataset, FieldKind};
use crate::error::Result;
use crate::inference::{sample_latent_posterior, SamplerConfig};
use crate::likelihood::{LatentPrior, ModelParams};
use crate::math::{derive_seed, sigmoid};

/// How the latent coordinate enters the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImputationMethod {
    /// Evaluate at the posterior mean only. Cheaper, ignores latent spread.
    PosteriorMean,
    /// Average the cell model over posterior samples (the default):
    /// marginalizes latent uncertainty into the estimate.
    PosteriorAveraged,
}

impl Default for ImputationMethod {
    fn default() -> Self {
        ImputationMethod::PosteriorAveraged
    }
}

impl std::fmt::Display for ImputationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ImputationMethod::PosteriorMean => write!(f, "posterior_mean"),
            ImputationMethod::PosteriorAveraged => write!(f, "posterior_averaged"),
        }
    }
}

/// One imputed cell.
#[derive(Debug, Clone)]
pub struct ImputationResult {
    pub record_id: String,
    pub field: String,
    pub kind: FieldKind,
    /// Success probability in (0,1) for binary fields; expected value for
    /// continuous fields.
    pub estimate: f64,
    /// Predictive standard deviation, continuous fields only; at least
    /// sigma_j since latent spread can only widen it.
    pub predictive_sd: Option<f64>,
    pub method: ImputationMethod,
}

/// Imputes every missing cell of one record.
///
/// `row` must be in model field order (binary fields first). The chain is
/// seeded from `config.seed` as given; batch callers derive per-record
/// seeds themselves. A fully observed row returns an empty list.
pub fn impute_record(
    params: &ModelParams,
    prior: &LatentPrior,
    record_id: &str,
    row: &[Cell],
    method: ImputationMethod,
    config: &SamplerConfig,
) -> Result<Vec<ImputationResult>> {
    let missing: Vec<usize> = row
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_missing())
        .map(|(j, _)| j)
        .collect();
    if missing.is_empty() {
        return Ok(Vec::new());
    }
    let posterior = sample_latent_posterior(params, prior, row, config).map_err(|e| match e {
        crate::error::Error::NonFiniteLogPosterior { .. } => {
            crate::error::Error::NonFiniteLogPosterior {
                record: record_id.to_string(),
            }
        }
        other => other,
    })?;
    let m = params.n_binary;
    let d = params.d();
    let mut results = Vec::with_capacity(missing.len());
    for j in missing {
        let name = params.field_names[j].clone();
        let (kind, estimate, predictive_sd) = match method {
            ImputationMethod::PosteriorMean => {
                let l = params.linear_predictor(&posterior.mean, j);
                if j < m {
                    (FieldKind::Binary, sigmoid(l.clamp(-crate::math::LOGIT_CLAMP, crate::math::LOGIT_CLAMP)), None)
                } else {
                    (FieldKind::Continuous, l, Some(params.sigma[j - m]))
                }
            }
            ImputationMethod::PosteriorAveraged => {
                // Per-sample linear predictors; one pass gives the mean of
                // the transformed values and the spread of the predictor.
                let s = posterior.samples.nrows();
                let mut mean_prob = 0.0;
                let mut mean_l = 0.0;
                let mut mean_l2 = 0.0;
                for row_idx in 0..s {
                    let mut l = params.b[j];
                    for t in 0..d {
                        l += params.a[(j, t)] * posterior.samples[(row_idx, t)];
                    }
                    if j < m {
                        mean_prob +=
                            sigmoid(l.clamp(-crate::math::LOGIT_CLAMP, crate::math::LOGIT_CLAMP));
                    }
                    mean_l += l;
                    mean_l2 += l * l;
                }
                let s = s as f64;
                mean_prob /= s;
                mean_l /= s;
                let var_l = (mean_l2 / s - mean_l * mean_l).max(0.0);
                if j < m {
                    (FieldKind::Binary, mean_prob, None)
                } else {
                    let sigma = params.sigma[j - m];
                    (
                        FieldKind::Continuous,
                        mean_l,
                        Some((sigma * sigma + var_l).sqrt()),
                    )
                }
            }
        };
        results.push(ImputationResult {
            record_id: record_id.to_string(),
            field: name,
            kind,
            estimate,
            predictive_sd,
            method,
        });
    }
    Ok(results)
}

/// Imputes every missing cell in the dataset: `impute_record` per record
/// with a per-record seed derived from `config.seed` and the record id, in
/// parallel, results in record order.
pub fn impute_dataset(
    params: &ModelParams,
    prior: &LatentPrior,
    dataset: &Dataset,
    method: ImputationMethod,
    config: &SamplerConfig,
) -> Result<Vec<ImputationResult>> {
    let rows = dataset.model_rows();
    let per_record: Vec<Vec<ImputationResult>> = rows
        .par_iter()
        .zip(dataset.record_ids().par_iter())
        .map(|(row, id)| {
            let record_config = SamplerConfig {
                seed: derive_seed(config.seed, id),
                ..config.clone()
            };
            impute_record(params, prior, id, row, method, &record_config)
        })
        .collect::<Result<_>>()?;
    Ok(per_record.into_iter().flatten().collect())
}

/// Writes `record_id,field,kind,estimate,predictive_sd,method` rows; the
/// predictive_sd column is empty for binary fields. A header is always
/// written, so zero imputations still produce a parseable file.
pub fn write_imputations_csv<P: AsRef<Path>>(
    results: &[ImputationResult],
    path: P,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(["record_id", "field", "kind", "estimate", "predictive_sd", "method"])?;
    for r in results {
        writer.write_record([
            r.record_id.as_str(),
            r.field.as_str(),
            &r.kind.to_string(),
            &format!("{}", r.estimate),
            &r.predictive_sd.map_or(String::new(), |sd| format!("{}", sd)),
            &r.method.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
