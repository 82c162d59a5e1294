//! Downstream statistics: Pearson correlations with significance stars and
//! delta-vs-delta least-squares regressions.
//!
//! Missing values are handled by complete-case deletion per comparison.
//! p-values come from the exact t-distribution CDF (regularized incomplete
//! beta under the hood) and are clamped into (0, 1] so that a numerically
//! perfect fit still reports a valid probability.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Significance stars: `*` p<0.05, `**` p<0.01, `***` p<0.001 (strict).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stars {
    None,
    One,
    Two,
    Three,
}

impl Stars {
    pub fn from_p(p: f64) -> Stars {
        if p < 0.001 {
            Stars::Three
        } else if p < 0.01 {
            Stars::Two
        } else if p < 0.05 {
            Stars::One
        } else {
            Stars::None
        }
    }
}

impl std::fmt::Display for Stars {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stars::None => "",
            Stars::One => "*",
            Stars::Two => "**",
            Stars::Three => "***",
        };
        write!(f, "{}", s)
    }
}

/// A Pearson correlation with its two-sided significance test.
#[derive(Debug, Clone)]
pub struct PearsonStat {
    pub r: f64,
    /// Two-sided p from the t distribution with n_pairs − 2 degrees of
    /// freedom, in (0, 1].
    pub p_value: f64,
    pub n_pairs: usize,
    pub stars: Stars,
}

/// One correlation-table entry: an external metric against a latent axis.
#[derive(Debug, Clone)]
pub struct CorrelationResult {
    pub metric: String,
    /// 1-based latent axis index.
    pub axis: usize,
    pub stat: PearsonStat,
}

/// Least-squares line fit of y on x with the slope's significance test.
#[derive(Debug, Clone, Serialize)]
pub struct RegressionResult {
    pub slope: f64,
    pub intercept: f64,
    /// Two-sided p for slope = 0, in (0, 1].
    pub p_value: f64,
    /// Squared correlation, in [0, 1].
    pub r_squared: f64,
    pub n: usize,
}

/// Keeps indices where both series are present.
fn complete_pairs(x: &[Option<f64>], y: &[Option<f64>]) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (a, b) in x.iter().zip(y.iter()) {
        if let (Some(a), Some(b)) = (a, b) {
            xs.push(*a);
            ys.push(*b);
        }
    }
    (xs, ys)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-sided p-value for a t statistic with the given degrees of freedom.
pub fn two_sided_t_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return f64::MIN_POSITIVE;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    // Lower tail at -|t| keeps precision where the upper tail underflows.
    let p = 2.0 * dist.cdf(-t.abs());
    p.clamp(f64::MIN_POSITIVE, 1.0)
}

/// Pearson correlation over the complete pairs of two aligned series.
///
/// Requires at least 3 complete pairs and nonzero variance in both series.
pub fn pearson(x: &[Option<f64>], y: &[Option<f64>]) -> Result<PearsonStat> {
    if x.len() != y.len() {
        return Err(Error::Config(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let (xs, ys) = complete_pairs(x, y);
    let n = xs.len();
    if n < 3 {
        return Err(Error::InsufficientPairs { needed: 3, found: n });
    }
    let (mx, my) = (mean(&xs), mean(&ys));
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("first series is constant".into()));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("second series is constant".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let denom = 1.0 - r * r;
    let t = if denom <= 0.0 {
        f64::INFINITY * r.signum()
    } else {
        r * (df / denom).sqrt()
    };
    let p_value = two_sided_t_p(t, df);
    Ok(PearsonStat {
        r,
        p_value,
        n_pairs: n,
        stars: Stars::from_p(p_value),
    })
}

/// Least-squares regression of dy on dx over complete pairs.
///
/// Same preconditions as `pearson` on dx; R² is the squared correlation
/// (equivalently 1 − SSE/SST), clamped into [0, 1].
pub fn ols_delta_regression(dx: &[Option<f64>], dy: &[Option<f64>]) -> Result<RegressionResult> {
    if dx.len() != dy.len() {
        return Err(Error::Config(format!(
            "series lengths differ: {} vs {}",
            dx.len(),
            dy.len()
        )));
    }
    let (xs, ys) = complete_pairs(dx, dy);
    let n = xs.len();
    if n < 3 {
        return Err(Error::InsufficientPairs { needed: 3, found: n });
    }
    let (mx, my) = (mean(&xs), mean(&ys));
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dxi = xs[i] - mx;
        let dyi = ys[i] - my;
        sxx += dxi * dxi;
        syy += dyi * dyi;
        sxy += dxi * dyi;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("regressor is constant".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = (syy - slope * sxy).max(0.0);
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    };
    let df = (n - 2) as f64;
    let se_slope = (sse / df / sxx).sqrt();
    let t = if se_slope == 0.0 {
        f64::INFINITY * slope.signum()
    } else {
        slope / se_slope
    };
    let p_value = two_sided_t_p(t, df);
    Ok(RegressionResult {
        slope,
        intercept,
        p_value,
        r_squared,
        n,
    })
}

/// Per-record latent coordinates keyed by record id, as read back from a
/// latents CSV (`record_id,x_1,...,x_d`).
#[derive(Debug, Clone)]
pub struct LatentTable {
    pub record_ids: Vec<String>,
    pub d: usize,
    /// coords[record][axis]
    pub coords: Vec<Vec<f64>>,
}

pub fn load_latents_csv<P: AsRef<Path>>(path: P) -> Result<LatentTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "record_id" {
        return Err(Error::Schema(
            "latents CSV must start with a record_id column followed by axis columns".into(),
        ));
    }
    let d = headers.len() - 1;
    let mut record_ids = Vec::new();
    let mut coords = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(d);
        for t in 0..d {
            let raw = &record[t + 1];
            let v: f64 = raw.parse().map_err(|_| Error::Cell {
                row: i + 1,
                column: headers[t + 1].to_string(),
                message: format!("'{}' is not a number", raw),
            })?;
            row.push(v);
        }
        record_ids.push(record[0].to_string());
        coords.push(row);
    }
    Ok(LatentTable {
        record_ids,
        d,
        coords,
    })
}

/// External metric columns keyed by record id. Cells may be missing
/// (empty or `NA`); they drop out pairwise during analysis.
#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub record_ids: Vec<String>,
    pub names: Vec<String>,
    /// columns[metric][record]
    pub columns: Vec<Vec<Option<f64>>>,
}

pub fn load_metrics_csv<P: AsRef<Path>>(path: P) -> Result<MetricsTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Schema(
            "metrics CSV needs a record id column plus at least one metric".into(),
        ));
    }
    let names: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let mut record_ids = Vec::new();
    let mut columns = vec![Vec::new(); names.len()];
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        record_ids.push(record[0].to_string());
        for (c, column) in columns.iter_mut().enumerate() {
            let raw = record[c + 1].trim();
            if crate::data_model::is_missing_token(raw) {
                column.push(None);
            } else {
                let v: f64 = raw.parse().map_err(|_| Error::Cell {
                    row: i + 1,
                    column: names[c].clone(),
                    message: format!("'{}' is not a number", raw),
                })?;
                column.push(Some(v));
            }
        }
    }
    Ok(MetricsTable {
        record_ids,
        names,
        columns,
    })
}

/// One table cell: a computed correlation or the reason it was skipped.
#[derive(Debug, Clone)]
pub enum TableCell {
    Stat(PearsonStat),
    NotAvailable(String),
}

/// One table row: a metric against every latent axis.
#[derive(Debug, Clone)]
pub struct CorrelationRow {
    pub metric: String,
    pub cells: Vec<TableCell>,
}

/// Correlates every metric with every latent axis over records present in
/// both tables. Returns the table rows plus warnings for unmatched record
/// ids and skipped cells.
pub fn correlation_table(
    latents: &LatentTable,
    metrics: &MetricsTable,
) -> (Vec<CorrelationRow>, Vec<String>) {
    let mut warnings = Vec::new();
    let index: HashMap<&str, usize> = latents
        .record_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    // Metric rows aligned to the latent table's record order.
    let mut metric_row: Vec<Option<usize>> = Vec::with_capacity(metrics.record_ids.len());
    let mut unmatched = Vec::new();
    for id in &metrics.record_ids {
        match index.get(id.as_str()) {
            Some(i) => metric_row.push(Some(*i)),
            None => {
                metric_row.push(None);
                unmatched.push(id.clone());
            }
        }
    }
    if !unmatched.is_empty() {
        warnings.push(format!(
            "{} metric record(s) missing from the latents and skipped: {}",
            unmatched.len(),
            unmatched.join(", ")
        ));
    }
    let matched: Vec<&str> = metrics
        .record_ids
        .iter()
        .zip(metric_row.iter())
        .filter(|(_, m)| m.is_some())
        .map(|(id, _)| id.as_str())
        .collect();
    if matched.len() < latents.record_ids.len() {
        warnings.push(format!(
            "{} latent record(s) have no metrics row",
            latents.record_ids.len() - matched.len()
        ));
    }

    let mut rows = Vec::with_capacity(metrics.names.len());
    for (c, name) in metrics.names.iter().enumerate() {
        let mut cells = Vec::with_capacity(latents.d);
        for axis in 0..latents.d {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (r, mapped) in metric_row.iter().enumerate() {
                if let Some(i) = mapped {
                    xs.push(Some(latents.coords[*i][axis]));
                    ys.push(metrics.columns[c][r]);
                }
            }
            match pearson(&xs, &ys) {
                Ok(stat) => cells.push(TableCell::Stat(stat)),
                Err(e) => {
                    warnings.push(format!("{} vs x{}: {}", name, axis + 1, e));
                    cells.push(TableCell::NotAvailable(e.to_string()));
                }
            }
        }
        rows.push(CorrelationRow {
            metric: name.clone(),
            cells,
        });
    }
    (rows, warnings)
}

/// Formats a correlation for table cells: r to three decimals plus stars.
pub fn format_r_cell(stat: &PearsonStat) -> String {
    format!("{:.3}{}", stat.r, stat.stars)
}

/// Writes the correlation table: `metric,x1,x2,...` with `r+stars` cells,
/// `NA` where a correlation could not be computed.
pub fn write_correlation_csv<P: AsRef<Path>>(rows: &[CorrelationRow], d: usize, path: P) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["metric".to_string()];
    for axis in 0..d {
        header.push(format!("x{}", axis + 1));
    }
    writer.write_record(&header)?;
    for row in rows {
        let mut out = vec![row.metric.clone()];
        for cell in &row.cells {
            out.push(match cell {
                TableCell::Stat(stat) => format_r_cell(stat),
                TableCell::NotAvailable(_) => "NA".to_string(),
            });
        }
        writer.write_record(&out)?;
    }
    writer.flush()?;
    Ok(())
}

/// One regression per (metric, axis): metric regressed on the latent axis.
/// Skipped pairs carry an error string instead of coefficients.
#[derive(Debug, Clone, Serialize)]
pub struct RegressionEntry {
    pub metric: String,
    pub axis: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(flatten)]
    pub result: Option<RegressionResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Regresses every metric on every latent axis (complete pairs, aligned by
/// record id). Returns entries plus alignment warnings.
pub fn regression_table(
    latents: &LatentTable,
    metrics: &MetricsTable,
) -> (Vec<RegressionEntry>, Vec<String>) {
    let mut warnings = Vec::new();
    let index: HashMap<&str, usize> = latents
        .record_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut unmatched = Vec::new();
    let mapped: Vec<Option<usize>> = metrics
        .record_ids
        .iter()
        .map(|id| {
            let hit = index.get(id.as_str()).copied();
            if hit.is_none() {
                unmatched.push(id.clone());
            }
            hit
        })
        .collect();
    if !unmatched.is_empty() {
        warnings.push(format!(
            "{} metric record(s) missing from the latents and skipped: {}",
            unmatched.len(),
            unmatched.join(", ")
        ));
    }
    let mut entries = Vec::new();
    for (c, name) in metrics.names.iter().enumerate() {
        for axis in 0..latents.d {
            let mut dx = Vec::new();
            let mut dy = Vec::new();
            for (r, hit) in mapped.iter().enumerate() {
                if let Some(i) = hit {
                    dx.push(Some(latents.coords[*i][axis]));
                    dy.push(metrics.columns[c][r]);
                }
            }
            match ols_delta_regression(&dx, &dy) {
                Ok(result) => entries.push(RegressionEntry {
                    metric: name.clone(),
                    axis: axis + 1,
                    result: Some(result),
                    error: None,
                }),
                Err(e) => {
                    warnings.push(format!("{} vs x{}: {}", name, axis + 1, e));
                    entries.push(RegressionEntry {
                        metric: name.clone(),
                        axis: axis + 1,
                        result: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }
    (entries, warnings)
}

/// Writes regression entries as a JSON array with full-precision numbers.
pub fn write_regression_json<P: AsRef<Path>>(entries: &[RegressionEntry], path: P) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer_pretty(&mut f, entries)?;
    writeln!(f)?;
    Ok(())
}
