//! Shared test oracles, implemented independently of the library code they
//! check: finite differences for gradients, closed-form Gaussian posteriors,
//! principal angles, rank statistics, and a continued-fraction t-test
//! p-value. Production code paths are never reused here.

#![allow(dead_code)]

use lfm::{Cell, Dataset, FieldKind, FieldSchema, LatentPrior, ModelParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error with an absolute floor: |a−b| / max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Largest principal angle in degrees between the column spaces of `a` and
/// `b`: orthonormalize both, then acos of the smallest singular value of
/// Q_aᵀQ_b.
pub fn largest_principal_angle_deg(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.nrows(), b.nrows());
    assert_eq!(a.ncols(), b.ncols());
    let qa = a.clone().qr().q().columns(0, a.ncols()).into_owned();
    let qb = b.clone().qr().q().columns(0, b.ncols()).into_owned();
    let m = qa.transpose() * qb;
    let svd = m.svd(false, false);
    let smallest = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    smallest.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Closed-form Gaussian posterior N(mean, cov) of the latent vector for a
/// row whose observed cells are all continuous.
pub fn conjugate_posterior(
    params: &ModelParams,
    prior: &LatentPrior,
    row: &[Cell],
) -> (DVector<f64>, DMatrix<f64>) {
    let m = params.n_binary;
    let sigma0_inv = prior
        .sigma0
        .clone()
        .try_inverse()
        .expect("prior covariance invertible");
    let mut precision = sigma0_inv.clone();
    let mut shift = &sigma0_inv * &prior.mu0;
    for (j, cell) in row.iter().enumerate() {
        let Cell::Present(z) = cell else { continue };
        assert!(j >= m, "conjugate oracle needs all-continuous observations");
        let a_j = params.a.row(j).transpose();
        let s2 = params.sigma[j - m] * params.sigma[j - m];
        precision += &a_j * a_j.transpose() / s2;
        shift += &a_j * ((z - params.b[j]) / s2);
    }
    let cov = precision.try_inverse().expect("posterior precision invertible");
    let mean = &cov * shift;
    (mean, cov)
}

/// Batch-means Monte-Carlo standard error of the chain mean, written as a
/// plain two-pass loop.
pub fn mcse_oracle(chain: &[f64], n_batches: usize) -> f64 {
    let b = chain.len() / n_batches;
    assert!(b >= 1, "chain too short for {n_batches} batches");
    let used = b * n_batches;
    let mut batch_means = Vec::with_capacity(n_batches);
    for batch in 0..n_batches {
        let slice = &chain[batch * b..(batch + 1) * b];
        batch_means.push(slice.iter().sum::<f64>() / b as f64);
    }
    let grand = chain[..used].iter().sum::<f64>() / used as f64;
    let var_between = batch_means
        .iter()
        .map(|m| (m - grand) * (m - grand))
        .sum::<f64>()
        / (n_batches - 1) as f64;
    (var_between / n_batches as f64).sqrt()
}

/// Mann-Whitney AUC of `scores` against binary `labels`, with tie-averaged
/// ranks. Returns None when either class is empty.
pub fn auc(labels: &[u8], scores: &[f64]) -> Option<f64> {
    assert_eq!(labels.len(), scores.len());
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// 1-based ranks with ties replaced by their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of two complete f64 slices (plain textbook formula).
pub fn pearson_raw(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation: Pearson on tie-averaged ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson_raw(&average_ranks(xs), &average_ranks(ys))
}

/// Two-sided p-value of a t-statistic with `df` degrees of freedom via the
/// regularized incomplete beta function: p = I_{df/(df+t²)}(df/2, 1/2).
pub fn t_test_p_oracle(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    reg_inc_beta(df / 2.0, 0.5, x)
}

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln()
        + b * (1.0 - x).ln())
    .exp();
    // Use the symmetry I_x(a,b) = 1 − I_{1−x}(b,a) where the fraction
    // converges fastest.
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - reg_inc_beta(b, a, 1.0 - x);
    }
    front * beta_cf(a, b, x) / a
}

/// Survival function of a chi-square with `df` degrees of freedom:
/// P(X > x) = Q(df/2, x/2), the regularized upper incomplete gamma.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    1.0 - reg_inc_gamma_p(df / 2.0, x / 2.0)
}

/// Regularized lower incomplete gamma P(a, x): series for x < a+1, Lentz's
/// continued fraction for the complement otherwise.
fn reg_inc_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_front = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // P(a,x) = front · Σ x^k Γ(a)/Γ(a+1+k)
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..500 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * log_front.exp()
    } else {
        // Q(a,x) = front · continued fraction
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-15 {
                break;
            }
        }
        1.0 - log_front.exp() * h
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-30;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..200 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-14 {
            break;
        }
    }
    h
}

/// Lanczos log-gamma (g=7, n=9 coefficients).
pub fn ln_gamma(z: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if z < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * z).sin()).ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut sum = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        sum += c / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + sum.ln()
}

/// Random model parameters for gradient checks: Gaussian basis and
/// intercepts, sigmas in [0.5, 1.5].
pub fn random_params(m: usize, k: usize, d: usize, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(m + k, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b = DVector::from_fn(m + k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sigma = DVector::from_fn(k, |_, _| 0.5 + rng.random::<f64>());
    let names = (0..m + k).map(|j| format!("f{j:02}")).collect();
    ModelParams::new(a, b, sigma, names, m).unwrap()
}

/// Random row over `m` binary and `k` continuous fields with independent
/// missingness at `missing_prob`.
pub fn random_row(m: usize, k: usize, missing_prob: f64, seed: u64) -> Vec<Cell> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = Vec::with_capacity(m + k);
    for j in 0..m + k {
        if rng.random::<f64>() < missing_prob {
            row.push(Cell::Missing);
        } else if j < m {
            row.push(Cell::Present(if rng.random::<f64>() < 0.5 { 0.0 } else { 1.0 }));
        } else {
            row.push(Cell::Present(rng.sample::<f64, _>(StandardNormal) * 2.0));
        }
    }
    row
}

/// Builds a dataset from explicit cells: `m` binary fields named f00.. then
/// `k` continuous fields, record ids r0, r1, ...
pub fn dataset_from_rows(m: usize, k: usize, rows: Vec<Vec<Cell>>) -> Dataset {
    let schema: Vec<FieldSchema> = (0..m + k)
        .map(|j| FieldSchema {
            name: format!("f{j:02}"),
            kind: if j < m { FieldKind::Binary } else { FieldKind::Continuous },
            column_index: j,
        })
        .collect();
    let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
    Dataset::new(schema, ids, rows).unwrap()
}

/// Copies the dataset, masking each still-present cell independently with
/// probability `rate`; rows that would become all-missing keep their first
/// observed cell.
pub fn mask_extra(dataset: &Dataset, rate: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(dataset.n_records());
    for i in 0..dataset.n_records() {
        let original = dataset.row(i);
        let mut row = original.to_vec();
        for cell in row.iter_mut() {
            if !cell.is_missing() && rng.random::<f64>() < rate {
                *cell = Cell::Missing;
            }
        }
        if row.iter().all(Cell::is_missing) {
            let first = original.iter().position(|c| !c.is_missing()).unwrap();
            row[first] = original[first];
        }
        rows.push(row);
    }
    Dataset::new(
        dataset.schema().to_vec(),
        dataset.record_ids().to_vec(),
        rows,
    )
    .unwrap()
}
