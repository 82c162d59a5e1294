//! M-step contracts against closed-form oracles, initialization rules, and
//! small end-to-end fits (determinism, degenerate fields, quasi-monotone
//! objective, masking consistency).

mod common;

use common::largest_principal_angle_deg;
use lfm::optimizer::{
    fit, initialize_params, m_step, orthonormality_penalty, MStepConfig,
};
use lfm::synthetic::{generate, random_orthonormal_basis, GeneratorSpec};
use lfm::{Cell, Error, FitConfig, LatentPrior, ModelParams};
use lfm::inference::LatentPosterior;
use nalgebra::{DMatrix, DVector};

/// LatentPosterior with explicit fixed samples (one row per draw).
fn fixed_posterior(samples: DMatrix<f64>) -> LatentPosterior {
    let s = samples.nrows() as f64;
    let d = samples.ncols();
    let mean = DVector::from_fn(d, |t, _| samples.column(t).sum() / s);
    let mut covariance = DMatrix::zeros(d, d);
    for i in 0..samples.nrows() {
        for t in 0..d {
            for u in 0..d {
                covariance[(t, u)] +=
                    (samples[(i, t)] - mean[t]) * (samples[(i, u)] - mean[u]) / s;
            }
        }
    }
    LatentPosterior {
        samples,
        mean,
        covariance,
        acceptance_rate: 1.0,
    }
}

#[test]
fn penalty_of_orthonormal_columns_is_zero() {
    let a = random_orthonormal_basis(7, 3, 1);
    assert!(orthonormality_penalty(&a) < 1e-20);
}

#[test]
fn penalty_of_scaled_orthonormal_basis_is_eighteen() {
    // AᵀA = 4I for A = 2Q, so ‖4I − I‖_F² = 2·3² = 18.
    let a = 2.0 * random_orthonormal_basis(5, 2, 2);
    assert!((orthonormality_penalty(&a) - 18.0).abs() < 1e-12);
}

#[test]
fn penalty_of_unit_column_is_zero() {
    let a = DMatrix::from_row_slice(3, 1, &[0.6, 0.8, 0.0]);
    assert!(orthonormality_penalty(&a) < 1e-15);
}

#[test]
fn unpenalized_m_step_is_nondecreasing_per_accepted_step() {
    let rows = vec![
        vec![Cell::Present(1.0), Cell::Present(0.3)],
        vec![Cell::Present(0.0), Cell::Present(-1.2)],
        vec![Cell::Missing, Cell::Present(0.8)],
    ];
    let posteriors: Vec<LatentPosterior> = (0..3)
        .map(|i| {
            fixed_posterior(DMatrix::from_row_slice(
                3,
                2,
                &[
                    0.1 * i as f64, 0.4,
                    -0.3, 0.2 + 0.1 * i as f64,
                    0.5, -0.6,
                ],
            ))
        })
        .collect();
    let mut params = common::random_params(1, 1, 2, 3);

    // One accepted step per call: the chain of objectives must never drop.
    let config = MStepConfig {
        penalty_weight: 0.0,
        max_iters: 1,
        tol: 0.0,
    };
    let mut last = f64::NEG_INFINITY;
    for _ in 0..12 {
        let (next, diag) = m_step(&rows, &posteriors, &params, &config);
        assert!(
            diag.objective >= diag.entering_objective,
            "m_step decreased its own objective"
        );
        assert!(diag.entering_objective >= last - 1e-12);
        last = diag.objective;
        params = next;
    }
}

#[test]
fn m_step_matches_weighted_least_squares_on_five_records() {
    // Single continuous field, d=1, no penalty: the maximizer of the
    // Monte-Carlo objective is ordinary least squares of z on x over all
    // (record, sample) pairs, and sigma² is the mean squared residual.
    let zs = [2.0, -1.0, 0.5, 3.0, -0.5];
    let xs = [
        [0.1, 0.4, -0.2],
        [-0.6, -0.3, -0.9],
        [0.0, 0.2, 0.1],
        [0.9, 1.1, 0.7],
        [-0.4, -0.2, -0.5],
    ];
    let rows: Vec<Vec<Cell>> = zs.iter().map(|&z| vec![Cell::Present(z)]).collect();
    let posteriors: Vec<LatentPosterior> = xs
        .iter()
        .map(|s| fixed_posterior(DMatrix::from_row_slice(3, 1, s)))
        .collect();

    // Normal equations on the 15 stacked pairs.
    let flat_x: Vec<f64> = xs.iter().flatten().cloned().collect();
    let flat_z: Vec<f64> = zs.iter().flat_map(|&z| [z, z, z]).collect();
    let n = flat_x.len() as f64;
    let mx = flat_x.iter().sum::<f64>() / n;
    let mz = flat_z.iter().sum::<f64>() / n;
    let sxx: f64 = flat_x.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxz: f64 = flat_x.iter().zip(&flat_z).map(|(x, z)| (x - mx) * (z - mz)).sum();
    let a_star = sxz / sxx;
    let b_star = mz - a_star * mx;
    let sse: f64 = flat_x
        .iter()
        .zip(&flat_z)
        .map(|(x, z)| {
            let e = z - a_star * x - b_star;
            e * e
        })
        .sum();
    let sigma_star = (sse / n).sqrt();

    let start = ModelParams::new(
        DMatrix::from_element(1, 1, 0.3),
        DVector::zeros(1),
        DVector::from_element(1, 1.0),
        vec!["s01".into()],
        0,
    )
    .unwrap();
    let config = MStepConfig {
        penalty_weight: 0.0,
        max_iters: 5000,
        tol: 0.0,
    };
    let (fitted, diag) = m_step(&rows, &posteriors, &start, &config);
    assert!(diag.objective >= diag.entering_objective);
    assert!(
        (fitted.b[0] - b_star).abs() < 1e-6,
        "b {} vs least-squares {}",
        fitted.b[0],
        b_star
    );
    assert!(
        (fitted.a[(0, 0)] - a_star).abs() < 1e-6,
        "a {} vs least-squares {}",
        fitted.a[(0, 0)],
        a_star
    );
    assert!(
        (fitted.sigma[0] - sigma_star).abs() < 1e-5,
        "sigma {} vs least-squares {}",
        fitted.sigma[0],
        sigma_star
    );
}

#[test]
fn pure_penalty_m_step_shrinks_an_inflated_basis() {
    // No data at all: the objective reduces to −weight·penalty, so the
    // step must strictly reduce the penalty of A = 2·orthonormal.
    let a = 2.0 * random_orthonormal_basis(4, 2, 5);
    let start = ModelParams::new(
        a,
        DVector::zeros(4),
        DVector::zeros(0),
        (0..4).map(|j| format!("q{j:02}")).collect(),
        4,
    )
    .unwrap();
    let before = orthonormality_penalty(&start.a);
    let config = MStepConfig {
        penalty_weight: 5.0,
        max_iters: 40,
        tol: 0.0,
    };
    let (fitted, diag) = m_step(&[], &[], &start, &config);
    let after = orthonormality_penalty(&fitted.a);
    assert!(after < before, "penalty {before} -> {after}");
    assert!(diag.objective >= diag.entering_objective);
}

#[test]
fn initialization_intercepts_follow_prevalence_and_means() {
    let rows = vec![
        vec![Cell::Present(1.0), Cell::Present(1.0), Cell::Present(0.0), Cell::Present(1.0)],
        vec![Cell::Present(0.0), Cell::Present(1.0), Cell::Present(0.0), Cell::Present(2.0)],
        vec![Cell::Present(1.0), Cell::Present(1.0), Cell::Present(0.0), Cell::Present(3.0)],
        vec![Cell::Present(0.0), Cell::Present(1.0), Cell::Present(0.0), Cell::Present(2.0)],
    ];
    let dataset = common::dataset_from_rows(3, 1, rows);
    let params = initialize_params(&dataset, 2, 11).unwrap();

    // Prevalence 0.5 → logit 0; all-ones → +4 clamp; all-zeros → −4 clamp.
    assert_eq!(params.b[0], 0.0);
    assert_eq!(params.b[1], 4.0);
    assert_eq!(params.b[2], -4.0);
    // Continuous: empirical mean and population standard deviation.
    assert!((params.b[3] - 2.0).abs() < 1e-15);
    assert!((params.sigma[0] - (0.5_f64).sqrt()).abs() < 1e-12);

    assert!(orthonormality_penalty(&params.a) < 1e-20);
}

#[test]
fn initialization_floors_constant_continuous_sigma() {
    let rows = vec![
        vec![Cell::Present(1.0), Cell::Present(2.5)],
        vec![Cell::Present(0.0), Cell::Present(2.5)],
    ];
    let dataset = common::dataset_from_rows(1, 1, rows);
    let params = initialize_params(&dataset, 1, 0).unwrap();
    assert_eq!(params.sigma[0], 1e-3);
}

#[test]
fn initialization_rejects_dimension_above_field_count() {
    let rows = vec![vec![Cell::Present(1.0), Cell::Present(0.0)]];
    let dataset = common::dataset_from_rows(2, 0, rows);
    assert!(matches!(
        initialize_params(&dataset, 3, 0).unwrap_err(),
        Error::Config(_)
    ));
}

#[test]
fn fit_config_rejects_impossible_settings() {
    let bad_d = FitConfig { d: 0, ..FitConfig::default() };
    assert!(bad_d.validate().is_err());
    let bad_tol = FitConfig { em_tol: 0.0, ..FitConfig::default() };
    assert!(bad_tol.validate().is_err());
    let bad_gamma = FitConfig { gamma: -1.0, ..FitConfig::default() };
    assert!(bad_gamma.validate().is_err());
    let bad_samples = FitConfig { mc_samples: 0, ..FitConfig::default() };
    assert!(bad_samples.validate().is_err());
    assert!(FitConfig::default().validate().is_ok());
}

#[test]
fn fit_rejects_fields_with_no_observed_cells() {
    let rows = vec![
        vec![Cell::Present(1.0), Cell::Missing],
        vec![Cell::Present(0.0), Cell::Missing],
    ];
    let dataset = common::dataset_from_rows(2, 0, rows);
    let config = FitConfig { d: 1, max_em_iters: 2, ..FitConfig::default() };
    let err = fit(&dataset, &config).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("f01"), "got {err}");
}

#[test]
fn constant_binary_field_lands_in_the_intercept() {
    // One field is all-ones: it carries no latent signal, so its
    // prevalence goes into b and its basis row stays short.
    let spec = GeneratorSpec::shaped(150, 19, 0, 2, 0.0, 21);
    let (generated, _) = generate(&spec).unwrap();
    let mut rows: Vec<Vec<Cell>> = (0..generated.n_records())
        .map(|i| generated.row(i).to_vec())
        .collect();
    for row in rows.iter_mut() {
        row[0] = Cell::Present(1.0);
    }
    let dataset = lfm::Dataset::new(
        generated.schema().to_vec(),
        generated.record_ids().to_vec(),
        rows,
    )
    .unwrap();

    let config = FitConfig {
        max_em_iters: 25,
        mc_samples: 150,
        burn_in: 60,
        seed: 4,
        ..FitConfig::default()
    };
    let output = fit(&dataset, &config).unwrap();
    assert!(
        output.report.warnings.iter().any(|w| w.contains("q01")),
        "constant field not flagged: {:?}",
        output.report.warnings
    );
    assert!(
        output.params.b[0] >= 3.0,
        "constant-field intercept {} below logit(0.95)",
        output.params.b[0]
    );
    let row_norm = output.params.a.row(0).norm();
    assert!(row_norm < 0.5, "constant-field row norm {row_norm}");
}

#[test]
fn fit_is_deterministic_per_seed() {
    let spec = GeneratorSpec::shaped(30, 4, 1, 2, 0.1, 6);
    let (dataset, _) = generate(&spec).unwrap();
    let config = FitConfig {
        max_em_iters: 3,
        mc_samples: 80,
        burn_in: 40,
        seed: 99,
        ..FitConfig::default()
    };
    let first = fit(&dataset, &config).unwrap();
    let second = fit(&dataset, &config).unwrap();
    assert_eq!(first.params.a, second.params.a);
    assert_eq!(first.params.b, second.params.b);
    assert_eq!(first.params.sigma, second.params.sigma);
    assert_eq!(first.latents, second.latents);
    assert_eq!(
        first.report.iterations.len(),
        second.report.iterations.len()
    );
    for (x, y) in first.report.iterations.iter().zip(&second.report.iterations) {
        assert_eq!(x.objective, y.objective);
        assert_eq!(x.mcse, y.mcse);
        assert_eq!(x.penalty, y.penalty);
    }

    let other = FitConfig { seed: 100, ..config };
    let third = fit(&dataset, &other).unwrap();
    assert_ne!(first.params.a, third.params.a);
}

#[test]
fn small_fit_objective_is_quasi_monotone() {
    let spec = GeneratorSpec::shaped(120, 6, 0, 2, 0.1, 8);
    let (dataset, _) = generate(&spec).unwrap();
    let config = FitConfig {
        max_em_iters: 30,
        mc_samples: 200,
        burn_in: 80,
        seed: 3,
        ..FitConfig::default()
    };
    let output = fit(&dataset, &config).unwrap();
    let iters = &output.report.iterations;
    assert!(!iters.is_empty());
    for w in iters.windows(2) {
        let decrease = w[0].objective - w[1].objective;
        assert!(
            decrease <= 3.0 * w[1].mcse,
            "iteration {} dropped the objective by {decrease:.3} (3×mcse = {:.3})",
            w[1].iter,
            3.0 * w[1].mcse
        );
    }
    // Penalty trace is reported and nonnegative.
    assert!(iters.iter().all(|it| it.penalty >= 0.0));
}

#[test]
fn report_jsonl_has_one_line_per_iteration_plus_summary() {
    let spec = GeneratorSpec::shaped(25, 3, 0, 1, 0.0, 9);
    let (dataset, _) = generate(&spec).unwrap();
    let config = FitConfig {
        d: 1,
        max_em_iters: 4,
        mc_samples: 60,
        burn_in: 30,
        seed: 12,
        ..FitConfig::default()
    };
    let output = fit(&dataset, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.jsonl");
    output.report.write_jsonl(&path).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), output.report.iterations.len() + 1);
    for line in &lines[..lines.len() - 1] {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("objective").is_some());
        assert!(v.get("mcse").is_some());
        assert!(v.get("penalty").is_some());
        assert!(v.get("wall_time_s").is_some());
    }
    let summary: serde_json::Value = serde_json::from_str(lines[lines.len() - 1]).unwrap();
    assert_eq!(
        summary.get("iterations_run").and_then(|v| v.as_u64()),
        Some(output.report.iterations.len() as u64)
    );
    assert!(summary.get("converged").is_some());
}

#[test]
fn fit_returns_one_latent_mean_per_record() {
    let spec = GeneratorSpec::shaped(40, 5, 0, 2, 0.1, 14);
    let (dataset, _) = generate(&spec).unwrap();
    let config = FitConfig {
        max_em_iters: 3,
        mc_samples: 80,
        burn_in: 40,
        seed: 1,
        ..FitConfig::default()
    };
    let output = fit(&dataset, &config).unwrap();
    assert_eq!(output.latents.nrows(), 40);
    assert_eq!(output.latents.ncols(), 2);
    assert!(output.latents.iter().all(|v| v.is_finite()));
}

/// Fitting the same data twice, once with 10% extra masking, must land in
/// nearly the same latent subspace. The generator uses continuous fields
/// with low observation noise so the data pins the subspace down sharply;
/// Bernoulli fields at these sizes carry so little information that two
/// masks of the *same* records already disagree by 20-30°, which would
/// measure sampling noise rather than masking stability. Two full
/// default-setting fits make this the slowest test in this binary.
#[test]
fn extra_masking_moves_the_subspace_less_than_25_degrees() {
    let k = 8;
    let truth_basis = random_orthonormal_basis(k, 2, 7);
    let params = ModelParams::new(
        truth_basis,
        DVector::from_fn(k, |j, _| 0.3 * (j as f64 - 3.5)),
        DVector::from_element(k, 0.35),
        (0..k).map(|j| format!("s{:02}", j + 1)).collect(),
        0,
    )
    .unwrap();
    let spec = GeneratorSpec {
        n: 250,
        params,
        prior: LatentPrior::standard(2),
        missing_rate: 0.10,
        seed: 7,
    };
    let (dataset, _) = generate(&spec).unwrap();
    let config = FitConfig { seed: 7, ..FitConfig::default() };

    let full = fit(&dataset, &config).unwrap();
    let masked = common::mask_extra(&dataset, 0.10, 707);
    let refit = fit(&masked, &config).unwrap();

    let angle = largest_principal_angle_deg(&full.params.a, &refit.params.a);
    assert!(angle < 25.0, "subspaces {angle:.2}° apart");

    // Both fits also sit close to the generating basis itself, so the
    // comparison is between genuine estimates, not two arbitrary points.
    let to_truth = largest_principal_angle_deg(&full.params.a, &spec.params.a);
    assert!(to_truth < 25.0, "full fit {to_truth:.2}° from the truth");
}

#[test]
fn absurd_proposal_scale_is_flagged_but_not_fatal() {
    let spec = GeneratorSpec::shaped(30, 4, 0, 2, 0.1, 19);
    let (dataset, _) = generate(&spec).unwrap();
    let config = FitConfig {
        max_em_iters: 2,
        mc_samples: 100,
        burn_in: 50,
        proposal_scale: Some(100.0),
        seed: 19,
        ..FitConfig::default()
    };
    let output = fit(&dataset, &config).unwrap();
    assert!(
        output
            .report
            .warnings
            .iter()
            .any(|w| w.contains("acceptance rate")),
        "warnings: {:?}",
        output.report.warnings
    );
}
