//! `lfm` — command-line driver for the latent factor model.
//!
//! Five subcommands wire the library end to end: `fit` estimates a model
//! from a CSV, `transform` projects records onto an existing model's latent
//! space, `impute` estimates missing cells, `analyze` correlates or
//! regresses external metrics against latent coordinates, and `generate`
//! draws synthetic data with known ground truth.
//!
//! Exit codes: 0 on success (for `fit`, convergence), 1 on any error, and
//! 2 when `fit` stops at the iteration cap — artifacts are still written so
//! a capped run remains inspectable. Subcommands never modify their input
//! files, and identical inputs plus an identical seed reproduce identical
//! outputs byte for byte.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rayon::prelude::*;

use lfm::analysis::{correlation_table, regression_table, write_correlation_csv, write_regression_json};
use lfm::data_model::load_csv;
use lfm::inference::{e_step, posterior_mode, write_latents_csv, ModeConfig};
use lfm::likelihood::{load_model, save_model};
use lfm::imputation::{impute_dataset, write_imputations_csv};
use lfm::synthetic::{generate, write_truth_json, GeneratorSpec};
use lfm::{Dataset, Error, FitConfig, ImputationMethod, LatentPrior, ModelParams, SamplerConfig};

#[derive(Parser)]
#[command(
    name = "lfm",
    version,
    about = "Latent factor models for mixed binary/continuous tables with missing entries"
)]
struct Cli {
    /// Cap the worker thread count (default: one worker per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a dataset; writes model.json, latents.csv,
    /// report.jsonl and basis_plot.csv into the output directory.
    Fit(FitArgs),
    /// Project records onto a fitted model's latent space.
    Transform(TransformArgs),
    /// Estimate every missing cell of a dataset under a fitted model.
    Impute(ImputeArgs),
    /// Correlate or regress external metrics against latent coordinates.
    Analyze(AnalyzeArgs),
    /// Draw a synthetic dataset with known ground truth.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Data CSV: header row, first column the record id.
    data: PathBuf,
    /// Schema sidecar: one `name,kind` line per column.
    schema: PathBuf,
    /// Output directory (created if absent).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Latent dimension.
    #[arg(long, default_value_t = 2)]
    dims: usize,
    /// EM iteration cap.
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Convergence threshold on the per-record objective change (nats).
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Orthonormality budget the fitted basis is checked against.
    #[arg(long, default_value_t = 1e-2)]
    gamma: f64,
    /// Orthonormality penalty weight (default: 10 times the record count).
    #[arg(long)]
    penalty_weight: Option<f64>,
    /// Gradient-ascent iteration cap per M-step.
    #[arg(long, default_value_t = 12)]
    mstep_max_iters: usize,
    /// M-step stops early once a step gains at most this many nats.
    #[arg(long, default_value_t = 0.0)]
    mstep_tol: f64,
    /// Retained posterior samples per record per E-step.
    #[arg(long, default_value_t = 500)]
    mc_samples: usize,
    /// Discarded burn-in draws per chain.
    #[arg(long, default_value_t = 200)]
    burn_in: usize,
    /// Proposal standard deviation (default: 2.4/sqrt(dims)).
    #[arg(long)]
    proposal_scale: Option<f64>,
    /// RNG seed; required so no run is silently nondeterministic.
    #[arg(long)]
    seed: u64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum TransformMode {
    /// Posterior mean via Monte-Carlo sampling (matches fit-time latents).
    Mean,
    /// Deterministic posterior mode via gradient ascent.
    Mode,
}

#[derive(Args)]
struct TransformArgs {
    /// model.json written by `fit`.
    model: PathBuf,
    /// Data CSV: header row, first column the record id.
    data: PathBuf,
    /// Schema sidecar: one `name,kind` line per column.
    schema: PathBuf,
    /// Output CSV of latent coordinates.
    #[arg(long, default_value = "latents.csv")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = TransformMode::Mean)]
    mode: TransformMode,
    /// Retained posterior samples per record (mean mode).
    #[arg(long, default_value_t = 500)]
    mc_samples: usize,
    /// Discarded burn-in draws per chain (mean mode).
    #[arg(long, default_value_t = 200)]
    burn_in: usize,
    /// Proposal standard deviation (default: 2.4/sqrt(dims)).
    #[arg(long)]
    proposal_scale: Option<f64>,
    /// RNG seed; required so no run is silently nondeterministic.
    #[arg(long)]
    seed: u64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ImputeMethod {
    /// Average the per-cell prediction over posterior draws.
    Averaged,
    /// Plug the posterior mean into the prediction.
    Mean,
}

#[derive(Args)]
struct ImputeArgs {
    /// model.json written by `fit`.
    model: PathBuf,
    /// Data CSV: header row, first column the record id.
    data: PathBuf,
    /// Schema sidecar: one `name,kind` line per column.
    schema: PathBuf,
    /// Output CSV of per-cell estimates.
    #[arg(long, default_value = "imputations.csv")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ImputeMethod::Averaged)]
    method: ImputeMethod,
    /// Retained posterior samples per record.
    #[arg(long, default_value_t = 500)]
    mc_samples: usize,
    /// Discarded burn-in draws per chain.
    #[arg(long, default_value_t = 200)]
    burn_in: usize,
    /// Proposal standard deviation (default: 2.4/sqrt(dims)).
    #[arg(long)]
    proposal_scale: Option<f64>,
    /// RNG seed; required so no run is silently nondeterministic.
    #[arg(long)]
    seed: u64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AnalyzeMode {
    /// Per-(metric, axis) Pearson correlations with significance stars.
    Correlate,
    /// Per-(metric, axis) ordinary least-squares regressions.
    Regress,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// latents.csv written by `fit` or `transform`.
    latents: PathBuf,
    /// Metrics CSV: record_id column then one numeric column per metric.
    metrics: PathBuf,
    /// Output path (default: table.csv for correlate, regression.json for
    /// regress).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AnalyzeMode::Correlate)]
    mode: AnalyzeMode,
}

#[derive(Args)]
struct GenerateArgs {
    /// Record count.
    #[arg(long)]
    n: usize,
    /// Binary field count.
    #[arg(long, default_value_t = 19)]
    binary: usize,
    /// Continuous field count.
    #[arg(long, default_value_t = 0)]
    continuous: usize,
    /// Latent dimension of the true basis.
    #[arg(long, default_value_t = 2)]
    dims: usize,
    /// Independent per-cell masking probability, in [0, 1).
    #[arg(long, default_value_t = 0.1)]
    missing_rate: f64,
    /// Output directory for data.csv, schema.csv and truth.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// RNG seed; required so no run is silently nondeterministic.
    #[arg(long)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(threads) = cli.threads {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
        if let Err(e) = pool {
            eprintln!("error: cannot configure {threads} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> lfm::Result<ExitCode> {
    match command {
        Command::Fit(args) => cmd_fit(args),
        Command::Transform(args) => cmd_transform(args),
        Command::Impute(args) => cmd_impute(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Generate(args) => cmd_generate(args),
    }
}

fn cmd_fit(args: FitArgs) -> lfm::Result<ExitCode> {
    let config = FitConfig {
        d: args.dims,
        max_em_iters: args.max_iters,
        em_tol: args.tol,
        gamma: args.gamma,
        penalty_weight: args.penalty_weight,
        mstep_max_iters: args.mstep_max_iters,
        mstep_tol: args.mstep_tol,
        mc_samples: args.mc_samples,
        burn_in: args.burn_in,
        proposal_scale: args.proposal_scale,
        seed: args.seed,
    };
    config.validate()?;
    let dataset = load_csv(&args.data, &args.schema)?;
    let output = lfm::optimizer::fit(&dataset, &config)?;
    for w in &output.report.warnings {
        eprintln!("warning: {w}");
    }

    std::fs::create_dir_all(&args.out)?;
    let prior = LatentPrior::standard(config.d);
    save_model(&output.params, &prior, args.out.join("model.json"))?;
    write_latents_csv(
        dataset.record_ids(),
        &output.latents,
        args.out.join("latents.csv"),
    )?;
    output.report.write_jsonl(args.out.join("report.jsonl"))?;
    write_basis_plot(&output.params, args.out.join("basis_plot.csv"))?;

    if output.report.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "fit stopped at the {}-iteration cap without meeting the convergence rule",
            config.max_em_iters
        );
        Ok(ExitCode::from(2))
    }
}

/// Writes one row per field — name, basis row, intercept — so any plotting
/// tool can render the fitted parameters directly.
fn write_basis_plot<P: AsRef<Path>>(params: &ModelParams, path: P) -> lfm::Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let d = params.d();
    let mut header = vec!["field".to_string()];
    header.extend((1..=d).map(|t| format!("a_{t}")));
    header.push("b".to_string());
    w.write_record(&header)?;
    for (j, name) in params.field_names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend((0..d).map(|t| format!("{}", params.a[(j, t)])));
        row.push(format!("{}", params.b[j]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// The dataset's model-ordered field names and binary count must match the
/// model exactly; anything else projects garbage, so it is an error.
fn check_schema_matches(dataset: &Dataset, params: &ModelParams) -> lfm::Result<()> {
    let names = dataset.model_field_names();
    if names != params.field_names {
        let unknown: Vec<&str> = names
            .iter()
            .filter(|n| !params.field_names.contains(n))
            .map(|n| n.as_str())
            .collect();
        let detail = if unknown.is_empty() {
            "field order or coverage differs from the model".to_string()
        } else {
            format!("fields not in the model: {}", unknown.join(", "))
        };
        return Err(Error::Config(format!(
            "dataset does not match the model schema: {detail}"
        )));
    }
    if dataset.n_binary() != params.n_binary {
        return Err(Error::Config(format!(
            "dataset has {} binary fields but the model expects {}",
            dataset.n_binary(),
            params.n_binary
        )));
    }
    Ok(())
}

fn cmd_transform(args: TransformArgs) -> lfm::Result<ExitCode> {
    let (params, prior) = load_model(&args.model)?;
    let dataset = load_csv(&args.data, &args.schema)?;
    check_schema_matches(&dataset, &params)?;
    let d = params.d();
    let n = dataset.n_records();

    let latents = match args.mode {
        TransformMode::Mean => {
            let sampler = SamplerConfig {
                n_samples: args.mc_samples,
                burn_in: args.burn_in,
                proposal_scale: args.proposal_scale,
                seed: args.seed,
            };
            let posteriors = e_step(&params, &prior, &dataset, &sampler)?;
            DMatrix::from_fn(n, d, |i, t| posteriors[i].mean[t])
        }
        TransformMode::Mode => {
            let rows = dataset.model_rows();
            let results: Vec<_> = rows
                .par_iter()
                .map(|row| posterior_mode(&params, &prior, row, &ModeConfig::default()))
                .collect();
            for (result, id) in results.iter().zip(dataset.record_ids()) {
                if !result.converged {
                    eprintln!(
                        "warning: record {id}: mode search stopped early (gradient norm {:.3e})",
                        result.grad_norm
                    );
                }
            }
            DMatrix::from_fn(n, d, |i, t| results[i].x[t])
        }
    };
    write_latents_csv(dataset.record_ids(), &latents, &args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_impute(args: ImputeArgs) -> lfm::Result<ExitCode> {
    let (params, prior) = load_model(&args.model)?;
    let dataset = load_csv(&args.data, &args.schema)?;
    check_schema_matches(&dataset, &params)?;
    let method = match args.method {
        ImputeMethod::Averaged => ImputationMethod::PosteriorAveraged,
        ImputeMethod::Mean => ImputationMethod::PosteriorMean,
    };
    let sampler = SamplerConfig {
        n_samples: args.mc_samples,
        burn_in: args.burn_in,
        proposal_scale: args.proposal_scale,
        seed: args.seed,
    };
    let results = impute_dataset(&params, &prior, &dataset, method, &sampler)?;
    write_imputations_csv(&results, &args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(args: AnalyzeArgs) -> lfm::Result<ExitCode> {
    let latents = lfm::analysis::load_latents_csv(&args.latents)?;
    let metrics = lfm::analysis::load_metrics_csv(&args.metrics)?;
    match args.mode {
        AnalyzeMode::Correlate => {
            let (rows, warnings) = correlation_table(&latents, &metrics);
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let out = args.out.unwrap_or_else(|| PathBuf::from("table.csv"));
            write_correlation_csv(&rows, latents.d, out)?;
        }
        AnalyzeMode::Regress => {
            let (entries, warnings) = regression_table(&latents, &metrics);
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let out = args.out.unwrap_or_else(|| PathBuf::from("regression.json"));
            write_regression_json(&entries, out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_generate(args: GenerateArgs) -> lfm::Result<ExitCode> {
    if args.dims > args.binary + args.continuous {
        return Err(Error::Config(format!(
            "cannot draw a {}-dimensional orthonormal basis over {} fields",
            args.dims,
            args.binary + args.continuous
        )));
    }
    let spec = GeneratorSpec::shaped(
        args.n,
        args.binary,
        args.continuous,
        args.dims,
        args.missing_rate,
        args.seed,
    );
    let (dataset, latents) = generate(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    dataset.write_csv(args.out.join("data.csv"))?;
    dataset.write_schema(args.out.join("schema.csv"))?;
    write_truth_json(&spec, dataset.record_ids(), &latents, args.out.join("truth.json"))?;
    Ok(ExitCode::SUCCESS)
}
