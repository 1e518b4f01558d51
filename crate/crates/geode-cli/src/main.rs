//! `geode` — fit, query, and benchmark multiscale mixture density models
//! from the command line.
//!
//! Verbs: `fit`, `score`, `impute`, `classify`, `simulate`, `mpcr`,
//! `bench`. Every verb honours `--seed` for full determinism and exits
//! with 0 on success, 2 on configuration errors, 3 on data errors, and 4
//! on numerical failures.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde_json::json;

use geode::{build_tree, fit_dictionary, Hyperparams};
use geode_cli::bench::run_bench;
use geode_cli::config::RunConfig;
use geode_cli::matrix::{read_matrix, write_matrix};
use geode_cli::model_file::{read_model, write_model};
use geode_cli::mpcr::{mpcr_curve, mpcr_mse};
use geode_cli::scenario::{simulate, ScenarioId, SimOptions};
use geode_cli::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "geode",
    version,
    about = "Two-stage multiscale density estimation: dictionary learning plus an adaptive Gibbs-sampled mixture"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a data file and save it
    Fit(FitArgs),
    /// Log density of every row under a fitted model
    Score(ScoreArgs),
    /// Posterior mean, sd, and 95% interval for every missing cell
    Impute(ImputeArgs),
    /// Classify rows by posterior vote across per-class models
    Classify(ClassifyArgs),
    /// Generate a synthetic data set plus a truth file
    Simulate(SimulateArgs),
    /// Multiscale principal-component regression baseline
    Mpcr(MpcrArgs),
    /// Wall-clock scaling benchmark over a grid of dimensions
    Bench(BenchArgs),
}

/// Flags shared by every verb. Flag > config file > built-in default.
#[derive(Args)]
struct Common {
    /// Configuration file (TOML)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Random seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output path
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    /// Training data file
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ScoreArgs {
    /// Fitted model file
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Data file to score
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ImputeArgs {
    /// Fitted model file
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Data file with missing cells (empty fields or NaN)
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Fitted model files, one per class (repeat the flag)
    #[arg(long = "model", value_name = "PATH", required = true)]
    models: Vec<PathBuf>,
    /// Data file to classify
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario id: 1-9, threemix, or parabola
    #[arg(long)]
    scenario: String,
    /// Number of observations
    #[arg(long, default_value_t = 600)]
    n: usize,
    /// Ambient dimension
    #[arg(long, default_value_t = 200)]
    dim: usize,
    /// Intrinsic dimension (linear scenarios only)
    #[arg(long, default_value_t = 10)]
    p: usize,
    /// Hide 20% of cells completely at random
    #[arg(long)]
    missing: bool,
    /// Generate without observation noise
    #[arg(long)]
    no_noise: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct MpcrArgs {
    /// Training data file (complete rows)
    #[arg(long, value_name = "PATH")]
    train: PathBuf,
    /// Test data file; the response column supplies the ground truth
    #[arg(long, value_name = "PATH")]
    test: PathBuf,
    /// Response coordinate (0-based column index)
    #[arg(long)]
    response: usize,
    /// Evaluate one scale only (default: the whole curve)
    #[arg(long)]
    scale: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit(a) => cmd_fit(a),
        Command::Score(a) => cmd_score(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Mpcr(a) => cmd_mpcr(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// Loads the config file (if any), folds in the shared flags, validates,
/// and installs the thread pool.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(threads) = common.threads {
        cfg.threads = Some(threads);
    }
    cfg.validate().map_err(CliError::Config)?;
    if let Some(threads) = cfg.threads {
        if threads == 0 {
            return Err(CliError::Config("threads must be ≥ 1".into()));
        }
        // Ignore the error from a pool that already exists (second call in
        // the same process, e.g. under tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    Ok(cfg)
}

fn read_data_required(path: &Path) -> Result<geode::DataSet> {
    let file = read_matrix(path)?;
    file.data
        .ok_or_else(|| CliError::Data(format!("{}: no data rows", path.display())))
}

/// Writes `text` to `out` when given, otherwise to stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let data_path = args
        .data
        .or(cfg.data.clone())
        .ok_or_else(|| CliError::Config("no data file (use --data or set `data` in the config)".into()))?;
    let out_path = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("model.geode"));
    let data = read_data_required(&data_path)?;
    let hyper = cfg.to_hyper();
    let t0 = Instant::now();
    let model = geode::fit(&data, &hyper)?;
    write_model(&out_path, &model)?;
    println!(
        "fit: {} rows x {} dims -> {} nodes, {} draws in {:.1}s -> {}",
        data.len(),
        data.dim(),
        model.tree.node_count(),
        model.draws.len(),
        t0.elapsed().as_secs_f64(),
        out_path.display()
    );
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let model = read_model(&args.model)?;
    let file = read_matrix(&args.data)?;
    let mut table = String::from("row,log_density\n");
    if let Some(data) = file.data {
        let scores = model.log_density_batch(&data)?;
        for (i, s) in scores.iter().enumerate() {
            writeln!(table, "{i},{s}").expect("string write");
        }
    }
    emit(cfg.out.as_deref(), &table)
}

fn cmd_impute(args: ImputeArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let model = read_model(&args.model)?;
    let file = read_matrix(&args.data)?;
    let mut table = String::from("row,coordinate,mean,sd,lo95,hi95\n");
    if let Some(data) = file.data {
        if data.dim() != model.dim() {
            return Err(CliError::Data(format!(
                "dimension mismatch: model D={}, data D={}",
                model.dim(),
                data.dim()
            )));
        }
        for i in 0..data.len() {
            let missing = data.missing(i);
            if missing.is_empty() {
                continue; // complete rows have nothing to impute
            }
            let y = DVector::from_column_slice(data.values().column(i).as_slice());
            let r = geode::impute(&model, &y, missing, cfg.seed.wrapping_add(i as u64))?;
            for (k, &coord) in r.missing.iter().enumerate() {
                let (lo, hi) = r.interval95[k];
                writeln!(table, "{i},{coord},{},{},{lo},{hi}", r.mean[k], r.sd[k])
                    .expect("string write");
            }
        }
    }
    emit(cfg.out.as_deref(), &table)
}

fn cmd_classify(args: ClassifyArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let models: Vec<_> = args
        .models
        .iter()
        .map(|p| read_model(p))
        .collect::<Result<_>>()?;
    let data = read_data_required(&args.data)?;
    let detailed = geode::classify_detailed(&models, &data)?;
    let mut table = String::from("row,label");
    for k in 0..models.len() {
        write!(table, ",votes_{k}").expect("string write");
    }
    table.push('\n');
    for (i, c) in detailed.iter().enumerate() {
        write!(table, "{i},{}", c.label).expect("string write");
        for v in &c.votes {
            write!(table, ",{v}").expect("string write");
        }
        table.push('\n');
    }
    emit(cfg.out.as_deref(), &table)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let id: ScenarioId = args.scenario.parse()?;
    let gen = simulate(
        id,
        SimOptions {
            n: args.n,
            dim: args.dim,
            p: args.p,
            seed: cfg.seed,
            missing: args.missing,
            noise: !args.no_noise,
        },
    )?;
    let out_path = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("scenario-{}.csv", args.scenario)));
    let mut truth = gen.truth;
    if let Some(labels) = &gen.labels {
        truth["labels"] = json!(labels);
    }
    truth["seed"] = json!(cfg.seed);
    write_matrix(&out_path, &gen.data, None)?;
    let truth_path = PathBuf::from(format!("{}.truth.json", out_path.display()));
    let truth_text = serde_json::to_string_pretty(&truth)
        .map_err(|e| CliError::Data(format!("truth serialization: {e}")))?;
    std::fs::write(&truth_path, truth_text)
        .map_err(|e| CliError::Data(format!("{}: {e}", truth_path.display())))?;
    println!(
        "simulate: {} rows x {} dims -> {} (truth: {})",
        gen.data.len(),
        gen.data.dim(),
        out_path.display(),
        truth_path.display()
    );
    Ok(())
}

fn cmd_mpcr(args: MpcrArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let train = read_data_required(&args.train)?;
    let test = read_data_required(&args.test)?;
    if train.partial_count() > 0 || test.partial_count() > 0 {
        return Err(CliError::Data(
            "the regression baseline requires complete rows".into(),
        ));
    }
    let hyper: Hyperparams = cfg.to_hyper();
    let tree = build_tree(&train, hyper.max_depth, hyper.effective_min_cell())?;
    let dict = fit_dictionary(&tree, &train, hyper.d_upper, hyper.seed)?;
    let mut table = String::from("scale,mse\n");
    match args.scale {
        Some(s) => {
            let mse = mpcr_mse(&tree, &dict, &train, &test, args.response, s)?;
            writeln!(table, "{s},{mse}").expect("string write");
        }
        None => {
            let curve = mpcr_curve(&tree, &dict, &train, &test, args.response)?;
            for (s, mse) in curve.iter().enumerate() {
                writeln!(table, "{s},{mse}").expect("string write");
            }
        }
    }
    emit(cfg.out.as_deref(), &table)
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let report = run_bench(&cfg, cfg.seed)?;
    let out_path = cfg.out.clone().unwrap_or_else(|| PathBuf::from("bench.json"));
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Data(format!("report serialization: {e}")))?;
    std::fs::write(&out_path, &text)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_path.display())))?;
    println!(
        "bench: stage-1 linearity R^2 = {:.4}, stage-2 per-iteration spread = {:.1}% -> {}",
        report.stage1_linearity_r2(),
        100.0 * report.stage2_relative_spread(),
        out_path.display()
    );
    Ok(())
}
