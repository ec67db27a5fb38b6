//! `newcast` — two-stage sales forecasting for unreleased products.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{DatasetSource, RunConfig};
use newcast_core::data::{Dataset, Split};
use newcast_core::dataset_io::{load_dataset, save_dataset};
use newcast_core::eval::wape;
use newcast_core::pipeline::{
    evaluate_split, load_run, render_report, sample_product, train_pipeline, REFINER_PREFIX,
};
use newcast_core::refine::refine;
use newcast_core::sheet::SampleSheet;
use newcast_core::synthetic::{generate_synthetic, SyntheticConfig};
use newcast_core::Real;

const OUT_ROOT_ENV: &str = "NEWCAST_OUT_ROOT";
const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Parser)]
#[command(name = "newcast", version, about = "Diffusion-based new-product sales forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic catalog (images + sales + splits).
    GenerateData(GenerateDataArgs),
    /// Train the diffusion model and the refinement head into a run directory.
    Train(TrainArgs),
    /// Draw candidate sheets for one split under a finished run.
    Sample(SplitArgs),
    /// Collapse stored sheets into refined forecasts.
    Refine(SplitArgs),
    /// Evaluate a split and render the report; prints `WAPE=<x> MAE=<y>` last.
    Evaluate(EvaluateArgs),
    /// Re-render summary and plots from an existing report.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateDataArgs {
    /// Output dataset directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    n_train: usize,
    #[arg(long, default_value_t = 16)]
    n_test: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_level: f64,
    #[arg(long, default_value_t = 6)]
    horizon: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (JSON); defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; must be empty unless --resume is given.
    #[arg(long)]
    run_dir: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of diffusion epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Drop one conditioning modality (repeatable): no-image | no-temporal.
    #[arg(long, value_parser = ["no-image", "no-temporal"])]
    ablation: Vec<String>,
    /// Continue a previous run in the same directory.
    #[arg(long, default_value_t = false)]
    resume: bool,
    /// Save training state every N epochs (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    save_every: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Dataset directory (defaults to the path recorded in the run config).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    split: SplitArgs,
    /// Report output directory (defaults to <run_dir>/report-<split>).
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing report.json.
    #[arg(long)]
    report_dir: PathBuf,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Resolve a possibly relative path against $NEWCAST_OUT_ROOT when set.
fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn parse_split(s: &str) -> Split {
    match s {
        "train" => Split::Train,
        _ => Split::Test,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData(args) => cmd_generate_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Refine(args) => cmd_refine(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn cmd_generate_data(args: GenerateDataArgs) -> CliResult {
    if args.n_train == 0 || args.n_test == 0 {
        return Err(usage("--n-train and --n-test must be positive"));
    }
    let out = resolve(&args.out);
    let config = SyntheticConfig {
        n_train: args.n_train,
        n_test: args.n_test,
        image_size: args.image_size,
        noise_level: args.noise_level,
        horizon: args.horizon,
        ..Default::default()
    };
    let (dataset, truth) = generate_synthetic::<Real>(&config, args.seed)?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    save_dataset(&dataset, &out)?;
    std::fs::write(
        out.join("truth.json"),
        serde_json::to_string_pretty(&truth).map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    println!(
        "wrote {} train + {} test products to {}",
        args.n_train,
        args.n_test,
        out.display()
    );
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| usage(e.to_string())),
        None => Ok(RunConfig::default()),
    }
}

fn load_configured_dataset(
    config: &RunConfig,
    override_path: &Option<PathBuf>,
) -> Result<Dataset<Real>, CliError> {
    let path = resolve(override_path.as_deref().unwrap_or(&config.dataset.path));
    if !path.exists() {
        return Err(CliError::Runtime(format!(
            "dataset directory not found: {}",
            path.display()
        )));
    }
    match config.dataset.source {
        DatasetSource::Synthetic => Ok(load_dataset::<Real>(&path)?),
        DatasetSource::Visuelle => {
            let outcome = newcast_core::visuelle::load_visuelle::<Real>(
                &path,
                config.dataset.horizon,
                config.dataset.image_size,
            )?;
            for (id, reason) in &outcome.rejected {
                eprintln!("warning: skipped record {id}: {reason}");
            }
            Ok(outcome.dataset)
        }
    }
}

fn read_resolved_config(run_dir: &Path) -> Result<RunConfig, CliError> {
    let path = run_dir.join(RESOLVED_CONFIG);
    RunConfig::load(&path).map_err(|e| CliError::Runtime(e.to_string()))
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.training.epochs = epochs;
    }
    for flag in &args.ablation {
        match flag.as_str() {
            "no-image" => config.model.use_image = false,
            "no-temporal" => config.model.use_temporal = false,
            _ => unreachable!("restricted by value_parser"),
        }
    }
    config.validate().map_err(|e| usage(e.to_string()))?;

    let run_dir = resolve(&args.run_dir);
    if run_dir.exists() {
        let occupied = std::fs::read_dir(&run_dir)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", run_dir.display())))?
            .next()
            .is_some();
        if occupied && !args.resume {
            return Err(usage(format!(
                "run directory {} is not empty; pass --resume to continue it",
                run_dir.display()
            )));
        }
    }
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", run_dir.display())))?;
    std::fs::write(
        run_dir.join(RESOLVED_CONFIG),
        serde_json::to_string_pretty(&config).map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let dataset = load_configured_dataset(&config, &None)?;
    let train_config = config.to_train_config();
    let artifacts = train_pipeline(dataset, &train_config, &run_dir, args.save_every, |e, l| {
        eprintln!("epoch {e}: diffusion loss {l:.6}");
    })?;
    println!("diffusion checkpoint {}", artifacts.diffusion_hash);
    println!("refiner checkpoint {}", artifacts.refiner_hash);
    println!("run directory {}", run_dir.display());
    Ok(())
}

fn cmd_sample(args: SplitArgs) -> CliResult {
    let run_dir = resolve(&args.run_dir);
    let config = read_resolved_config(&run_dir)?;
    let run = load_run::<Real>(&run_dir)?;
    let dataset = load_configured_dataset(&config, &args.dataset)?;
    let split = parse_split(&args.split);
    let schedule = run.manifest.config.schedule::<Real>()?;
    let sheets_dir = run_dir.join("sheets").join(&args.split);
    std::fs::create_dir_all(&sheets_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", sheets_dir.display())))?;
    let mut n = 0usize;
    for rec in dataset.split(split) {
        let sheet = sample_product(
            rec,
            &run.diffusion_params,
            &run.manifest.config,
            &schedule,
            run.manifest.year_range,
            run.manifest.config.seed,
        )?;
        sheet.save(&sheets_dir.join(&rec.id), &run.manifest.schedule_hash)?;
        n += 1;
    }
    println!("wrote {n} sheets to {}", sheets_dir.display());
    Ok(())
}

fn cmd_refine(args: SplitArgs) -> CliResult {
    let run_dir = resolve(&args.run_dir);
    let config = read_resolved_config(&run_dir)?;
    let run = load_run::<Real>(&run_dir)?;
    let dataset = load_configured_dataset(&config, &args.dataset)?;
    let split = parse_split(&args.split);
    let sheets_dir = run_dir.join("sheets").join(&args.split);
    let out_dir = run_dir.join("refined").join(&args.split);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;
    let scaler = &run.manifest.scaler;
    let mut n = 0usize;
    for rec in dataset.split(split) {
        let stem = sheets_dir.join(&rec.id);
        if !stem.with_extension("csv").exists() {
            return Err(CliError::Runtime(format!(
                "missing sheet {}; run `newcast sample` first",
                stem.with_extension("csv").display()
            )));
        }
        let (sheet, sidecar) = SampleSheet::<Real>::load(&stem)?;
        if sidecar.schedule_hash != run.manifest.schedule_hash {
            return Err(CliError::Runtime(format!(
                "sheet {} was drawn under a different schedule",
                stem.display()
            )));
        }
        let refined_norm = refine(
            &sheet,
            &run.refiner_params,
            REFINER_PREFIX,
            &run.refiner_meta.config,
        )?;
        let refined = scaler.denormalize(&refined_norm);
        let path = out_dir.join(format!("{}.json", rec.id));
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&serde_json::json!({
                "id": rec.id,
                "forecast": refined,
            }))
            .map_err(|e| CliError::Runtime(e.to_string()))?,
        )
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        n += 1;
    }
    println!("wrote {n} refined forecasts to {}", out_dir.display());
    Ok(())
}

/// Naive baseline: the per-week mean of the raw train curves predicts every
/// evaluated product.
fn naive_baseline_wape(dataset: &Dataset<Real>, split: Split, horizon: usize) -> Option<f64> {
    let mut mean = vec![0.0; horizon];
    let mut n = 0.0;
    for rec in dataset.split(Split::Train) {
        for (m, &v) in mean.iter_mut().zip(rec.sales.horizon()) {
            *m += v;
        }
        n += 1.0;
    }
    if n == 0.0 {
        return None;
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut truth_all = Vec::new();
    let mut pred_all = Vec::new();
    for rec in dataset.split(split) {
        truth_all.extend_from_slice(rec.sales.horizon());
        pred_all.extend_from_slice(&mean);
    }
    wape(&truth_all, &pred_all).ok()
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult {
    let run_dir = resolve(&args.split.run_dir);
    let config = read_resolved_config(&run_dir)?;
    let run = load_run::<Real>(&run_dir)?;
    let dataset = load_configured_dataset(&config, &args.split.dataset)?;
    let split = parse_split(&args.split.split);
    let report = evaluate_split(&dataset, &run, split, &run_dir)?;
    let report_dir = args
        .report_dir
        .map(|p| resolve(&p))
        .unwrap_or_else(|| run_dir.join(format!("report-{}", args.split.split)));
    render_report(&report, &report_dir)?;
    for skipped in &report.metadata.skipped_products {
        eprintln!("warning: skipped {skipped}");
    }
    if let Some(baseline) = naive_baseline_wape(&dataset, split, config.dataset.horizon) {
        println!("naive train-mean baseline WAPE={baseline:.4}");
    }
    println!("report written to {}", report_dir.display());
    println!(
        "WAPE={:.4} MAE={:.4}",
        report.aggregate.wape_clamped, report.aggregate.mae_clamped
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> CliResult {
    let dir = resolve(&args.report_dir);
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let report = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    render_report(&report, &dir)?;
    println!("re-rendered report in {}", dir.display());
    Ok(())
}
