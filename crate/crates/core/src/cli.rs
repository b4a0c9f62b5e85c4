//! Command-line interface.
//!
//! Subcommands cover the full workflow: `synth` writes a toy dataset,
//! `train` fits one model and saves a checkpoint, `cv` / `ablate` / `noise`
//! run the cross-validated experiments and emit results JSON plus an
//! aligned summary table, `gradcheck` verifies the analytic gradient, and
//! `metrics` scores one CSV of distributions against another. Exit codes:
//! 0 success, 1 usage or config problems, 2 data or I/O problems, 3
//! numerical failures.

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{load_csv, save_csv, synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::harness::{
    ablation, cross_validate, default_noise_variances, format_table, grad_check,
    noise_experiment, save_checkpoint, train, AblationResult, CvResult, DatasetInfo, NoiseRun,
    RunMeta, TrainConfig, TrainHistory,
};
use crate::metrics::evaluate_dataset;

#[derive(Debug, Parser)]
#[command(
    name = "ldlgrid",
    version,
    about = "Label distribution learning with a noisy label-correlation grid"
)]
struct Cli {
    /// Worker threads for fold-level parallelism (default: all cores).
    /// Results do not depend on this; 1 forces sequential execution.
    #[arg(long, global = true, env = "LDLGRID_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a whole dataset and write a model checkpoint.
    Train(TrainArgs),
    /// Repeated k-fold cross-validation.
    Cv(CvArgs),
    /// Cross-validate the full objective against single-term removals.
    Ablate(CvArgs),
    /// Retrain under increasing label noise.
    Noise(NoiseArgs),
    /// Compare the analytic gradient with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset CSV.
    Synth(SynthArgs),
    /// Score the label block of one CSV against another's.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Dataset CSV: columns f0..f{n-1}, l0..l{t-1}.
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON; omitted fields take built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<(Dataset, TrainConfig)> {
        let dataset = load_csv(&self.data)?;
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::Config(format!("config file {}: {e}", path.display()))
                })?
            }
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok((dataset, config))
    }
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Write the results document (JSON) here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Omit the timestamp so repeated runs produce identical bytes.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the loss history document (JSON) here.
    #[arg(long)]
    history_out: Option<PathBuf>,
    /// Omit the timestamp from the history document.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct NoiseArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Comma-separated noise variances (default 0.1,0.2,...,1.0).
    #[arg(long, value_delimiter = ',')]
    variances: Vec<f64>,
    /// Perturb only the training labels and score against clean ones.
    #[arg(long)]
    train_only: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Dataset CSV; defaults to a small built-in synthetic instance.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training config JSON; defaults to a small full-objective config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    #[arg(long, default_value_t = 10)]
    features: usize,
    #[arg(long, default_value_t = 5)]
    labels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// CSV holding the reference label distributions.
    #[arg(long)]
    truth: PathBuf,
    /// CSV holding the predicted label distributions.
    #[arg(long)]
    pred: PathBuf,
    /// Write the report (JSON) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.workers {
        Some(0) => Err(Error::Config("workers must be positive".into())),
        Some(workers) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            pool.install(|| run_command(cli.command))
        }
        None => run_command(cli.command),
    }
}

fn run_command(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Cv(args) => cmd_cv(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Noise(args) => cmd_noise(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Metrics(args) => cmd_metrics(args),
    }
}

fn make_meta(
    command: &str,
    dataset: &Dataset,
    config: &TrainConfig,
    repeats: Option<usize>,
    folds: Option<usize>,
    with_timestamp: bool,
) -> RunMeta {
    RunMeta {
        tool: "ldlgrid".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        dataset: DatasetInfo::describe(dataset),
        seed: config.seed,
        repeats,
        folds,
        timestamp: with_timestamp.then(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        }),
        config: config.clone(),
    }
}

fn write_doc<T: Serialize>(path: &PathBuf, doc: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(doc)?;
    json.push('\n');
    std::fs::write(path, json)?;
    println!("results written to {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainDoc {
    meta: RunMeta,
    history: TrainHistory,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (dataset, config) = args.common.load()?;
    let model = train(&config, &dataset)?;
    for (i, e) in model.history.epochs.iter().enumerate() {
        println!(
            "epoch {:>4}  total {:.6}  l1 {:.6}  grid {:.6}  proj {:.6}  {:.2}s",
            i + 1,
            e.total,
            e.l1,
            e.lcg,
            e.ldp,
            e.seconds
        );
    }
    let report = crate::harness::evaluate(&model, &dataset);
    println!(
        "training-split scores: chebyshev {:.6}, clark {:.6}, canberra {:.6}, kl {:.6}, cosine {:.6}, intersection {:.6}",
        report.chebyshev, report.clark, report.canberra, report.kl, report.cosine,
        report.intersection
    );
    save_checkpoint(&model, &args.out)?;
    println!("checkpoint written to {}", args.out.display());
    if let Some(path) = &args.history_out {
        let doc = TrainDoc {
            meta: make_meta("train", &dataset, &config, None, None, !args.no_timestamp),
            history: model.history.clone(),
        };
        write_doc(path, &doc)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CvDoc {
    meta: RunMeta,
    result: CvResult,
}

fn cmd_cv(args: CvArgs) -> Result<()> {
    let (dataset, config) = args.common.load()?;
    let result = cross_validate(&config, &dataset, args.repeats, args.folds)?;
    println!(
        "{}: {} repeats x {} folds",
        dataset.name(),
        args.repeats,
        args.folds
    );
    print!(
        "{}",
        format_table(&[("cv".to_string(), result.aggregate)])
    );
    if let Some(path) = &args.output.out {
        let doc = CvDoc {
            meta: make_meta(
                "cv",
                &dataset,
                &config,
                Some(args.repeats),
                Some(args.folds),
                !args.output.no_timestamp,
            ),
            result,
        };
        write_doc(path, &doc)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationDoc {
    meta: RunMeta,
    result: AblationResult,
}

fn cmd_ablate(args: CvArgs) -> Result<()> {
    let (dataset, config) = args.common.load()?;
    let result = ablation(&config, &dataset, args.repeats, args.folds)?;
    println!(
        "{}: {} repeats x {} folds",
        dataset.name(),
        args.repeats,
        args.folds
    );
    print!(
        "{}",
        format_table(&[
            ("full".to_string(), result.full.aggregate),
            ("without grid".to_string(), result.without_lcg.aggregate),
            ("without projection".to_string(), result.without_ldp.aggregate),
        ])
    );
    if let Some(path) = &args.output.out {
        let doc = AblationDoc {
            meta: make_meta(
                "ablate",
                &dataset,
                &config,
                Some(args.repeats),
                Some(args.folds),
                !args.output.no_timestamp,
            ),
            result,
        };
        write_doc(path, &doc)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct NoiseDoc {
    meta: RunMeta,
    train_only: bool,
    runs: Vec<NoiseRun>,
}

fn cmd_noise(args: NoiseArgs) -> Result<()> {
    let (dataset, config) = args.common.load()?;
    let variances = if args.variances.is_empty() {
        default_noise_variances()
    } else {
        args.variances.clone()
    };
    let runs = noise_experiment(
        &config,
        &dataset,
        &variances,
        args.train_only,
        args.repeats,
        args.folds,
    )?;
    println!(
        "{}: {} repeats x {} folds, noise on {}",
        dataset.name(),
        args.repeats,
        args.folds,
        if args.train_only {
            "training labels only"
        } else {
            "training and evaluation labels"
        }
    );
    let rows: Vec<(String, crate::metrics::AggregateReport)> = runs
        .iter()
        .map(|run| (format!("var {:.2}", run.variance), run.result.aggregate))
        .collect();
    print!("{}", format_table(&rows));
    if let Some(path) = &args.output.out {
        let doc = NoiseDoc {
            meta: make_meta(
                "noise",
                &dataset,
                &config,
                Some(args.repeats),
                Some(args.folds),
                !args.output.no_timestamp,
            ),
            train_only: args.train_only,
            runs,
        };
        write_doc(path, &doc)?;
    }
    Ok(())
}

/// Default gradient-check fixture: a small synthetic dataset and a config
/// exercising every loss term.
fn gradcheck_fixture() -> (Dataset, TrainConfig) {
    let dataset = synth_dataset(8, 5, 4, 42).expect("valid fixture shape");
    let config = TrainConfig {
        batch_size: 4,
        hidden: 8,
        enable_ldp: true,
        ldp_dim: Some(3),
        seed: 42,
        ..TrainConfig::default()
    };
    (dataset, config)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let (fixture_data, fixture_config) = gradcheck_fixture();
    let dataset = match &args.data {
        Some(path) => load_csv(path)?,
        None => fixture_data,
    };
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?
        }
        None => fixture_config,
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let result = grad_check(&config, &dataset)?;
    println!(
        "checked {} coordinates ({} excluded near kinks): max relative error {:.3e}",
        result.checked, result.excluded, result.max_rel_error
    );
    if result.max_rel_error > args.tol {
        return Err(Error::Numerical(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.3e}",
            result.max_rel_error, args.tol
        )));
    }
    println!("gradient check passed (tolerance {:.3e})", args.tol);
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let dataset = synth_dataset(args.instances, args.features, args.labels, args.seed)?;
    save_csv(&dataset, &args.out)?;
    println!(
        "wrote {} instances ({} features, {} labels) to {}",
        dataset.m(),
        dataset.n(),
        dataset.t(),
        args.out.display()
    );
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let truth = load_csv(&args.truth)?;
    let pred = load_csv(&args.pred)?;
    if truth.m() != pred.m() || truth.t() != pred.t() {
        return Err(Error::Data(format!(
            "label blocks disagree: {} has {}x{}, {} has {}x{}",
            args.truth.display(),
            truth.m(),
            truth.t(),
            args.pred.display(),
            pred.m(),
            pred.t()
        )));
    }
    let report = evaluate_dataset(truth.labels(), pred.labels());
    for (name, value) in crate::metrics::METRIC_NAMES.iter().zip(report.as_array()) {
        println!("{name:<13} {value:.6}");
    }
    if let Some(path) = &args.out {
        write_doc(path, &report)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_noise_variance_lists() {
        let cli = Cli::try_parse_from([
            "ldlgrid", "noise", "--data", "x.csv", "--variances", "0.1,0.5,1.0",
        ])
        .unwrap();
        match cli.command {
            Command::Noise(args) => assert_eq!(args.variances, vec![0.1, 0.5, 1.0]),
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn workers_flag_is_global() {
        let cli = Cli::try_parse_from([
            "ldlgrid", "cv", "--data", "x.csv", "--workers", "3",
        ])
        .unwrap();
        assert_eq!(cli.workers, Some(3));
    }

    #[test]
    fn help_and_bad_flags_map_to_exit_codes() {
        assert_eq!(run(["ldlgrid", "--help"]), 0);
        assert_eq!(run(["ldlgrid", "--version"]), 0);
        assert_eq!(run(["ldlgrid", "frobnicate"]), 1);
        assert_eq!(run(["ldlgrid", "cv"]), 1);
    }

    #[test]
    fn gradcheck_fixture_passes_its_own_check() {
        let (dataset, config) = gradcheck_fixture();
        let result = grad_check(&config, &dataset).unwrap();
        assert!(result.max_rel_error < 1e-4);
    }

    #[test]
    fn missing_dataset_is_a_data_error() {
        assert_eq!(run(["ldlgrid", "cv", "--data", "/nonexistent/x.csv"]), 2);
    }
}
