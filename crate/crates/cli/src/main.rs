//! `curveseg` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use curveseg::basis::SplineBasis;
use curveseg::fmda::{Method, TrainSpec};
use curveseg::mixrhlp::FitConfig;

#[derive(Debug, Parser)]
#[command(
    name = "curveseg",
    version,
    about = "Curve classification with mixtures of hidden logistic process regressions"
)]
struct Cli {
    /// Worker threads for independent fits (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Where to write the run manifest (default: next to the main output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled curve set and its ground-truth sidecar.
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Fit one density model per class and save the classifier.
    Train(TrainArgs),
    /// Assign curves to classes with a saved model.
    Classify(ClassifyArgs),
    /// Choose clusters, regimes and degree per class by BIC.
    Select(SelectArgs),
    /// Cross-validated error, inertia and optional sub-class agreement.
    Evaluate(EvaluateArgs),
    /// Print a saved model and export plot-ready mean curves and regime probabilities.
    Inspect(InspectArgs),
}

#[derive(Debug, Subcommand)]
enum SimulateCommand {
    /// Piecewise-constant regime curves: a three-sub-class class and a homogeneous class.
    Piecewise(PiecewiseArgs),
    /// Breiman waveforms.
    Waveform(WaveformArgs),
}

#[derive(Debug, Args, Serialize)]
struct SimulateOutput {
    /// Labeled curve CSV to write.
    #[arg(long, default_value = "curves.csv")]
    out: PathBuf,
    /// Ground-truth sidecar (default: `<out stem>.truth.csv`).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct PiecewiseArgs {
    #[command(flatten)]
    #[serde(flatten)]
    output: SimulateOutput,
    /// Curves per sub-class.
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// Noise standard deviation.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Scheme {
    /// Original classes 1 and 2 pooled against class 3.
    Merged,
    /// The three original classes.
    Original,
}

#[derive(Debug, Args, Serialize)]
struct WaveformArgs {
    #[command(flatten)]
    #[serde(flatten)]
    output: SimulateOutput,
    /// Curves per output class.
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, value_enum, default_value_t = Scheme::Merged)]
    scheme: Scheme,
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random initializations per fit; the best final log-likelihood wins.
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    /// Relative log-likelihood change that stops EM.
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
}

impl FitArgs {
    fn config(&self) -> Result<FitConfig, Failure> {
        let config = FitConfig {
            seed: self.seed,
            restarts: self.restarts,
            epsilon: self.epsilon,
            max_iter: self.max_iter,
            ..FitConfig::default()
        };
        config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Debug, Args, Serialize)]
struct ModelArgs {
    #[arg(long, default_value = "fmda-mixrhlp")]
    method: Method,
    /// Clusters per class, comma separated; one value applies to every class.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    k: Vec<usize>,
    /// Regimes per class, comma separated; one value applies to every class.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    l: Vec<usize>,
    /// Polynomial degree.
    #[arg(long, default_value_t = 0)]
    p: usize,
    /// Spline degree for spline methods.
    #[arg(long, default_value_t = 3)]
    spline_degree: usize,
    /// Interior knots for spline methods.
    #[arg(long, default_value_t = 10)]
    knots: usize,
}

impl ModelArgs {
    fn spec(&self, classes: usize) -> Result<TrainSpec, Failure> {
        let spline = SplineBasis::new(self.spline_degree, self.knots).map_err(|e| Failure::Usage(e.to_string()))?;
        TrainSpec::new(self.method, &self.k, &self.l, self.p, classes)
            .map(|s| s.with_spline(spline))
            .map_err(|e| Failure::Usage(e.to_string()))
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Labeled curve CSV.
    #[arg(long, default_value = "curves.csv")]
    input: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    fit: FitArgs,
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Fit report JSON (default: `<out stem>.report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ClassifyArgs {
    #[arg(long, default_value = "model.json")]
    model: PathBuf,
    #[arg(long, default_value = "curves.csv")]
    input: PathBuf,
    /// The input has no leading label column.
    #[arg(long)]
    unlabeled: bool,
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SelectArgs {
    #[arg(long, default_value = "curves.csv")]
    input: PathBuf,
    /// The input has no leading label column (treated as one class).
    #[arg(long)]
    unlabeled: bool,
    /// Only this class (1-based); default every class.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, default_value_t = 4)]
    kmax: usize,
    #[arg(long, default_value_t = 4)]
    lmax: usize,
    #[arg(long, default_value_t = 4)]
    pmax: usize,
    #[command(flatten)]
    #[serde(flatten)]
    fit: FitArgs,
    #[arg(long, default_value = "selection.csv")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long, default_value = "curves.csv")]
    input: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Ground-truth sidecar; adds the sub-class adjusted Rand index.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value = "evaluation.json")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct InspectArgs {
    #[arg(long, default_value = "model.json")]
    model: PathBuf,
    /// Directory receiving `mean_curves.csv` and `logistic_probabilities.csv`.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(curveseg::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(curveseg::Error::Numerical(_)) => 3,
            Failure::Core(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(msg) => write!(f, "usage error: {msg}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<curveseg::Error> for Failure {
    fn from(e: curveseg::Error) -> Self {
        Failure::Core(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot start {jobs} worker threads: {e}")))?;
    }
    let manifest = cli.manifest.as_deref();
    match &cli.command {
        Command::Simulate(SimulateCommand::Piecewise(args)) => commands::simulate_piecewise(args, manifest),
        Command::Simulate(SimulateCommand::Waveform(args)) => commands::simulate_waveform(args, manifest),
        Command::Train(args) => commands::train(args, manifest),
        Command::Classify(args) => commands::classify(args, manifest),
        Command::Select(args) => commands::select(args, manifest),
        Command::Evaluate(args) => commands::evaluate(args, manifest),
        Command::Inspect(args) => commands::inspect(args, manifest),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CURVESEG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("curveseg: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}
