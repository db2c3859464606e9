use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hurdle_imdl::experiment::{
    self, compare, load_record, load_splits, sigma_grid, sigma_table_csv, DatasetSpec, Estimation, ExperimentConfig,
    Method,
};
use hurdle_imdl::network::Checkpoint;
use hurdle_imdl::synthgen::{self, DatasetMeta, ForwardModel, SplitSizes, Splits};
use hurdle_imdl::{Error, Result};

/// Exit status for invalid configuration or arguments.
const EXIT_CONFIG: u8 = 2;
/// Exit status when training produced a non-finite loss.
const EXIT_DIVERGENCE: u8 = 3;
/// Exit status for unreadable, unwritable or corrupt files.
const EXIT_IO: u8 = 4;
const EXIT_OTHER: u8 = 1;

#[derive(Parser)]
#[command(name = "hurdle-imdl", version, about = "Hurdle-lognormal regression with inversion-model debiasing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory (train/val/test + dataset.json).
    Generate(GenerateArgs),
    /// Train one configuration, evaluate it on the test split and write a run directory.
    Train(RunArgs),
    /// Grade the checkpoints of an existing run directory.
    Evaluate(EvaluateArgs),
    /// One run per sigma value on shared data.
    SigmaGrid(GridArgs),
    /// Align the per-threshold metrics of several runs on one test split.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = experiment::STANDARD_SEED)]
    seed: u64,
    #[arg(long, default_value_t = SplitSizes::STANDARD.train)]
    n_train: usize,
    #[arg(long, default_value_t = SplitSizes::STANDARD.val)]
    n_val: usize,
    #[arg(long, default_value_t = SplitSizes::STANDARD.test)]
    n_test: usize,
    /// Use the six-channel forward model.
    #[arg(long)]
    six_channel: bool,
    #[arg(long, default_value_t = synthgen::DEFAULT_LMU, allow_negative_numbers = true)]
    lmu: f64,
    #[arg(long, default_value_t = synthgen::DEFAULT_LSIGMA)]
    lsigma: f64,
    #[arg(long, default_value_t = synthgen::DEFAULT_P0)]
    p0: f64,
}

#[derive(Args)]
struct Overrides {
    /// Configuration file (TOML). Without it the standard benchmark is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// hurdle_imdl, hurdle_noimdl, omse, lwmse or nwmse.
    #[arg(long)]
    method: Option<Method>,
    /// single_model or two_model.
    #[arg(long)]
    estimation: Option<Estimation>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Read the splits from a directory written by `generate`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::standard_benchmark(self.method.unwrap_or(Method::HurdleImdl)),
        };
        if let Some(m) = self.method {
            cfg.method = m;
            if self.config.is_none() && self.name.is_none() {
                cfg.name = m.name().to_string();
            }
        }
        if let Some(v) = &self.name {
            cfg.name = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.estimation {
            cfg.estimation = v;
        }
        if let Some(v) = self.sigma {
            cfg.train.sigma = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.train.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.train.patience = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = &self.data {
            cfg.dataset = DatasetSpec::Files { path: v.clone() };
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = Some(v.clone());
        }
        if cfg.output_dir.is_none() {
            cfg.output_dir = Some(PathBuf::from("runs"));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated sigma values; defaults to the config's grid, then 0.2..0.7.
    #[arg(long, value_delimiter = ',')]
    sigmas: Vec<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory; defaults to the data named in the run's config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write `<prefix>.csv` and `<prefix>.json` instead of printing CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories or configuration files; configurations are run first.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Write `<prefix>.csv` and `<prefix>.json` instead of printing CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: &Option<PathBuf>, csv: &str, json: &str) -> Result<()> {
    match out {
        Some(prefix) => {
            write(&prefix.with_extension("csv"), csv)?;
            write(&prefix.with_extension("json"), json)
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn generate(args: &GenerateArgs) -> Result<()> {
    let prior = hurdle_imdl::MarginalPrior64::new(args.lmu, args.lsigma, args.p0).map_err(|e| Error::Config(e.to_string()))?;
    let forward_model = if args.six_channel { ForwardModel::six_channel() } else { ForwardModel::single_channel() };
    let sizes = SplitSizes { train: args.n_train, val: args.n_val, test: args.n_test };
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::Config("every split needs at least one sample".into()));
    }
    let splits = synthgen::generate_splits(&DatasetMeta { prior, forward_model, seed: args.seed, sizes })?;
    splits.save(&args.out)?;
    eprintln!("wrote {} (test split {})", args.out.display(), experiment::fingerprint(&splits.test));
    Ok(())
}

fn train(args: &RunArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let rec = experiment::run(&cfg)?;
    print!("{}", experiment::summary(&rec));
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let rec = load_record(&args.run)?;
    let splits = match &args.data {
        Some(dir) => Splits::load(dir)?,
        None => load_splits(&rec.config)?,
    };
    let checkpoints = rec
        .checkpoints
        .iter()
        .map(|p| {
            let name = p.file_name().ok_or_else(|| Error::Corrupt(format!("bad checkpoint path {}", p.display())))?;
            Checkpoint::load(args.run.join(name))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = experiment::evaluate(&checkpoints, &splits.test)?;
    emit(&args.out, &report.to_csv(), &report.to_json())
}

fn grid(args: &GridArgs) -> Result<()> {
    let mut cfg = args.overrides.resolve()?;
    if !args.sigmas.is_empty() {
        cfg.sigma_grid = args.sigmas.clone();
    } else if cfg.sigma_grid.is_empty() {
        cfg.sigma_grid = experiment::STANDARD_SIGMA_GRID.to_vec();
    }
    let records = sigma_grid(&cfg)?;
    print!("{}", sigma_table_csv(&records));
    Ok(())
}

fn compare_cmd(args: &CompareArgs) -> Result<()> {
    let records = args
        .inputs
        .iter()
        .map(|p| if p.is_dir() { load_record(p) } else { experiment::run(&ExperimentConfig::load(p)?) })
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare(&records)?;
    emit(&args.out, &cmp.to_csv(), &cmp.to_json())
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) | Error::SplitMismatch(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Io { .. } | Error::Corrupt(_) | Error::Version { .. } => EXIT_IO,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::SigmaGrid(a) => grid(a),
        Command::Compare(a) => compare_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
