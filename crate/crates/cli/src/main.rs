mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use coordloc::ingest::{ingest_sipakmed, ingest_vfdb, IngestOptions};
use coordloc::models::{gradcheck_network, NetworkSpec, Variant};
use coordloc::stats::{DEFAULT_LAMBDA, DEFAULT_RESAMPLES};
use coordloc::tensor::gradcheck::op_suite;
use coordloc::train::{run_experiment, ExperimentConfig};
use coordloc::{Error, Task};

/// Coordinate-channel localisation experiments: data, training and reports.
#[derive(Debug, Parser)]
#[command(name = "coordloc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Image,
    Ecg,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Image => Task::Image,
            TaskArg::Ecg => Task::Ecg,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    Reduced,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::Reduced => Variant::Reduced,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Source {
    /// Cell images with `<stem>_nuc.dat` or `<stem>.dat` contour files.
    Sipakmed,
    /// WFDB records (`.hea`, signal file, `.atr` annotations).
    Vfdb,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset container.
    Synth {
        /// Which task to generate data for.
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Number of base samples.
        #[arg(long, default_value_t = 200)]
        n_base: usize,
        /// Augmented variants per base sample.
        #[arg(long, default_value_t = 0)]
        augment: usize,
        /// Random seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output container directory.
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing container.
        #[arg(long)]
        force: bool,
    },
    /// Convert a directory of source records into a dataset container.
    Ingest {
        /// Source format.
        #[arg(long, value_enum)]
        source: Source,
        /// Directory holding the source files.
        #[arg(long)]
        input: PathBuf,
        /// Output container directory.
        #[arg(long)]
        out: PathBuf,
        /// Augmented variants per base sample.
        #[arg(long, default_value_t = 0)]
        augment: usize,
        /// Augmentation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace an existing container.
        #[arg(long)]
        force: bool,
    },
    /// Print a default experiment configuration as JSON.
    Config {
        /// Dataset container the configuration points to.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run cross-validated training for every configured arm.
    Train {
        /// Experiment configuration (JSON).
        #[arg(long, required_unless_present = "dataset")]
        config: Option<PathBuf>,
        /// Dataset container; overrides the configuration.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Seed; overrides the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Epochs; overrides the configuration.
        #[arg(long)]
        epochs: Option<usize>,
        /// Run directory for the log, configuration and checkpoints.
        /// An existing run with the same configuration is resumed.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated encodings or arm names to train.
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
        /// Discard an existing run directory and start over.
        #[arg(long)]
        force: bool,
    },
    /// Superiority table and R² curve plots from training logs.
    Report {
        /// Run directories or `train_log.csv` files; rows are concatenated.
        #[arg(long = "log", required = true, num_args = 1..)]
        logs: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Network name used in the table (default: from the run's dataset).
        #[arg(long)]
        network: Option<String>,
        /// Bootstrap resamples.
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
        /// Bootstrap seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Smoothing strength for the instability score.
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        /// Replace an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference gradient checks of every operation and network.
    Gradcheck {
        /// Random inputs per operation.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Skip the whole-network checks.
        #[arg(long)]
        ops_only: bool,
    },
    /// Print the layer table of a network.
    Describe {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "full")]
        variant: VariantArg,
    },
}

/// A failed self-check; exits with 1.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Maps failures to exit codes: 2 usage, 3 data, 4 incomplete input.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Incomplete(_)) => 4,
        Some(Error::Config(_)) | Some(Error::InvalidArgument(_)) => 2,
        _ => 3,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("COORDLOC_THREADS") {
        let n =
            v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::InvalidArgument(format!("COORDLOC_THREADS must be a positive integer, got '{v}'"))
            })?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth {
            task,
            n_base,
            augment,
            seed,
            out,
            force,
        } => {
            let s = coordloc::synth::gen_dataset(task.into(), n_base, augment, seed, &out, force)?;
            println!("wrote {} samples to {}", s.count, s.path.display());
        }
        Command::Ingest {
            source,
            input,
            out,
            augment,
            seed,
            force,
        } => {
            let opts = IngestOptions {
                augment_count: augment,
                seed,
                force,
                ..IngestOptions::default()
            };
            let r = match source {
                Source::Sipakmed => ingest_sipakmed(&input, &out, &opts)?,
                Source::Vfdb => ingest_vfdb(&input, &out, &opts)?,
            };
            println!(
                "wrote {} samples to {}; {} excluded, {} failed (see {})",
                r.written,
                r.container.display(),
                r.excluded.len(),
                r.failures.len(),
                r.container.join(coordloc::ingest::EXCLUDED_FILE).display()
            );
        }
        Command::Config { dataset } => {
            println!("{}", ExperimentConfig::new(dataset).to_json());
        }
        Command::Train {
            config,
            dataset,
            seed,
            epochs,
            out,
            arms,
            force,
        } => {
            let mut cfg = match &config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    ExperimentConfig::from_json(&text)?
                }
                None => ExperimentConfig::new(dataset.clone().expect("clap requires --dataset without --config")),
            };
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate()?;
            if force && out.exists() {
                std::fs::remove_dir_all(&out).with_context(|| format!("removing {}", out.display()))?;
            }
            let result = run_experiment(&cfg, &out, arms.as_deref())?;
            println!(
                "trained {} fold(s), {} resumed; log at {}",
                result.trained.len(),
                result.final_test_r2.values().map(|v| v.len()).sum::<usize>() - result.trained.len(),
                result.log_path.display()
            );
            for (arm, r2) in &result.final_test_r2 {
                let shown: Vec<String> = r2.iter().map(|v| format!("{v:.4}")).collect();
                println!("  {arm}: final test R² [{}]", shown.join(", "));
            }
        }
        Command::Report {
            logs,
            out,
            network,
            resamples,
            seed,
            lambda,
            force,
        } => {
            let opts = report::ReportOptions {
                network,
                resamples,
                seed,
                lambda,
                force,
            };
            let summary = report::run(&logs, &out, &opts)?;
            print!("{summary}");
        }
        Command::Gradcheck { seeds, ops_only } => gradcheck(seeds, ops_only)?,
        Command::Describe { task, variant } => {
            let spec = NetworkSpec::for_task(task.into(), variant.into());
            print!("{}", spec.layer_table());
            println!("parameters: {}", spec.total_params());
        }
    }
    Ok(())
}

fn gradcheck(seeds: u64, ops_only: bool) -> anyhow::Result<()> {
    let mut failed = 0;
    for seed in 0..seeds {
        for c in op_suite(seed)? {
            println!("seed {seed}  {c}");
            failed += usize::from(!c.passed());
        }
    }
    if !ops_only {
        for spec in [
            NetworkSpec::nimeshanet(Variant::Full),
            NetworkSpec::nimeshanet(Variant::Reduced),
            NetworkSpec::lakshyanet(Variant::Full),
            NetworkSpec::lakshyanet(Variant::Reduced),
        ] {
            let batch = if spec.task == Task::Image { 2 } else { 4 };
            let c = gradcheck_network(&spec, batch, 2, 0, 1e-3)?;
            println!("network {c}");
            failed += usize::from(!c.passed());
        }
    }
    if failed > 0 {
        return Err(CheckFailed(format!("{failed} gradient check(s) failed")).into());
    }
    println!("all gradient checks passed");
    Ok(())
}
