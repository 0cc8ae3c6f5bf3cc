use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ra_sim_core::dump::TrialDump;
use ra_sim_core::harness::config::FAST_TRIALS;
use ra_sim_core::harness::sweep::output_path;
use ra_sim_core::harness::trial::simulate;
use ra_sim_core::harness::{correlation_csv, run_to_file, trial_seed, ExperimentConfig, PointContext};
use ra_sim_core::Error;

#[derive(Parser)]
#[command(name = "ra-sim", version, about = "Multi-satellite grant-free random access simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a parameter sweep and write a CSV of NMSE, AEP and BER.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Use 50 trials per point regardless of the configured count.
        #[arg(long)]
        fast: bool,
        /// Worker threads (defaults to the number of cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Directory for the CSV; overrides the directory of `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Monte Carlo samples of the two-user channel correlation.
    Corr {
        /// Satellite counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,5")]
        q: Vec<usize>,
        #[arg(long, default_value_t = 5000)]
        trials: usize,
        /// Angle offset between the two users in radians.
        #[arg(long, default_value_t = 0.0)]
        delta_theta: f64,
        #[arg(long, default_value_t = 100)]
        nr: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the channel truth and received bursts of one trial as text.
    Dump {
        #[arg(long)]
        config: PathBuf,
        /// Index into `sweep_values`.
        #[arg(long, default_value_t = 0)]
        point: usize,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, fast, workers, out, quiet } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if fast {
                cfg.trials = FAST_TRIALS;
            }
            if let Some(n) = workers {
                if n == 0 {
                    return Err(Error::Config("--workers must be >= 1".into()));
                }
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| Error::Config(format!("cannot size worker pool: {e}")))?;
            }
            let path = output_path(&cfg, out.as_deref());
            let rows = run_to_file(&cfg, &path, !quiet)?;
            if !quiet {
                eprintln!("wrote {} rows to {}", rows.len(), path.display());
            }
        }
        Command::Corr { q, trials, delta_theta, nr, seed, out } => {
            let medians = match &out {
                Some(path) => correlation_csv(&q, trials, nr, delta_theta, seed, std::fs::File::create(path)?)?,
                None => correlation_csv(&q, trials, nr, delta_theta, seed, std::io::stdout().lock())?,
            };
            for (q, m) in medians {
                eprintln!("Q = {q}: median correlation {m:.4}");
            }
        }
        Command::Dump { config, point, trial, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let value = *cfg
                .sweep_values
                .get(point)
                .ok_or_else(|| Error::Config(format!("point {point} outside {} sweep values", cfg.sweep_values.len())))?;
            let ctx = PointContext::new(cfg.scenario.with(cfg.sweep_axis, value)?, cfg.seed)?;
            let data = simulate(&ctx, trial_seed(cfg.seed, trial))?;
            std::fs::write(&out, TrialDump::new(&data.truth, &data.rx).to_text())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ra-sim: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
