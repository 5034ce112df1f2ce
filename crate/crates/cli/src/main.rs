use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use activeid_core::harness::{self, parse_override, Condition, ExperimentConfig};
use activeid_core::{verify, Error, SystemId};
use clap::{Args, Parser, Subcommand};

/// Active identification experiments: run sweeps, single episodes and the
/// built-in correctness checks.
#[derive(Parser, Debug)]
#[command(name = "activeid", version)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `planner.population=512`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Use only this seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every condition and seed, writing metrics.csv, heldout.csv and summary.json.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 1 if any median-ordering check fails.
        #[arg(long)]
        strict: bool,
    },
    /// Run one episode and print its metrics as CSV.
    Episode {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `random`, `passive`, or `lambda=<value>`.
        #[arg(long, default_value = "passive")]
        condition: String,
    },
    /// Directed-information equivalence, information-form identity and
    /// conjugate-oracle checks.
    Verify,
    /// List the available systems and their parameter layouts.
    ListSystems,
}

enum Failure {
    Assertion(String),
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut overrides = args
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = args.seed {
        overrides.push(("seeds".into(), format!("[{seed}]")));
    }
    Ok(ExperimentConfig::from_path(&args.config, &overrides)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Run { cfg, out, strict } => {
            let mut config = load(&cfg)?;
            if let Some(out) = out {
                config.output_dir = out;
            }
            let report = harness::run_experiment(&config)?;
            let s = &report.summary;
            for c in &s.conditions {
                writeln!(
                    stdout,
                    "{:<12} param_error {:.4e}  cov_trace {:.4e}  heldout {:.4e} / {:.4e}",
                    c.condition,
                    c.median_final_param_error,
                    c.median_final_cov_trace,
                    c.median_heldout_single_step_err,
                    c.median_heldout_autoregressive_err
                )?;
            }
            for check in &s.checks {
                let status = if check.passed { "PASS" } else { "FAIL" };
                writeln!(
                    stdout,
                    "{status} {}: {} < {}",
                    check.metric, check.better, check.worse
                )?;
            }
            for a in &s.aborted {
                eprintln!("aborted: {} seed {}: {}", a.condition, a.seed, a.reason);
            }
            writeln!(stdout, "wrote {}", config.output_dir.display())?;
            if strict && !s.all_checks_passed() {
                return Err(Failure::Assertion("median-ordering checks failed".into()));
            }
        }
        Command::Episode { cfg, condition } => {
            let config = load(&cfg)?;
            let condition: Condition = condition.parse()?;
            let seed = config.seeds[0];
            let rec = harness::run_episode(&config, condition, seed)?;
            harness::write_metrics_to(&mut stdout, &config.experiment, std::slice::from_ref(&rec))?;
            if let Some(h) = rec.heldout {
                eprintln!(
                    "heldout single-step {:.4e}, autoregressive {:.4e}",
                    h.single_step, h.autoregressive
                );
            }
            if let Some(reason) = rec.aborted {
                return Err(Failure::Runtime(format!("episode aborted: {reason}")));
            }
        }
        Command::Verify => {
            let results = verify::run_all()?;
            for r in &results {
                writeln!(stdout, "{r}")?;
            }
            if results.iter().any(|r| !r.passed) {
                return Err(Failure::Assertion("verification failed".into()));
            }
        }
        Command::ListSystems => {
            for id in SystemId::ALL {
                let sys = id.build_default()?;
                writeln!(
                    stdout,
                    "{id}: {} (n_x={}, n_u={}, n_theta={})",
                    id.description(),
                    sys.n_x(),
                    sys.n_u(),
                    sys.n_theta()
                )?;
                writeln!(stdout, "  theta: {}", sys.theta_layout().join(", "))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertion(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
