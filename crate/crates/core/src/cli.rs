//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed check or I/O error, 2 invalid scenario,
//! 3 solver or message-exchange failure during a run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{ConfigError, ScenarioConfig};
use crate::sim;
use crate::stability::{check_weight_condition, counterexample_norms};
use crate::topology::{nilpotency_index, terminal_error_matrix};

#[derive(Debug, Parser)]
#[command(name = "dmpc", version, about = "Distributed MPC platoon simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write CSV results.
    Run {
        /// Preset name or path to a scenario JSON file.
        scenario: String,
        /// Directory for the CSV files and the echoed run.json.
        #[arg(long, default_value = "dmpc-out")]
        out: PathBuf,
        /// Override the seed used to draw the vehicle lags.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of followers.
        #[arg(short = 'N', long = "vehicles")]
        n: Option<usize>,
    },
    /// Static checks: connectivity, terminal-error nilpotency, weights.
    Check {
        /// Preset name or path to a scenario JSON file.
        scenario: String,
        #[arg(short = 'N', long = "vehicles")]
        n: Option<usize>,
    },
    /// Evaluate the two counterexamples for matrix-weighted costs.
    Counterexample,
    /// Print a preset as an editable scenario file.
    Scaffold { preset: String },
}

#[derive(Debug)]
enum Failure {
    Check,
    Io(String),
    Scenario(String),
    Run(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check | Failure::Io(_) => 1,
            Failure::Scenario(_) => 2,
            Failure::Run(_) => 3,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Scenario(e.to_string())
    }
}

/// Loads a scenario from a file path, falling back to a preset name.
pub fn load_scenario(arg: &str) -> Result<ScenarioConfig, ConfigError> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Invalid {
            key: arg.to_string(),
            reason: e.to_string(),
        })?;
        ScenarioConfig::from_json(&text)
    } else {
        ScenarioConfig::preset(arg)
    }
}

fn run(scenario: &str, out: &Path, seed: Option<u64>, n: Option<usize>) -> Result<(), Failure> {
    let mut cfg = load_scenario(scenario)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(n) = n {
        cfg.n = n;
    }
    let scenario = cfg.resolve()?;
    log::info!(
        "running {} with {} followers for {} steps",
        if cfg.name.is_empty() { "scenario" } else { &cfg.name },
        cfg.n,
        scenario.steps
    );
    let output = sim::run(&scenario).map_err(|e| Failure::Run(e.to_string()))?;
    sim::write_outputs(out, &scenario, &output).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
    let violations = output.lyapunov_violations();
    println!("steps: {}", output.history.steps());
    println!("max |spacing error|: {:.6e}", output.metrics.max_abs_spacing_error());
    println!(
        "final max |spacing error|: {:.6e}",
        output
            .metrics
            .spacing_errors
            .last()
            .map_or(0.0, |r| r.iter().fold(0.0, |a, e| f64::max(a, e.abs())))
    );
    println!(
        "stability monitor: {} steps checked, {} violations",
        output.lyapunov.monitored().count(),
        violations
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn check(scenario: &str, n: Option<usize>) -> Result<(), Failure> {
    let mut cfg = load_scenario(scenario)?;
    if let Some(n) = n {
        cfg.n = n;
    }
    let graph = cfg.graph()?;
    let mut pass = true;
    match graph.validate_connectivity() {
        Ok(()) => {
            println!("connectivity: pass");
            let t = terminal_error_matrix(&graph, cfg.dt, cfg.spacing.delta_h)
                .map_err(|e| Failure::Scenario(e.to_string()))?;
            match nilpotency_index(&t) {
                Ok(k) => {
                    let ok = k <= cfg.n;
                    pass &= ok;
                    println!(
                        "terminal error matrix: nilpotent with index {k} (N = {}): {}",
                        cfg.n,
                        if ok { "pass" } else { "FAIL" }
                    );
                }
                Err(e) => {
                    pass = false;
                    println!("terminal error matrix: FAIL: {e}");
                }
            }
        }
        Err(v) => {
            pass = false;
            println!("connectivity: FAIL: {v}");
        }
    }
    let weights = cfg.cost_weights(&graph)?;
    let report = check_weight_condition(&graph, &weights);
    pass &= report.pass;
    println!("{report}");
    if pass {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn scaffold(preset: &str) -> Result<(), Failure> {
    println!("{}", ScenarioConfig::preset(preset)?.to_json());
    Ok(())
}

/// Parses arguments, runs the command and maps failures to exit codes.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, out, seed, n } => run(&scenario, &out, seed, n),
        Command::Check { scenario, n } => check(&scenario, n),
        Command::Counterexample => {
            println!("{}", counterexample_norms());
            Ok(())
        }
        Command::Scaffold { preset } => scaffold(&preset),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Check => eprintln!("check failed"),
                Failure::Io(m) => eprintln!("error: {m}"),
                Failure::Scenario(m) => eprintln!("error: {m}"),
                Failure::Run(m) => eprintln!("run failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
