use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use equidecomp::dgp::ScmConfig;
use equidecomp::{Backend, Standardization};
use equidecomp_cli::report::write_pair;
use equidecomp_cli::run;
use equidecomp_cli::{exit, CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "equidecomp", version, about = "Decompose an outcome disparity into the part a target intervention removes and the residual")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the decomposition and write a JSON and text report.
    Decompose(RunArgs),
    /// Check positivity and common support only.
    Check(RunArgs),
    /// Generate a cohort from the structural model and write it as CSV.
    Simulate(SimulateArgs),
    /// Check the reductions to established estimators on random joints.
    Reductions(ReductionArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    input: Option<PathBuf>,
    /// Report path stem (`.json` and `.txt` are appended).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// rmpw, iorw or monte_carlo_g.
    #[arg(long)]
    backend: Option<String>,
    /// pooled, marginalized_to_r0 or marginalized_to_r0_prime.
    #[arg(long)]
    standardization: Option<String>,
    /// Preset id 1-6; replaces any explicit partition.
    #[arg(long)]
    preset: Option<u8>,
    /// Bootstrap replicates (0 turns the bootstrap off).
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    truncation: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    rows: usize,
    #[arg(long)]
    output: PathBuf,
    /// TOML structural-model configuration; defaults to the reference model.
    #[arg(long)]
    scm: Option<PathBuf>,
}

#[derive(Args)]
struct ReductionArgs {
    /// Random joints per row.
    #[arg(long, default_value_t = 100)]
    joints: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write `<stem>.json` and `<stem>.txt`.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_name<T: DeserializeOwned>(what: &str, s: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::Config(format!("unknown {what} `{s}`")))
}

fn run_config(args: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(p) = &args.input {
        cfg.input = std::path::absolute(p).map_err(|e| CliError::Io(e.to_string()))?;
    }
    if let Some(p) = &args.output {
        cfg.output = std::path::absolute(p).map_err(|e| CliError::Io(e.to_string()))?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(b) = &args.backend {
        cfg.backend = parse_name::<Backend>("backend", b)?;
    }
    if let Some(s) = &args.standardization {
        cfg.standardization = parse_name::<Standardization>("standardization", s)?;
    }
    if let Some(p) = args.preset {
        cfg.preset = Some(p);
        cfg.partition = None;
    }
    match args.replicates {
        Some(0) => cfg.bootstrap = None,
        Some(n) => {
            let mut b = cfg.bootstrap.unwrap_or(equidecomp_cli::config::BootstrapSection {
                replicates: n,
                level: 0.95,
                stratify_by_race: true,
            });
            b.replicates = n;
            cfg.bootstrap = Some(b);
        }
        None => {}
    }
    if args.truncation.is_some() {
        cfg.truncation = args.truncation;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> CliResult<u8> {
    match cli.command {
        Command::Decompose(args) => {
            let cfg = run_config(&args)?;
            let report = run::decompose(&cfg)?;
            let text = report.to_text();
            let (json, _) = write_pair(&cfg.output_path(), &report, &text)?;
            print!("{text}");
            log::info!("report written to {}", json.display());
            Ok(exit::SUCCESS)
        }
        Command::Check(args) => {
            let cfg = run_config(&args)?;
            let report = run::check(&cfg)?;
            let text = report.to_text();
            write_pair(&cfg.output_path(), &report, &text)?;
            print!("{text}");
            Ok(if report.positivity.is_clean() { exit::SUCCESS } else { exit::POSITIVITY })
        }
        Command::Simulate(args) => {
            let scm = match &args.scm {
                None => ScmConfig::reference(),
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
                }
            };
            let summary = run::simulate(&scm, args.rows, args.seed, &args.output)?;
            println!(
                "wrote {} rows to {} (seed {}, selection probability {:.4})",
                summary.rows,
                args.output.display(),
                summary.seed,
                summary.selection_probability
            );
            Ok(exit::SUCCESS)
        }
        Command::Reductions(args) => {
            let outcomes = run::reductions(args.joints, args.seed)?;
            let text = run::reductions_table(&outcomes);
            if let Some(stem) = &args.output {
                write_pair(stem, &outcomes, &text)?;
            }
            print!("{text}");
            Ok(if outcomes.iter().all(|o| o.passed) { exit::SUCCESS } else { exit::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
