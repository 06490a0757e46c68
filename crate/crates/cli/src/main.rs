//! Command-line front end: configuration, run directories and manifests.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod csvio;
mod error;
mod manifest;
mod report;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use crate::config::{Config, Overrides};
use crate::error::CliError;
use crate::manifest::RunWriter;

/// Environment variable naming the directory under which run directories are created.
pub const OUTPUT_ROOT_ENV: &str = "MEMHEAT_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "memheat", version, about = "Stochastic heat equation with memory: simulation and large deviations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML configuration file
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eps: Option<f64>,
    /// number of independent paths
    #[arg(long)]
    ensemble: Option<usize>,
    /// override any key: `--set section.key=value`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// run directory (default: `$MEMHEAT_OUTPUT_ROOT/<command>-<config hash>-s<seed>`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One trajectory (plus ensemble moments when `--ensemble > 1`)
    Simulate(RunArgs),
    /// Windowed Picard construction with per-iterate distances
    Picard(RunArgs),
    /// Y / Z / J decomposition of a controlled path
    Decompose(RunArgs),
    /// Deterministic controlled equation
    Skeleton(RunArgs),
    /// Rate-function estimate for the configured target
    Rate(RunArgs),
    /// Continuity of the skeleton map along oscillating controls
    C1check(RunArgs),
    /// Convergence of controlled paths to the skeleton as eps decreases
    C2check(RunArgs),
    /// Monte Carlo probabilities of the target set along the eps schedule
    Rareevent(RunArgs),
    /// Falsification sampling of the declared hypotheses
    Probe(RunArgs),
    /// Summarize a manifest, a run directory or a directory of runs
    Report { path: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Picard(_) => "picard",
            Command::Decompose(_) => "decompose",
            Command::Skeleton(_) => "skeleton",
            Command::Rate(_) => "rate",
            Command::C1check(_) => "c1check",
            Command::C2check(_) => "c2check",
            Command::Rareevent(_) => "rareevent",
            Command::Probe(_) => "probe",
            Command::Report { .. } => "report",
        }
    }
}

fn run_dir(name: &str, args: &RunArgs, hash: u64, seed: u64) -> PathBuf {
    if let Some(out) = &args.out {
        return out.clone();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{name}-{hash:016x}-s{seed}"))
}

fn execute(cmd: &Command) -> Result<(), CliError> {
    let args = match cmd {
        Command::Report { path } => {
            let rep = report::report(path)?;
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", rep.text);
            if rep.failed > 0 {
                println!("{} failed assertion(s)", rep.failed);
            }
            return Ok(());
        }
        Command::Simulate(a)
        | Command::Picard(a)
        | Command::Decompose(a)
        | Command::Skeleton(a)
        | Command::Rate(a)
        | Command::C1check(a)
        | Command::C2check(a)
        | Command::Rareevent(a)
        | Command::Probe(a) => a,
    };
    let overrides = Overrides {
        seed: args.seed,
        eps: args.eps,
        ensemble: args.ensemble,
        set: args.set.clone(),
    };
    let cfg = Config::load(&args.config, &overrides)?;
    let name = cmd.name();
    let (solver, hash) = if matches!(cmd, Command::Probe(_)) {
        let set = cfg.coefficient_set()?;
        let hash = u64::from_str_radix(&manifest::sha256_hex(format!("{set:?}").as_bytes())[..16], 16).expect("hex");
        (None, hash)
    } else {
        let s = cfg.solver()?;
        let h = s.config().fingerprint();
        (Some(s), h)
    };
    let dir = run_dir(name, args, hash, cfg.run.seed);
    let mut w = RunWriter::create(dir, name, hash, cfg.run.seed, cfg.run.ensemble, cfg.to_toml())?;
    let outcome = match (cmd, &solver) {
        (Command::Probe(_), _) => commands::probe(&cfg, &mut w),
        (_, None) => unreachable!("solver built for every simulation command"),
        (Command::Simulate(_), Some(s)) => commands::simulate(&cfg, s, &mut w),
        (Command::Picard(_), Some(s)) => commands::picard(&cfg, s, &mut w),
        (Command::Decompose(_), Some(s)) => commands::decompose(&cfg, s, &mut w),
        (Command::Skeleton(_), Some(s)) => commands::skeleton(&cfg, s, &mut w),
        (Command::Rate(_), Some(s)) => commands::rate(&cfg, s, &mut w),
        (Command::C1check(_), Some(s)) => commands::c1check(&cfg, s, &mut w),
        (Command::C2check(_), Some(s)) => commands::c2check(&cfg, s, &mut w),
        (Command::Rareevent(_), Some(s)) => commands::rareevent(&cfg, s, &mut w),
        (Command::Report { .. }, _) => unreachable!("handled above"),
    };
    let dir = w.dir().to_path_buf();
    let manifest = w.finish(&outcome)?;
    println!("{name}: {} ({} outputs)", dir.display(), manifest.outputs.len());
    for a in &manifest.assertions {
        println!("  [{}] {}: {}", if a.passed { "ok" } else { "FAIL" }, a.name, a.detail);
    }
    outcome
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
