use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use slowfold::config::{assumption_label, parse_config, validate_config, ExperimentKind};
use slowfold::experiment::run_experiment;
use slowfold::Error;

const EXIT_CHECKS_FAILED: u8 = 1;
const EXIT_INVALID_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;

/// Random slow manifolds of fast-slow SPDEs: build, verify and reduce.
#[derive(Debug, Parser)]
#[command(name = "slowfold", version)]
struct Args {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `experiment` from the config.
    #[arg(long, value_enum)]
    experiment: Option<ExperimentKind>,
    /// Output directory; the SLOWFOLD_OUT environment variable takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of noise realizations.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Treat warnings as failures.
    #[arg(long)]
    strict: bool,
}

fn invalid(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("invalid configuration: {msg}");
    ExitCode::from(EXIT_INVALID_CONFIG)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => return invalid(format!("{}: {e}", args.config.display())),
    };
    let mut cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => return invalid(e),
    };
    if let Some(k) = args.experiment {
        cfg.experiment = k;
    }
    if let Some(n) = args.seeds {
        cfg.seeds = n;
    }
    if let Some(s) = args.base_seed {
        cfg.base_seed = s;
    }
    let out_dir = std::env::var_os("SLOWFOLD_OUT")
        .map(PathBuf::from)
        .or(args.out)
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("slowfold_out"));

    let violations = validate_config(&cfg);
    if !violations.is_empty() {
        for v in &violations {
            match assumption_label(v) {
                Some(label) => eprintln!("invalid configuration: {label} {v}"),
                None => eprintln!("invalid configuration: {v}"),
            }
        }
        return ExitCode::from(EXIT_INVALID_CONFIG);
    }
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return invalid(format!("--threads {n}: {e}"));
        }
    }

    let output = match run_experiment(&cfg) {
        Ok(o) => o,
        Err(e @ (Error::Assumption(_) | Error::Config { .. } | Error::InvalidArgument(_))) => return invalid(e),
        Err(e) => {
            eprintln!("solver failure: {e}");
            return ExitCode::from(EXIT_SOLVER);
        }
    };
    let written = match output.write_to(&out_dir, args.strict) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_SOLVER);
        }
    };
    for c in &output.checks {
        println!(
            "{} {}: {} (threshold {})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    for w in &output.warnings {
        println!("WARN {w}");
    }
    println!("wrote {} files to {}", written.len(), out_dir.display());
    if output.passed(args.strict) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECKS_FAILED)
    }
}
