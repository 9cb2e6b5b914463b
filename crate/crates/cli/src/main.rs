use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use oplq_cli::{run, Command, ProblemSpec};

#[derive(Parser)]
#[command(name = "oplq", version, about = "Mean-field LQ control on scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build, verify, solve by continuation and cross-check against the quadratic form
    Solve(Args),
    /// Assumption and positivity checks only
    Check(Args),
    /// Per-level Fredholm and resolvent solves for the control
    Fredholm(Args),
    /// Mean-variance portfolio via the equivalent cost
    Mv(Args),
    /// Every cross-route oracle; nonzero exit on any discrepancy
    Validate(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long, value_name = "PATH")]
    spec: PathBuf,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// exit 2 when the assumption checks fail
    #[arg(long)]
    strict: bool,
    /// print the spec with all shorthands expanded and stop
    #[arg(long)]
    expand: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Cmd::Solve(a) => (Command::Solve, a),
        Cmd::Check(a) => (Command::Check, a),
        Cmd::Fredholm(a) => (Command::Fredholm, a),
        Cmd::Mv(a) => (Command::Mv, a),
        Cmd::Validate(a) => (Command::Validate, a),
    };
    match execute(cmd, &args) {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn execute(cmd: Command, args: &Args) -> Result<u8, String> {
    let path = &args.spec;
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let spec = ProblemSpec::parse(&text).map_err(|e| format!("spec error at {e}"))?;
    let (body, code) = if args.expand {
        let expanded = spec.expand().map_err(|e| format!("spec error at {e}"))?;
        let mut s = serde_json::to_string_pretty(&expanded).map_err(|e| e.to_string())?;
        s.push('\n');
        (s, 0)
    } else {
        let outcome = run(cmd, &spec, args.seed, args.strict).map_err(|e| e.to_string())?;
        let body = match args.format {
            Format::Json => outcome.doc.to_json(),
            Format::Csv => outcome.doc.to_csv()?,
        };
        if outcome.exit_code != 0 {
            eprintln!("{}: {}", cmd.name(), outcome.doc.status);
            if let Some(a) = outcome.doc.assumptions.as_ref().filter(|a| !a.passed) {
                for f in &a.failures {
                    eprintln!("  failed: {f}");
                }
            }
        }
        (body, outcome.exit_code as u8)
    };
    match &args.out {
        Some(p) => std::fs::write(p, body).map_err(|e| format!("{}: {e}", p.display()))?,
        None => print!("{body}"),
    }
    Ok(code)
}
