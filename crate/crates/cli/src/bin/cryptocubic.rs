use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use cryptocubic::{BackendKind, Mode};
use cryptocubic_cli::{parse_scenario, run_with, Options};

/// Run a cryptocubic scenario script and print its holdings tables.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Scenario script; `-` reads standard input.
    script: PathBuf,
    /// Overrides the script's `seed` line.
    #[arg(long)]
    seed: Option<u64>,
    /// cryptocubic, baseline3 or bare4; overrides the script's `mode` line.
    #[arg(long)]
    mode: Option<Mode>,
    /// symbolic or concrete; overrides the script's `backend` line.
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Also write the trace tables to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Print only failures and verdicts.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let text = if args.script.as_os_str() == "-" {
        std::io::read_to_string(std::io::stdin())
    } else {
        std::fs::read_to_string(&args.script)
    };
    let text = match text {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", args.script.display());
            return ExitCode::from(2);
        }
    };
    let mut script = match parse_scenario(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}:{e}", args.script.display());
            return ExitCode::from(2);
        }
    };
    if let Some(s) = args.seed {
        script.seed = s;
    }
    if let Some(m) = args.mode {
        script.mode = m;
    }
    if let Some(b) = args.backend {
        script.backend = b;
    }

    let stdout = std::io::stdout();
    let outcome = match run_with(&script, &mut stdout.lock(), Options { quiet: args.quiet }) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(path) = &args.trace {
        if let Err(e) = std::fs::write(path, &outcome.trace) {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(2);
        }
    }
    ExitCode::from(outcome.status as u8)
}
