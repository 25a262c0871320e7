use std::path::PathBuf;
use std::process::ExitCode;

use adaptive_lqr::Error;
use adaptive_lqr_cli::{exit_code, replay, run, write_report, Command, ExperimentSpec, Format};
use clap::{Args, Parser, Subcommand};

/// Adaptive LQ regulation over a finite family of linear regimes.
///
/// Numeric and policy parameters are given as repeated `--set key=value`;
/// exit status is 0 on success, 1 on invalid input and 2 on numerical failure.
#[derive(Parser)]
#[command(name = "adaptive-lqr", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Output {
    /// Output file; standard output when omitted.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json, global = true)]
    format: Format,
    /// Worker thread bound.
    #[arg(long, env = "ADAPTIVE_LQR_THREADS", global = true)]
    threads: Option<usize>,
}

#[derive(Args)]
struct Experiment {
    /// Ensemble JSON file.
    ensemble: PathBuf,
    /// Parameter override (dt, T, paths, seed, tol, scan_tol, trials, policy,
    /// policies, F, value, lambda, tail, path, c, c_min, c_max, c_steps,
    /// checkpoints).
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    overrides: Vec<(String, String)>,
    #[command(flatten)]
    out: Output,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-regime algebraic Riccati solutions.
    Riccati(Experiment),
    /// One simulated path with its belief trajectory.
    FilterDemo(Experiment),
    /// Monte Carlo cost of one policy.
    Simulate(Experiment),
    /// Certainty-equivalence feedback certificate.
    CheckCe(Experiment),
    /// Sampled Bellman residual extrema.
    ResidualScan(Experiment),
    /// Entropy ledger check.
    EntropyIdentity(Experiment),
    /// Closed-loop decay under a stabilizing feedback.
    StabilizeReport(Experiment),
    /// Open-loop exponential controls on an input-dimension-one ensemble.
    ScalarIntegrator(Experiment),
    /// Common-random-number policy comparison.
    Compare(Experiment),
    /// Rerun the experiment embedded in a JSON report and compare results.
    Replay {
        report: PathBuf,
        #[command(flatten)]
        out: Output,
    },
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("adaptive-lqr: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn broken_pipe(e: &Error) -> bool {
    let io = match e {
        Error::Io(io) => Some(io),
        Error::Csv(c) => match c.kind() {
            csv::ErrorKind::Io(io) => Some(io),
            _ => None,
        },
        _ => None,
    };
    io.is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn dispatch(cmd: Cmd) -> Result<ExitCode, Error> {
    let (command, exp) = match cmd {
        Cmd::Replay { report, out } => {
            let original: serde_json::Value =
                serde_json::from_reader(std::fs::File::open(&report)?)?;
            let r = replay(&original, out.threads)?;
            write_report(&r.report, out.output.as_deref(), out.format)?;
            if r.identical {
                eprintln!("replay: results identical");
                return Ok(ExitCode::SUCCESS);
            }
            eprintln!("replay: results differ from {}", report.display());
            return Ok(ExitCode::from(1));
        }
        Cmd::Riccati(x) => (Command::Riccati, x),
        Cmd::FilterDemo(x) => (Command::FilterDemo, x),
        Cmd::Simulate(x) => (Command::Simulate, x),
        Cmd::CheckCe(x) => (Command::CheckCe, x),
        Cmd::ResidualScan(x) => (Command::ResidualScan, x),
        Cmd::EntropyIdentity(x) => (Command::EntropyIdentity, x),
        Cmd::StabilizeReport(x) => (Command::StabilizeReport, x),
        Cmd::ScalarIntegrator(x) => (Command::ScalarIntegrator, x),
        Cmd::Compare(x) => (Command::Compare, x),
    };
    let spec = ExperimentSpec {
        command,
        ensemble_path: exp.ensemble,
        overrides: exp.overrides,
        output: exp.out.output,
        format: exp.out.format,
        threads: exp.out.threads,
    };
    let report = run(&spec)?;
    write_report(&report, spec.output.as_deref(), spec.format)?;
    Ok(ExitCode::SUCCESS)
}
