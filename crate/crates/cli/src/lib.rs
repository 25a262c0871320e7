//! Experiment runner behind the `adaptive-lqr` binary.
//!
//! Each command reads one ensemble file, resolves its parameters from
//! per-command defaults plus `key=value` overrides ([`Params`]) and produces a
//! [`Report`]: a JSON document echoing the ensemble, the resolved parameters
//! and the build, plus a CSV table whose columns the JSON lists under
//! `csv_columns`.

mod commands;
mod params;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use adaptive_lqr::{Error, RegimeEnsemble, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use commands::{compare_policies, PolicyComparison, PolicyRow};
pub use params::{Params, PolicyChoice, ValueChoice, KEYS};

pub const GIT_REV: &str = env!("ADAPTIVE_LQR_GIT_REV");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Per-regime algebraic Riccati solutions.
    Riccati,
    /// One simulated path with its belief trajectory.
    FilterDemo,
    /// Monte Carlo cost of one policy.
    Simulate,
    /// Certainty-equivalence feedback certificate and variance scan.
    CheckCe,
    /// Sampled Bellman residual extrema of a value candidate.
    ResidualScan,
    /// Entropy ledger `H(p0) = E H(p(T)) + E quad`.
    EntropyIdentity,
    /// Decay of `E|x_theta(t)|^2` under a uniformly stabilizing feedback.
    StabilizeReport,
    /// Open-loop `u = -c e^{-t}` family on an input-dimension-one ensemble.
    ScalarIntegrator,
    /// Common-random-number comparison of several policies.
    Compare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Riccati => "riccati",
            Command::FilterDemo => "filter-demo",
            Command::Simulate => "simulate",
            Command::CheckCe => "check-ce",
            Command::ResidualScan => "residual-scan",
            Command::EntropyIdentity => "entropy-identity",
            Command::StabilizeReport => "stabilize-report",
            Command::ScalarIntegrator => "scalar-integrator",
            Command::Compare => "compare",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub command: Command,
    pub ensemble_path: PathBuf,
    pub overrides: Vec<(String, String)>,
    /// `None` writes to standard output.
    pub output: Option<PathBuf>,
    pub format: Format,
    /// Worker bound; `None` uses the hardware parallelism.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(&self.header)?;
        for r in &self.rows {
            wtr.write_record(r)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub command: Command,
    pub json: Value,
    pub table: Table,
}

impl Report {
    pub fn results(&self) -> &Value {
        &self.json["results"]
    }
}

/// Reads and validates an ensemble file.
pub fn load_ensemble(path: &Path) -> Result<RegimeEnsemble> {
    let s = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    RegimeEnsemble::from_json_str(&s)?.validated()
}

pub fn run(spec: &ExperimentSpec) -> Result<Report> {
    let e = load_ensemble(&spec.ensemble_path)?;
    let params = Params::resolve(spec.command, &spec.overrides)?;
    let mut report = execute(spec.command, &e, params, spec.threads)?;
    report.json["ensemble_path"] = json!(spec.ensemble_path);
    Ok(report)
}

/// Runs `cmd` on an already loaded ensemble with resolved parameters.
pub fn execute(
    cmd: Command,
    e: &RegimeEnsemble,
    params: Params,
    threads: Option<usize>,
) -> Result<Report> {
    if threads == Some(0) {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    let start = Instant::now();
    let out = commands::dispatch(cmd, e, params, threads)?;
    let json = json!({
        "command": cmd,
        "build": { "version": env!("CARGO_PKG_VERSION"), "git": GIT_REV },
        "ensemble": e,
        "config": out.params,
        "threads": threads,
        "wall_time_secs": start.elapsed().as_secs_f64(),
        "csv_columns": out.table.header,
        "results": out.results,
    });
    Ok(Report {
        command: cmd,
        json,
        table: out.table,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub report: Report,
    pub identical: bool,
}

/// Reruns the experiment embedded in a report and compares results.
pub fn replay(original: &Value, threads: Option<usize>) -> Result<Replay> {
    let field = |k: &str| {
        original
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Config(format!("report has no {k:?} field")))
    };
    let cmd: Command = serde_json::from_value(field("command")?)?;
    let e: RegimeEnsemble = serde_json::from_value(field("ensemble")?)?;
    let params: Params = serde_json::from_value(field("config")?)?;
    let e = e.validated()?;
    params.validate()?;
    let mut report = execute(cmd, &e, params, threads)?;
    if let Some(p) = original.get("ensemble_path") {
        report.json["ensemble_path"] = p.clone();
    }
    let identical = report.json["results"] == original["results"];
    Ok(Replay { report, identical })
}

/// Writes the report in `format`. CSV goes to `output`; when that is a file the
/// JSON report is written next to it with extension `.report.json`.
pub fn write_report(report: &Report, output: Option<&Path>, format: Format) -> Result<()> {
    match (format, output) {
        (Format::Json, None) => write_json(&report.json, io::stdout().lock()),
        (Format::Json, Some(p)) => write_json(&report.json, File::create(p)?),
        (Format::Csv, None) => report.table.write_csv(io::stdout().lock()),
        (Format::Csv, Some(p)) => {
            report.table.write_csv(File::create(p)?)?;
            write_json(&report.json, File::create(p.with_extension("report.json"))?)
        }
    }
}

fn write_json<W: Write>(v: &Value, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// 0 success, 1 invalid input, 2 numerical failure.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}
