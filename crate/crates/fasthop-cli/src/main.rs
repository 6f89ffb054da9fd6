//! Command-line front end: load a scenario, run the simulator, emit reports.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 a `--check`
//! threshold was violated.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fasthop::netsim::run_scenario;
use fasthop::report::{self, Report};
use fasthop::scenario::Scenario;

#[derive(Parser)]
#[command(name = "fasthop", version, about = "IP fast hopping network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and emit its report.
    Run {
        /// Scenario file (TOML).
        scenario: PathBuf,
        /// Master seed; wins over the scenario's own.
        #[arg(long)]
        seed: Option<u64>,
        /// Patch a resolved scenario field by dotted path, e.g.
        /// `--override client.0.rate_ppms=5` or `--override defended=false`.
        #[arg(long = "override", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        /// Directory to write report.toml and metrics.tsv into; without it
        /// the report goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate the scenario's [checks] thresholds; failures exit 2.
        #[arg(long)]
        check: bool,
        /// Keep the per-event log (events.log under --out, stdout otherwise).
        #[arg(long)]
        events: bool,
    },
    /// Run the same scenario once per value of one swept parameter.
    Sweep {
        scenario: PathBuf,
        /// Dotted path of the field to sweep, e.g. `pool_size`.
        #[arg(long)]
        param: String,
        /// Comma-separated values, one run each.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory to collect per-run reports under (required: sweeps
        /// produce several files).
        #[arg(long)]
        out: PathBuf,
    },
    /// Numeric side-by-side of two reports from the same topology.
    Compare {
        report_a: PathBuf,
        report_b: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" that exit cleanly.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run { scenario, seed, overrides, out, check, events } => {
            run_one(&scenario, seed, &overrides, out.as_deref(), check, events)
        }
        Command::Sweep { scenario, param, values, seed, out } => {
            sweep(&scenario, &param, &values, seed, &out)
        }
        Command::Compare { report_a, report_b } => compare(&report_a, &report_b),
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|item| match item.split_once('=') {
            Some((path, value)) if !path.is_empty() => {
                Ok((path.to_string(), value.to_string()))
            }
            _ => bail!("override {item:?} is not PATH=VALUE"),
        })
        .collect()
}

fn load(path: &Path, overrides: &[(String, String)], seed: Option<u64>) -> Result<Scenario> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read scenario {}", path.display()))?;
    Scenario::load(&text, overrides, seed)
        .with_context(|| format!("scenario {} rejected", path.display()))
}

fn run_one(
    path: &Path,
    seed: Option<u64>,
    raw_overrides: &[String],
    out: Option<&Path>,
    check: bool,
    events: bool,
) -> Result<u8> {
    let overrides = parse_overrides(raw_overrides)?;
    let scenario = load(path, &overrides, seed)?;
    let output = run_scenario(&scenario, events)?;
    let report = Report::build(&output);

    match out {
        Some(dir) => {
            write_report(dir, &report, output.event_log.as_deref())?;
            println!("wrote {}", dir.join("report.toml").display());
            summarize(&report);
        }
        None => {
            print!("{}", report.to_toml());
            if let Some(log) = &output.event_log {
                print!("{log}");
            }
        }
    }

    if !check {
        return Ok(0);
    }
    let Some(checks) = &report.scenario.checks else {
        println!("check: scenario declares no thresholds");
        return Ok(0);
    };
    let outcomes = report::evaluate_checks(checks, &report);
    let mut failed = false;
    for o in &outcomes {
        println!("check {} {}: {}", o.name, if o.passed { "pass" } else { "FAIL" }, o.detail);
        failed |= !o.passed;
    }
    Ok(if failed { 2 } else { 0 })
}

fn write_report(dir: &Path, report: &Report, event_log: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    fs::write(dir.join("report.toml"), report.to_toml())?;
    fs::write(dir.join("metrics.tsv"), report.flat_metrics_text())?;
    if let Some(log) = event_log {
        fs::write(dir.join("events.log"), log)?;
    }
    Ok(())
}

fn summarize(report: &Report) {
    let m = &report.metrics;
    let d = &report.derived;
    println!(
        "legit injected={} forwarded={} dropped={}",
        m.injected_legit,
        m.forwarded_legit,
        m.dropped_legit_total()
    );
    println!(
        "attack injected={} forwarded={} pass_rate={:.6}",
        m.injected_attack, m.forwarded_attack, d.attack_pass_rate
    );
    println!(
        "server ingress={} attack_fraction={:.6} goodput={:.1} B/ms",
        m.server_ingress, d.server_ingress_attack_fraction, d.goodput_bytes_per_ms
    );
}

fn sweep(
    path: &Path,
    param: &str,
    values: &[String],
    seed: Option<u64>,
    out: &Path,
) -> Result<u8> {
    println!("sweep {param} over {} values", values.len());
    for value in values {
        let overrides = vec![(param.to_string(), value.clone())];
        let scenario = load(path, &overrides, seed)?;
        let output = run_scenario(&scenario, false)?;
        let report = Report::build(&output);
        let slug: String = value
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        let dir = out.join(format!("{}={}", param.replace('.', "_"), slug));
        write_report(&dir, &report, None)?;
        println!(
            "{param}={value}\tforwarded_legit={}\tattack_pass_rate={}\tserver_ingress={}",
            report.metrics.forwarded_legit,
            report.derived.attack_pass_rate,
            report.metrics.server_ingress
        );
    }
    Ok(0)
}

fn compare(a: &Path, b: &Path) -> Result<u8> {
    let parse = |p: &Path| -> Result<Report> {
        let text = fs::read_to_string(p)
            .with_context(|| format!("cannot read report {}", p.display()))?;
        Report::from_toml(&text).with_context(|| format!("report {} rejected", p.display()))
    };
    let (ra, rb) = (parse(a)?, parse(b)?);
    print!("{}", report::compare(&ra, &rb)?);
    Ok(0)
}
