use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sieve_core::rsm::Mode;
use sieve_core::scenario::{RunReport, Scenario};

/// Run replication scenarios in the deterministic simulator.
///
/// Exit status: 0 when every assertion holds, 1 on an assertion failure or an
/// aborted simulation, 2 on usage or scenario errors.
#[derive(Parser)]
#[command(name = "sieve-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seed of a scenario.
    Run {
        #[command(flatten)]
        common: Common,
        /// Seed; defaults to the scenario's own.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON Lines trace here.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Write the metrics document here.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Run a scenario across a range of seeds and report violations.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Half-open seed range, e.g. `0..100`; a single number runs one seed.
        #[arg(long, value_parser = parse_seeds)]
        seeds: Range<u64>,
        /// Write one JSON summary line per seed here.
        #[arg(long)]
        summary_out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    scenario: PathBuf,
    /// Override the scenario's execution mode.
    #[arg(long)]
    mode: Option<Mode>,
    /// Re-check order validity on delivery.
    #[arg(long)]
    strict_validity: bool,
}

fn parse_seeds(s: &str) -> Result<Range<u64>, String> {
    let num = |x: &str| x.trim().parse::<u64>().map_err(|e| format!("bad seed `{x}`: {e}"));
    match s.split_once("..") {
        Some((a, b)) => {
            let r = num(a)?..num(b)?;
            if r.is_empty() {
                return Err(format!("empty seed range `{s}`"));
            }
            Ok(r)
        }
        None => {
            let a = num(s)?;
            Ok(a..a + 1)
        }
    }
}

fn load(common: &Common) -> Result<Scenario, String> {
    let mut sc = Scenario::load(&common.scenario).map_err(|e| e.to_string())?;
    if let Some(m) = common.mode {
        sc.mode = m;
    }
    if common.strict_validity {
        sc.sim.strict_validity = true;
    }
    Ok(sc)
}

fn write(path: &Path, contents: &str) -> Result<(), String> {
    std::fs::write(path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn metrics_doc(r: &RunReport) -> String {
    let mut doc = r.metrics.to_json();
    if let Some(o) = doc.as_object_mut() {
        o.insert("scenario".into(), r.scenario.clone().into());
        o.insert("seed".into(), r.seed.into());
        o.insert("mode".into(), r.mode.to_string().into());
        o.insert("passed".into(), r.passed().into());
    }
    format!("{doc:#}\n")
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.command {
        Command::Run {
            common,
            seed,
            trace_out,
            metrics_out,
        } => {
            let sc = load(&common)?;
            let seed = seed.unwrap_or(sc.sim.seed);
            let r = sc.run(seed).map_err(|e| e.to_string())?;
            if let Some(p) = &trace_out {
                r.trace
                    .write_jsonl(p)
                    .map_err(|e| format!("cannot write {}: {e}", p.display()))?;
            }
            if let Some(p) = &metrics_out {
                write(p, &metrics_doc(&r))?;
            }
            println!(
                "{} seed={} mode={}: confirms={} aborts={} epochs={} end={}",
                sc.name,
                r.seed,
                r.mode,
                r.metrics.confirms,
                r.metrics.aborts,
                r.metrics.epochs_started,
                r.metrics.end_time
            );
            match r.violations.first() {
                None => {
                    println!("PASS");
                    Ok(true)
                }
                Some(v) => {
                    eprintln!("FAIL: {v}");
                    Ok(false)
                }
            }
        }
        Command::Sweep {
            common,
            seeds,
            summary_out,
        } => {
            let sc = load(&common)?;
            let reports = sc.sweep(seeds.clone()).map_err(|e| e.to_string())?;
            println!(
                "{:>8} {:>8} {:>8} {:>7} {:>9}  result",
                "seed", "confirms", "aborts", "epochs", "end"
            );
            let mut lines = String::new();
            let mut failed = 0;
            for r in &reports {
                println!(
                    "{:>8} {:>8} {:>8} {:>7} {:>9}  {}",
                    r.seed,
                    r.metrics.confirms,
                    r.metrics.aborts,
                    r.metrics.epochs_started,
                    r.metrics.end_time,
                    r.violations.first().map_or("ok", |v| v.as_str())
                );
                lines.push_str(&r.summary().to_string());
                lines.push('\n');
                failed += usize::from(!r.passed());
            }
            let confirms: u64 = reports.iter().map(|r| r.metrics.confirms).sum();
            let aborts: u64 = reports.iter().map(|r| r.metrics.aborts).sum();
            println!(
                "{}: {} seeds ({}..{}), {failed} with violations, {confirms} confirms, {aborts} aborts",
                sc.name,
                reports.len(),
                seeds.start,
                seeds.end
            );
            if let Some(p) = &summary_out {
                write(p, &lines)?;
            }
            Ok(failed == 0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
