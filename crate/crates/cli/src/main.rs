use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ricci_lab_cli::run::{self, Command, RunOutcome};
use ricci_lab_cli::scenario::{ConfigError, Scenario};
use ricci_lab_cli::sweep;
use ricci_lab_cli::tables::fmt_f64;
use ricci_lab_cli::verify;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

/// Ricci flow on rotationally symmetric geometries: simulate, classify
/// singularities, and compute Perelman entropy diagnostics.
#[derive(Parser)]
#[command(name = "ricci-lab", version)]
struct Cli {
    /// Turn the scenario's [assert] checks into exit-code failures.
    #[arg(long, global = true)]
    assert: bool,
    /// Output root; overrides the scenario's `output`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Refine the initial grid k-fold: nodes -> (nodes - 1) k + 1.
    #[arg(long, global = true, value_name = "K", default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=64))]
    refine: u32,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Integrate the flow and run every analysis the scenario enables.
    Simulate { scenario: PathBuf },
    /// Sample mu along the flow (and the monotonicity check if enabled).
    Entropy { scenario: PathBuf },
    /// Integrate and classify the singularity.
    Classify { scenario: PathBuf },
    /// Build the blow-up sequence and its shrinker diagnostics.
    Blowup { scenario: PathBuf },
    /// Cross-check the numerics against closed-form solutions.
    VerifyOracle,
    /// Run the parameter sweep or bisection declared in the scenario's [sweep] table.
    Sweep { scenario: PathBuf },
}

fn load(path: &Path) -> Result<Scenario, ExitCode> {
    Scenario::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_CONFIG)
    })
}

fn out_root(cli: &Cli, scenario: &Scenario) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(&scenario.output))
}

fn print_run(o: &RunOutcome) {
    println!("run: {}", o.dir.display());
    println!("termination: {:?} after {} steps", o.trace.termination, o.trace.steps);
    match o.t_estimate {
        Some((t, e)) => println!("t_estimate: {} +- {}", fmt_f64(t), fmt_f64(e)),
        None => println!("t_estimate: none"),
    }
    if let Some(r) = &o.singularity {
        println!("classification: {:?} ({:?})", r.classification, r.locus);
    }
    if let Some(mu) = o.final_mu() {
        println!("final_mu: {}", fmt_f64(mu));
    }
    if let Some(e) = &o.flow_error {
        eprintln!("flow error: {e}");
    }
    for e in &o.errors {
        eprintln!("error: {e}");
    }
    for c in &o.checks {
        println!("check {}: {} ({})", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
    }
}

fn single(cli: &Cli, path: &Path, command: Command) -> ExitCode {
    let scenario = match load(path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let scenario = run::effective(&scenario, command, cli.refine as usize);
    let outcome = match run::run(&scenario, command, &out_root(cli, &scenario)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: cannot write outputs: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    print_run(&outcome);
    if outcome.failed() || (cli.assert && !outcome.checks_passed()) {
        ExitCode::from(EXIT_FAILURE)
    } else {
        ExitCode::SUCCESS
    }
}

fn sweep_command(cli: &Cli, path: &Path) -> ExitCode {
    let scenario = match load(path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if scenario.sweep.is_none() {
        let e = ConfigError { origin: path.display().to_string(), line: 1, column: 1, message: "sweep: no [sweep] table".into() };
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let outcome = match sweep::sweep(&scenario, &out_root(cli, &scenario), cli.refine as usize) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: cannot write outputs: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    println!("sweep: {}", outcome.dir.display());
    print!("{}", outcome.summary.render());
    if let Some(Ok(b)) = &outcome.bisection {
        println!("bracket: [{}, {}] after {} runs", fmt_f64(b.lo), fmt_f64(b.hi), b.runs.len());
    }
    if let Some(Err(e)) = &outcome.bisection {
        eprintln!("bisection error: {e}");
    }
    if outcome.failed() || (cli.assert && !outcome.checks_passed()) {
        ExitCode::from(EXIT_FAILURE)
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Sub::Simulate { scenario } => single(&cli, scenario, Command::Simulate),
        Sub::Entropy { scenario } => single(&cli, scenario, Command::Entropy),
        Sub::Classify { scenario } => single(&cli, scenario, Command::Classify),
        Sub::Blowup { scenario } => single(&cli, scenario, Command::Blowup),
        Sub::Sweep { scenario } => sweep_command(&cli, scenario),
        Sub::VerifyOracle => {
            let checks = verify::run_all();
            print!("{}", verify::render(&checks));
            if checks.iter().all(|(c, _)| c.passed()) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}
