//! Command-line front end for running flow scenarios and verification
//! suites.
//!
//! Exit codes: 0 all checks pass, 1 a check failed, 2 configuration error,
//! 3 the run blew up (a report is still written in that case).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use finsler_flow::error::FinslerError;
use finsler_flow::scenario::{dump_field, run_scenario, run_suite, Report, ScenarioConfig};

#[derive(Parser)]
#[command(name = "finsler-flow", version, about = "Finslerian Ricci flow on the 2-torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Override a config key, e.g. `--set flow.dt=1e-4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn parse(&self) -> Result<Vec<(String, String)>, FinslerError> {
        self.set
            .iter()
            .map(|pair| {
                pair.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| {
                        FinslerError::Config(format!("--set needs KEY=VALUE, got `{pair}`"))
                    })
            })
            .collect()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario: flow, outputs, checks, report.
    Run {
        /// Scenario config file (TOML).
        scenario: PathBuf,
        /// Output directory (default: runs/<scenario-name>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run every scenario of a suite file and aggregate the verdicts.
    Verify {
        /// Suite config file listing scenario paths.
        suite: PathBuf,
        /// Output directory (default: runs/<suite-stem>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the scenarios on separate threads.
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Sample a quantity of a scenario's initial state onto its grid.
    DumpField {
        /// Scenario config file (TOML).
        scenario: PathBuf,
        /// Which quantity: f2, ricci, or margin.
        #[arg(long, default_value = "f2")]
        quantity: String,
        /// Output CSV path.
        #[arg(long, default_value = "field.csv")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn print_report(report: &Report) {
    println!("scenario {}: exit code {}", report.scenario, report.exit_code);
    if let Some(why) = &report.blow_up {
        println!("  blow-up: {why}");
    }
    for check in &report.checks {
        let measured = check
            .measured
            .map(|m| format!("{m:.3e}"))
            .unwrap_or_else(|| "-".into());
        let tol = check
            .tolerance
            .map(|t| format!("{t:.3e}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "  [{}] {} (measured {measured}, tolerance {tol}) — {}",
            check.verdict, check.name, check.details
        );
    }
    for file in &report.outputs {
        println!("  wrote {file}");
    }
}

fn execute(cli: Cli) -> Result<i32, FinslerError> {
    match cli.command {
        Command::Run {
            scenario,
            out,
            overrides,
        } => {
            let overrides = overrides.parse()?;
            let config = ScenarioConfig::load(&scenario, &overrides)?;
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(&config.name));
            let dir = scenario.parent().unwrap_or(std::path::Path::new("."));
            let report = run_scenario(&config, dir, &out)?;
            print_report(&report);
            Ok(report.exit_code)
        }
        Command::Verify {
            suite,
            out,
            parallel,
            overrides,
        } => {
            let overrides = overrides.parse()?;
            let stem = suite
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "suite".into());
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(stem));
            let report = run_suite(&suite, &out, &overrides, parallel)?;
            for scenario_report in &report.reports {
                print_report(scenario_report);
            }
            println!(
                "suite {}: {} ({} scenarios)",
                report.suite,
                if report.passed { "pass" } else { "FAIL" },
                report.reports.len()
            );
            Ok(report.exit_code)
        }
        Command::DumpField {
            scenario,
            quantity,
            out,
            overrides,
        } => {
            let overrides = overrides.parse()?;
            let config = ScenarioConfig::load(&scenario, &overrides)?;
            dump_field(&config, &quantity, &out)?;
            println!("wrote {}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                FinslerError::BlowUp { .. } => 3,
                // Anything that prevented the run from being set up at all.
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
