//! The `softpref` binary: `run` executes one experiment, `verify-all`
//! executes every registered experiment, `summarize` tabulates a finished
//! output directory.
//!
//! Exit codes: 0 success, 2 invalid configuration or usage, 3 assertion
//! failure (bounds violated; details on stderr as JSON records), 4 runtime
//! fault.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use softpref_cli::config::{build_config, ExperimentConfig};
use softpref_cli::experiments::{self, ExperimentDef, EXPERIMENTS};
use softpref_cli::report::{emit_summary, ExperimentReport};

const EXIT_OK: i32 = 0;
const EXIT_CONFIG: i32 = 2;
const EXIT_ASSERTION: i32 = 3;
const EXIT_FAULT: i32 = 4;

#[derive(Parser)]
#[command(
    name = "softpref",
    version,
    about = "Exact preference-optimization experiments on tabular policies and toy token models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads for commands that run several experiments.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write trace.csv, summary.json, meta.json.
    Run {
        /// Registered experiment name; see `softpref list`.
        experiment: String,
        /// JSON config file merged over the experiment's defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run seed (initializations and sampling; instances stay fixed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output root; artifacts land in <out>/<experiment>/<seed>/.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Field overrides as dot-separated paths, e.g. flow.step_size=0.005
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run every registered experiment with its defaults.
    VerifyAll {
        /// Output root shared by all experiments.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate summary.json files under an output root.
    Summarize { dir: PathBuf },
    /// List the registered experiments.
    List,
}

fn main() {
    let cli = Cli::parse();
    if cli.jobs == 0 {
        eprintln!("--jobs must be at least 1");
        std::process::exit(EXIT_CONFIG);
    }
    let code = match cli.command {
        Command::Run {
            experiment,
            config,
            seed,
            out,
            overrides,
        } => cmd_run(&experiment, config, seed, out, &overrides),
        Command::VerifyAll { out } => cmd_verify_all(out, cli.jobs),
        Command::Summarize { dir } => cmd_summarize(&dir),
        Command::List => cmd_list(),
    };
    std::process::exit(code);
}

fn cmd_list() -> i32 {
    for def in EXPERIMENTS {
        println!("{:<14} {}", def.name, def.about);
    }
    EXIT_OK
}

/// One stderr line per failed assertion, machine readable.
fn print_failures(report: &ExperimentReport) {
    for failure in report.failures() {
        let record = serde_json::json!({
            "experiment": report.experiment,
            "seed": report.seed,
            "assertion": failure.id,
            "expected": failure.expected,
            "observed": failure.observed,
        });
        eprintln!("{record}");
    }
}

fn cmd_run(
    name: &str,
    config_file: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    overrides: &[String],
) -> i32 {
    let Some(def) = experiments::find(name) else {
        let known: Vec<&str> = EXPERIMENTS.iter().map(|d| d.name).collect();
        eprintln!("unknown experiment '{name}'; known: {}", known.join(", "));
        return EXIT_CONFIG;
    };
    let defaults = experiments::default_config(name).expect("registered name has defaults");
    let config = match build_config(
        defaults,
        config_file.as_deref(),
        seed,
        out.as_deref(),
        overrides,
    ) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("invalid config: {msg}");
            return EXIT_CONFIG;
        }
    };
    match experiments::execute(def, &config) {
        Ok(report) if report.passed => {
            println!(
                "{name} seed {}: PASS ({} assertions, artifacts in {})",
                config.seed,
                report.assertions.len(),
                config.run_dir().display()
            );
            EXIT_OK
        }
        Ok(report) => {
            print_failures(&report);
            println!(
                "{name} seed {}: FAIL ({}/{} assertions, artifacts in {})",
                config.seed,
                report.assertions.len() - report.failures().len(),
                report.assertions.len(),
                config.run_dir().display()
            );
            EXIT_ASSERTION
        }
        Err(err) => {
            eprintln!("fault in {name}: {err:#}");
            EXIT_FAULT
        }
    }
}

enum VerifyOutcome {
    Report(ExperimentReport),
    Fault(String),
}

fn verify_one(def: &ExperimentDef, out: Option<&PathBuf>) -> VerifyOutcome {
    let mut config: ExperimentConfig =
        experiments::default_config(def.name).expect("registered name has defaults");
    if let Some(out) = out {
        config.out = out.clone();
    }
    match experiments::execute(def, &config) {
        Ok(report) => VerifyOutcome::Report(report),
        Err(err) => VerifyOutcome::Fault(format!("{err:#}")),
    }
}

fn cmd_verify_all(out: Option<PathBuf>, jobs: usize) -> i32 {
    let results: Mutex<Vec<Option<VerifyOutcome>>> =
        Mutex::new((0..EXPERIMENTS.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = jobs.min(EXPERIMENTS.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= EXPERIMENTS.len() {
                    break;
                }
                let outcome = verify_one(&EXPERIMENTS[i], out.as_ref());
                results.lock().expect("no panics hold the lock")[i] = Some(outcome);
            });
        }
    });

    let results = results.into_inner().expect("workers done");
    let mut any_fail = false;
    let mut any_fault = false;
    for (def, outcome) in EXPERIMENTS.iter().zip(results) {
        match outcome.expect("every slot filled") {
            VerifyOutcome::Report(report) if report.passed => {
                println!("{:<14} PASS", def.name);
            }
            VerifyOutcome::Report(report) => {
                print_failures(&report);
                println!("{:<14} FAIL", def.name);
                any_fail = true;
            }
            VerifyOutcome::Fault(msg) => {
                eprintln!("fault in {}: {msg}", def.name);
                println!("{:<14} FAULT", def.name);
                any_fault = true;
            }
        }
    }
    if any_fault {
        EXIT_FAULT
    } else if any_fail {
        EXIT_ASSERTION
    } else {
        EXIT_OK
    }
}

fn cmd_summarize(dir: &PathBuf) -> i32 {
    match emit_summary(dir) {
        Ok(csv) => {
            print!("{csv}");
            EXIT_OK
        }
        Err(msg) => {
            eprintln!("{msg}");
            EXIT_CONFIG
        }
    }
}
