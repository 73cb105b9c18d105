use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ircdesync::par::Exec;
use ircdesync::scenario::{builtin, list_builtins, parse_scenario, run_scenario, Scenario};
use ircdesync::sweep;

#[derive(Parser)]
#[command(
    name = "ircdesync",
    about = "Simulate IRC channel desynchronisation on tree networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Source {
    /// Scenario file
    #[arg(required_unless_present = "builtin", conflicts_with = "builtin")]
    file: Option<PathBuf>,
    /// Name of a builtin scenario (see `list`)
    #[arg(long)]
    builtin: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and check its assertions
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jitter: Option<u64>,
        /// Write the trace as JSON lines
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the final state of every view as JSON
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Print every trace line
        #[arg(long)]
        show_trace: bool,
    },
    /// List the builtin scenarios
    List,
    /// Rerun a desync scenario until it takes
    Attempts {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        max: u32,
        /// Repeat the whole retry loop this many times and report the
        /// distribution
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jitter: Option<u64>,
    },
    /// Run one of the batch experiments
    Sweep {
        #[command(subcommand)]
        kind: SweepKind,
        /// Run on one thread even when built with `parallel`
        #[arg(long, global = true)]
        sequential: bool,
        /// Number of random trials, for the randomized sweeps
        #[arg(long, global = true, default_value_t = 200)]
        trials: usize,
        #[arg(long, global = true, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum SweepKind {
    /// One-user placement on every small tree
    Placement {
        #[arg(long, default_value_t = 6)]
        max_servers: usize,
    },
    /// Concurrent flag pairs on the 6-server chain
    Toggles,
    /// Two-user timing against one-user placement, with clock skew
    TwoUser,
    /// Boundary detection on random single-boundary worlds
    Detection,
}

fn load(source: &Source) -> Result<Scenario, String> {
    let text = match (&source.file, &source.builtin) {
        (_, Some(name)) => builtin(name)
            .ok_or_else(|| format!("no builtin scenario named `{name}`"))?
            .source
            .to_owned(),
        (Some(path), None) => {
            fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    parse_scenario(&text).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.command {
        Command::List => {
            for (name, summary) in list_builtins() {
                println!("{name:<20} {summary}");
            }
            Ok(true)
        }
        Command::Run {
            source,
            seed,
            jitter,
            trace,
            dump,
            show_trace,
        } => {
            let mut sc = load(&source)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            if let Some(j) = jitter {
                sc.jitter = j;
            }
            let report = run_scenario(&sc).map_err(|e| e.to_string())?;
            if show_trace {
                for r in &report.trace {
                    println!("t{:<3} {:<12} {}", r.tick, r.observer, r.line);
                }
            }
            if let Some(path) = trace {
                fs::write(&path, ircdesync::trace::to_jsonl(&report.trace))
                    .map_err(|e| e.to_string())?;
            }
            if let Some(path) = dump {
                let text = serde_json::to_string_pretty(&report.dump).expect("dump serializes");
                fs::write(&path, text).map_err(|e| e.to_string())?;
            }
            for r in &report.results {
                if r.passed {
                    println!("PASS {}", r.assertion);
                } else {
                    println!(
                        "FAIL {}: expected {}, got {}",
                        r.assertion, r.expected, r.actual
                    );
                }
            }
            let passed = report.results.iter().filter(|r| r.passed).count();
            println!(
                "{}: {passed}/{} assertions passed, quiescent at t{}",
                sc.name.as_deref().unwrap_or("scenario"),
                report.results.len(),
                report.quiescent_at
            );
            Ok(report.passed())
        }
        Command::Attempts {
            source,
            max,
            trials,
            seed,
            jitter,
        } => {
            let mut sc = load(&source)?;
            if let Some(j) = jitter {
                sc.jitter = j;
            }
            let seed = seed.unwrap_or(sc.seed);
            let stats = sweep::attempt_stats(Exec::default(), &sc, trials, max, seed)
                .map_err(|e| e.to_string())?;
            for (k, v) in &stats.histogram {
                println!("{k:>4} attempts: {v}");
            }
            if stats.exhausted > 0 {
                println!(">{max:>3} attempts: {}", stats.exhausted);
            }
            println!("median: {}", stats.median);
            Ok(stats.exhausted == 0)
        }
        Command::Sweep {
            kind,
            sequential,
            trials,
            seed,
        } => {
            let exec = if sequential {
                Exec::Sequential
            } else {
                Exec::default()
            };
            let err = |e: ircdesync::desync::DesyncError| e.to_string();
            let (cases, failed) = match kind {
                SweepKind::Placement { max_servers } => {
                    let s = sweep::placement_sweep(exec, max_servers).map_err(err)?;
                    (s.cases, s.failures.len())
                }
                SweepKind::Toggles => {
                    let s = sweep::toggle_sweep(exec).map_err(err)?;
                    (s.cases, s.failures.len())
                }
                SweepKind::TwoUser => {
                    let t = sweep::two_user_trials(exec, trials, seed).map_err(err)?;
                    let bad = t
                        .iter()
                        .filter(|t| !t.zero_skew_matches() || !t.stays_on_path())
                        .count();
                    (t.len(), bad)
                }
                SweepKind::Detection => {
                    let t = sweep::detection_trials(exec, trials, seed).map_err(err)?;
                    (t.len(), t.iter().filter(|t| !t.correct()).count())
                }
            };
            println!("{cases} cases, {failed} failed");
            Ok(failed == 0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
