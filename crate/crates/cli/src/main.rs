//! `speclog`: run scenarios in the simulator, check traces, sweep seeds.
//!
//! Exit status: 0 when every check passes, 1 when a safety check fails,
//! 2 on usage, I/O or parse errors.

use std::fs;
use std::io::{self, Read};
use std::ops::Range;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use speclog::{check_trace, parse_scenario, sim, sweep, Backend, Scenario, SimOptions, Verdict};

#[derive(Parser)]
#[command(name = "speclog", version, about = "Speculative reconfigurable log: simulator and checker")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one seed of a scenario and check its trace.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the trace here (`-` for stdout).
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Check a recorded trace (`-` reads stdin).
    Check {
        trace: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Simulate and check a range of seeds.
    Sweep {
        scenario: PathBuf,
        /// `a..b` or a single seed; defaults to the scenario's `seeds`.
        #[arg(long)]
        seeds: Option<String>,
        /// Run seeds one after another instead of in parallel.
        #[arg(long)]
        sequential: bool,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Re-run a seed and compare with a recorded trace byte for byte.
    Replay {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trace to compare against; prints the trace when omitted.
        #[arg(long)]
        against: Option<PathBuf>,
        #[command(flatten)]
        sim: SimArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mem,
    File,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, value_enum, default_value = "mem")]
    backend: BackendArg,
    /// Root directory for the file backend.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Durable-log records kept before clipping; `none` disables clipping.
    #[arg(long)]
    clip_limit: Option<String>,
    #[arg(long)]
    tick_limit: Option<u64>,
}

impl SimArgs {
    fn options(&self) -> Result<SimOptions, String> {
        let mut o = SimOptions {
            tick_limit: self.tick_limit,
            ..SimOptions::default()
        };
        o.backend = match self.backend {
            BackendArg::Mem => Backend::Memory,
            BackendArg::File => Backend::Files(
                self.data_dir
                    .clone()
                    .ok_or("--backend file needs --data-dir")?,
            ),
        };
        match self.clip_limit.as_deref() {
            None => {}
            Some("none") => o.replica.clip_limit = None,
            Some(n) => {
                o.replica.clip_limit = Some(n.parse().map_err(|_| format!("bad --clip-limit {n:?}"))?);
            }
        }
        Ok(o)
    }
}

fn read_input(path: &PathBuf) -> Result<String, String> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s).map_err(|e| e.to_string())?;
        return Ok(s);
    }
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_scenario(path: &PathBuf) -> Result<Scenario, String> {
    let text = read_input(path)?;
    parse_scenario(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn parse_seeds(s: &str) -> Result<Range<u64>, String> {
    let bad = || format!("bad --seeds {s:?}");
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            if a >= b {
                return Err(bad());
            }
            Ok(a..b)
        }
        None => {
            let a: u64 = s.parse().map_err(|_| bad())?;
            Ok(a..a + 1)
        }
    }
}

fn print_verdict(v: &Verdict) {
    println!("{v}");
    for extra in v.violations.iter().skip(1) {
        println!("  also {extra}");
    }
    let s = &v.stats;
    println!(
        "ticks={} decisions={} msgs={} msgs/decision={:.2} merges={} k={} proposals={} reproposals={}",
        s.ticks, s.decisions, s.msgs, s.msgs_per_decision, s.merges, s.speculative_k, s.proposals, s.reproposals
    );
}

fn exit_for(passed: bool) -> ExitCode {
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("speclog: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode, String> {
    match cmd {
        Cmd::Run {
            scenario,
            seed,
            trace_out,
            sim: args,
        } => {
            let s = load_scenario(&scenario)?;
            let r = sim::run(&s, seed, &args.options()?).map_err(|e| e.to_string())?;
            let text = r.trace_text();
            match trace_out {
                Some(p) if p.as_os_str() == "-" => print!("{text}"),
                Some(p) => fs::write(&p, &text).map_err(|e| format!("{}: {e}", p.display()))?,
                None => {}
            }
            let v = speclog::check_records(&r.trace).map_err(|e| e.to_string())?;
            eprintln!("outcome: {:?}", r.outcome);
            for f in &r.finals {
                if f.live {
                    eprintln!("  {} trunk={} applied={} digest={:016x}", f.pid, f.trunk_len, f.applied, f.digest);
                } else {
                    eprintln!("  {} down", f.pid);
                }
            }
            print_verdict(&v);
            Ok(exit_for(v.passed()))
        }
        Cmd::Check { trace, json } => {
            let text = read_input(&trace)?;
            let v = check_trace(&text).map_err(|e| format!("{}: {e}", trace.display()))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&v).map_err(|e| e.to_string())?);
            } else {
                print_verdict(&v);
            }
            Ok(exit_for(v.passed()))
        }
        Cmd::Sweep {
            scenario,
            seeds,
            sequential,
            json,
            sim: args,
        } => {
            let s = load_scenario(&scenario)?;
            let range = match seeds {
                Some(r) => parse_seeds(&r)?,
                None => s.seeds.clone(),
            };
            let opts = args.options()?;
            let report = if sequential {
                sweep::sweep_sequential(&s, range, &opts)
            } else {
                sweep::sweep(&s, range, &opts)
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?);
            } else {
                let failed: Vec<_> = report.failures().collect();
                println!(
                    "{} seeds, {} passed, {} failed, {} quiescent",
                    report.runs.len(),
                    report.runs.len() - failed.len(),
                    failed.len(),
                    report.quiescent()
                );
                for f in failed {
                    match &f.verdict {
                        Ok(v) => println!("seed {}: {v}", f.seed),
                        Err(e) => println!("seed {}: error: {e}", f.seed),
                    }
                }
            }
            Ok(exit_for(report.passed()))
        }
        Cmd::Replay {
            scenario,
            seed,
            against,
            sim: args,
        } => {
            let s = load_scenario(&scenario)?;
            let r = sim::run(&s, seed, &args.options()?).map_err(|e| e.to_string())?;
            let text = r.trace_text();
            let Some(path) = against else {
                print!("{text}");
                return Ok(ExitCode::SUCCESS);
            };
            let old = read_input(&path)?;
            let diverge = old
                .lines()
                .zip(text.lines())
                .position(|(a, b)| a != b)
                .or_else(|| (old.lines().count() != text.lines().count()).then(|| old.lines().count().min(text.lines().count())));
            match diverge {
                None => {
                    println!("identical ({} lines)", text.lines().count());
                    Ok(ExitCode::SUCCESS)
                }
                Some(i) => {
                    println!("diverges at line {}", i + 1);
                    println!("- {}", old.lines().nth(i).unwrap_or("<eof>"));
                    println!("+ {}", text.lines().nth(i).unwrap_or("<eof>"));
                    Ok(ExitCode::from(1))
                }
            }
        }
    }
}
