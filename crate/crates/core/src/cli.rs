//! Command-line front end.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alloc::{SamplingConfig, DEFAULT_ALLOC_THRESHOLD};
use crate::cpu::ProfiledScope;
use crate::profiler::{profile_program, Checkpoints, ProfilerConfig};
use crate::sim::{doubling_times, run_study, StudyConfig};
use crate::units::Nanos;
use crate::vm::{parse_program_in, VmConfig};

#[derive(Debug, Parser)]
#[command(name = "miniprof", version, about = "Line-level CPU and memory profiler for a toy bytecode VM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Profile a program written in the VM's assembly language.
    Run(RunArgs),
    /// Run the estimator convergence study and print it as CSV.
    Simulate(SimArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    program: PathBuf,
    /// Sampling quantum in virtual seconds.
    #[arg(long, default_value_t = 0.01)]
    q: f64,
    /// Disable allocation and copy sampling.
    #[arg(long)]
    cpu_only: bool,
    /// Bytes of allocation (or of frees) between memory samples.
    #[arg(long, default_value_t = DEFAULT_ALLOC_THRESHOLD)]
    alloc_threshold: u64,
    /// Thread switch interval, also the bounded JOIN wait, in virtual seconds.
    #[arg(long, default_value_t = 0.005)]
    switch_interval: f64,
    /// Write a checkpoint report every this many virtual seconds (needs --out).
    #[arg(long)]
    profile_interval: Option<f64>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds the phase of the first timer tick.
    #[arg(long)]
    seed: Option<u64>,
    /// Write every sampled memory record to this file.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Leave JOIN blocking instead of waiting in bounded slices.
    #[arg(long)]
    no_join_patch: bool,
    /// Attribute samples to the innermost frame in any file.
    #[arg(long)]
    profile_all: bool,
    /// Abort once the virtual clock passes this many seconds.
    #[arg(long, default_value_t = 3600.0)]
    max_time: f64,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 100)]
    lines: usize,
    #[arg(long, default_value_t = 1.16)]
    alpha: f64,
    #[arg(long, default_value_t = 0.01)]
    q: f64,
    /// Largest simulated run length; times double from 1 s up to it.
    #[arg(long, default_value_t = 64.0)]
    max_time: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn positive(name: &str, v: f64) -> Result<Nanos, Failure> {
    let n = Nanos::from_secs_f64(v);
    if v.is_finite() && v > 0.0 && n > Nanos::ZERO {
        Ok(n)
    } else {
        Err(Failure::Usage(format!("--{name} must be a positive number of seconds, got {v}")))
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn timer_phase(seed: Option<u64>, q: Nanos) -> Nanos {
    match seed {
        Some(s) => Nanos(ChaCha8Rng::seed_from_u64(s).random_range(0..q.0)),
        None => Nanos::ZERO,
    }
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let q = positive("q", args.q)?;
    let switch_interval = positive("switch-interval", args.switch_interval)?;
    let max_time = positive("max-time", args.max_time)?;
    let checkpoints = match (args.profile_interval, &args.out) {
        (Some(i), Some(out)) => Some(Checkpoints { interval: positive("profile-interval", i)?, path: out.clone() }),
        (Some(_), None) => return Err(Failure::Usage("--profile-interval needs --out".into())),
        (None, _) => None,
    };
    if args.alloc_threshold == 0 {
        return Err(Failure::Usage("--alloc-threshold must be positive".into()));
    }
    let src = std::fs::read_to_string(&args.program)
        .map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", args.program.display())))?;
    let file = args.program.file_name().map_or_else(|| "main.asm".into(), |n| n.to_string_lossy().into_owned());
    let program = parse_program_in(&file, &src).map_err(|e| Failure::Runtime(format!("{file}:{e}")))?;

    let vm = VmConfig {
        switch_interval,
        quantum: Some(q),
        timer_offset: timer_phase(args.seed, q),
        max_time,
        ..VmConfig::default()
    };
    let config = ProfilerConfig {
        vm,
        join_patch: (!args.no_join_patch).then_some(switch_interval),
        cpu_only: args.cpu_only,
        sampling: SamplingConfig::with_threshold(args.alloc_threshold),
        scope: args.profile_all.then_some(ProfiledScope::All),
        checkpoints,
        ..ProfilerConfig::default()
    };
    let result = profile_program(&program, &config).map_err(|e| Failure::Runtime(e.to_string()))?;
    if let Some(path) = &args.events {
        write_file(path, &result.events_text())?;
    }
    let text = result.report.render();
    match &args.out {
        Some(path) => write_file(path, &text),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| Failure::Runtime(e.to_string())),
    }
}

fn simulate(args: SimArgs) -> Result<(), Failure> {
    positive("q", args.q)?;
    if args.max_time < 1.0 {
        return Err(Failure::Usage("--max-time must be at least 1".into()));
    }
    if args.runs == 0 {
        return Err(Failure::Usage("--runs must be positive".into()));
    }
    let config = StudyConfig {
        runs: args.runs,
        times: doubling_times(args.max_time),
        lines: args.lines,
        alpha: args.alpha,
        q: args.q,
        seed: args.seed,
    };
    let table = run_study(&config).map_err(|e| Failure::Usage(e.to_string()))?;
    let csv = table.to_csv();
    match &args.csv {
        Some(path) => {
            write_file(path, &csv)?;
            if let Some(last) = table.rows.last() {
                println!(
                    "t = {} s: ratio_python {:.4}, ratio_native {:.4}, rho_python {:.4}, rho_native {:.4}",
                    last.time, last.ratio_python, last.ratio_native, last.rho_python, last.rho_native
                );
            }
            Ok(())
        }
        None => std::io::stdout().write_all(csv.as_bytes()).map_err(|e| Failure::Runtime(e.to_string())),
    }
}

/// Exit status: 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::Simulate(a) => simulate(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("miniprof: {msg}");
            eprintln!("Try 'miniprof --help' for usage.");
            2
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("miniprof: {msg}");
            1
        }
    }
}
