//! `semparse` — seeded continual-learning experiments from the command
//! line: corpus generation, run matrices, reports, and standalone memory
//! sampling.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser as ClapParser, Subcommand};

use semparse::harness::{
    self, cmd_generate, cmd_report, cmd_run, cmd_sample, GenerateSummary, ReportSummary,
    RunSummary, SampleSummary,
};
use semparse::trainer::SamplerKind;
use semparse::Error;

#[derive(ClapParser)]
#[command(
    name = "semparse",
    version,
    about = "Continual-learning semantic parsing experiments",
    after_help = "The SEMPARSE_OUT environment variable overrides configured output \
                  directories; an explicit --out flag wins over both."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task stream (grammars + corpus.jsonl) from a
    /// JSON spec file.
    Generate {
        /// Path to the synthesis spec (JSON).
        #[arg(long, value_name = "FILE")]
        spec: PathBuf,
        /// Directory to write the grammars and corpus into.
        #[arg(long, value_name = "DIR", default_value = "corpus")]
        out: PathBuf,
    },
    /// Run the full method × sampler × seed × order matrix described by an
    /// experiment config, appending to a resumable CSV log.
    Run {
        /// Path to the experiment config (JSON).
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Output directory override.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Worker threads; each run stays single-threaded internally.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize a run log into tables, curve data, and SVG charts.
    Report {
        /// Path to runs.csv produced by `run`.
        #[arg(long, value_name = "FILE")]
        runlog: PathBuf,
        /// Directory to write the report files into.
        #[arg(long, value_name = "DIR", default_value = "report")]
        out: PathBuf,
    },
    /// Run one memory sampler standalone over a stored corpus task and
    /// write the selected instances as JSONL.
    Sample {
        /// Path to corpus.jsonl.
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        /// Directory holding <task>.grammar files (default: next to the
        /// corpus).
        #[arg(long, value_name = "DIR")]
        grammar_dir: Option<PathBuf>,
        /// Task name to sample from.
        #[arg(long)]
        task: String,
        /// Sampler: RANDOM, FSS, LFS, DLFS, or BALANCE.
        #[arg(long)]
        sampler: String,
        /// Number of instances to select.
        #[arg(long, short = 'm')]
        memory_size: usize,
        /// RNG seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSONL path for the selected memory.
        #[arg(long, value_name = "FILE", default_value = "memory.jsonl")]
        out: PathBuf,
    },
}

fn print_generate(s: &GenerateSummary) {
    println!("wrote {} tasks ({} examples) to {}", s.tasks, s.examples, s.out_dir.display());
    println!(
        "actions: {} total, {} cross-task ({} rule applications)",
        s.total_actions, s.cross_task_actions, s.cross_task_applies
    );
    for (i, n) in s.per_task_actions.iter().enumerate() {
        println!("  task {i}: {n} actions");
    }
}

fn print_run(s: &RunSummary) {
    println!(
        "matrix: {} cells ({} executed, {} skipped as already logged, {} aborted)",
        s.cells_total, s.cells_executed, s.cells_skipped, s.cells_aborted
    );
    println!("run log: {}", s.runs_csv.display());
    println!("traces:  {}", s.traces_csv.display());
}

fn print_report(s: &ReportSummary) {
    if let Some(w) = &s.warning {
        println!("warning: {w}");
    }
    for row in &s.summary {
        println!(
            "{:<10} {:<8} cells={} ACC_avg={:.4}±{:.4} ACC_whole={:.4}±{:.4}",
            row.method,
            row.sampler,
            row.cells,
            row.acc_avg_mean,
            row.acc_avg_std,
            row.acc_whole_mean,
            row.acc_whole_std
        );
    }
    for f in &s.files {
        println!("wrote {}", f.display());
    }
}

fn print_sample(s: &SampleSummary) {
    println!(
        "task '{}' (index {}), sampler {}: selected {} of {} requested",
        s.task,
        s.task_index,
        s.sampler.name(),
        s.selected,
        s.requested
    );
    if s.clamped {
        println!("warning: request exceeded the training set; selected every instance");
    }
    println!("memory entropy over represented actions: {:.6}", s.entropy);
    for (name, ok) in &s.flags {
        println!("  {name}: {}", if *ok { "satisfied" } else { "VIOLATED" });
    }
    println!("wrote {}", s.memory_path.display());
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { spec, out } => {
            let summary = cmd_generate(&spec, &out)?;
            print_generate(&summary);
            Ok(())
        }
        Command::Run { config, out, jobs } => {
            let summary = cmd_run(&config, out.as_deref(), jobs)?;
            print_run(&summary);
            Ok(())
        }
        Command::Report { runlog, out } => {
            let summary = cmd_report(&runlog, &out)?;
            print_report(&summary);
            Ok(())
        }
        Command::Sample { corpus, grammar_dir, task, sampler, memory_size, seed, out } => {
            let sampler = SamplerKind::parse(&sampler)?;
            let out = match std::env::var(harness::OUT_ENV) {
                Ok(dir) if !dir.is_empty() && out == PathBuf::from("memory.jsonl") => {
                    PathBuf::from(dir).join("memory.jsonl")
                }
                _ => out,
            };
            let summary =
                cmd_sample(&corpus, grammar_dir.as_deref(), &task, sampler, memory_size, seed, &out)?;
            print_sample(&summary);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                // Bad arguments or an unreadable/invalid config are usage
                // errors; anything else failed at runtime.
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
