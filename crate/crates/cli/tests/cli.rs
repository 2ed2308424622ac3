//! End-to-end tests of the `semparse` binary: exit codes, file outputs,
//! determinism, and the output-directory override.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn semparse(args: &[&str], cwd: &Path, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_semparse"));
    cmd.args(args).current_dir(cwd).env_remove("SEMPARSE_OUT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY_SPEC: &str = r#"{
    "num_tasks": 2,
    "shared_rule_count": 1,
    "private_rule_count": 1,
    "shared_ent_tokens": 2,
    "private_ent_tokens": 2,
    "shared_mod_tokens": 1,
    "private_mod_tokens": 1,
    "template_skew": 1.0,
    "examples_per_task": 20,
    "seed": 7
}"#;

fn tiny_experiment(corpus: &str, out_dir: &str) -> String {
    format!(
        r#"{{
        "corpus": "{corpus}",
        "methods": ["FINE_TUNE", "EMR"],
        "samplers": ["RANDOM"],
        "memory_capacity": 4,
        "schedule": {{
            "epochs_fast": 1, "epochs_slow": 1, "lr": 0.01,
            "batch_size": 8, "ewc_lambda": 1.0, "replay_batches_per_epoch": 1
        }},
        "parser": {{
            "word_emb_dim": 8, "hidden_dim": 8, "action_emb_dim": 6,
            "dar_enabled": false, "max_decode_steps": 60, "rng_seed": 0
        }},
        "seeds": [1],
        "orders": {{"count": 1}},
        "out_dir": "{out_dir}"
    }}"#
    )
}

#[test]
fn missing_arguments_and_unknown_commands_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let no_args = semparse(&[], dir.path(), &[]);
    assert_eq!(code(&no_args), 2);
    let unknown = semparse(&["frobnicate"], dir.path(), &[]);
    assert_eq!(code(&unknown), 2);
    let missing_spec = semparse(&["generate", "--spec", "nope.json"], dir.path(), &[]);
    assert_eq!(code(&missing_spec), 2, "unreadable spec file is a usage error");
}

#[test]
fn generate_writes_grammars_and_corpus_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("synth.json"), TINY_SPEC).unwrap();
    let first = semparse(
        &["generate", "--spec", "synth.json", "--out", "corpus_a"],
        dir.path(),
        &[],
    );
    assert_eq!(code(&first), 0, "stderr: {}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).contains("cross-task"));
    assert!(dir.path().join("corpus_a/corpus.jsonl").exists());
    let grammars = fs::read_dir(dir.path().join("corpus_a"))
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().path().extension().is_some_and(|x| x == "grammar")
        })
        .count();
    assert_eq!(grammars, 2);

    let second = semparse(
        &["generate", "--spec", "synth.json", "--out", "corpus_b"],
        dir.path(),
        &[],
    );
    assert_eq!(code(&second), 0);
    assert_eq!(
        fs::read(dir.path().join("corpus_a/corpus.jsonl")).unwrap(),
        fs::read(dir.path().join("corpus_b/corpus.jsonl")).unwrap()
    );
}

#[test]
fn run_and_report_round_trip_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("synth.json"), TINY_SPEC).unwrap();
    assert_eq!(
        code(&semparse(&["generate", "--spec", "synth.json", "--out", "corpus"], dir.path(), &[])),
        0
    );
    fs::write(
        dir.path().join("exp.json"),
        tiny_experiment("corpus/corpus.jsonl", "results"),
    )
    .unwrap();

    let run = semparse(&["run", "--config", "exp.json"], dir.path(), &[]);
    assert_eq!(code(&run), 0, "stderr: {}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout(&run).contains("2 executed"));
    let runs_csv = dir.path().join("results/runs.csv");
    assert!(runs_csv.exists());
    assert!(dir.path().join("results/traces.csv").exists());

    // Idempotent rerun: nothing appended.
    let before = fs::read(&runs_csv).unwrap();
    let again = semparse(&["run", "--config", "exp.json"], dir.path(), &[]);
    assert_eq!(code(&again), 0);
    assert!(stdout(&again).contains("2 skipped"));
    assert_eq!(fs::read(&runs_csv).unwrap(), before);

    let report = semparse(
        &["report", "--runlog", "results/runs.csv", "--out", "report"],
        dir.path(),
        &[],
    );
    assert_eq!(code(&report), 0, "stderr: {}", String::from_utf8_lossy(&report.stderr));
    for f in ["summary.csv", "curves.csv", "acc_whole_curves.svg", "trace_extremes.csv"] {
        assert!(dir.path().join("report").join(f).exists(), "missing report file {f}");
    }
    let text = stdout(&report);
    assert!(text.contains("FINE_TUNE"));
    assert!(text.contains("EMR"));

    // Empty log: exit 0 with a printed warning.
    fs::write(
        dir.path().join("empty.csv"),
        "method,sampler,seed,order,task_index,eval_task,acc,acc_avg,acc_whole,loss_fast,loss_slow,wall_ms,status\n",
    )
    .unwrap();
    let empty = semparse(
        &["report", "--runlog", "empty.csv", "--out", "report_empty"],
        dir.path(),
        &[],
    );
    assert_eq!(code(&empty), 0);
    assert!(stdout(&empty).contains("warning"));
}

#[test]
fn run_honors_the_output_environment_override() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("synth.json"), TINY_SPEC).unwrap();
    assert_eq!(
        code(&semparse(&["generate", "--spec", "synth.json", "--out", "corpus"], dir.path(), &[])),
        0
    );
    let mut config = tiny_experiment("corpus/corpus.jsonl", "ignored_dir");
    config = config.replace("\"EMR\"", "\"FINE_TUNE\""); // single method, one cell
    fs::write(dir.path().join("exp.json"), config).unwrap();

    let env_dir = dir.path().join("env_out");
    let run = semparse(
        &["run", "--config", "exp.json"],
        dir.path(),
        &[("SEMPARSE_OUT", env_dir.to_str().unwrap())],
    );
    assert_eq!(code(&run), 0, "stderr: {}", String::from_utf8_lossy(&run.stderr));
    assert!(env_dir.join("runs.csv").exists());
    assert!(!dir.path().join("ignored_dir").exists());

    // An explicit --out wins over the environment.
    let flag_dir = dir.path().join("flag_out");
    let run = semparse(
        &["run", "--config", "exp.json", "--out", flag_dir.to_str().unwrap()],
        dir.path(),
        &[("SEMPARSE_OUT", env_dir.to_str().unwrap())],
    );
    assert_eq!(code(&run), 0);
    assert!(flag_dir.join("runs.csv").exists());
}

#[test]
fn invalid_configs_are_usage_errors_and_jobs_flag_works() {
    let dir = tempfile::tempdir().unwrap();
    let missing = semparse(&["run", "--config", "nope.json"], dir.path(), &[]);
    assert_eq!(code(&missing), 2);

    fs::write(dir.path().join("bad.json"), "{\"methods\": [\"NO_SUCH\"]").unwrap();
    let malformed = semparse(&["run", "--config", "bad.json"], dir.path(), &[]);
    assert_eq!(code(&malformed), 2);

    fs::write(dir.path().join("synth.json"), TINY_SPEC).unwrap();
    assert_eq!(
        code(&semparse(&["generate", "--spec", "synth.json", "--out", "corpus"], dir.path(), &[])),
        0
    );
    fs::write(
        dir.path().join("exp.json"),
        tiny_experiment("corpus/corpus.jsonl", "par_out"),
    )
    .unwrap();
    let run = semparse(&["run", "--config", "exp.json", "--jobs", "2"], dir.path(), &[]);
    assert_eq!(code(&run), 0, "stderr: {}", String::from_utf8_lossy(&run.stderr));
    assert!(dir.path().join("par_out/runs.csv").exists());
}

#[test]
fn sample_selects_memories_and_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("synth.json"), TINY_SPEC).unwrap();
    assert_eq!(
        code(&semparse(&["generate", "--spec", "synth.json", "--out", "corpus"], dir.path(), &[])),
        0
    );
    // Discover the first task's name from the grammar files.
    let task = fs::read_dir(dir.path().join("corpus"))
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension().is_some_and(|x| x == "grammar"))
                .then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .min()
        .unwrap();

    let sample = semparse(
        &[
            "sample",
            "--corpus",
            "corpus/corpus.jsonl",
            "--task",
            &task,
            "--sampler",
            "dlfs",
            "-m",
            "4",
            "--seed",
            "3",
            "--out",
            "mem.jsonl",
        ],
        dir.path(),
        &[],
    );
    assert_eq!(code(&sample), 0, "stderr: {}", String::from_utf8_lossy(&sample.stderr));
    let text = stdout(&sample);
    assert!(text.contains("entropy"));
    assert!(text.contains("satisfied"));
    assert!(!text.contains("VIOLATED"));
    let mem = fs::read_to_string(dir.path().join("mem.jsonl")).unwrap();
    assert_eq!(mem.lines().count(), 4);

    let bad_sampler = semparse(
        &[
            "sample",
            "--corpus",
            "corpus/corpus.jsonl",
            "--task",
            &task,
            "--sampler",
            "MAGIC",
            "-m",
            "4",
        ],
        dir.path(),
        &[],
    );
    assert_eq!(code(&bad_sampler), 2);

    let bad_task = semparse(
        &[
            "sample",
            "--corpus",
            "corpus/corpus.jsonl",
            "--task",
            "no-such-task",
            "--sampler",
            "random",
            "-m",
            "4",
        ],
        dir.path(),
        &[],
    );
    assert_eq!(code(&bad_task), 2);
}
