//! End-to-end tests of the `pop` binary: real processes, real files,
//! asserted exit codes (0 success, 1 usage, 2 data/checkpoint).
//!
//! Everything runs on a deliberately tiny configuration — 8x8 images,
//! one transformer block, four classes per pool — so a full
//! gen -> pretrain -> cil -> report pipeline completes in seconds.

use std::path::Path;
use std::process::{Command, Output};

fn pop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pop"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn pop_env(dir: &Path, envs: &[(&str, &str)], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pop"));
    cmd.current_dir(dir).args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(out: &Output) {
    assert_eq!(
        code(out),
        0,
        "expected success\nstdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

fn file(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name))
        .unwrap_or_else(|e| panic!("cannot read {name}: {e}"))
}

/// Sorted file names under `dir` ending in `suffix`.
fn ls(dir: &Path, suffix: &str) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(suffix))
        .collect();
    v.sort();
    v
}

/// First number following `pat` in `text`.
fn num_after(text: &str, pat: &str) -> f64 {
    let at = text
        .find(pat)
        .unwrap_or_else(|| panic!("`{pat}` not found in:\n{text}"));
    let rest = text[at + pat.len()..].trim_start();
    let tok: String = rest
        .chars()
        .take_while(|c| c.is_ascii_digit() || *c == '.' || *c == '-')
        .collect();
    tok.parse()
        .unwrap_or_else(|_| panic!("no number after `{pat}` (got `{tok}`)"))
}

fn csv_aa(text: &str) -> f64 {
    text.lines()
        .find(|l| l.contains(",summary,average_accuracy,"))
        .and_then(|l| l.rsplit(',').next())
        .and_then(|v| v.parse().ok())
        .expect("summary row with average_accuracy")
}

/// A config small enough that every pipeline stage finishes in well
/// under a second.
fn tiny_config() -> &'static str {
    "image_size = 8\n\
     patch_size = 4\n\
     embed_dim = 8\n\
     depth = 1\n\
     heads = 2\n\
     mlp_ratio = 2\n\
     pretrain_classes = 4\n\
     cl_classes = 4\n\
     train_per_class = 6\n\
     test_per_class = 2\n\
     pretrain_epochs = 0\n\
     pretrain_batch = 8\n\
     tasks = 2\n\
     epochs = 1\n\
     milestones =\n\
     tuning_epochs = 1\n\
     batch = 8\n\
     buffer = 8\n\
     seeds = 1\n"
}

/// Write the tiny config (plus `extra` lines), generate the dataset,
/// and pretrain the backbone.
fn setup(dir: &Path, extra: &str) {
    std::fs::write(dir.join("exp.conf"), format!("{}{extra}", tiny_config())).unwrap();
    ok(&pop(dir, &["gen", "--config", "exp.conf"]));
    ok(&pop(dir, &["pretrain", "--config", "exp.conf"]));
}

// ── gen ──────────────────────────────────────────────────────────────

#[test]
fn gen_summary_counts_match_config_and_manifest_rides_along() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.conf"), tiny_config()).unwrap();

    let out = pop(dir, &["gen", "--config", "exp.conf"]);
    ok(&out);
    let text = stdout(&out);
    // 4 classes x 6 train and x 2 test per pool
    assert!(
        text.contains("pretraining pool: 4 classes, 24 train + 8 test images"),
        "{text}"
    );
    assert!(
        text.contains("continual pool: 4 classes, 24 train + 8 test images"),
        "{text}"
    );
    assert!(dir.join("dataset.pop").exists());

    let manifest = file(dir, "dataset.pop.manifest");
    assert!(manifest.contains("image_size = 8"), "{manifest}");
    assert!(manifest.contains("# derived: config_hash = "), "{manifest}");
    assert!(manifest.contains("# derived: cl_train_images = 24"), "{manifest}");
}

#[test]
fn gen_refuses_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.conf"), tiny_config()).unwrap();
    ok(&pop(dir, &["gen", "--config", "exp.conf"]));

    let again = pop(dir, &["gen", "--config", "exp.conf"]);
    assert_eq!(code(&again), 2, "{}", stderr(&again));
    assert!(stderr(&again).contains("already exists"), "{}", stderr(&again));

    ok(&pop(dir, &["gen", "--config", "exp.conf", "--force"]));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("exp.conf"),
        format!("{}promt_rows = 2\n", tiny_config()),
    )
    .unwrap();
    let out = pop(dir, &["gen", "--config", "exp.conf"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("promt_rows"), "{}", stderr(&out));
}

#[test]
fn bad_flag_values_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = pop(dir, &["cil", "--kshot", "banana"]);
    assert_eq!(code(&out), 1);
    let out = pop(dir, &["gen", "--seed", "-1"]);
    assert_eq!(code(&out), 1);
    let out = pop(dir, &["cil", "--spt", "--dpt"]);
    assert_eq!(code(&out), 1);
    // no subcommand at all
    let out = pop(dir, &[]);
    assert_eq!(code(&out), 1);
}

#[test]
fn help_and_version_exit_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = pop(dir, &["--help"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("pretrain"), "{}", stdout(&out));
    let out = pop(dir, &["--version"]);
    assert_eq!(code(&out), 0);
}

// ── pretrain ─────────────────────────────────────────────────────────

#[test]
fn pretrain_logs_accuracy_and_guards_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.conf"), tiny_config()).unwrap();
    ok(&pop(dir, &["gen", "--config", "exp.conf"]));

    // epochs = 0: a random frozen backbone is still a valid checkpoint
    let out = pop(dir, &["pretrain", "--config", "exp.conf"]);
    ok(&out);
    let printed = num_after(&stdout(&out), "holdout accuracy:");
    assert!(dir.join("backbone.ckpt").exists());

    let manifest = file(dir, "backbone.ckpt.manifest");
    let logged = num_after(&manifest, "# derived: holdout_accuracy =");
    assert!((0.0..=1.0).contains(&logged));
    // stdout rounds to four decimals; the manifest keeps full precision
    assert!((printed - logged).abs() < 5.1e-5, "{printed} vs {logged}");

    // identical settings: a no-op, not an error
    let again = pop(dir, &["pretrain", "--config", "exp.conf"]);
    ok(&again);
    assert!(stdout(&again).contains("up to date"), "{}", stdout(&again));

    // changed settings: refuse to silently shadow the old checkpoint
    let changed = pop(dir, &["pretrain", "--config", "exp.conf", "--epochs", "1"]);
    assert_eq!(code(&changed), 2, "{}", stderr(&changed));
    let msg = stderr(&changed);
    assert!(msg.contains("config hash") && msg.contains("--force"), "{msg}");

    let forced = pop(
        dir,
        &["pretrain", "--config", "exp.conf", "--epochs", "1", "--force"],
    );
    ok(&forced);
    assert!(stdout(&forced).contains("epochs: 1"), "{}", stdout(&forced));
}

// ── cil ──────────────────────────────────────────────────────────────

#[test]
fn cil_writes_metrics_manifest_and_checkpoint_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir, "");

    let out = pop(
        dir,
        &["cil", "--config", "exp.conf", "--seeds", "1,2", "--metrics-dir", "runs"],
    );
    ok(&out);
    let text = stdout(&out);
    assert_eq!(text.matches("AA = 0.").count(), 2, "{text}");
    assert!(text.contains("mean AA over 2 seeds"), "{text}");

    let runs = dir.join("runs");
    let csvs = ls(&runs, ".csv");
    assert_eq!(csvs.len(), 2, "{csvs:?}");
    assert_eq!(ls(&runs, ".manifest").len(), 2);
    assert_eq!(ls(&runs, ".ckpt").len(), 2);
    // same config hash, distinct seeds
    assert!(csvs[0].ends_with("-s1.csv") && csvs[1].ends_with("-s2.csv"), "{csvs:?}");
    assert_eq!(csvs[0].split("-s").next(), csvs[1].split("-s").next());

    let manifest = file(&runs, &csvs[0].replace(".csv", ".manifest"));
    // default loss weights are echoed, and the replayable seed list
    // shrinks to this run's seed
    assert!(manifest.contains("lambda_task = 1"), "{manifest}");
    assert!(manifest.contains("lambda_aux = 1"), "{manifest}");
    assert!(manifest.contains("seeds = 1"), "{manifest}");
    // mean-and-cat over 2 tasks of an 8-dim backbone: (2 + 1) * 8
    assert!(manifest.contains("# derived: feature_dim = 24"), "{manifest}");
    assert!(manifest.contains("# derived: average_accuracy = "), "{manifest}");

    let csv = file(&runs, &csvs[0]);
    assert!(csv.starts_with("run_id,seed,task,split,metric,value\n"), "{csv}");
    let aa = csv_aa(&csv);
    assert!((0.0..=1.0).contains(&aa));
}

#[test]
fn cil_without_backbone_checkpoint_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.conf"), tiny_config()).unwrap();
    ok(&pop(dir, &["gen", "--config", "exp.conf"]));

    let out = pop(dir, &["cil", "--config", "exp.conf"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("pretrain"), "{}", stderr(&out));
}

#[test]
fn cil_refuses_backbone_from_other_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir, "");
    // same dataset, different pretraining settings
    std::fs::write(
        dir.join("other.conf"),
        tiny_config().replace("pretrain_epochs = 0", "pretrain_epochs = 1"),
    )
    .unwrap();

    let out = pop(dir, &["cil", "--config", "other.conf"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("pretrained under config hash"), "{}", stderr(&out));
}

#[test]
fn cil_precision_must_match_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir, "");

    let out = pop(dir, &["cil", "--config", "exp.conf", "--precision", "f64"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("f64"), "{}", stderr(&out));
}

#[test]
fn cil_pop_only_fusion_reports_backbone_width_feature() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir, "");

    let out = pop(
        dir,
        &["cil", "--config", "exp.conf", "--fusion", "pop-only", "--metrics-dir", "po"],
    );
    ok(&out);
    let manifests = ls(&dir.join("po"), ".manifest");
    let manifest = file(&dir.join("po"), &manifests[0]);
    assert!(manifest.contains("fusion = pop-only"), "{manifest}");
    assert!(manifest.contains("# derived: feature_dim = 8"), "{manifest}");
}

#[test]
fn cil_reruns_are_byte_identical_and_manifests_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir, "");

    let args = ["cil", "--config", "exp.conf", "--seeds", "3"];
    ok(&pop(dir, &[&args[..], &["--metrics-dir", "a"]].concat()));
    ok(&pop(dir, &[&args[..], &["--metrics-dir", "b"]].concat()));

    let name = &ls(&dir.join("a"), ".csv")[0];
    assert_eq!(
        file(&dir.join("a"), name),
        file(&dir.join("b"), name),
        "same settings and seed must reproduce the same metrics"
    );

    // a manifest alone replays the run it documents
    let mpath = format!("a/{}", name.replace(".csv", ".manifest"));
    ok(&pop(dir, &["cil", "--config", &mpath, "--metrics-dir", "c"]));
    assert_eq!(file(&dir.join("a"), name), file(&dir.join("c"), name));
}

#[test]
fn cil_mode_and_ablation_flags_reach_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir, "");

    let out = pop(
        dir,
        &[
            "cil", "--config", "exp.conf", "--dpt", "--buffer-only", "--kshot", "3",
            "--prompts-per-task", "2", "--metrics-dir", "flags",
        ],
    );
    ok(&out);
    let sub = dir.join("flags");
    let manifest = file(&sub, &ls(&sub, ".manifest")[0]);
    assert!(manifest.contains("mode = dpt"), "{manifest}");
    assert!(manifest.contains("buffer_only = true"), "{manifest}");
    assert!(manifest.contains("kshot = 3"), "{manifest}");
    assert!(manifest.contains("prompt_rows = 2"), "{manifest}");
}

#[test]
fn metrics_dir_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir, "");

    let envs = [("POP_METRICS_DIR", "envruns")];
    ok(&pop_env(dir, &envs, &["cil", "--config", "exp.conf"]));
    assert_eq!(ls(&dir.join("envruns"), ".csv").len(), 1);

    let out = pop_env(dir, &envs, &["report"]);
    ok(&out);
    assert!(dir.join("envruns/report/summary.csv").exists());
}

// ── report ───────────────────────────────────────────────────────────

#[test]
fn report_mean_matches_hand_average_and_single_run_has_zero_std() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir, "");

    ok(&pop(
        dir,
        &["cil", "--config", "exp.conf", "--seeds", "5,6,7", "--metrics-dir", "runs"],
    ));
    let runs = dir.join("runs");
    let by_hand: Vec<f64> = ls(&runs, ".csv")
        .iter()
        .map(|n| csv_aa(&file(&runs, n)))
        .collect();
    assert_eq!(by_hand.len(), 3);
    let hand_mean = by_hand.iter().sum::<f64>() / 3.0;

    let out = pop(dir, &["report", "runs"]);
    ok(&out);
    assert!(stdout(&out).contains("±"), "{}", stdout(&out));

    let summary = file(&runs, "report/summary.csv");
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 2, "{summary}");
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[7], "5;6;7", "{summary}");
    let mean: f64 = fields[8].parse().unwrap();
    assert!((mean - hand_mean).abs() < 1e-12, "{mean} vs {hand_mean}");

    // a single run aggregates with zero spread
    ok(&pop(
        dir,
        &["cil", "--config", "exp.conf", "--kshot", "2", "--metrics-dir", "solo"],
    ));
    ok(&pop(dir, &["report", "solo"]));
    let solo = file(&dir.join("solo"), "report/summary.csv");
    let std: f64 = solo.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(std, 0.0, "{solo}");
}

#[test]
fn report_on_empty_directory_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::create_dir(dir.join("mt")).unwrap();
    let out = pop(dir, &["report", "mt"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("no runs"), "{}", stderr(&out));
}

#[test]
fn report_fusion_table_covers_all_five_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir, "");

    for fusion in ["ff-cat", "mean-of-all", "max-pool", "pop-only", "mean-and-cat"] {
        ok(&pop(
            dir,
            &["cil", "--config", "exp.conf", "--fusion", fusion, "--metrics-dir", "runs"],
        ));
    }
    ok(&pop(dir, &["report", "runs"]));

    let table = file(&dir.join("runs"), "report/fusion_vs_aa.csv");
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "fusion,runs,aa_mean,aa_std");
    assert_eq!(lines.len(), 6, "one row per fusion method:\n{table}");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        vec!["ff-cat", "mean-of-all", "max-pool", "pop-only", "mean-and-cat"]
    );
}

#[test]
fn report_prompt_sweep_feeds_the_prompts_figure() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir, "");

    for m in ["1", "2", "3", "4"] {
        ok(&pop(
            dir,
            &["cil", "--config", "exp.conf", "--prompts-per-task", m, "--metrics-dir", "runs"],
        ));
    }
    ok(&pop(dir, &["report", "runs"]));

    let runs = dir.join("runs");
    let prompts = file(&runs, "report/prompts_vs_aa.csv");
    let keys: Vec<&str> = prompts.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(keys, vec!["1", "2", "3", "4"], "{prompts}");
    // the buffer and kshot figures exist alongside
    assert!(runs.join("report/buffer_vs_aa.csv").exists());
    assert!(runs.join("report/kshot_vs_aa.csv").exists());
    // four distinct configurations in the summary
    assert_eq!(file(&runs, "report/summary.csv").lines().count(), 5);
}
