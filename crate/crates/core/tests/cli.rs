//! End-to-end runs of the compiled binary: exit codes, artifact layout,
//! and bitwise reproduction from a snapshotted config.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_featreg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

fn read_bytes(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Tiny corpus that keeps every pipeline test under a second.
fn gen_tiny(dir: &Path, transform: &str, seed: u64) {
    let out = run(&[
        "gen",
        "--out",
        dir.to_str().unwrap(),
        "--transform",
        transform,
        "--seed",
        &seed.to_string(),
        "--size",
        "16",
        "--classes",
        "3",
        "--train",
        "4",
        "--val",
        "2",
        "--test",
        "2",
    ]);
    assert_code(&out, 0);
}

#[test]
fn distance_prints_published_value() {
    let out = run(&["distance", "--ref", "79.92,69.22", "--scores", "54.73,46.07"]);
    assert_code(&out, 0);
    assert_eq!(stdout(&out).trim(), "32.48");
}

#[test]
fn distance_rejects_out_of_range_scores_at_runtime() {
    let out = run(&["distance", "--ref", "120,50", "--scores", "54.73,46.07"]);
    assert_code(&out, 2);
    assert!(stderr(&out).starts_with("error:"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = run(&["distance", "--ref", "79.92,69.22"]);
    assert_code(&out, 1);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_code(&out, 1);
}

#[test]
fn help_exits_cleanly() {
    let out = run(&["--help"]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("train-transfer"));
}

#[test]
fn gen_is_reproducible_and_snapshot_feeds_back() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("a");
    let d2 = tmp.path().join("b");
    gen_tiny(&d1, "ripple", 11);
    gen_tiny(&d2, "ripple", 11);
    let mut names = vec!["meta.json".to_string()];
    for split in ["train", "val", "test"] {
        for entry in fs::read_dir(d1.join(split)).unwrap() {
            let file = entry.unwrap().file_name().into_string().unwrap();
            names.push(format!("{split}/{file}"));
        }
    }
    names.sort();
    assert!(names.len() > 8 * 4, "expected one quartet per scene plus meta");
    for n in &names {
        assert_eq!(read_bytes(&d1.join(n)), read_bytes(&d2.join(n)), "{n} differs");
    }

    // The written manifest is itself a config file.
    let d3 = tmp.path().join("c");
    let out = run(&[
        "gen",
        "--config",
        d1.join("meta.json").to_str().unwrap(),
        "--out",
        d3.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    for n in &names {
        assert_eq!(read_bytes(&d1.join(n)), read_bytes(&d3.join(n)), "{n} differs via config");
    }
}

#[test]
fn gen_without_shift_yields_identical_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    gen_tiny(&dir, "none", 3);
    let train = dir.join("train");
    assert_eq!(read_bytes(&train.join("0_x1.ppm")), read_bytes(&train.join("0_x2.ppm")));
    assert_eq!(read_bytes(&train.join("0_y1.pgm")), read_bytes(&train.join("0_y2.pgm")));
}

#[test]
fn gen_rejects_params_of_another_transform() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
        "--transform",
        "ripple",
        "--contrast",
        "2.0",
    ]);
    assert_code(&out, 2);
}

#[test]
fn train_sup_rerun_from_snapshot_is_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "none", 5);
    let run1 = tmp.path().join("run1");
    let out = run(&[
        "train-sup",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        run1.to_str().unwrap(),
        "--iters",
        "3",
        "--batch",
        "2",
        "--seed",
        "7",
    ]);
    assert_code(&out, 0);
    // Startup echoes the full effective configuration.
    for needle in ["lr = 0.01", "momentum = 0.9", "iters = 3", "command = \"train-sup\""] {
        assert!(stdout(&out).contains(needle), "missing {needle} in:\n{}", stdout(&out));
    }
    for artifact in ["config.toml", "loss.csv", "ckpt.fbck"] {
        assert!(run1.join(artifact).exists(), "{artifact} missing");
    }
    assert!(!run1.join(".lock").exists(), "lock should be released");

    let run2 = tmp.path().join("run2");
    let out = run(&[
        "train-sup",
        "--config",
        run1.join("config.toml").to_str().unwrap(),
        "--out",
        run2.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert_eq!(read_bytes(&run1.join("loss.csv")), read_bytes(&run2.join("loss.csv")));
    assert_eq!(read_bytes(&run1.join("ckpt.fbck")), read_bytes(&run2.join("ckpt.fbck")));
}

#[test]
fn config_file_for_the_wrong_command_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("other.toml");
    fs::write(&cfg, "command = \"eval\"\n").unwrap();
    let out = run(&[
        "train-sup",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("belongs to"), "stderr: {}", stderr(&out));
}

#[test]
fn transfer_eval_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "ripple", 9);
    let runs = tmp.path().join("runs");

    let teacher_dir = runs.join("teacher");
    let out = run(&[
        "train-sup",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        teacher_dir.to_str().unwrap(),
        "--iters",
        "3",
        "--batch",
        "2",
    ]);
    assert_code(&out, 0);
    let teacher = teacher_dir.join("ckpt.fbck");

    let student_dir = runs.join("student");
    let out = run(&[
        "train-transfer",
        "--dataset",
        data.to_str().unwrap(),
        "--teacher",
        teacher.to_str().unwrap(),
        "--out",
        student_dir.to_str().unwrap(),
        "--taps",
        "pool_2",
        "--iters",
        "3",
        "--batch",
        "2",
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("pool_2:1"), "stdout: {}", stdout(&out));
    let student = student_dir.join("ckpt.fbck");
    assert!(student.exists());
    let loss = fs::read_to_string(student_dir.join("loss.csv")).unwrap();
    assert!(loss.starts_with("iter,lr,loss\n"));
    assert_eq!(loss.lines().count(), 4, "header plus one row per iteration");

    let eval_dir = runs.join("eval-b0");
    let out = run(&[
        "eval",
        "--ckpt",
        teacher.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--role",
        "b0",
    ]);
    assert_code(&out, 0);
    let scores = fs::read_to_string(eval_dir.join("scores.csv")).unwrap();
    assert!(scores.starts_with("run_id,split,acc,miou,"), "scores: {scores}");
    assert!(scores.lines().nth(1).unwrap().starts_with("eval-d2-test,test,"));
    let summary = fs::read_to_string(eval_dir.join("run.json")).unwrap();
    assert!(summary.contains("\"role\": \"b0\""));
    assert!(summary.contains("\"transform\": \"ripple\""));

    let eval_ab = runs.join("eval-ab");
    let out = run(&[
        "eval",
        "--ckpt",
        student.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        eval_ab.to_str().unwrap(),
        "--role",
        "our",
        "--ablation",
        "pool_2",
    ]);
    assert_code(&out, 0);

    let out = run(&["report", "--runs", runs.to_str().unwrap()]);
    assert_code(&out, 0);
    let report = fs::read_to_string(runs.join("report.md")).unwrap();
    assert!(report.contains("| B0 |"));
    assert!(report.contains("| W_inc |"));
    assert!(report.contains("—"), "unfilled cells use an em dash");
    assert!(report.contains("ripple"));
    let baselines = fs::read_to_string(runs.join("baselines.csv")).unwrap();
    assert_eq!(baselines.lines().count(), 5, "header plus B0, B1, B2, Our");
    assert!(runs.join("ablation.csv").exists());
}

#[test]
fn report_with_no_runs_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["report", "--runs", tmp.path().to_str().unwrap()]);
    assert_code(&out, 2);
}

#[test]
fn eval_rejects_unknown_role() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--ckpt",
        "x.fbck",
        "--dataset",
        "d",
        "--out",
        tmp.path().join("r").to_str().unwrap(),
        "--role",
        "b7",
    ]);
    assert_code(&out, 2);
}

#[test]
fn invert_writes_an_image_and_loss_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "none", 2);
    let teacher_dir = tmp.path().join("teacher");
    let out = run(&[
        "train-sup",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        teacher_dir.to_str().unwrap(),
        "--iters",
        "2",
        "--batch",
        "2",
    ]);
    assert_code(&out, 0);

    let inv_dir = tmp.path().join("inv");
    let out = run(&[
        "invert",
        "--ckpt",
        teacher_dir.join("ckpt.fbck").to_str().unwrap(),
        "--image",
        data.join("train").join("0_x1.ppm").to_str().unwrap(),
        "--out",
        inv_dir.to_str().unwrap(),
        "--content",
        "pool_2",
        "--style",
        "pool_1",
        "--iters",
        "3",
    ]);
    assert_code(&out, 0);
    let img = read_bytes(&inv_dir.join("output.ppm"));
    assert!(img.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(img.len(), 13 + 16 * 16 * 3);
    assert!(inv_dir.join("loss.csv").exists());
    // Style scaling for the run is recorded next to its outputs.
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(inv_dir.join("metadata.json")).unwrap()).unwrap();
    let style = meta["style_terms"].as_array().unwrap();
    assert_eq!(style.len(), 1);
    assert_eq!(style[0]["tap"], "pool_1");
    // pool_1 on a 16x16 input: 16 channels, 8x8 spatial.
    let want = 1.0 / (4.0 * (16.0 * 16.0) * (64.0 * 64.0));
    assert_eq!(style[0]["normalization"].as_f64().unwrap(), want);
}

#[test]
fn run_directory_lock_blocks_a_second_process() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("busy");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(".lock"), "1\n").unwrap();
    let out = run(&[
        "train-sup",
        "--dataset",
        "nowhere",
        "--out",
        dir.to_str().unwrap(),
        "--iters",
        "1",
    ]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("owned by another process"), "stderr: {}", stderr(&out));
}
