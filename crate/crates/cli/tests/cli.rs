//! Runs the `sodm` binary end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sodm::checkpoint::Checkpoint;
use sodm::config::{DataSource, OptimizerConfig, RunConfig};
use sodm::model::{Detector, ModelConfig};
use sodm::synth::{load_dataset, Profile};

fn sodm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sodm"))
        .args(args)
        .env("SODM_THREADS", "1")
        .output()
        .expect("spawn sodm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(iterations: usize, use_msfem: bool) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            use_msfem,
            backbone_widths: vec![4, 4, 8, 8],
            pyramid_width: 4,
            ..ModelConfig::default()
        },
        optimizer: OptimizerConfig {
            learning_rate: 0.01,
            iterations,
            seed: 1,
            ..OptimizerConfig::default()
        },
        data: DataSource::Generated {
            profile: Profile::Small,
            images: 2,
            seed: 3,
        },
        eval: Default::default(),
    }
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    cfg.save(&path).unwrap();
    path
}

#[test]
fn gradcheck_selected_group_passes() {
    let out = sodm(&["gradcheck", "--module", "slpa"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("slpa_forward") && text.contains("PASS"));
    assert!(!text.contains("conv2d"));
    assert!(text.contains("1 checks, 0 failed"));
}

#[test]
fn gradcheck_all_passes_by_default() {
    let out = sodm(&["gradcheck"]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).contains("27 checks, 0 failed"));
}

#[test]
fn gradcheck_zero_tolerance_fails() {
    let out = sodm(&["gradcheck", "--module", "msfem", "--tol", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn unknown_module_is_a_usage_error() {
    let out = sodm(&["gradcheck", "--module", "resnet"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("resnet"));
}

#[test]
fn synth_with_no_images_writes_a_valid_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("empty");
    let out = sodm(&["synth", "--out", path_arg(&target), "--images", "0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(target.join("annotations.jsonl").exists());
    assert!(load_dataset(&target).unwrap().is_empty());
}

#[test]
fn synth_is_reproducible_and_small_profile_is_all_small() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for target in [&a, &b] {
        let out = sodm(&[
            "synth",
            "--out",
            path_arg(target),
            "--images",
            "4",
            "--seed",
            "11",
            "--profile",
            "small",
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(stdout(&out).contains("medium 0  large 0"), "{}", stdout(&out));
    }
    for name in [
        "annotations.jsonl",
        "spec.json",
        "images/000000.ppm",
        "images/000003.ppm",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &tiny_config(1, false));
    let run = dir.path().join("run");
    let out = sodm(&["train", "--config", path_arg(&cfg), "--out", path_arg(&run)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(run.join("checkpoint.sodm").exists());
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2, "{log}");
    assert_eq!(lines[0], "iteration,total,class,box");
    assert!(lines[1].starts_with("1,"));
    assert_eq!(
        RunConfig::load(&run.join("config.json")).unwrap(),
        RunConfig::load(&cfg).unwrap()
    );
}

#[test]
fn train_resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &tiny_config(4, false));
    let run = dir.path().join("run");
    let first = sodm(&[
        "train",
        "--config",
        path_arg(&cfg),
        "--out",
        path_arg(&run),
        "--stop-after",
        "2",
    ]);
    assert!(first.status.success(), "{}", stderr(&first));
    let second = sodm(&["train", "--config", path_arg(&cfg), "--out", path_arg(&run), "--resume"]);
    assert!(second.status.success(), "{}", stderr(&second));
    let resumed = fs::read_to_string(run.join("loss.csv")).unwrap();

    let straight = dir.path().join("straight");
    assert!(
        sodm(&["train", "--config", path_arg(&cfg), "--out", path_arg(&straight)])
            .status
            .success()
    );
    assert_eq!(resumed, fs::read_to_string(straight.join("loss.csv")).unwrap());
}

#[test]
fn train_reports_missing_and_malformed_configs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = sodm(&["train", "--config", path_arg(&missing), "--out", path_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error:"));

    let typo = dir.path().join("typo.json");
    fs::write(&typo, tiny_config(1, false).to_json().replace("use_slpa", "use_slap")).unwrap();
    let out = sodm(&[
        "train",
        "--config",
        path_arg(&typo),
        "--out",
        path_arg(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("use_slap"), "{}", stderr(&out));
}

#[test]
fn eval_of_an_untrained_model_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(1, false);
    let cfg_path = write_config(dir.path(), "run.json", &cfg);
    let model = Detector::new(&cfg.model).unwrap();
    let ckpt = dir.path().join("init.sodm");
    Checkpoint::from_params(&model.init_params::<f32>(5).unwrap())
        .save(&ckpt)
        .unwrap();
    let json_out = dir.path().join("metrics.json");
    let out = sodm(&[
        "eval",
        "--checkpoint",
        path_arg(&ckpt),
        "--config",
        path_arg(&cfg_path),
        "--json-out",
        path_arg(&json_out),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("AP50") && text.contains("n/a"), "{text}");
    let json_line = text.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(json_line).unwrap();
    assert_eq!(v["ap"], 0.0);
    assert_eq!(v["ap50"], 0.0);
    assert!(v["ap_l"].is_null());
    assert_eq!(fs::read_to_string(&json_out).unwrap().trim(), json_line);
}

#[test]
fn eval_with_a_mismatched_checkpoint_names_the_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "run.json", &tiny_config(1, false));
    let other = Detector::new(&tiny_config(1, true).model).unwrap();
    let ckpt = dir.path().join("other.sodm");
    Checkpoint::from_params(&other.init_params::<f32>(5).unwrap())
        .save(&ckpt)
        .unwrap();
    let out = sodm(&["eval", "--checkpoint", path_arg(&ckpt), "--config", path_arg(&cfg_path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("fpn."), "{}", stderr(&out));
    assert!(stdout(&out).is_empty());
}

#[test]
fn bench_reports_positive_throughput() {
    let out = sodm(&["bench", "--op", "conv2d", "--iters", "1", "--size", "1x4x8x8"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let throughput: f64 = text
        .split("throughput ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| panic!("no throughput in {text}"));
    assert!(throughput > 0.0);
}

#[test]
fn bench_rejects_unknown_ops_and_bad_sizes() {
    assert_eq!(sodm(&["bench", "--op", "fft"]).status.code(), Some(2));
    assert_eq!(
        sodm(&["bench", "--op", "conv2d", "--size", "4x4"]).status.code(),
        Some(2)
    );
}
