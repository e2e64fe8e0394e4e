use std::path::Path;
use std::process::{Command, Output};

use diffrep::autonet::{DenoiserArch, OptimizerConfig};
use diffrep::datasets::DatasetSpec;
use diffrep::pipeline::ExperimentConfig;

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset = DatasetSpec::Mixture {
        k: 3,
        d: 4,
        n: 150,
        spread: 0.1,
        modes_per_class: 1,
    };
    c.teacher.arch = DenoiserArch::bottleneck(4, 16, 4, 10);
    c.teacher.training.epochs = 5;
    c.teacher.training.batch_size = 32;
    c.student_hidden = vec![8, 4];
    c.distill.epochs = 3;
    c.distill.batch_size = 16;
    c.finetune.epochs = 3;
    c.finetune.batch_size = 16;
    c.policy_hidden = 4;
    c.seeds = vec![1, 2];
    c.fixed_grid = vec![0, 9];
    c.probe_grid = vec![0, 5, 9];
    c
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.to_str().unwrap().to_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffrep")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn teacher_probe_and_distill_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_owned();
    ok(&["train-dpm", "--config", &cfg, "--out", &d("t")]);
    for f in [
        "teacher.bin",
        "report.json",
        "teacher_loss.csv",
        "teacher_loss.svg",
        "timing.json",
    ] {
        assert!(dir.path().join("t").join(f).exists(), "{f}");
    }
    let teacher = d("t/teacher.bin");
    let probe = ok(&[
        "probe",
        "--config",
        &cfg,
        "--teacher",
        &teacher,
        "--t-grid",
        "0,9",
        "--out",
        &d("p"),
    ]);
    assert_eq!(probe.lines().count(), 2);
    let csv = std::fs::read_to_string(dir.path().join("p/probe.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    ok(&[
        "distill",
        "--config",
        &cfg,
        "--teacher",
        &teacher,
        "--seed",
        "7",
        "--loss",
        "rkd",
        "--out",
        &d("s"),
    ]);
    let student = d("s/student_7.bin");
    assert!(Path::new(&student).exists());
    let ft = ok(&[
        "finetune",
        "--config",
        &cfg,
        "--student",
        &student,
        "--seed",
        "7",
        "--out",
        &d("f"),
    ]);
    assert!(ft.contains("test accuracy"));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("f/report.json")).unwrap()).unwrap();
    let acc = report["mean_test_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn finetune_and_ablate_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_owned();
    for out in ["a", "b"] {
        ok(&["finetune", "--config", &cfg, "--mode", "reinforced", "--out", &d(out)]);
    }
    let a = std::fs::read(dir.path().join("a/report.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/report.json")).unwrap());
    let trace = std::fs::read_to_string(dir.path().join("a/trace.csv")).unwrap();
    assert!(trace.starts_with("seed,step,mean_t,std_t,mean_reward,entropy\n"));

    let table = ok(&["ablate", "--config", &cfg, "--out", &d("abl")]);
    for mode in ["none", "random", "fixed:0", "fixed:9", "reinforced"] {
        assert!(table.contains(mode), "{table}");
    }
    let csv = std::fs::read(dir.path().join("abl/ablation.csv")).unwrap();
    std::fs::remove_file(dir.path().join("abl/ablation.csv")).unwrap();
    ok(&["report", "--out", &d("abl")]);
    assert_eq!(std::fs::read(dir.path().join("abl/ablation.csv")).unwrap(), csv);
}

#[test]
fn linear_study_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lin");
    let stdout = ok(&[
        "linear-dpm",
        "--t-grid",
        "1,500,1000",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(stdout.lines().count(), 3);
    let csv = std::fs::read_to_string(out.join("tradeoff.csv")).unwrap();
    assert!(csv.starts_with("t,alpha_bar,sigma_1"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(tiny_config()).unwrap();
    v["unexpected"] = serde_json::json!(true);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    assert_eq!(
        run(&["finetune", "--config", bad.to_str().unwrap(), "--out", o])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["finetune", "--mode", "fixed:100", "--out", o]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["distill", "--loss", "l1", "--out", o]).status.code(), Some(2));
    assert_eq!(run(&["probe", "--t-grid", "0,x", "--out", o]).status.code(), Some(2));
    assert_eq!(run(&["linear-dpm", "--t-grid", "0", "--out", o]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.teacher.training.optimizer = OptimizerConfig::Sgd {
        lr: 1e12,
        momentum: 0.0,
        weight_decay: 0.0,
    };
    let path = write_config(dir.path(), &cfg);
    let out = run(&[
        "train-dpm",
        "--config",
        &path,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
