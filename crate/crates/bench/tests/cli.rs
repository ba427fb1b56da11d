use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tak_bench::config::PipelineConfig;

fn tak(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tak"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tak-cli-{name}-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = PipelineConfig::default();
    cfg.suite.train_per_task = 48;
    cfg.suite.test_per_task = 24;
    cfg.suite.pretrain_size = 96;
    cfg.hidden = 8;
    cfg.pretrain.epochs = 2;
    cfg.finetune.epochs = 2;
    cfg.eval.disentangle_points = 3;
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zero_tasks_is_a_config_error() {
    let dir = scratch("zero");
    let cfg = tiny_config(&dir);
    let out = dir.join("run");
    let o = tak(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--tasks",
        "0",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("config error at `suite`"), "{}", stderr(&o));
}

#[test]
fn unknown_field_reports_its_path() {
    let dir = scratch("unknown");
    let path = dir.join("bad.json");
    std::fs::write(&path, r#"{"penalty": {"beta": 0.1, "gamma": 2}}"#).unwrap();
    let o = tak(&[
        "eval",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.join("run").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("penalty"), "{err}");
    assert!(err.contains("gamma"), "{err}");
}

#[test]
fn pipeline_is_byte_identical_on_rerun_and_writes_every_key() {
    let dir = scratch("pipeline");
    let cfg = tiny_config(&dir);
    let mut results = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(run);
        let o = tak(&[
            "pipeline",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--serial",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        results.push(std::fs::read(out.join("results.json")).unwrap());
        for f in ["manifest.json", "sweep.csv", "config.json"] {
            assert!(out.join(f).exists(), "{f}");
        }
    }
    assert_eq!(results[0], results[1]);

    // A cached re-run in place leaves the bytes untouched.
    let out = dir.join("a");
    let o = tak(&[
        "pipeline",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--serial",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(out.join("results.json")).unwrap(), results[0]);

    let json: serde_json::Value = serde_json::from_slice(&results[0]).unwrap();
    for key in [
        "pretrained",
        "individual",
        "merged_fixed",
        "merged_best",
        "joint_accuracy",
        "drift",
        "sweep",
        "disentanglement",
        "localization",
        "negation",
    ] {
        assert!(json.get(key).is_some(), "missing {key}");
    }

    // Skipped stages stay present as null.
    let mut skip: PipelineConfig = PipelineConfig::load(&cfg).unwrap();
    skip.eval.disentangle = false;
    skip.eval.localize = false;
    let skip_path = dir.join("skip.json");
    std::fs::write(&skip_path, skip.to_json()).unwrap();
    let out = dir.join("skip");
    let o = tak(&[
        "pipeline",
        "--config",
        skip_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--serial",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("results.json")).unwrap()).unwrap();
    assert!(json["disentanglement"].is_null());
    assert!(json["localization"].is_null());
}

#[test]
fn stages_run_individually_and_inspect_reads_curvature() {
    let dir = scratch("stages");
    let cfg = tiny_config(&dir);
    let out = dir.join("run");
    let base = [
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--serial",
    ];
    for stage in [
        "gen",
        "pretrain",
        "kfac",
        "merge-kfac",
        "finetune",
        "eval",
        "sweep",
        "negate",
    ] {
        let mut args = vec![stage];
        args.extend_from_slice(&base);
        let o = tak(&args);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let mut args = vec!["compose", "--alpha", "0.5"];
    args.extend_from_slice(&base);
    assert!(tak(&args).status.success());

    let curv: Vec<PathBuf> = (0..2)
        .map(|t| out.join("curvature").join(format!("task-{t}.kfac")))
        .collect();
    let one = tak(&["inspect", curv[0].to_str().unwrap()]);
    assert!(one.status.success(), "{}", stderr(&one));
    let text = String::from_utf8(one.stdout).unwrap();
    assert!(text.contains("block-8"));
    assert!(!text.contains("merge error"));

    let two = tak(&[
        "inspect",
        "--json",
        curv[0].to_str().unwrap(),
        curv[1].to_str().unwrap(),
    ]);
    assert!(two.status.success());
    let report: serde_json::Value = serde_json::from_slice(&two.stdout).unwrap();
    assert_eq!(report["files"][0]["layers"].as_array().unwrap().len(), 3);
    for layer in report["merge"]["layers"].as_array().unwrap() {
        assert!(layer["actual"].as_f64().unwrap() <= layer["bound"].as_f64().unwrap() * (1.0 + 1e-12));
    }

    let mut bytes = std::fs::read(&curv[0]).unwrap();
    bytes.truncate(bytes.len() / 2);
    let bad = dir.join("bad.kfac");
    std::fs::write(&bad, bytes).unwrap();
    let o = tak(&["inspect", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("at byte"), "{}", stderr(&o));
}

#[test]
fn failing_stage_is_named() {
    let dir = scratch("fail");
    let mut cfg = PipelineConfig::default();
    cfg.suite.train_per_task = 16;
    cfg.suite.test_per_task = 8;
    cfg.suite.pretrain_size = 32;
    cfg.hidden = 4;
    cfg.pretrain.epochs = 50;
    // Far too large a step makes pre-training diverge.
    cfg.pretrain.optimizer = tak_core::training::Optimizer::SgdMomentum {
        lr: 1e307,
        momentum: 0.0,
    };
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    let o = tak(&[
        "pretrain",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.join("run").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage `pretrain`"), "{}", stderr(&o));
}
