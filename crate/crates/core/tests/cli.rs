use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const STAGES: [&str; 7] = ["synth", "label", "split", "featurize", "train", "evaluate", "explain"];

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_arfdx")
}

fn arfdx(args: &[&str], config: &Path) -> Output {
    Command::new(bin()).args(args).arg("--config").arg(config).env("ARFDX_THREADS", "2").output().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.ini");
    std::fs::write(
        &p,
        format!(
            "[run]\nseed = 11\n\n[synth]\nn_patients = 150\nemb_dim = 8\nn_numeric_vars = 6\n\n[sweep]\nlearning_rates = 0.1\nmomenta = 0.9\nweight_decays = 0.001\nmax_epochs = 8\n\n[explain]\nrepeats = 2\n{extra}"
        ),
    )
    .unwrap();
    p
}

fn stderr_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            files_under(&p, out);
        } else {
            out.push(p);
        }
    }
}

#[test]
fn full_pipeline_writes_reports_with_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    for stage in STAGES {
        let o = arfdx(&[stage], &cfg);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let out = tmp.path().join("out");
    for f in [
        "metrics.csv",
        "summary.csv",
        "roc.csv",
        "calibration.csv",
        "physician.csv",
        "agreement.csv",
        "groups.csv",
        "importance_ehr.csv",
        "importance_combined.csv",
        "split0/missingness.csv",
        "split4/model_combined.json",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let mut files = Vec::new();
    files_under(&out, &mut files);
    for f in files {
        let name = f.file_name().unwrap().to_string_lossy().to_string();
        if name.ends_with(".bin") {
            continue;
        }
        let text = std::fs::read_to_string(&f).unwrap();
        if name.ends_with(".json") {
            let v: Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["provenance"]["seed"], 11, "{name}");
            assert_eq!(v["provenance"]["config_hash"].as_str().map(str::len), Some(16), "{name}");
        } else {
            assert!(text.starts_with("# arfdx ") && text.lines().next().unwrap().contains("seed=11"), "{name}");
        }
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    for model in ["ehr", "image", "combined"] {
        assert!(metrics.contains(&format!("\n{model},0,macro,auroc,")), "{model}");
    }
}

#[test]
fn commands_do_not_touch_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    for stage in ["synth", "label"] {
        assert!(arfdx(&[stage], &cfg).status.success());
    }
    let cohort = tmp.path().join("out/cohort.ndjson");
    let before = std::fs::read(&cohort).unwrap();
    let cfg_before = std::fs::read(&cfg).unwrap();
    for stage in ["label", "split", "featurize"] {
        assert!(arfdx(&[stage], &cfg).status.success());
    }
    assert_eq!(std::fs::read(&cohort).unwrap(), before);
    assert_eq!(std::fs::read(&cfg).unwrap(), cfg_before);
}

#[test]
fn evaluate_without_checkpoint_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    for stage in ["synth", "label", "split", "featurize"] {
        assert!(arfdx(&[stage], &cfg).status.success());
    }
    let o = arfdx(&["evaluate"], &cfg);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr_json(&o);
    assert_eq!(err["stage"], "evaluate");
    let path = err["path"].as_str().unwrap();
    assert!(path.ends_with("model_ehr.json"), "{path}");
    assert!(err["message"].as_str().unwrap().contains(path));
    assert!(!tmp.path().join("out/metrics.csv").exists());
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.ini");
    let o = arfdx(&["synth"], &missing);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "io");

    let cfg = small_config(tmp.path(), "[sweep]\nbogus = 1\n");
    let o = arfdx(&["synth"], &cfg);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "config");

    let bare = tmp.path().join("bare.ini");
    std::fs::write(&bare, "[synth]\nn_patients = 10\n").unwrap();
    let o = arfdx(&["synth"], &bare);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["message"].as_str().unwrap().contains("seed"));

    let o = Command::new(bin()).args(["synth"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn module_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    assert!(arfdx(&["synth"], &cfg).status.success());
    let bad_rules = tmp.path().join("rules.json");
    std::fs::write(
        &bad_rules,
        r#"{"pneumonia":{"icd":[],"medications":["x"]},"heart_failure":{"icd":["I50"],"medications":["x"]},"copd":{"icd":["J44"],"medications":["x"]}}"#,
    )
    .unwrap();
    let cfg = small_config(tmp.path(), "\n[paths]\nruleset = rules.json\n");
    let o = arfdx(&["label"], &cfg);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "labels");

    let cfg = small_config(tmp.path(), "").with_file_name("zero.ini");
    std::fs::write(&cfg, "[run]\nseed = 1\n[synth]\nn_patients = 0\n").unwrap();
    let o = arfdx(&["synth"], &cfg);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "synth");
}

#[test]
fn seed_flag_overrides_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let run = |seed: &str, out: &Path| {
        let o = Command::new(bin())
            .args(["synth", "--seed", seed, "--out"])
            .arg(out)
            .arg("--config")
            .arg(&cfg)
            .output()
            .unwrap();
        assert!(o.status.success());
        std::fs::read_to_string(out.join("truth_labels.csv")).unwrap()
    };
    let ta = run("1", &a);
    let tb = run("2", &b);
    assert!(ta.starts_with("# arfdx") && ta.lines().next().unwrap().contains("seed=1 "));
    assert_ne!(ta.lines().nth(2), None);
    assert_ne!(ta.lines().skip(1).collect::<Vec<_>>(), tb.lines().skip(1).collect::<Vec<_>>());
}
