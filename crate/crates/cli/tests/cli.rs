use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pfoa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfoa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run pfoa")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csvs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn missing_upstream_artifact_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = pfoa(&["train", "--out", out]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("error: kind=missing_artifact"), "{err}");
    assert!(err.contains("run `pfoa roi` first"), "{err}");

    let o = pfoa(&["preprocess", "--out", out]);
    assert!(stderr(&o).contains("run `pfoa synth` first"));
}

#[test]
fn invalid_settings_fail_with_a_machine_readable_line() {
    let o = pfoa(&["config", "--set", "colour=red"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error: kind=validation"));

    let o = pfoa(&["config", "--variant", "4"]);
    assert!(!o.status.success());

    let o = pfoa(&["config", "--roi-threshold", "1.5"]);
    assert!(stderr(&o).contains("kind=validation"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    fs::write(&file, "# run settings\nk = 4\nseed = 17\nbudget = 9\n").unwrap();
    let o = pfoa(&[
        "config",
        "--config",
        file.to_str().unwrap(),
        "--k",
        "3",
        "--set",
        "budget=2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    for expect in ["k=3", "seed=17", "budget=2", "epochs=20", "roi_threshold=0.9"] {
        assert!(lines.contains(&expect), "{expect} missing from {lines:?}");
    }
}

#[test]
fn small_chain_produces_outputs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let common = [
        "--out",
        out,
        "--seed",
        "5",
        "--epochs",
        "2",
        "--budget",
        "2",
        "--k",
        "3",
        "--set",
        "subjects=60",
        "--set",
        "bootstrap=50",
        "--set",
        "roi_train_images=25",
        "--set",
        "cnn_widths=2,4,4",
        "--set",
        "cnn_fc=8",
        "--set",
        "lr0=0.01",
    ];
    for cmd in ["synth", "preprocess", "roi", "train", "reference", "evaluate"] {
        let mut args = vec![cmd];
        args.extend(common);
        let o = pfoa(&args);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    for f in [
        "manifest.csv",
        "detections.csv",
        "oof_scores.csv",
        "metrics.csv",
        "roc_cnn.svg",
        "pr_cnn.svg",
        "roc_model3.svg",
        "subgroups.csv",
        "shap.csv",
        "comparisons.csv",
        "run_meta.txt",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let comparisons = fs::read_to_string(dir.path().join("comparisons.csv")).unwrap();
    assert!(
        comparisons.lines().any(|l| l.starts_with("CNN,Model 3,")),
        "{comparisons}"
    );
    let meta = fs::read_to_string(dir.path().join("run_meta.txt")).unwrap();
    assert!(meta.contains("[evaluate]") && meta.contains("config.seed=5"));

    let before = csvs(dir.path());
    let mut args = vec!["evaluate"];
    args.extend(common);
    assert!(pfoa(&args).status.success());
    assert_eq!(csvs(dir.path()), before);
}
