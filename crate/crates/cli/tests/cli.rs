//! The `protosim` binary end to end on a tiny synthetic comparison.

use std::path::Path;
use std::process::{Command, Output};

fn protosim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protosim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = protosim(args);
    assert!(
        out.status.success(),
        "`protosim {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

const TINY: &str = "\
backbone = toy-vit-s4-d16-l1-h2-i16,seed=1
num_prototypes = 8
epochs = 2
soft_epochs = 1
batch_size = 16
local_crops = 1
head_hidden_dim = 16
head_bottleneck_dim = 8
head_output_dim = 16
";

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(protosim(&[]).status.code(), Some(1));
    assert_eq!(protosim(&["train"]).status.code(), Some(1));
    assert_eq!(protosim(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let missing = format!("A={}", s(&dir.path().join("nope")));
    let out = protosim(&["train", "--datasets", &missing, "--out", &s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let out = protosim(&["compare", "--index", &s(dir.path()), "--checkpoint", &s(dir.path()), "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let out = protosim(&["compare", "--index", ".", "--checkpoint", ".", "--out", "x", "--threshold", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_train_index_compare_probe_ablate_viz() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&dir.path().join(n));
    let specs: Vec<String> = ok(&[
        "synth", "--out", &p("data"), "--images-per-dataset", "12", "--specific-per-dataset", "1",
        "--shared", "1", "--size", "16",
    ])
    .lines()
    .map(String::from)
    .collect();
    assert_eq!(specs.len(), 2);
    assert!(dir.path().join("data/truth.json").is_file());
    std::fs::write(dir.path().join("tiny.conf"), TINY).unwrap();
    let datasets = specs.join(",");

    let log = ok(&["train", "--datasets", &datasets, "--config", &p("tiny.conf"), "--set", "seed=3", "--out", &p("run")]);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch")).count(), 2, "one line per epoch: {log}");
    assert!(dir.path().join("run/checkpoint.safetensors").is_file());
    assert!(dir.path().join("run/train_log.jsonl").is_file());

    ok(&["index", "--checkpoint", &p("run"), "--dataset", &datasets, "--out", &p("index")]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("index/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["num_prototypes"], 8);
    assert_eq!(manifest["datasets"].as_array().unwrap().len(), 2);

    ok(&["compare", "--index", &p("index"), "--checkpoint", &p("run"), "--out", &p("report")]);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report/report.json")).unwrap()).unwrap();
    let counts = &report["counts"];
    let total = counts["specific"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum::<u64>()
        + counts["shared"].as_u64().unwrap()
        + counts["insufficient_data"].as_u64().unwrap();
    assert_eq!(total, 8, "every prototype gets exactly one label: {counts}");

    // A second checkpoint does not match the index.
    ok(&["train", "--datasets", &datasets, "--config", &p("tiny.conf"), "--set", "seed=4", "--out", &p("run2")]);
    let out = protosim(&["compare", "--index", &p("index"), "--checkpoint", &p("run2"), "--out", &p("r2")]);
    assert_ne!(out.status.code(), Some(0));

    let a = &specs[0];
    ok(&["probe", "--checkpoint", &p("run"), "--dataset", a, "--epochs", "3", "--out", &p("probe")]);
    let probe: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("probe/probe.json")).unwrap()).unwrap();
    let acc = probe["overall_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    ok(&["ablate", "--checkpoint", &p("run"), "--probe", &p("probe"), "--classes", "all", "--out", &p("ablation")]);
    let ablation: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("ablation/ablation.json")).unwrap()).unwrap();
    assert!(ablation["report"]["entries"].as_array().is_some_and(|e| !e.is_empty()));

    let image = std::fs::read_dir(a.split_once('=').unwrap().1)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "png"))
        .unwrap();
    ok(&["viz", "--checkpoint", &p("run"), "--image", &s(&image), "--prototype", "0", "--out", &p("viz/o.png")]);
    assert!(dir.path().join("viz/o.png").is_file());
    assert!(dir.path().join("viz/o.json").is_file());
    let out = protosim(&["viz", "--checkpoint", &p("run"), "--image", &s(&image), "--prototype", "8", "--out", &p("v.png")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn single_dataset_compare_warns() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&dir.path().join(n));
    let specs: Vec<String> = ok(&[
        "synth", "--out", &p("data"), "--datasets", "A", "--images-per-dataset", "6",
        "--specific-per-dataset", "1", "--shared", "1", "--size", "16",
    ])
    .lines()
    .map(String::from)
    .collect();
    std::fs::write(dir.path().join("tiny.conf"), TINY).unwrap();
    ok(&["train", "--datasets", &specs[0], "--config", &p("tiny.conf"), "--set", "epochs=1", "--out", &p("run")]);
    ok(&["index", "--checkpoint", &p("run"), "--dataset", &specs[0], "--out", &p("index")]);
    let out = protosim(&["compare", "--index", &p("index"), "--checkpoint", &p("run"), "--out", &p("report")]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("single dataset"));
}
