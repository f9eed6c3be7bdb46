use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use regionformer::data::write_dataset;
use regionformer::model::Checkpoint;
use regionformer::synth::{generate, SynthSpec};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regionformer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        n_roads: 6,
        n_h: 3,
        n_w: 3,
        steps: 300,
        ..SynthSpec::default()
    }
}

const TINY: &str = r#"{
  "model": {"p": 4, "q": 2, "d": 8, "k": 2, "l_x": 1, "l_z": 1, "epochs": 2, "max_train_windows": 24}
}"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_tiny(data: &Path, out: &Path, cfg: &Path) -> Output {
    fs::write(cfg, TINY).unwrap();
    bin(&["train", "--config", s(cfg), "--data", s(data), "--out", s(out)])
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = bin(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_variant_and_missing_data_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = bin(&["ablate", "--variant", "no-such", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let o = bin(&["train", "--data", s(&dir.path().join("absent")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(&["eval", "--ckpt", s(&dir.path().join("none.json")), "--data", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, serde_json::to_string(&small_spec()).unwrap()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(bin(&["synth", "--spec", s(&spec), "--out", s(&a)]).status.success());
    assert!(bin(&["synth", "--spec", s(&spec), "--out", s(&b)]).status.success());
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn train_then_eval_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data, &generate(&small_spec()).unwrap()).unwrap();
    let out = dir.path().join("run");
    let o = train_tiny(&data, &out, &dir.path().join("cfg.json"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "checkpoint.json", "history.csv", "report.json", "report.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    // stdout is exactly the report document
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(printed, saved);

    // checkpoint survives a load/save cycle byte for byte
    let text = fs::read_to_string(out.join("checkpoint.json")).unwrap();
    assert_eq!(Checkpoint::from_json(&text).unwrap().to_json().unwrap(), text);

    let o = bin(&["eval", "--ckpt", s(&out.join("checkpoint.json")), "--data", s(&data), "--format", "json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let evaluated: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(evaluated, saved);

    // identical invocations give identical artifacts
    let again = dir.path().join("again");
    assert!(train_tiny(&data, &again, &dir.path().join("cfg.json")).status.success());
    for f in ["checkpoint.json", "history.csv", "report.json"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let o = bin(&["report", "--history", s(&out.join("history.csv")), "--reports", s(&out.join("report.json"))]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("epoch,train_mae,val_mae\n"));
    assert!(text.contains("Avg. MAE"));
    assert!(text.contains("run "));
}

#[test]
fn perfect_predictor_prints_zero_mae() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut bundle = generate(&small_spec()).unwrap();
    bundle.data.x.values.iter_mut().for_each(|v| *v = 42.0);
    write_dataset(&data, &bundle).unwrap();
    let out = dir.path().join("run");
    assert!(train_tiny(&data, &out, &dir.path().join("cfg.json")).status.success());

    // with a zero last layer the normalized output is 0, i.e. the road mean
    let path = out.join("checkpoint.json");
    let mut ckpt = Checkpoint::load(&path).unwrap();
    let mut touched = 0;
    for (name, t) in ckpt.params.iter_mut() {
        if name.starts_with("output.l2") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            touched += 1;
        }
    }
    assert!(touched > 0);
    ckpt.save(&path).unwrap();

    let o = bin(&["eval", "--ckpt", s(&path), "--data", s(&data), "--split", "test", "--stratify-poi"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let row = table.lines().find(|l| l.starts_with("full ")).unwrap();
    let cols: Vec<&str> = row.split_whitespace().collect();
    // Avg. MAE is the third column from the end
    assert_eq!(cols[cols.len() - 3], "0.000");
    assert!(table.contains("POI-H") && table.contains("POI-L"));
}
