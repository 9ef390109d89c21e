use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn setn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setn"))
        .args(args)
        .current_dir(dir)
        .env("SETN_LOG", "error")
        .output()
        .unwrap()
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn ok(out: &Output) {
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const SPEC: &str = r#"{"n": 60, "sector_classes": 4, "industry_classes": 8, "vocab_size": 200,
 "tokens_per_doc": 10, "theme_count": 2, "theme_size": 8}"#;

const TRAIN: &str = r#"{"nodes": "d/nodes.jsonl", "edges": "d/edges.tsv", "vocab": "d/vocab.txt",
 "taxonomy": "d/taxonomy.json", "themes": "d/themes.jsonl", "epochs": 2, "hidden_dim": 8, "ff_dim": 16}"#;

fn synth(dir: &Path) {
    fs::write(dir.join("spec.json"), SPEC).unwrap();
    ok(&setn(&["synth", "--config", "spec.json", "--out", "d", "--seed", "3"], dir));
}

#[test]
fn synth_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(&setn(&["synth", "--seed", "7", "--n", "300", "--out", out], d));
    }
    for f in ["nodes.jsonl", "edges.tsv", "themes.jsonl", "vocab.txt", "taxonomy.json"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap());
    }
    let lines = json_lines(&setn(&["synth", "--seed", "7", "--n", "300", "--out", "c"], d));
    assert_eq!(lines[0]["effective_config"]["spec"]["n"], 300);
    assert_eq!(lines[1]["stocks"], 300);
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    fs::write(d.join("c.json"), TRAIN).unwrap();
    let out = setn(&["train", "--config", "c.json", "--out", "m.ckpt", "--gnn", "gat"], d);
    ok(&out);
    let lines = json_lines(&out);
    let cfg = &lines[0]["effective_config"];
    assert_eq!(cfg["train"]["gnn"], "gat");
    assert_eq!(cfg["train"]["epochs"], 2);
    assert_eq!(lines.iter().filter(|l| l.get("epoch").is_some()).count(), 2);

    let out = setn(&["eval-map", "--config", "c.json", "--model", "m.ckpt"], d);
    ok(&out);
    let rows: Vec<Value> = json_lines(&out).into_iter().skip(1).collect();
    assert_eq!(rows.len(), 6);
    let ks: Vec<u64> = rows.iter().map(|r| r["k"].as_u64().unwrap()).collect();
    assert_eq!(ks, [5, 10, 50, 5, 10, 50]);
    // The human table on stderr carries the same numbers.
    let table = String::from_utf8(out.stderr).unwrap();
    for r in &rows {
        let line = format!("{:<10} {:>5} {:>8.4}", r["taxonomy"].as_str().unwrap(), r["k"].as_u64().unwrap(), r["map"].as_f64().unwrap());
        assert!(table.contains(&line), "{line:?} missing from\n{table}");
    }

    let out = setn(&["eval-theme", "--config", "c.json", "--model", "m.ckpt", "--min-theme-size", "2"], d);
    ok(&out);
    let last = json_lines(&out).pop().unwrap();
    assert_eq!(last["theme"], "overall");
    assert!(last["random_guess"].as_f64().unwrap() > 0.0);

    for (fmt, file) in [("tsv", "e.tsv"), ("binary", "e.bin")] {
        ok(&setn(&["embed", "--config", "c.json", "--model", "m.ckpt", "--out", file, "--format", fmt], d));
    }
    let tsv = fs::read_to_string(d.join("e.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 61);
    assert_eq!(tsv.lines().next().unwrap(), "id\tdim=8");
}

#[test]
fn training_is_reproducible_from_the_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    fs::write(d.join("c.json"), TRAIN).unwrap();
    let out = setn(&["train", "--config", "c.json", "--out", "a.ckpt", "--seed", "5"], d);
    ok(&out);
    // Rebuild a config file from the echo and train again.
    let echo = &json_lines(&out)[0]["effective_config"];
    let mut cfg = echo["train"].as_object().unwrap().clone();
    for (k, v) in echo["paths"].as_object().unwrap() {
        cfg.insert(k.clone(), v.clone());
    }
    cfg.insert("out".into(), "b.ckpt".into());
    fs::write(d.join("echo.json"), Value::Object(cfg).to_string()).unwrap();
    ok(&setn(&["train", "--config", "echo.json"], d));
    assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap());
}

#[test]
fn ablate_one_axis_gives_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    fs::write(d.join("c.json"), TRAIN).unwrap();
    let out = setn(&["ablate", "--config", "c.json", "--axes", "graph_type", "--epochs", "1"], d);
    ok(&out);
    let rows: Vec<Value> = json_lines(&out).into_iter().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["settings"]["graph_type"], "directed");
    assert_eq!(rows[1]["settings"]["graph_type"], "undirected");
    assert_eq!(rows[0]["topix17"].as_array().unwrap().len(), 3);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(setn(&["frobnicate"], d).status.code(), Some(2));
    assert_eq!(setn(&["train", "--no-such-flag"], d).status.code(), Some(2));
    assert_eq!(setn(&["train", "--gnn", "mlp"], d).status.code(), Some(2));
    assert_eq!(setn(&[], d).status.code(), Some(2));
    fs::write(d.join("bad.json"), r#"{"epochs": 3, "learning_rat": 0.1}"#).unwrap();
    let out = setn(&["train", "--config", "bad.json", "--out", "m"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
    assert_eq!(setn(&["ablate", "--axes", "depth", "--nodes", "x", "--edges", "y", "--vocab", "z"], d).status.code(), Some(2));
    assert_eq!(setn(&["--help"], d).status.code(), Some(0));
}

#[test]
fn data_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let out = setn(&["train", "--nodes", "missing.jsonl", "--edges", "d/edges.tsv", "--vocab", "d/vocab.txt", "--out", "m"], d);
    assert_eq!(out.status.code(), Some(1));
    fs::write(d.join("broken.ckpt"), b"SETN garbage").unwrap();
    fs::write(d.join("c.json"), TRAIN).unwrap();
    let out = setn(&["eval-map", "--config", "c.json", "--model", "broken.ckpt"], d);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let cfg = r#"{"nodes": "d/nodes.jsonl", "edges": "d/edges.tsv", "vocab": "d/vocab.txt", "taxonomy": "d/taxonomy.json",
        "epochs": 1, "hidden_dim": 8, "ff_dim": 16, "residual": true, "directed": true, "pooling": "max", "encoder_train": "all"}"#;
    fs::write(d.join("c.json"), cfg).unwrap();
    let out = setn(
        &["train", "--config", "c.json", "--out", "m", "--residual", "off", "--graph", "undirected", "--pooling", "cls", "--encoder-train", "none"],
        d,
    );
    ok(&out);
    let train = &json_lines(&out)[0]["effective_config"]["train"];
    assert_eq!(train["residual"], false);
    assert_eq!(train["directed"], false);
    assert_eq!(train["pooling"], "cls");
    assert_eq!(train["encoder_train"], "none");
    assert_eq!(train["epochs"], 1);
}
