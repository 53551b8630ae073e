use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "backbone": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "vocab_size": 64, "max_seq": 64},
  "hypernet": {"rank": 2, "d_task": 16, "hidden": 16, "seed": 3},
  "family": {"tasks": 3, "held_out": 1, "train_examples": 20, "val_examples": 5},
  "plan": {"task_samples": 10, "shots": 10, "target_users": 2, "sharer_users": 1},
  "history_len": 50,
  "eval_len": 3
}"#;

struct Lab {
    dir: TempDir,
}

impl Lab {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_prisp"));
        c.env_remove("PRISP_SEED");
        c.arg("--config").arg(self.path("cfg.json")).args(args);
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn bench(&self, kind: &str, name: &str) -> String {
        let out = self.p(name);
        self.ok(&[
            "gen-bench",
            "--kind",
            kind,
            "--users",
            "3",
            "--seed",
            "1",
            "--out",
            &out,
        ]);
        out
    }

    fn model(&self) -> String {
        let out = self.p("model");
        if !self.path("model").join("hypernet.prsp").exists() {
            self.ok(&["pretrain-hypernet", "--epochs", "1", "--out", &out]);
        }
        out
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.path(rel)).unwrap()).unwrap()
    }
}

fn dir_bytes(dir: &Path, skip: &[&str]) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().into_string().unwrap();
        if e.file_type().unwrap().is_file() && !skip.contains(&name.as_str()) {
            out.insert(name, fs::read(e.path()).unwrap());
        }
    }
    out
}

fn task_scores(report: &Value) -> Vec<f64> {
    report["tasks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["score"].as_f64().unwrap())
        .collect()
}

#[test]
fn gen_bench_is_byte_identical_and_valid() {
    let lab = Lab::new();
    let a = lab.bench("classification", "a");
    let b = lab.bench("classification", "b");
    let da = dir_bytes(Path::new(&a), &[]);
    assert!(da.contains_key("data.jsonl") && da.contains_key("run_manifest.json"));
    assert_eq!(da, dir_bytes(Path::new(&b), &[]));
    let out = lab.ok(&["validate", &a]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok"));
}

#[test]
fn missing_out_is_a_usage_error() {
    let lab = Lab::new();
    let out = lab.run(&["gen-bench", "--kind", "ordinal"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_config_values_exit_2() {
    let lab = Lab::new();
    let out = lab.run(&["gen-bench", "--kind", "sorting", "--out", &lab.p("x")]);
    assert_eq!(out.status.code(), Some(2));
    let out = lab
        .cmd(&["gen-bench", "--kind", "ordinal", "--out", &lab.p("x")])
        .env("PRISP_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_exit_3() {
    let lab = Lab::new();
    let out = lab.run(&["validate", &lab.p("nowhere")]);
    assert_eq!(out.status.code(), Some(3));
    let out = lab.run(&["adapters", "inspect", &lab.p("nowhere.prsp")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn non_finite_training_exits_4() {
    let lab = Lab::new();
    let m = lab.model();
    let c = lab.bench("classification", "c");
    let out = lab.run(&[
        "pipeline",
        "--model",
        &m,
        "--bench",
        &c,
        "--lr",
        "1e300",
        "--batch-size",
        "1",
        "--out",
        &lab.p("nan"),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn backbone_mismatch_is_a_config_error() {
    let lab = Lab::new();
    let m = lab.model();
    let c = lab.bench("classification", "c");
    let out = Command::new(env!("CARGO_BIN_EXE_prisp"))
        .args(["pipeline", "--model", &m, "--bench", &c, "--out", &lab.p("x")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_is_deterministic_and_reports_one_score_per_kind() {
    let lab = Lab::new();
    let m = lab.model();
    let benches = [
        lab.bench("classification", "c"),
        lab.bench("ordinal", "o"),
        lab.bench("generation", "g"),
    ];
    let mut args = vec![
        "pipeline",
        "--model",
        &m,
        "--variant",
        "ours",
        "--shots",
        "10",
        "--epochs",
        "1",
    ];
    for b in &benches {
        args.extend(["--bench", b]);
    }
    let out1 = lab.p("p1");
    let out2 = lab.p("p2");
    lab.ok(&[args.as_slice(), &["--out", &out1]].concat());
    lab.ok(&[args.as_slice(), &["--out", &out2]].concat());
    let skip = ["timings.json"];
    assert_eq!(dir_bytes(Path::new(&out1), &skip), dir_bytes(Path::new(&out2), &skip));

    let report = lab.json("p1/report.json");
    let kinds: Vec<&str> = report["tasks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["kind"].as_str().unwrap())
        .collect();
    assert_eq!(kinds, ["classification", "ordinal", "generation"]);
    let manifest = lab.json("p1/run_manifest.json");
    assert_eq!(manifest["config_hash"], report["config_hash"]);
    assert!(manifest["outputs"]["report.json"].is_string());
    assert!(lab.json("p1/timings.json")["cost"]["rows"].is_array());

    let shown = lab.ok(&["report", "--input", &out1, "--format", "json"]);
    let back: Value = serde_json::from_slice(&shown.stdout).unwrap();
    assert_eq!(back, report);
}

#[test]
fn zero_epochs_reproduce_anchor_scores() {
    let lab = Lab::new();
    let m = lab.model();
    let c = lab.bench("classification", "c");
    let g = lab.bench("generation", "g");
    let base = ["pipeline", "--model", &m, "--bench", &c, "--bench", &g];
    lab.ok(&[base.as_slice(), &["--epochs", "0", "--out", &lab.p("e0")]].concat());
    lab.ok(&[base.as_slice(), &["--variant", "anchor", "--out", &lab.p("an")]].concat());
    assert_eq!(
        task_scores(&lab.json("e0/report.json")),
        task_scores(&lab.json("an/report.json"))
    );
}

#[test]
fn tampered_reports_fail_verification() {
    let lab = Lab::new();
    let m = lab.model();
    let c = lab.bench("classification", "c");
    lab.ok(&["pipeline", "--model", &m, "--bench", &c, "--out", &lab.p("p")]);
    let mut report = lab.json("p/report.json");
    report["average"] = Value::from(0.99);
    fs::write(lab.path("bad.json"), report.to_string()).unwrap();
    let out = lab.run(&["report", "--input", &lab.p("bad.json")]);
    assert!(!out.status.success());
}

#[test]
fn ablation_has_five_rows_with_shared_schedules() {
    let lab = Lab::new();
    let m = lab.model();
    let c = lab.bench("classification", "c");
    lab.ok(&[
        "ablate",
        "--model",
        &m,
        "--bench",
        &c,
        "--profile",
        "desk",
        "--out",
        &lab.p("ab"),
    ]);
    let tasks = lab.json("ab/ablation.json");
    let rows = tasks[0]["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(names, ["full-lora", "no-bridge", "bridge-only", "ours", "oppu"]);
    for r in rows {
        assert_eq!(r["mask_audit"], Value::Bool(true));
        // two target users, 10 shots, batch 1, one epoch
        assert_eq!(r["steps"], Value::from(20));
    }
    let table = fs::read_to_string(lab.path("ab/ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 6);
}

#[test]
fn sweep_covers_the_shot_set() {
    let lab = Lab::new();
    let m = lab.model();
    let c = lab.bench("classification", "c");
    lab.ok(&[
        "sweep-shots",
        "--model",
        &m,
        "--bench",
        &c,
        "--methods",
        "ours",
        "--out",
        &lab.p("sw"),
    ]);
    let csv = fs::read_to_string(lab.path("sw/curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("shot,variant,score,seed"));
    let shots: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(shots, ["1", "5", "10", "30", "50"]);
}

#[test]
fn adaptability_diagonal_is_one_and_single_task_is_rejected() {
    let lab = Lab::new();
    let m = lab.model();
    let a = lab.bench("classification", "a");
    let b = lab.p("b");
    lab.ok(&[
        "gen-bench",
        "--kind",
        "classification",
        "--task-seed",
        "153",
        "--users",
        "3",
        "--out",
        &b,
    ]);
    let single = lab.run(&["adaptability", "--model", &m, "--bench", &a, "--out", &lab.p("x")]);
    assert_eq!(single.status.code(), Some(2));
    lab.ok(&[
        "adaptability",
        "--model",
        &m,
        "--bench",
        &a,
        "--bench",
        &b,
        "--out",
        &lab.p("ad"),
    ]);
    let out = lab.json("ad/adaptability.json");
    for key in ["sharer", "prisp"] {
        let rows = out["matrix"][key].as_array().unwrap();
        assert_eq!(rows.len(), 2);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row[i]["ratio"].as_f64(), Some(1.0));
        }
    }
    assert!(out["sharer_off_diagonal_mean"].as_f64().unwrap().is_finite());
}

#[test]
fn robustness_repeats_a_variant_identically() {
    let lab = Lab::new();
    let m = lab.model();
    let c = lab.bench("classification", "c");
    lab.ok(&[
        "robustness",
        "--model",
        &m,
        "--bench",
        &c,
        "--variants",
        "imprecise,imprecise,canonical",
        "--out",
        &lab.p("ro"),
    ]);
    let rows = lab.json("ro/robustness.json")[0]["rows"].clone();
    assert_eq!(rows[0]["stage1"], rows[1]["stage1"]);
    assert_eq!(rows[0]["stage2"], rows[1]["stage2"]);
    let bad = lab.run(&[
        "robustness",
        "--model",
        &m,
        "--bench",
        &c,
        "--variants",
        "poetic",
        "--out",
        &lab.p("x"),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn personalize_writes_one_adapter_per_user() {
    let lab = Lab::new();
    let m = lab.model();
    let c = lab.bench("classification", "c");
    lab.ok(&["make-anchor", "--model", &m, "--bench", &c, "--out", &lab.p("an")]);
    let anchor = lab.p("an/anchor.prsp");
    lab.ok(&[
        "personalize",
        "--model",
        &m,
        "--anchor",
        &anchor,
        "--bench",
        &c,
        "--profile",
        "desk",
        "--out",
        &lab.p("pu"),
    ]);
    let traces = lab.json("pu/personalize.json");
    let traces = traces.as_array().unwrap();
    assert_eq!(traces.len(), 2);
    for t in traces {
        assert_eq!(t["frozen_intact"], Value::Bool(true));
        assert_eq!(t["steps"], Value::from(10));
        let file = lab.path("pu").join(t["file"].as_str().unwrap());
        let shown = lab.ok(&["adapters", "inspect", file.to_str().unwrap()]);
        let info: Value = serde_json::from_slice(&shown.stdout).unwrap();
        assert_eq!(info["variant"], "ours");
        assert_eq!(info["members"][0]["trainable_roles"], serde_json::json!(["B", "C"]));
        assert_eq!(info["trainable"], t["trainable"]);
    }

    // the same users read back from the benchmark's JSONL
    let data = format!("{c}/data.jsonl");
    lab.ok(&[
        "personalize",
        "--model",
        &m,
        "--anchor",
        &anchor,
        "--users",
        &data,
        "--profile",
        "desk",
        "--out",
        &lab.p("pj"),
    ]);
    assert_eq!(
        fs::read(lab.path("pu/users/u000.prsp")).unwrap(),
        fs::read(lab.path("pj/users/u000.prsp")).unwrap()
    );
}

#[test]
fn seed_precedence_is_config_then_env_then_flag() {
    let lab = Lab::new();
    let seed_of = |extra_env: Option<&str>, flag: Option<&str>| {
        let out = lab.p("s");
        let mut c = lab.cmd(&["gen-bench", "--kind", "ordinal", "--out", &out]);
        if let Some(v) = extra_env {
            c.env("PRISP_SEED", v);
        }
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        assert!(c.output().unwrap().status.success());
        lab.json("s/manifest.json")["user_seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(None, None), 0);
    assert_eq!(seed_of(Some("17"), None), 17);
    assert_eq!(seed_of(Some("17"), Some("5")), 5);
}

#[test]
fn inputs_are_left_untouched() {
    let lab = Lab::new();
    let m = lab.model();
    let c = lab.bench("classification", "c");
    let before = (dir_bytes(Path::new(&m), &[]), dir_bytes(Path::new(&c), &[]));
    lab.ok(&["ablate", "--model", &m, "--bench", &c, "--out", &lab.p("ab")]);
    assert_eq!(before, (dir_bytes(Path::new(&m), &[]), dir_bytes(Path::new(&c), &[])));
}

#[test]
fn partial_config_sections_fill_in_defaults() {
    let lab = Lab::new();
    let cfg = lab.path("partial.json");
    fs::write(&cfg, r#"{"plan": {"shots": 4}, "personalize": {"epochs": 2}}"#).unwrap();
    let out = lab.p("pb");
    let status = Command::new(env!("CARGO_BIN_EXE_prisp"))
        .env_remove("PRISP_SEED")
        .arg("--config")
        .arg(&cfg)
        .args(["gen-bench", "--kind", "classification", "--out", &out])
        .status()
        .unwrap();
    assert!(status.success());
    let p = &lab.json("pb/run_manifest.json")["config"]["personalize"];
    assert_eq!(p["epochs"], 2);
    assert_eq!(p["batch_size"], 16);
}
