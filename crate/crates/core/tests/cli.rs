//! The `tinymoe` binary, driven as a user would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tinymoe::config::ExperimentConfig;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> PathBuf {
    repo().join("configs").join(name)
}

fn tinymoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tinymoe")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tinymoe(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> serde_json::Value {
    serde_json::from_str(&ok(args)).unwrap()
}

/// Copy of a bundled config with its data and output dirs moved under `root`.
fn relocated(name: &str, root: &Path, data: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::load(&config(name)).unwrap();
    cfg.data.dir = data.to_path_buf();
    cfg.output.dir = root.join("runs");
    let path = root.join(name);
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn bundled_configs_round_trip() {
    let mut n = 0;
    for entry in std::fs::read_dir(repo().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        let a = ExperimentConfig::load(&path).unwrap();
        let b = ExperimentConfig::parse(&a.to_toml().unwrap(), &path).unwrap();
        assert_eq!(a, b, "{}", path.display());
        n += 1;
    }
    assert!(n >= 5);
}

#[test]
fn count_params_reproduces_the_accounting_table() {
    let paths = ["tinystories_dense_active.toml", "tinystories_moe.toml", "tinystories_dense_total.toml"].map(config);
    let args: Vec<String> = paths.iter().flat_map(|p| ["--config".to_string(), p.display().to_string()]).collect();
    let mut argv: Vec<&str> = vec!["count-params", "--json"];
    argv.extend(args.iter().map(String::as_str));
    let rows = json(&argv);
    let m = |v: &serde_json::Value, k: &str| format!("{:.2}", v[k].as_u64().unwrap() as f64 / 1e6);
    let expect = [
        ["9.60", "0.99", "4.30", "14.89", "14.89"],
        ["7.68", "0.79", "12.58", "21.06", "14.77"],
        ["11.52", "1.58", "7.96", "21.06", "21.06"],
    ];
    for (row, e) in rows.as_array().unwrap().iter().zip(expect) {
        let got = ["embedding", "non_ffn_blocks", "ffn_or_expert_total", "total", "active"].map(|k| m(row, k));
        assert_eq!(got, e.map(String::from));
    }
    assert_eq!(rows[1]["router"], 4096);

    let table = ok(&["count-params", "--config", paths[1].to_str().unwrap()]);
    assert!(table.contains("21.06M") && table.contains("14.77M"), "{table}");

    let rows = json(&["count-params", "--json", "--vocab", "256", "--config", paths[0].to_str().unwrap()]);
    assert_eq!(rows[0]["embedding"], 256 * 320);
}

#[test]
fn match_budget_recovers_the_dense_baselines() {
    let moe = config("tinystories_moe.toml");
    let active = json(&["match-budget", "--json", "--target", "active", "--config", moe.to_str().unwrap()]);
    assert_eq!((active["model"]["d_model"].as_u64(), active["model"]["ffn_hidden"].as_u64()), (Some(320), Some(1120)));
    assert!(active["relative_error"].as_f64().unwrap() < 0.01);
    let total = json(&["match-budget", "--json", "--target", "total", "--config", moe.to_str().unwrap()]);
    assert_eq!((total["model"]["d_model"].as_u64(), total["model"]["ffn_hidden"].as_u64()), (Some(384), Some(1728)));
    assert!(total["relative_error"].as_f64().unwrap() < 0.001);

    let out = tinymoe(&["match-budget", "--target", "total", "--config", moe.to_str().unwrap(), "--ffn-ratio-min", "9", "--ffn-ratio-max", "8"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"infeasible\""));
}

#[test]
fn errors_exit_nonzero_with_a_structured_report() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("micro_moe.toml")).unwrap().replace("top_k = 2", "top_k = 2\ncapacity_factor = 1.25");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, text).unwrap();
    let out = tinymoe(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "parse");
    assert!(err["error"]["message"].as_str().unwrap().contains("moe.capacity_factor"));

    let out = tinymoe(&["diagnose", "--run", dir.path().join("missing").to_str().unwrap()]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
}

#[test]
fn bench_dispatch_reports_all_paths() {
    let r = json(&["bench-dispatch", "--json", "--tokens", "128", "--d-model", "32", "--hidden", "64", "--repeats", "2"]);
    assert_eq!(r["paths"].as_array().unwrap().len(), 3);
    assert!(r["max_deviation"].as_f64().unwrap() < 1e-5);
    assert_eq!(r["ordering"].as_array().unwrap().len(), 3);
}

#[test]
fn micro_experiment_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let moe_cfg = relocated("micro_moe.toml", root.path(), &data);
    let dense_cfg = relocated("micro_dense.toml", root.path(), &data);

    let info: serde_json::Value =
        serde_json::from_str(&ok(&["prepare-data", "--config", moe_cfg.to_str().unwrap(), "--synthetic", "3000"])).unwrap();
    assert_eq!(info["window_len"], 64);
    assert!(info["train_windows"].as_u64().unwrap() > 10 * info["val_windows"].as_u64().unwrap());
    let again = ok(&["prepare-data", "--config", moe_cfg.to_str().unwrap(), "--synthetic", "3000"]);
    assert_eq!(info, serde_json::from_str::<serde_json::Value>(&again).unwrap());

    let run = root.path().join("runs/seed-1337");
    let report = ok(&["train", "--config", moe_cfg.to_str().unwrap(), "--seed", "1337", "--quiet"]);
    assert!(report.contains("best val CE"), "{report}");
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 300);
    assert_eq!(summary["tokens"], 300 * 16 * 63);
    assert!(summary["evals"].as_u64().unwrap() >= 2);
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().filter(|l| l.contains("\"split\":\"val\"")).count() >= 2);
    assert!(metrics.contains("routing"));
    // the run directory carries its own resolved config
    assert_eq!(ExperimentConfig::load(&run.join("config.toml")).unwrap().train.seed, 1337);

    let table = ok(&["diagnose", "--run", run.to_str().unwrap()]);
    assert!(table.contains("L0") && table.contains("L1") && table.contains("logz trend"), "{table}");

    let ev = json(&["eval", "--json", "--checkpoint", run.join("best.ckpt").to_str().unwrap(), "--data", data.join("val.bin").to_str().unwrap(), "--max-batches", "4"]);
    assert_eq!(ev["val_ce"].as_f64(), summary["best_val_ce"].as_f64());

    let dense_run = root.path().join("dense");
    ok(&["train", "--config", dense_cfg.to_str().unwrap(), "--out", dense_run.to_str().unwrap(), "--stop-after", "100", "--quiet"]);
    let dense_metrics = std::fs::read_to_string(dense_run.join("metrics.jsonl")).unwrap();
    assert!(!dense_metrics.is_empty() && !dense_metrics.contains("routing"));
    let out = tinymoe(&["diagnose", "--run", dense_run.to_str().unwrap()]);
    assert!(!out.status.success());

    let s = ok(&["summarize", run.to_str().unwrap(), dense_run.to_str().unwrap()]);
    assert!(s.contains("moe d64") && s.contains("dense d64"), "{s}");

    // cadence mismatch: the dense run stopped after its first evaluation
    let out = tinymoe(&["export-curves", "--dense-active", dense_run.to_str().unwrap(), "--moe", run.to_str().unwrap(), "--dense-total", run.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cadence") && err.contains("dense"), "{err}");

    let csv_path = root.path().join("curves.csv");
    let r = run.to_str().unwrap();
    ok(&["export-curves", "--dense-active", r, "--moe", r, "--dense-total", r, "--out", csv_path.to_str().unwrap()]);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("step,tokens,dense_active_mean,moe_mean,dense_total_mean,active_gap,total_gap\n"));
    assert_eq!(csv.lines().count(), 1 + summary["evals"].as_u64().unwrap() as usize);
}
