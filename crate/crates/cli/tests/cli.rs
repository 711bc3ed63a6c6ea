use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rdoq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdoq")).args(args).output().expect("run rdoq")
}

fn corpus(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus").join(name).display().to_string()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gen_small(out: &Path, extra: &[&str]) -> Output {
    let (train, val) = (format!("{},{}", corpus("train/camera.pgm"), corpus("train/coffee.pgm")), corpus("val/coins.pgm"));
    let mut args = vec!["gen-data", "--train", &train, "--val", &val, "--max-blocks", "120", "--seed", "3", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    rdoq(&args)
}

fn train_small(data: &Path, out: &Path) -> PathBuf {
    let (t, v) = (data.join("train_n4_qp22.rdoqds"), data.join("val_n4_qp22.rdoqds"));
    ok(&rdoq(&[
        "train",
        "--train-data",
        t.to_str().unwrap(),
        "--val-data",
        v.to_str().unwrap(),
        "--fcnn-layers",
        "2x8",
        "--epochs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]));
    out.join("fcnn_n4_qp22.rdoqnn")
}

#[test]
fn gen_data_writes_datasets_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stdout = ok(&gen_small(&a, &["--qps", "22,37"]));
    assert!(stdout.contains("N=4 QP=22") && stdout.contains("labels vs SQ input"));
    ok(&gen_small(&b, &["--qps", "22,37"]));
    for name in ["train_n4_qp22.rdoqds", "val_n4_qp37.rdoqds", "stats_n4_qp22.json", "gen_data.json"] {
        let bytes = fs::read(a.join(name)).unwrap();
        assert!(bytes.len() > 64, "{name} is nearly empty");
        assert_eq!(bytes, fs::read(b.join(name)).unwrap(), "{name} differs between runs");
    }
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(rdoq(&["gen-data", "--val", &corpus("val/coins.pgm"), "--out", out]).status.code(), Some(2));
    assert_eq!(rdoq(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(gen_small(tmp.path(), &["--classes", "1,2"]).status.code(), Some(2));
    assert_eq!(rdoq(&["eval", "--sources", &corpus("val/coins.pgm"), "--methods", "magic", "--out", out]).status.code(), Some(2));
    let missing = rdoq(&["gen-data", "--train", "no/such.pgm", "--val", &corpus("val/coins.pgm"), "--out", out]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("no/such.pgm"));
    let no_model = rdoq(&["eval", "--sources", &corpus("val/coins.pgm"), "--methods", "fcnn", "--max-blocks", "10", "--out", out]);
    assert_eq!(no_model.status.code(), Some(1));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"seed": 3, "gen-data": {"qps": [27], "max_blocks": 40}}"#).unwrap();
    let (train, val) = (corpus("train/camera.pgm"), corpus("val/coins.pgm"));
    let from_cfg = tmp.path().join("cfg");
    ok(&rdoq(&["--config", cfg.to_str().unwrap(), "gen-data", "--train", &train, "--val", &val, "--out", from_cfg.to_str().unwrap()]));
    assert!(from_cfg.join("train_n4_qp27.rdoqds").exists());
    let summary = fs::read_to_string(from_cfg.join("gen_data.json")).unwrap();
    assert!(summary.contains("\"records\": 40"));

    let flagged = tmp.path().join("flag");
    ok(&rdoq(&["gen-data", "--config", cfg.to_str().unwrap(), "--qps", "32", "--train", &train, "--val", &val, "--out", flagged.to_str().unwrap()]));
    assert!(flagged.join("train_n4_qp32.rdoqds").exists());
    assert!(!flagged.join("train_n4_qp27.rdoqds").exists());
}

#[test]
fn train_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&gen_small(&data, &["--qps", "22"]));
    let a = train_small(&data, &tmp.path().join("m1"));
    let b = train_small(&data, &tmp.path().join("m2"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log = fs::read_to_string(a.with_file_name("fcnn_n4_qp22.log.json")).unwrap();
    assert_eq!(log, fs::read_to_string(b.with_file_name("fcnn_n4_qp22.log.json")).unwrap());
    let parsed: serde_json::Value = serde_json::from_str(&log).unwrap();
    let best: Vec<f64> = parsed["log"].as_array().unwrap().iter().map(|e| e["best_val_rd_percent"].as_f64().unwrap()).collect();
    assert_eq!(best.len(), 3);
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn eval_reports_all_methods_and_bdrate_reads_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&gen_small(&data, &["--qps", "22"]));
    let model = train_small(&data, &tmp.path().join("models"));
    let eval_dir = |name: &str, workers: &str| {
        let out = tmp.path().join(name);
        ok(&rdoq(&[
            "eval",
            "--workers",
            workers,
            "--sources",
            &corpus("val/chelsea.pgm"),
            "--qps",
            "22",
            "--methods",
            "nir,sq,rdoq,refined,fcnn",
            "--models",
            model.to_str().unwrap(),
            "--max-blocks",
            "150",
            "--out",
            out.to_str().unwrap(),
        ]));
        out
    };
    let (one, two) = (eval_dir("e1", "1"), eval_dir("e2", "2"));
    let report = fs::read_to_string(one.join("eval_report.json")).unwrap();
    assert_eq!(report, fs::read_to_string(two.join("eval_report.json")).unwrap());
    let parsed: serde_json::Value = serde_json::from_str(&report).unwrap();
    let methods = parsed["methods"].as_array().unwrap();
    let cost = |name: &str| methods.iter().find(|m| m["method"] == name).unwrap()["mean_cost"].as_f64().unwrap();
    for name in ["nir", "deadzone", "rdoq", "refined", "fcnn"] {
        assert!(methods.iter().any(|m| m["method"] == name), "{name} missing");
    }
    assert!(cost("refined") <= cost("deadzone"));
    assert_eq!(methods.iter().find(|m| m["method"] == "fcnn").unwrap()["zero_level_changes"], 0);

    // Four-QP tables for BD-rate.
    let full = tmp.path().join("full");
    ok(&rdoq(&["eval", "--sources", &corpus("val/coins.pgm"), "--methods", "refined", "--max-blocks", "100", "--out", full.to_str().unwrap()]));
    let table = full.join("rd_points.csv");
    let t = table.to_str().unwrap();
    let same = ok(&rdoq(&["bdrate", "--test", t, "--reference", t, "--test-method", "refined", "--reference-method", "refined"]));
    assert_eq!(same.trim().parse::<f64>().unwrap(), 0.0);
    let vs_sq = ok(&rdoq(&["bdrate", "--test", t, "--reference", t, "--test-method", "refined", "--reference-method", "deadzone"]));
    assert!(vs_sq.trim().parse::<f64>().unwrap() < 0.0);

    let text = fs::read_to_string(&table).unwrap();
    let mut lines = text.lines();
    let mut scaled = format!("{}\n", lines.next().unwrap());
    for line in lines.filter(|l| l.starts_with("refined,")) {
        let f: Vec<&str> = line.split(',').collect();
        scaled += &format!("{},{},{},{}\n", f[0], f[1], f[2].parse::<f64>().unwrap() * 1.1, f[3]);
    }
    let scaled_path = tmp.path().join("scaled.csv");
    fs::write(&scaled_path, scaled).unwrap();
    let shift = ok(&rdoq(&["bdrate", "--test", scaled_path.to_str().unwrap(), "--reference", t, "--reference-method", "refined"]));
    assert!((shift.trim().parse::<f64>().unwrap() - 10.0).abs() < 1e-3);
    assert_eq!(rdoq(&["bdrate", "--test", t, "--reference", t]).status.code(), Some(1));
}

#[test]
fn search_bench_reports_oracle_agreement() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    let stdout = ok(&rdoq(&[
        "search-bench",
        "--qps",
        "22,37",
        "--random-blocks",
        "50",
        "--corpus",
        &corpus("val/coins.pgm"),
        "--max-blocks",
        "30",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("oracle mismatches 0"));
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("search_bench.json")).unwrap()).unwrap();
    let entries = parsed.as_array().unwrap();
    assert_eq!(entries.len(), 4);
    for e in entries {
        assert_eq!(e["chain_violations"], 0);
        assert_eq!(e["oracle_mismatches"], 0);
        assert!(e["methods"].as_array().unwrap().iter().all(|m| m["seconds"].as_f64().unwrap() > 0.0));
    }
}
