use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowcast_core::ingest::{load_dataset, normalize_flows, DataPaths, IngestConfig};
use flowcast_core::synthetic::{ring_network, write_dataset, SyntheticConfig};
use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn flowcast(args: &[&str], extra: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowcast"));
    cmd.args(args).env("FLOWCAST_LOG", "warn");
    for p in extra {
        cmd.arg(p);
    }
    cmd.output().unwrap()
}

/// `args` followed by `--data <fixture> --out <out>` and a small model.
fn run(args: &[&str], data: &Path, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowcast"));
    cmd.args(args)
        .args(["--lookback", "16", "--hidden", "8", "--seed", "2"])
        .arg("--data")
        .arg(data)
        .arg("--out")
        .arg(out)
        .env("FLOWCAST_LOG", "warn");
    cmd.output().unwrap()
}

fn ring6() -> PathBuf {
    fixtures().join("ring6")
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn files_on_disk(root: &Path) -> BTreeSet<String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeSet<String>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    let mut out = BTreeSet::new();
    walk(root, root, &mut out);
    out.remove("manifest.json");
    out
}

fn read_csv(text: &str) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.records().map(|rec| rec.unwrap().iter().map(str::to_owned).collect()).collect()
}

#[test]
fn fixture_sweep_lists_two_scenarios_and_every_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = flowcast(
        &["run-scenarios", "--epochs", "2", "--dump-adjacency", "--denormalized", "--config"],
        &[&fixtures().join("ring6.toml"), Path::new("--data"), &ring6(), Path::new("--out"), &out],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["scenarios"].as_array().unwrap().len(), 2);
    let listed: BTreeSet<String> = m["files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_owned()).collect();
    assert_eq!(listed, files_on_disk(&out));
    for f in ["metrics.json", "metrics_denormalized.json", "cv_0.1/model.ckpt", "cv_0.5/calibration.json", "cv_0.5/adjacency.csv"] {
        assert!(listed.contains(f), "{f} missing from {listed:?}");
    }
    let report = flowcast(&["report", "--input"], &[&out.join("metrics.json")]);
    let table = String::from_utf8(report.stdout).unwrap();
    assert!(table.contains("GAT-LSTM-ACP") && table.contains("0.1 / 0.5"), "{table}");
}

#[test]
fn single_sample_per_sample_path_and_parallel_sweep_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let single = tmp.path().join("single");
    let o = run(&["run-scenarios", "--cv", "0.5", "--samples", "1", "--epochs", "1"], &ring6(), &single);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest(&single)["scenarios"].as_array().unwrap().len(), 1);

    let seq = tmp.path().join("seq");
    let par = tmp.path().join("par");
    let args = ["run-scenarios", "--cv", "0.3,0.7", "--epochs", "1", "--aggregation", "per_sample", "--dump-adjacency"];
    assert!(run(&args, &ring6(), &seq).status.success());
    let mut par_args = args.to_vec();
    par_args.extend(["--parallel-scenarios", "2"]);
    assert!(run(&par_args, &ring6(), &par).status.success());
    assert_eq!(
        std::fs::read(seq.join("metrics.json")).unwrap(),
        std::fs::read(par.join("metrics.json")).unwrap()
    );
    assert!(seq.join("cv_0.3/adjacency_002.csv").exists());
}

#[test]
fn predict_writes_calibrated_rows_and_degenerate_intervals() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ring3");
    let config = SyntheticConfig {
        stations: 3,
        days: 8,
        ..SyntheticConfig::default()
    };
    write_dataset(&ring_network(&config).unwrap(), &data).unwrap();
    let model = tmp.path().join("model");
    let o = run(&["train", "--cv", "0.3", "--epochs", "1", "--horizon", "2"], &data, &model);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let ckpt = model.join("model.ckpt");
    let o = flowcast(&["predict", "--checkpoint"], &[&ckpt, Path::new("--data"), &data]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("station_id,timestamp,point,lower,upper"));
    let rows = read_csv(&text);
    assert_eq!(rows.len(), 3 * 2);
    for r in &rows {
        let [p, lo, hi] = [2, 3, 4].map(|k| r[k].parse::<f64>().unwrap());
        assert!(lo < p && p < hi, "{r:?}");
    }

    let cal: Value = serde_json::from_str(&std::fs::read_to_string(model.join("calibration.json")).unwrap()).unwrap();
    let zeros = vec![0.0; cal["residuals"].as_array().unwrap().len()];
    let zero_cal = tmp.path().join("zero.json");
    std::fs::write(
        &zero_cal,
        serde_json::json!({"alpha": 0.1, "quantile": 0.0, "split_quantile": 0.0, "epoch": 0, "residuals": zeros}).to_string(),
    )
    .unwrap();
    let out_csv = tmp.path().join("pred.csv");
    let o = flowcast(
        &["predict", "--at", "2024-01-06T08:00:00Z", "--checkpoint"],
        &[&ckpt, Path::new("--data"), &data, Path::new("--calibration"), &zero_cal, Path::new("--out"), &out_csv],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&std::fs::read_to_string(&out_csv).unwrap());
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0][1], "2024-01-06T08:00:00Z");
    assert_eq!(rows[1][1], "2024-01-06T08:15:00Z");
    for r in &rows {
        assert!(r[2] == r[3] && r[3] == r[4], "{r:?}");
    }

    let o = flowcast(
        &["predict", "--checkpoint"],
        &[&ckpt, Path::new("--data"), &data, Path::new("--calibration"), &tmp.path().join("missing.json")],
    );
    assert!(o.status.success());
    let rows = read_csv(&String::from_utf8(o.stdout).unwrap());
    assert!(rows.iter().all(|r| r[3].is_empty() && r[4].is_empty()));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no calibration file"));
}

#[test]
fn denormalization_inverts_ingest_scaling() {
    let data = load_dataset(&DataPaths::in_dir(&ring6()), &IngestConfig::default()).unwrap();
    let (normalized, params) = normalize_flows(&data.flows, 1411).unwrap();
    let mut worst: f64 = 0.0;
    for ((t, s), &v) in data.flows.indexed_iter() {
        worst = worst.max((params.denormalize(s, normalized.values[[t, s]]) - v).abs());
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn constant_flows_give_zero_baseline_error_for_ha() {
    let tmp = tempfile::tempdir().unwrap();
    let mut data = ring_network(&SyntheticConfig {
        days: 8,
        ..SyntheticConfig::default()
    })
    .unwrap();
    data.flows.fill(40.0);
    let dir = tmp.path().join("flat");
    write_dataset(&data, &dir).unwrap();
    let out = tmp.path().join("out");
    let o = run(&["baselines", "--cv", "0.5"], &dir, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["cells"]["HA"]["0.5"]["mae"], 0.0);
}

#[test]
fn failures_map_to_exit_codes_and_leave_a_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bad");
    let o = run(&["run-scenarios", "--cv", "0"], &ring6(), &out);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["train"], &tmp.path().join("nowhere"), &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(out.join(".failed").exists());
    assert_eq!(manifest(&out)["status"], "failed");

    let bad_config = tmp.path().join("bad.toml");
    std::fs::write(&bad_config, "epochz = 3\n").unwrap();
    let o = flowcast(&["validate", "--config"], &[&bad_config]);
    assert_eq!(o.status.code(), Some(2));

    let o = flowcast(&["validate", "--data"], &[&ring6()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("stations kept: 6"));
}
