use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "dataset": {"synthetic": {"count": 3, "nx": 12, "seed": 3, "n_test": 1}, "angles": [0, 90, 180], "ratio": 3.0},
  "model": {"hidden": 8, "k_r2r": 1},
  "train": {"steps": 3, "lr": 1e-3},
  "sampler": {"steps": 2},
  "eval": {"seeds": [0, 1], "angles": [0, 90], "counts": [2, 5]},
  "seed": 7
}"#;

fn genda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genda"))
        .args(args)
        .current_dir(dir)
        .env("GENDA_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = genda(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    ok(dir.path(), &["train", "diffusion", "--config", "tiny.json", "--out", "train"]);
    let ckpt = dir.path().join("train/model.ckpt");
    (dir, ckpt)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("run_id,mesh,phi,n_obs,strategy,gamma,rrmse,mac,ssim,seed"));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

#[test]
fn gamma_sweep_row_count_and_reproducibility() {
    let (dir, ckpt) = setup();
    let c = ckpt.to_str().unwrap();
    let args = ["sweep", "gamma", "--gammas", "0,1,2,4", "--config", "tiny.json", "--checkpoint", c];
    ok(dir.path(), &[&args[..], &["--out", "a"]].concat());
    ok(dir.path(), &[&args[..], &["--out", "b", "--jobs", "2"]].concat());
    let rows = csv_rows(&dir.path().join("a/metrics.csv"));
    assert_eq!(rows.len(), 4 * 2 * 2);
    let a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    let m = manifest(&dir.path().join("a"));
    assert_eq!(m["gammas"], serde_json::json!([0.0, 1.0, 2.0, 4.0]));
    assert_eq!(m["schedule"]["constants"]["train_sigma_max"], 48.5232);
    assert_eq!(m["sensor_seeds"].as_array().unwrap().len(), 16);
    assert_eq!(m["run_id"].as_str().unwrap().len(), 12);
    assert!(m["wall_time_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn seed_override_changes_the_run() {
    let (dir, ckpt) = setup();
    let c = ckpt.to_str().unwrap();
    let base = ["sweep", "obs", "--config", "tiny.json", "--checkpoint", c];
    ok(dir.path(), &[&base[..], &["--out", "a"]].concat());
    ok(dir.path(), &[&base[..], &["--out", "b", "--seed", "8"]].concat());
    let (a, b) = (csv_rows(&dir.path().join("a/metrics.csv")), csv_rows(&dir.path().join("b/metrics.csv")));
    assert_eq!(a.len(), 2 * 2 * 2);
    assert_ne!(a[0][0], b[0][0]);
    assert_ne!(a[0][6], b[0][6]);
}

#[test]
fn strategy_sweep_and_baselines() {
    let (dir, _) = setup();
    let d = dir.path();
    ok(d, &["baseline", "lcsvd", "fit", "--config", "tiny.json", "--out", "svd"]);
    assert!(d.join("svd/syn2.svd").is_file());
    ok(d, &["sweep", "strategy", "--method", "lcsvd", "--checkpoint", "svd", "--counts", "6", "--config", "tiny.json", "--out", "s"]);
    let rows = csv_rows(&d.join("s/metrics.csv"));
    assert_eq!(rows.len(), 3 * 2 * 2);
    assert!(rows.iter().all(|r| r[3] == "6" && r[5].is_empty()));
    let strategies: Vec<&str> = rows.iter().map(|r| r[4].as_str()).collect();
    assert!(strategies.contains(&"cloud") && strategies.contains(&"trajectory"));
    let o = genda(d, &["sweep", "gamma", "--method", "lcsvd", "--config", "tiny.json", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn assimilate_writes_fields_in_physical_units() {
    let (dir, ckpt) = setup();
    let d = dir.path();
    ok(d, &["data", "synth", "--config", "tiny.json", "--out", "data"]);
    ok(d, &["assimilate", "--config", "tiny.json", "--checkpoint", ckpt.to_str().unwrap(), "--ensemble", "2", "--counts", "4", "--out", "as"]);
    let rows = csv_rows(&d.join("as/metrics.csv"));
    assert_eq!(rows.len(), 2 * 2);
    assert!(d.join("as/metrics_member0.csv").is_file());
    let base = "syn2_phi090.00_n4_random_s1";
    for f in [format!("{base}.fld"), format!("{base}_std.fld"), format!("{base}.sensors.json")] {
        assert!(d.join("as").join(&f).is_file(), "{f}");
    }
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("as").join(format!("{base}.sensors.json"))).unwrap()).unwrap();
    assert_eq!(s["indices"].as_array().unwrap().len(), 4);
    assert_eq!(s["strategy"], "random");

    let pred = d.join("as").join(format!("{base}.fld"));
    ok(d, &["evaluate", "--pred", pred.to_str().unwrap(), "--truth", "data/syn2_phi090.00.fld", "--mesh", "data/syn2.mesh.json", "--out", "ev"]);
    let row = &csv_rows(&d.join("ev/metrics.csv"))[0];
    let line = rows.iter().find(|r| r[2] == "90" && r[9] == "1").unwrap();
    let (a, b): (f64, f64) = (row[6].parse().unwrap(), line[6].parse().unwrap());
    assert!((a - b).abs() < 1e-9 * b.max(1.0), "{a} vs {b}");
}

#[test]
fn evaluate_identical_fields() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(d, &["data", "synth", "--config", "tiny.json", "--out", "data"]);
    let f = "data/syn1_phi180.00.fld";
    ok(d, &["evaluate", "--pred", f, "--truth", f, "--mesh", "data/syn1.mesh.json", "--out", "ev"]);
    let row = &csv_rows(&d.join("ev/metrics.csv"))[0];
    assert_eq!(row[1], "syn1");
    assert_eq!(row[6].parse::<f64>().unwrap(), 0.0);
    assert!((row[7].parse::<f64>().unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(row[8].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn mesh_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(d, &["mesh", "gen", "--config", "tiny.json", "--out", "m"]);
    ok(d, &["mesh", "decimate", "--mesh", "m/syn0.mesh.json", "--ratio", "3", "--out", "h"]);
    let o = ok(d, &["mesh", "stats", "--mesh", "m/syn0.mesh.json", "--graph", "h/syn0.graph.json"]);
    let s: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let (nf, nc) = (s["fine"]["nodes"].as_u64().unwrap(), s["coarse"]["nodes"].as_u64().unwrap());
    assert_eq!(s["edges"]["o2r"].as_u64().unwrap(), nf - nc);
    assert_eq!(s["fine"]["wall"], s["coarse"]["wall"]);
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = genda(d, &["sweep", "gamma", "--config", "missing.json", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    let e: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(e["error"]["kind"], "io");
    let o = genda(d, &["sweep", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
    let e: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(e["error"]["kind"], "usage");
    std::fs::write(d.join("bad.json"), r#"{"eval": {"gammas": [-1]}}"#).unwrap();
    let o = genda(d, &["mesh", "gen", "--config", "bad.json", "--out", "x"]);
    let e: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(e["error"]["kind"], "config");
    let o = Command::new(env!("CARGO_BIN_EXE_genda")).args(["mesh", "gen", "--out", "y"]).current_dir(d).env("GENDA_LOG", "loud").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = genda(d, &["train", "diffusion"]);
    let e: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(e["error"]["message"].as_str().unwrap().contains("--out"));
}
