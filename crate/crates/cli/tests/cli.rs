use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ratetip(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ratetip"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn summary(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("summary on stdout")
}

#[test]
fn malformed_config_exits_3_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\"model\": {\"diffusion\": ").unwrap();
    let out = dir.path().join("out");
    let o = ratetip(&out, &["critical-rate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.json");
    std::fs::write(&cfg, "{\"modle\": {}}").unwrap();
    let out = dir.path().join("out");
    let o = ratetip(&out, &["critical-rate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn invalid_bracket_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = ratetip(&out, &["critical-rate", "--bracket", "1.4", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn critical_rate_default_and_tight() {
    let dir = tempfile::tempdir().unwrap();
    let o = ratetip(dir.path(), &["critical-rate"]);
    assert!(o.status.success());
    let eps = summary(&o)["epsilon_c"].as_f64().unwrap();
    assert!((eps - 4.0 / 3.0).abs() < 1e-4, "{eps}");
    let m = manifest(dir.path());
    assert_eq!(m["command"], "critical_rate");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 1);

    let o = ratetip(&dir.path().join("tight"), &["critical-rate", "--tol", "1e-6"]);
    let eps = summary(&o)["epsilon_c"].as_f64().unwrap();
    assert!((eps - 4.0 / 3.0).abs() < 1e-6, "{eps}");
}

#[test]
fn path_reports_the_optimal_time() {
    let dir = tempfile::tempdir().unwrap();
    let o = ratetip(dir.path(), &["path", "--epsilon", "1.25", "--D", "0.05"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(dir.path());
    let t = m["summary"]["T_end"].as_f64().unwrap();
    assert!((t - 1.43).abs() < 0.05, "{t}");
    assert!(m["summary"]["m"].as_f64().unwrap().abs() < 1e-8);
    let csv = m["outputs"][0].as_str().unwrap();
    let text = std::fs::read_to_string(dir.path().join(csv)).unwrap();
    let back = ratetip::io::read_path_csv(&text).unwrap();
    assert_eq!(back.t_end, t);
}

#[test]
fn indicators_csv_has_the_baseline_values() {
    let dir = tempfile::tempdir().unwrap();
    let o = ratetip(dir.path(), &["indicators", "--t-final", "-2.5"]);
    assert!(o.status.success());
    let m = manifest(dir.path());
    let text = std::fs::read_to_string(dir.path().join(m["outputs"][0].as_str().unwrap())).unwrap();
    let table = ratetip::io::CsvTable::parse(&text).unwrap();
    assert_eq!(table.columns[..3], ["t", "autocorrelation", "variance"]);
    let rows = table.numbers().unwrap();
    let row = rows.iter().find(|r| (r[0] + 3.0).abs() < 1e-9).unwrap();
    assert!((row[1] - 0.98).abs() < 0.005, "{}", row[1]);
    assert!((row[2] - 0.004).abs() < 0.0004, "{}", row[2]);
}

#[test]
fn reruns_reproduce_the_files() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["mc", "--n-paths", "2000", "--t-final", "0", "--seed", "5"];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(ratetip(&a, &args).status.success());
    assert!(ratetip(&b, &args).status.success());
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["outputs"], mb["outputs"]);
    for f in ma["outputs"].as_array().unwrap() {
        let f = f.as_str().unwrap();
        assert!(f.contains(ma["config_hash"].as_str().unwrap()));
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    assert!(ratetip(&c, &["mc", "--n-paths", "2000", "--t-final", "0", "--seed", "6"]).status.success());
    assert_ne!(manifest(&c)["config_hash"], ma["config_hash"]);
}
