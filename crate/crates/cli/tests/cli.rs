use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const NOISELESS: &str = "noise = false\nsampling = exact\ngain_us = 0,2\nphi_points = 8\nunitarity_us = 0,1\n";

fn sqamp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqamp")).args(args).output().expect("binary runs")
}

fn stderr_record(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).expect("stderr is one JSON record")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn gain_curve_writes_tables_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), NOISELESS);
    let out = dir.path().join("runs");
    let o = sqamp(&["gain-curve", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("gain_curve.csv")).unwrap();
    assert!(csv.starts_with("t_us,r_ideal,alpha_f_fit,alpha_f_err,gain,gain_err,"));
    let json: Value = serde_json::from_str(&fs::read_to_string(out.join("gain_curve.json")).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    let echo = fs::read_to_string(out.join("config.cfg")).unwrap();
    let hash = fs::read_to_string(out.join("config.sha256")).unwrap();
    assert_eq!(json["config"], echo.as_str());
    assert_eq!(json["config_hash"], hash.trim());
    assert!(echo.contains("noise = false"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 3\nnoise = false\nphi_points = 12\n");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = sqamp(&["phase-scan", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        outputs.push((
            fs::read(out.join("phase_scan.csv")).unwrap(),
            fs::read(out.join("phase_scan.json")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn fit_prints_result_json() {
    let dir = tempfile::tempdir().unwrap();
    let omega = std::f64::consts::TAU * 1.1e3;
    let times: Vec<f64> = (0..80).map(|k| k as f64 * 5e-6).collect();
    let pops = sqamp::gaussian::displaced_squeezed_populations(
        sqamp::Displacement::real(0.0),
        sqamp::SqueezeParam::new(0.8, 0.0),
        200,
    );
    let p = sqamp::bsb_signal(&pops, omega, 0.0, &times);
    let trace = sqamp::RabiTrace::new(times, p.iter().map(|x| x.clamp(0.0, 1.0)).collect(), 300).unwrap();
    let path = dir.path().join("trace.csv");
    fs::write(&path, trace.to_csv()).unwrap();
    let o = sqamp(&["fit", "--model", "squeezed", "--trace", path.to_str().unwrap(), "--init", "r=0.7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["model_tag"], "squeezed");
    assert!((v["params"][0].as_f64().unwrap() - 0.8).abs() < 1e-4);
    assert_eq!(v["covariance"].as_array().unwrap().len(), 9);
}

#[test]
fn errors_are_machine_readable() {
    let o = sqamp(&["no-such-command"]);
    assert!(!o.status.success());
    assert_eq!(stderr_record(&o)["error"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\nshots = 100\nfoo = 2\n");
    let o = sqamp(&["phase-scan", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let rec = stderr_record(&o);
    assert_eq!(rec["error"], "config");
    assert_eq!(rec["line"], 3);
    assert_eq!(rec["key"], "foo");

    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = write_config(dir.path(), NOISELESS);
    let out = blocker.join("sub");
    let o = sqamp(&["unitarity", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert_eq!(stderr_record(&o)["error"], "io");

    let o = sqamp(&["fit", "--model", "coherent", "--trace", "/nonexistent/trace.csv"]);
    assert_eq!(stderr_record(&o)["error"], "io");
}

#[test]
fn simulate_runs_a_sequence_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "noise = false\ntruncation = 32\n");
    let seq = dir.path().join("seq.txt");
    fs::write(&seq, "# displace then read out\ndisplace 5 0 0.3\n").unwrap();
    let out = dir.path().join("sim");
    let o = sqamp(&["simulate", "--config", &cfg, "--sequence", seq.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(out.join("simulate.json")).unwrap()).unwrap();
    assert!((v["summary"]["mean_n"].as_f64().unwrap() - 0.09).abs() < 1e-9);
}
