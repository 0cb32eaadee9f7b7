use std::process::{Command, Output};

use tustin_sm_cli::{RunConfig, PRESETS};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tustin-sm"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn presets_parse_and_validate() {
    for (name, _) in PRESETS {
        let c = RunConfig::preset(name).unwrap();
        assert_eq!(c.name, name);
        c.true_model().unwrap();
    }
    let e1 = RunConfig::preset("example1").unwrap();
    assert_eq!((e1.n, e1.ts), (80, 0.05));
    let e2 = RunConfig::preset("example2").unwrap();
    assert_eq!((e2.n, e2.ts), (300, 0.03));
}

#[test]
fn tustin_prints_coefficients() {
    let o = run(&["tustin", "--alpha", "2", "--beta", "3", "--ts", "0.1", "--format", "json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let g = v[0]["gamma"][0].as_f64().unwrap();
    assert!((g - (0.2 - 2.0) / 2.2).abs() < 1e-15);
}

#[test]
fn simulate_is_deterministic_given_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(&["simulate", "--preset", "example1", "--seed", "5", "--output-dir", d.path().to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 3, "{names:?}");
    for f in names {
        assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap(), "{f:?}");
    }
}

#[test]
fn simulate_reports_snr() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--preset", "example2", "--format", "json", "--output-dir", d.path().to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["n"], 300);
    let snr = v["snr_y_db"][0].as_f64().unwrap();
    assert!((snr - 23.3).abs() < 2.0, "SNR_y = {snr}");
}

#[test]
fn dry_run_prints_dimensions_without_solving() {
    let o = run(&["identify", "--preset", "example1", "--n", "10", "--d", "0.1", "--no-estimate", "--dry-run", "--format", "json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    // SISO: 4n + 1 + 2N variables
    assert_eq!(v["pop"]["variables"], 4 * 2 + 1 + 2 * 10);
    assert!(v["moments"].as_u64().unwrap() > 0);
    assert!(v["blocks"].as_u64().unwrap() > 0);
}

#[test]
fn argument_errors_exit_with_2() {
    assert_eq!(run(&["identify", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(run(&["identify"]).status.code(), Some(2));
    assert_eq!(run(&["bogus-command"]).status.code(), Some(2));
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.json");
    std::fs::write(&cfg, r#"{"orders": [[1]], "ts": -1.0, "n": 10, "model": [{"alpha": [1.0], "beta": [1.0]}]}"#).unwrap();
    assert_eq!(run(&["simulate", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn falsified_priors_exit_with_3() {
    // DC gain of the truth is -21/16.3; a box far away falsifies the data
    let d = tempfile::tempdir().unwrap();
    let mut c = RunConfig::preset("example1").unwrap();
    c.n = 12;
    c.noise = Some(tustin_sm::signals::NoiseSpec::absolute(1, 0.0, 1, 0.01));
    c.delta.estimate = false;
    c.delta.d = Some(0.0);
    c.priors.boxes = vec![
        tustin_sm::pop::ParamBox { param: 0, lo: 100.0, hi: 100.0 },
        tustin_sm::pop::ParamBox { param: 1, lo: 50.0, hi: 50.0 },
    ];
    c.output_dir = d.path().to_path_buf();
    let cfg = d.path().join("c.json");
    std::fs::write(&cfg, serde_json::to_string(&c).unwrap()).unwrap();
    let o = run(&["identify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn identify_then_validate_small_siso() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let mut c = RunConfig::preset("example1").unwrap();
    c.model = Some(vec![tustin_sm::lti::ContinuousTf::new(vec![5.0], vec![3.0]).unwrap()]);
    c.orders = vec![vec![1]];
    c.n = 15;
    c.noise = Some(tustin_sm::signals::NoiseSpec::absolute(1, 0.0, 1, 0.05));
    c.delta.estimate = false;
    c.delta.d = Some(0.05);
    let cfg = d.path().join("c.json");
    std::fs::write(&cfg, serde_json::to_string(&c).unwrap()).unwrap();
    let o = run(&["identify", "--config", cfg.to_str().unwrap(), "--output-dir", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = d.path().join("pui_report.json");
    assert!(report.exists() && d.path().join("pui_report.txt").exists());
    let o = run(&["validate", "--config", cfg.to_str().unwrap(), "--model", report.to_str().unwrap(), "--format", "json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["outputs"][0]["fit"].as_f64().unwrap() > 0.5, "{v}");
}
