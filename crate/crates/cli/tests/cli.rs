use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_koopgas"));
    c.env_remove("KOOPGAS_SEED");
    c
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(c: &mut Command) -> Output {
    c.output().expect("spawn koopgas")
}

fn ok(c: &mut Command) -> Output {
    let out = run(c);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn pipeline_step_settles_at_new_flow() {
    let dir = tempfile::tempdir().unwrap();
    ok(bin().args(["simulate", "pipeline", "--config"]).arg(config("fig1.json")).arg("--out").arg(dir.path()));
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let m_in: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
    assert!((m_in - 10.0).abs() < 0.01, "final inflow {m_in}");
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn missing_config_exits_2_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().args(["simulate", "pipeline", "--config", "no/such/run.json", "--out"]).arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/run.json"));
}

#[test]
fn local_mode_needs_vbar() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["simulate", "pipeline", "--mode", "local", "--config"])
        .arg(config("fig1.json"))
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_exits_2() {
    let out = run(bin().args(["train", "--bogus"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_duration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["generate-data", "--dt=-5m", "--config"])
        .arg(config("fig1.json"))
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generated_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(bin()
            .args(["--seed", "7", "generate-data", "--pipeline", "P2", "--count", "50", "--dt", "15m", "--config"])
            .arg(config("desk7.json"))
            .arg("--out")
            .arg(d.path()));
    }
    let x = fs::read(a.path().join("P2.csv")).unwrap();
    assert_eq!(x, fs::read(b.path().join("P2.csv")).unwrap());
    let rows = String::from_utf8(x).unwrap().lines().count();
    assert_eq!(rows, 51);

    let c = tempfile::tempdir().unwrap();
    ok(bin()
        .env("KOOPGAS_SEED", "8")
        .args(["--seed", "7", "generate-data", "--pipeline", "P2", "--count", "50", "--config"])
        .arg(config("desk7.json"))
        .arg("--out")
        .arg(c.path()));
    assert_ne!(fs::read(a.path().join("P2.csv")).unwrap(), fs::read(c.path().join("P2.csv")).unwrap());
}

#[test]
fn unknown_pipeline_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["generate-data", "--pipeline", "P99", "--count", "10", "--config"])
        .arg(config("desk7.json"))
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn trained_model_is_stable() {
    let data = tempfile::tempdir().unwrap();
    ok(bin()
        .args(["generate-data", "--count", "800", "--config"])
        .arg(config("fig1.json"))
        .arg("--out")
        .arg(data.path()));
    let models = tempfile::tempdir().unwrap();
    let out = ok(bin().args(["train", "--data"]).arg(data.path().join("fig1.csv")).arg("--out").arg(models.path()));
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let rho: f64 = text.rsplit("spectral radius ").next().unwrap().trim().parse().unwrap();
    assert!(rho < 1.0, "{text}");
    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(models.path().join("fig1.json")).unwrap()).unwrap();
    assert_eq!(model["pipeline_id"], "fig1");
}

#[test]
fn local_dispatch_is_reproducible_and_evaluates() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(bin()
            .args(["dispatch", "--gas-model", "local", "--vbar", "1", "--scenario"])
            .arg(config("desk7.json"))
            .arg("--out")
            .arg(d.path()));
    }
    for f in ["solution.json", "summary.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let manifest = |d: &Path| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap()
    };
    assert_eq!(manifest(a.path())["outputs"], manifest(b.path())["outputs"]);

    let eval = tempfile::tempdir().unwrap();
    ok(bin()
        .args(["evaluate", "--solution"])
        .arg(a.path())
        .arg("--scenario")
        .arg(config("desk7.json"))
        .arg("--out")
        .arg(eval.path()));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.path().join("report.json")).unwrap()).unwrap();
    assert!(report["pressure_mape"].as_f64().unwrap() < 1.0);
}

#[test]
fn global_dispatch_without_model_exits_2() {
    let empty = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["dispatch", "--gas-model", "global", "--scenario"])
        .arg(config("desk7.json"))
        .arg("--models")
        .arg(empty.path())
        .arg("--out")
        .arg(out_dir.path()));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
