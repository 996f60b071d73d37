use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn clft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clft"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn clft")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(config("smoke.json")).unwrap()).unwrap();
    cfg["pretrain"]["epochs"] = 1.into();
    cfg["finetune"]["epochs"] = 1.into();
    cfg["strategies"] = serde_json::json!([{"kind": "full_ft"}, {"kind": "lora", "rank": 2}]);
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn help_lists_subcommands() {
    let out = clft(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen-data", "pretrain", "finetune", "probe", "run", "sweep", "report"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = clft(&["run", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["default.json", "smoke.json"] {
        let cfg = config(name);
        let out = clft(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().join(name).to_str().unwrap()]);
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn invalid_config_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(config("smoke.json")).unwrap()).unwrap();
    cfg["strategies"][0]["rank"] = 0.into();
    cfg["strategies"][0]["kind"] = "lora".into();
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = clft(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("strategies[0]"), "{err}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn missing_config_file_fails() {
    let out = clft(&["run", "--config", "/nonexistent/config.json", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = clft(&["run", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(), "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), run.to_str().unwrap());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.contains("full_ft-s7"));
    assert!(!metrics.contains("-s1,"));

    let again = clft(&["run", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(again.status.code(), Some(1));

    let rep = dir.path().join("rep");
    let out = clft(&["report", run.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(rep.join("table.csv")).unwrap();
    assert!(table.starts_with("strategy,metric,seeds,"));
    assert!(table.contains("lora-r2"));
}

#[test]
fn report_needs_run_directories() {
    let out = clft(&["report", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(2));
}
