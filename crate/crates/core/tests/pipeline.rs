use std::fs;
use std::path::{Path, PathBuf};

use clft_core::experiment::{
    generate_data, report, run_experiment, run_finetune, run_pretrain, run_probe, sweep, ExperimentConfig, SweepParam,
    SweepSpec,
};
use clft_core::probe::list_checkpoints;
use clft_core::report::CsvTable;
use clft_core::strategies::{StrategyConfig, StrategyKind};

fn smoke() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    ExperimentConfig::load(&path).unwrap()
}

fn smaller() -> ExperimentConfig {
    let mut cfg = smoke();
    cfg.strategies = vec![
        StrategyConfig::new(StrategyKind::FullFt),
        StrategyConfig::new(StrategyKind::Frozen),
    ];
    cfg.finetune.epochs = 1;
    cfg.pretrain.epochs = 1;
    cfg
}

#[test]
fn smoke_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = smoke();
    run_experiment(&cfg, &out, false).unwrap();

    for f in ["config.json", "metrics.csv", "probe.csv", "probe.svg", "pretrain/log.csv", "pretrain/theta_star.ckpt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(out.join("pretrain/fisher.ckpt").exists());
    assert!(!out.join("RUNNING").exists());
    for split in ["pretrain", "pretrain_valid", "train", "valid", "test_id", "test_ood"] {
        assert!(out.join("data").join(split).join("manifest.jsonl").exists(), "{split}");
    }
    for (id, _, _) in cfg.run_ids() {
        let ckpts = list_checkpoints(&out.join("runs").join(&id)).unwrap();
        assert_eq!(ckpts.len(), cfg.finetune.epochs, "{id}");
    }

    let metrics = CsvTable::read(&out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.header, ["run_id", "strategy", "seed", "epoch", "split", "metric", "value"]);
    let strategy = metrics.column("strategy").unwrap();
    let labels: std::collections::BTreeSet<&str> = metrics.rows.iter().map(|r| r[strategy].as_str()).collect();
    assert_eq!(labels.len(), cfg.strategies.len());

    let probe = CsvTable::read(&out.join("probe.csv")).unwrap();
    assert_eq!(probe.header, ["run_id", "probe_set", "epoch", "ssl_loss"]);
    assert!(probe.rows.iter().any(|r| r[0] == "pretrained" && r[2] == "0"));

    let saved = ExperimentConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(saved, cfg);

    let err = run_experiment(&cfg, &out, false).unwrap_err().to_string();
    assert!(err.contains("overwrite"), "{err}");

    let rep_dir = dir.path().join("report");
    let missing = dir.path().join("nowhere");
    let r = report(&[out.clone(), missing.clone()], &rep_dir).unwrap();
    assert_eq!(r.skipped.len(), 1);
    assert_eq!(r.skipped[0].0, missing);
    assert!(rep_dir.join("table.csv").exists());
    assert!(rep_dir.join("probe_overlay.svg").exists());
    assert_eq!(r.table.header[..3], ["strategy", "metric", "seeds"]);
    assert_eq!(r.table.rows.len(), 2 * cfg.strategies.len());
}

#[test]
fn stages_compose_like_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smaller();
    let staged = dir.path().join("staged");
    generate_data(&cfg, &staged, false).unwrap();
    run_pretrain(&cfg, &staged, false).unwrap();
    assert!(run_pretrain(&cfg, &staged, false).is_err());
    let metrics = run_finetune(&cfg, &staged, false).unwrap();
    let probe = run_probe(&cfg, &staged, false).unwrap();

    let whole = dir.path().join("whole");
    run_experiment(&cfg, &whole, false).unwrap();
    assert_eq!(metrics.to_bytes(), fs::read(whole.join("metrics.csv")).unwrap());
    assert_eq!(probe.to_bytes(), fs::read(whole.join("probe.csv")).unwrap());
}

#[test]
fn invalid_config_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad");
    let mut cfg = smaller();
    cfg.strategies[1].p_replay = 2.0;
    let err = run_experiment(&cfg, &out, false).unwrap_err().to_string();
    assert!(err.contains("strategies[1]"), "{err}");
    assert!(!out.exists());
}

#[test]
fn running_and_failed_runs_are_skipped_by_report() {
    let dir = tempfile::tempdir().unwrap();
    let running = dir.path().join("running");
    fs::create_dir_all(&running).unwrap();
    fs::write(running.join("RUNNING"), "").unwrap();
    let failed = dir.path().join("failed");
    fs::create_dir_all(&failed).unwrap();
    fs::write(failed.join("FAILED"), "diverged").unwrap();
    let dirs: Vec<PathBuf> = vec![running, failed];
    assert!(report(&dirs, &dir.path().join("out")).is_err());
}

#[test]
fn sweep_runs_the_grid_with_a_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec {
        base: smaller(),
        strategy: None,
        hyperparameter: SweepParam::Rank,
        values: vec![2.0, 4.0],
        baseline: true,
    };
    let table = sweep(&spec, &dir.path().join("sw"), false).unwrap();
    assert_eq!(table.header, ["run_id", "hyperparameter", "hp_value", "split", "metric", "value"]);
    let hp = table.column("hp_value").unwrap();
    let values: std::collections::BTreeSet<&str> = table.rows.iter().map(|r| r[hp].as_str()).collect();
    assert!(values.contains("2") && values.contains("4"), "{values:?}");
    assert!(dir.path().join("sw/sweep.svg").exists());

    let bad = SweepSpec {
        values: vec![1.5],
        ..spec
    };
    let err = sweep(&bad, &dir.path().join("bad"), false).unwrap_err().to_string();
    assert!(err.contains("values"), "{err}");
}

#[test]
fn shipped_default_config_matches_built_in_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default());
}
