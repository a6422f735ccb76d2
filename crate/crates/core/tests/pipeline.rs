use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use odgen::pipeline::{Pipeline, PipelineConfig, Stage, StageOutcome};
use odgen::Error;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn pipeline_in(dir: &Path, extra: &[&str]) -> Pipeline {
    let mut overrides = vec![format!("work_dir={}", dir.display())];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    Pipeline::new(PipelineConfig::load(&smoke_config(), &overrides).unwrap())
}

#[test]
fn stage_without_upstream_is_a_precondition_failure() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline_in(dir.path(), &[]);
    let err = p.run_stage(Stage::Synthesize).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact { .. }), "{err}");
    assert!(err.is_precondition());
}

#[test]
fn rerun_is_a_noop_and_tampering_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline_in(dir.path(), &[]);
    for (stage, outcome) in p.run_all().unwrap() {
        assert!(matches!(outcome, StageOutcome::Ran { .. }), "{stage} did not run");
    }
    for (stage, outcome) in p.run_all().unwrap() {
        assert_eq!(outcome, StageOutcome::UpToDate, "{stage} reran");
    }

    let report = p.final_report().unwrap();
    assert!(report.accounting_holds());
    assert_eq!(report.generated, 8);
    // undefined when the filter removed every box
    assert!(report.exported_positive_rate.is_none_or(|r| r == 1.0));

    let layout = p.stage_dir(Stage::FitStats).join("layout_stats.json");
    let mut text = fs::read_to_string(&layout).unwrap();
    text.push(' ');
    fs::write(&layout, text).unwrap();
    let err = p.run_stage(Stage::Synthesize).unwrap_err();
    assert!(matches!(err, Error::StaleUpstream { .. }), "{err}");

    // rerunning the upstream stage restores the chain
    assert!(matches!(p.run_stage(Stage::FitStats).unwrap(), StageOutcome::Ran { .. }));
    assert_eq!(p.run_stage(Stage::FitStats).unwrap(), StageOutcome::UpToDate);
}

#[test]
fn config_change_reruns_only_that_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline_in(dir.path(), &[]);
    p.run_stage(Stage::FitStats).unwrap();
    let q = pipeline_in(dir.path(), &["layout.max_objects=3"]);
    assert!(matches!(q.run_stage(Stage::FitStats).unwrap(), StageOutcome::Ran { .. }));
    assert_eq!(q.run_stage(Stage::FitStats).unwrap(), StageOutcome::UpToDate);
}

#[test]
fn zero_requested_images_gives_an_empty_export() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline_in(dir.path(), &["synthesize.count=0", "eval.fid=false"]);
    p.run_all().unwrap();
    let report = p.final_report().unwrap();
    assert_eq!((report.requested, report.generated, report.dropped), (0, 0, 0));
    assert!(report.accounting_holds());
    let labels = fs::read_dir(p.stage_dir(Stage::Export).join("labels")).unwrap().count();
    assert_eq!(labels, 0);
}

fn odgen(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_odgen"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config();
    let config = config.to_str().unwrap();
    let work_dir = format!("work_dir={}", dir.path().display());

    let out = odgen(&["synthesize", "--config", config, "--override", &work_dir]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = odgen(&["fit-stats", "--config", config, "--seed", "3", "--override", &work_dir]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let line: serde_json::Value = serde_json::from_slice(out.stdout.split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert_eq!(line["stage"], "fit-stats");
    assert_eq!(line["status"], "ran");

    let out = odgen(&["no-such-stage", "--config", config]);
    assert_eq!(out.status.code(), Some(2));

    let out = odgen(&["fit-stats", "--config", "/nonexistent/config.toml"]);
    assert_ne!(out.status.code(), Some(0));
}
