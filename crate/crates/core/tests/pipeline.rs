//! Whole-pipeline runs over the bundled fixture: resumption, tamper
//! detection and the training-file contract.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use specforge::config::{RunConfig, Stage};
use specforge::pipeline::{
    run_pipeline, ExitCode, Manifest, PipelineError, StageStatus, MANIFEST_FILE, RECORDS_FILE, TASKS_FILE,
    TRAIN_CONFIG_FILE, TRAIN_FILE,
};

fn fixture_config(run_dir: &Path) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/e2e/run.toml");
    let mut c = RunConfig::load(&path).unwrap();
    c.run_dir = run_dir.to_path_buf();
    c
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn full_run_then_noop() {
    let tmp = tempfile::tempdir().unwrap();
    let c = fixture_config(tmp.path());
    let first = run_pipeline(&c, Stage::All).unwrap();
    assert_eq!(first.exit_code(), ExitCode::Ok);
    assert_eq!(
        first.stages.iter().map(|s| s.stage).collect::<Vec<_>>(),
        vec![Stage::Index, Stage::Generate, Stage::Respond, Stage::Export]
    );
    assert!(!first.all_up_to_date());
    assert_eq!(lines(&tmp.path().join(TASKS_FILE)).len(), 20);

    let manifest_before = fs::read(tmp.path().join(MANIFEST_FILE)).unwrap();
    let second = run_pipeline(&c, Stage::All).unwrap();
    assert!(second.all_up_to_date());
    assert_eq!(second.exit_code(), ExitCode::Ok);
    assert_eq!(fs::read(tmp.path().join(MANIFEST_FILE)).unwrap(), manifest_before);
}

#[test]
fn respond_resumes_from_a_torn_file() {
    let reference = tempfile::tempdir().unwrap();
    run_pipeline(&fixture_config(reference.path()), Stage::All).unwrap();
    let want = fs::read(reference.path().join(RECORDS_FILE)).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let c = fixture_config(tmp.path());
    run_pipeline(&c, Stage::All).unwrap();
    // Keep five records and half of the sixth, as if the process died mid-write.
    let path = tmp.path().join(RECORDS_FILE);
    let kept = lines(&path);
    let mut torn = kept[..5].join("\n");
    torn.push('\n');
    torn.push_str(&kept[5][..kept[5].len() / 2]);
    fs::write(&path, torn).unwrap();

    let summary = run_pipeline(&c, Stage::All).unwrap();
    let respond = summary.stages.iter().find(|s| s.stage == Stage::Respond).unwrap();
    assert!(!respond.up_to_date);
    assert!(summary.stages.iter().find(|s| s.stage == Stage::Generate).unwrap().up_to_date);
    assert_eq!(fs::read(&path).unwrap(), want);
}

#[test]
fn generate_resumes_to_target() {
    let tmp = tempfile::tempdir().unwrap();
    let c = fixture_config(tmp.path());
    run_pipeline(&c, Stage::Generate).unwrap();
    let path = tmp.path().join(TASKS_FILE);
    let kept: Vec<String> = lines(&path)[..7].to_vec();
    fs::write(&path, format!("{}\n", kept.join("\n"))).unwrap();

    let summary = run_pipeline(&c, Stage::Generate).unwrap();
    assert_eq!(summary.stages[0].status, StageStatus::Complete);
    let now = lines(&path);
    assert_eq!(now.len(), 20);
    assert_eq!(now[..7], kept[..]);
}

#[test]
fn tampered_output_is_detected_and_rebuilt() {
    let tmp = tempfile::tempdir().unwrap();
    let c = fixture_config(tmp.path());
    run_pipeline(&c, Stage::All).unwrap();
    let train = tmp.path().join(TRAIN_FILE);
    let original = fs::read(&train).unwrap();
    fs::write(&train, b"{\"instruction\":\"x\",\"input\":\"\",\"output\":\"y\"}\n").unwrap();

    let manifest = Manifest::load(tmp.path());
    assert_eq!(manifest.tampered(tmp.path()), vec![("export".to_string(), TRAIN_FILE.to_string())]);

    let summary = run_pipeline(&c, Stage::All).unwrap();
    let export = summary.stages.iter().find(|s| s.stage == Stage::Export).unwrap();
    assert!(!export.up_to_date);
    assert_eq!(fs::read(&train).unwrap(), original);
    assert!(Manifest::load(tmp.path()).tampered(tmp.path()).is_empty());
}

#[test]
fn config_change_invalidates_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = fixture_config(tmp.path());
    run_pipeline(&c, Stage::Index).unwrap();
    c.retrieval.k1 = 1.5;
    let summary = run_pipeline(&c, Stage::Index).unwrap();
    assert!(!summary.all_up_to_date());
}

#[test]
fn missing_seeds_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = fixture_config(tmp.path());
    c.paths.seeds = Some(tmp.path().join("nope.jsonl"));
    let err = run_pipeline(&c, Stage::Generate).unwrap_err();
    assert_eq!(err.exit_code(), ExitCode::Validation);
    let PipelineError::Config(diags) = err else { panic!("expected config error") };
    assert_eq!(diags.fields(), vec!["paths.seeds"]);
    assert!(!tmp.path().join(MANIFEST_FILE).exists());
}

/// The trainer reads exactly `{instruction, input, output}` per line and
/// the run settings from train.toml.
#[test]
fn export_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let c = fixture_config(tmp.path());
    run_pipeline(&c, Stage::All).unwrap();
    let text = fs::read_to_string(tmp.path().join(TRAIN_FILE)).unwrap();
    assert!(text.ends_with('\n'));
    let mut n = 0;
    for line in text.lines() {
        assert!(line.starts_with("{\"instruction\":"), "{line}");
        let v: Value = serde_json::from_str(line).unwrap();
        let obj = v.as_object().unwrap();
        let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 3, "{line}");
        for key in ["instruction", "input", "output"] {
            assert!(obj[key].is_string(), "{key} in {line}");
        }
        assert!(!obj["instruction"].as_str().unwrap().trim().is_empty());
        assert!(!obj["output"].as_str().unwrap().trim().is_empty());
        n += 1;
    }
    assert_eq!(n, 20);

    let spec: toml::Table = fs::read_to_string(tmp.path().join(TRAIN_CONFIG_FILE)).unwrap().parse().unwrap();
    assert_eq!(spec["batch_size"].as_integer(), Some(32));
    assert_eq!(spec["learning_rate"].as_float(), Some(3e-4));
    assert_eq!(spec["epochs"].as_integer(), Some(3));
    assert_eq!(spec["lora_rank"].as_integer(), Some(8));
    assert_eq!(spec["lora_alpha"].as_integer(), Some(16));
    let train_file = PathBuf::from(spec["train_file"].as_str().unwrap());
    assert_eq!(fs::read_to_string(train_file).unwrap(), text);
}
