use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn specforge(args: &[&str], run_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specforge"))
        .args(args)
        .arg("--run-dir")
        .arg(run_dir)
        .env_remove("SPECFORGE_BACKEND_URL")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn rerun_is_a_noop() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixtures().join("e2e/run.toml");
    let config = config.to_str().unwrap();
    let first = specforge(&["--config", config, "all"], tmp.path());
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let text = stdout(&first);
    assert!(text.contains("generate: complete (resumed=0, rounds=3, tasks=20)"), "{text}");
    assert!(text.contains("export: complete"), "{text}");

    let second = specforge(&["--config", config, "all"], tmp.path());
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(stdout(&second), "up to date\n");
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixtures().join("e2e/run.toml");
    let out = specforge(
        &["--config", config.to_str().unwrap(), "--print-config", "generate", "--target", "7"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("target_count = 7"), "{text}");
    assert!(text.contains("seed = 1234"), "{text}");
    assert!(!tmp.path().join("manifest.json").exists());
}

#[test]
fn missing_seeds_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixtures().join("e2e/run.toml");
    let out = specforge(
        &["--config", config.to_str().unwrap(), "generate", "--seeds", "/no/such/seeds.jsonl"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("paths.seeds"), "{err}");
}

#[test]
fn generate_without_backend_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let seeds = fixtures().join("e2e/seeds.jsonl");
    let out = specforge(&["generate", "--seeds", seeds.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("backends.generator"));
}

#[test]
fn eval_against_scripted_gold() {
    let tmp = tempfile::tempdir().unwrap();
    let backend = format!("mock:{}", fixtures().join("eval_mock.json").display());
    let tasks = fixtures().join("eval");
    let report = tmp.path().join("copy.json");
    let out = specforge(
        &[
            "--backend",
            &backend,
            "eval",
            "--tasks",
            tasks.to_str().unwrap(),
            "--k",
            "5",
            "--out",
            report.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["k"], 5);
    assert_eq!(v["overall"]["f1"], 1.0);
    assert_eq!(v["overall"]["rouge_l"], 1.0);
    assert_eq!(v["tasks"].as_array().unwrap().len(), 5);
    assert!(tmp.path().join("report.txt").exists());
}

#[test]
fn eval_with_too_few_demos_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let backend = format!("mock:{}", fixtures().join("eval_mock.json").display());
    let tasks = fixtures().join("eval/qa_yesno.json");
    let out = specforge(
        &["--backend", &backend, "eval", "--tasks", tasks.to_str().unwrap(), "--k", "9"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stdout(&out));
}
