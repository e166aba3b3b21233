use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn assocscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_assocscan"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_prints_prompt_counts() {
    let out = assocscan(&["taxonomy", "validate"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("87 locations in 10 categories"));
    assert!(text.contains("8700 two-character prompts, 17400 single-character prompts"));
}

#[test]
fn validate_rejects_missing_file() {
    let out = assocscan(&["taxonomy", "validate", "/nonexistent/taxonomy.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn stages_chain_and_match_run_all() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture("planted/run.toml");
    let staged = dir.path().join("staged");
    let staged_s = staged.to_str().unwrap();
    let first = assocscan(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--run-dir",
        staged_s,
    ]);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    for stage in ["extract", "unify", "analyze", "filter", "report"] {
        let out = assocscan(&[stage, "--run-dir", staged_s]);
        assert!(
            out.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    let whole = dir.path().join("whole");
    let out = assocscan(&[
        "run-all",
        "--config",
        config.to_str().unwrap(),
        "--run-dir",
        whole.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("2 bias associations"));
    for f in [
        "bias_associations.jsonl",
        "report_counts.csv",
        "significant.jsonl",
    ] {
        assert_eq!(
            std::fs::read(staged.join(f)).unwrap(),
            std::fs::read(whole.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn stage_without_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = assocscan(&["extract", "--run-dir", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config.toml"));
}

#[test]
fn missing_prior_stage_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = assocscan(&[
        "extract",
        "--mock",
        "--run-dir",
        dir.path().to_str().unwrap(),
        "--taxonomy",
        "builtin:mini",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage extract failed"));
}

#[test]
fn eval_prints_columns_in_order() {
    let dir = fixture("eval");
    let out = assocscan(&[
        "eval",
        "--run-dir",
        dir.to_str().unwrap(),
        "--gold",
        dir.join("gold.json").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["R", "P", "DA", "H", "C", "V", "EA"]);
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .trim_start()
        .starts_with("0.78   0.70   0.80"));
}

#[test]
fn overrides_reach_the_persisted_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = assocscan(&[
        "generate",
        "--mock",
        "--run-dir",
        run.to_str().unwrap(),
        "--taxonomy",
        "builtin:mini",
        "--setting",
        "single-base",
        "--category",
        "gender",
        "--threshold",
        "0.7",
        "--seed",
        "9",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let config = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("setting = \"single-base\""));
    assert!(config.contains("threshold = 0.7"));
    assert!(config.contains("seed = 9"));
    assert!(stdout(&out).starts_with("generate  240 items"));
}
