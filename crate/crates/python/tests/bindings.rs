use std::path::{Path, PathBuf};

use assocscan::taxonomy::Taxonomy;
use assocscan_py::{
    bias_associations, evaluate, load_config, prompts_for, run_config, unify_concepts, BindingError,
};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

#[test]
fn prompt_counts_follow_the_taxonomy() {
    let t = Taxonomy::bundled();
    assert_eq!(prompts_for(&t, "two-base", "gender").unwrap().len(), 8_700);
    assert_eq!(
        prompts_for(&t, "single-base", "religions").unwrap().len(),
        20_880
    );
    assert!(prompts_for(&t, "three-base", "gender").is_err());
    assert!(prompts_for(&t, "two-base", "age").is_err());
}

#[test]
fn unify_checks_lengths() {
    let e = unify_concepts(vec!["a".into()], vec![], 0.5, 0).unwrap_err();
    assert!(matches!(e, BindingError::LengthMismatch(1, 0)));
    let u = unify_concepts(
        vec!["a".into(), "b".into(), "c".into()],
        vec![vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]],
        0.75,
        0,
    )
    .unwrap();
    assert_eq!(u.mapping["a"], u.mapping["b"]);
    assert_eq!(u.mapping["c"], "c");
}

#[test]
fn planted_run_through_the_binding_layer() {
    let dir = tempfile::tempdir().unwrap();
    let config = load_config(&fixture("planted/run.toml"), Some(dir.path().to_path_buf())).unwrap();
    let summary = run_config(config).unwrap();
    assert_eq!(summary.bias_associations, 2);
    let kept = bias_associations(dir.path()).unwrap();
    assert!(kept.iter().all(|b| b.association.concept == "q"));
}

#[test]
fn eval_fixture_scores() {
    let dir = fixture("eval");
    let report = evaluate(&dir, &dir.join("gold.json")).unwrap();
    assert_eq!(report.row.exclusivity_accuracy, Some(0.9));
}
