//! Acceptance gate: one PASS/FAIL/SKIP line per criterion, non-zero exit on any failure.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use assocscan::eval::{eval_stages, EvalRow, GoldAnnotations, StageArtifacts};
use assocscan::exclusivity::{BiasAssociation, Verdict};
use assocscan::gateway::http::{BackendConfig, OpenAiCompatible};
use assocscan::gateway::{ClientOptions, EmbeddingClient};
use assocscan::jsonl::read_jsonl;
use assocscan::metrics::homogeneity_completeness_v;
use assocscan::pipeline::{Pipeline, RunConfig};
use assocscan::prompts::{expand_prompts, GenerationKind, GenerationSetting};
use assocscan::report::{report_counts, report_top_k};
use assocscan::stats::{
    chi_square_independence, chi_square_sf, distinctiveness_score, SignificantAssociation,
};
use assocscan::taxonomy::{DemographicCategory, Identity, Taxonomy};
use assocscan::unify::{cosine, embed_vocabulary, unify, ConceptEmbedding, UnifierConfig};
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass,
    Skip(String),
}

type Check = Result<Outcome, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn prompt_combinatorics() -> Check {
    let t = Taxonomy::bundled();
    let want = [
        (DemographicCategory::Gender, 8_700),
        (DemographicCategory::Race, 10_440),
        (DemographicCategory::Religions, 10_440),
    ];
    for (category, two) in want {
        for (kind, n) in [
            (GenerationKind::TwoBase, two),
            (GenerationKind::SingleBase, 2 * two),
        ] {
            let setting =
                GenerationSetting::for_category(kind, &t, category).map_err(|e| e.to_string())?;
            let got = expand_prompts(&t, &setting, category)
                .map_err(|e| e.to_string())?
                .len();
            ensure!(got == n, "{category:?} {kind:?}: {got} prompts, want {n}");
        }
    }
    Ok(Outcome::Pass)
}

fn exact_score(n_a: u64, n_b: u64, total: u64) -> BigRational {
    let r = BigRational::new((n_a as i64 - n_b as i64).into(), (total as i64).into());
    if r.is_positive() {
        r
    } else {
        BigRational::zero()
    }
}

fn score_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let total = rng.random_range(1..=2_000u64);
        let n_a = rng.random_range(0..=total);
        let n_b = rng.random_range(0..=total);
        let s = distinctiveness_score(n_a, n_b, total).map_err(|e| e.to_string())?;
        ensure!(
            (0.0..=1.0).contains(&s),
            "score {s} out of range for ({n_a},{n_b},{total})"
        );
        ensure!(
            (n_b >= n_a) == (s == 0.0),
            "clamp rule broken at ({n_a},{n_b},{total})"
        );
        if n_a < total {
            let up = distinctiveness_score(n_a + 1, n_b, total).unwrap();
            ensure!(
                up >= s && (n_b > n_a || up > s),
                "not increasing in n_A at ({n_a},{n_b},{total})"
            );
        }
        if n_b > 0 {
            let down = distinctiveness_score(n_a, n_b - 1, total).unwrap();
            ensure!(
                down >= s && (n_b > n_a || down > s),
                "not decreasing in n_B at ({n_a},{n_b},{total})"
            );
        }
    }
    let ulp = BigRational::new(1.into(), (1i64 << 52).into());
    for _ in 0..100 {
        let total = rng.random_range(1..=10_000u64);
        let n_a = rng.random_range(0..=total);
        let n_b = rng.random_range(0..=n_a);
        let exact = exact_score(n_a, n_b, total);
        let got = BigRational::from_float(distinctiveness_score(n_a, n_b, total).unwrap()).unwrap();
        ensure!(
            (got - &exact).abs() <= exact * &ulp,
            "({n_a},{n_b},{total}) off the exact value"
        );
    }
    Ok(Outcome::Pass)
}

fn chi_square_oracle() -> Check {
    let reference = common::chi2_reference();
    ensure!(
        reference.tables.len() == 500,
        "reference has {} tables",
        reference.tables.len()
    );
    for t in &reference.tables {
        ensure!(
            (2..=6).contains(&t.table.len()),
            "table size {}",
            t.table.len()
        );
        let rows: Vec<(u64, u64)> = t.table.iter().map(|r| (r[0], r[1])).collect();
        let r = chi_square_independence(&rows, 5.0).map_err(|e| e.to_string())?;
        let brute = common::brute_force_chi2(&t.table);
        ensure!(
            (r.statistic - brute).abs() <= 1e-12 * brute.max(1.0),
            "{:?}: {} vs brute {brute}",
            t.table,
            r.statistic
        );
        ensure!(
            (r.p_value - t.p_value).abs() <= 1e-9,
            "{:?}: p {} vs {}",
            t.table,
            r.p_value,
            t.p_value
        );
    }
    let p = chi_square_sf(3.841459, 1).map_err(|e| e.to_string())?;
    ensure!((p - 0.05).abs() <= 1e-6, "sf(3.841459, 1) = {p}");
    Ok(Outcome::Pass)
}

fn clustering_metrics() -> Check {
    let reference = common::hcv_reference();
    ensure!(
        reference.labelings.len() == 200,
        "reference has {} labelings",
        reference.labelings.len()
    );
    for l in &reference.labelings {
        ensure!(l.pred.len() <= 50, "labeling longer than 50");
        let r = homogeneity_completeness_v(&l.pred, &l.gold).map_err(|e| e.to_string())?;
        for (got, want) in [
            (r.homogeneity, l.homogeneity),
            (r.completeness, l.completeness),
            (r.v_measure, l.v_measure),
        ] {
            ensure!(
                (got - want).abs() <= 1e-12,
                "{:?}/{:?}: {got} vs {want}",
                l.pred,
                l.gold
            );
        }
    }
    let gold = [0, 0, 1, 1, 2, 2, 2];
    let perfect = homogeneity_completeness_v(&[5, 5, 3, 3, 9, 9, 9], &gold).unwrap();
    ensure!(
        (perfect.homogeneity, perfect.completeness, perfect.v_measure) == (1.0, 1.0, 1.0),
        "perfect labeling gave {perfect:?}"
    );
    let one = homogeneity_completeness_v(&[0; 7], &gold).unwrap();
    ensure!(
        (one.homogeneity, one.completeness, one.v_measure) == (0.0, 1.0, 0.0),
        "single cluster gave {one:?}"
    );
    Ok(Outcome::Pass)
}

fn random_vocabulary(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<ConceptEmbedding> {
    (0..n)
        .map(|i| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            ConceptEmbedding {
                concept: format!("c{i:04}"),
                vector: v.into_iter().map(|x| x / norm).collect(),
            }
        })
        .collect()
}

fn unifier_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for round in 0..100 {
        let n = rng.random_range(1..=500);
        let dim = rng.random_range(3..=12);
        let vocab = random_vocabulary(&mut rng, n, dim);
        let threshold = rng.random_range(0.05..0.9);
        let seed = rng.random();
        let cfg = UnifierConfig { threshold, seed };
        let u = unify(&vocab, &cfg).map_err(|e| e.to_string())?;

        let mut members: Vec<&str> = u
            .clusters
            .iter()
            .flat_map(|c| c.members.iter().map(String::as_str))
            .collect();
        members.sort();
        let names: Vec<&str> = vocab.iter().map(|e| e.concept.as_str()).collect();
        ensure!(
            members == names,
            "round {round}: clusters are not a partition"
        );
        ensure!(
            u.clusters
                .iter()
                .all(|c| c.members.contains(&c.representative)),
            "round {round}: foreign representative"
        );
        ensure!(
            unify(&vocab, &cfg).unwrap() == u,
            "round {round}: not deterministic"
        );

        let higher = unify(
            &vocab,
            &UnifierConfig {
                threshold: threshold + 0.05,
                seed,
            },
        )
        .unwrap();
        let id: BTreeMap<&str, usize> = u
            .clusters
            .iter()
            .flat_map(|c| c.members.iter().map(move |m| (m.as_str(), c.id)))
            .collect();
        for c in &higher.clusters {
            let first = id[c.members[0].as_str()];
            ensure!(
                c.members.iter().all(|m| id[m.as_str()] == first),
                "round {round}: higher threshold fused clusters"
            );
        }
        ensure!(
            higher.clusters.len() >= u.clusters.len(),
            "round {round}: fewer clusters at higher threshold"
        );
    }
    Ok(Outcome::Pass)
}

/// Needs a live embedding endpoint; skipped when none is configured.
fn unifier_banter_pair() -> Check {
    let (Ok(url), Ok(model)) = (
        std::env::var("ASSOCSCAN_EMBED_URL"),
        std::env::var("ASSOCSCAN_EMBED_MODEL"),
    ) else {
        return Ok(Outcome::Skip(
            "set ASSOCSCAN_EMBED_URL and ASSOCSCAN_EMBED_MODEL to run".into(),
        ));
    };
    let mut config = BackendConfig::new(url, model);
    config.api_key_env = std::env::var("ASSOCSCAN_EMBED_KEY_ENV").ok();
    let backend = OpenAiCompatible::new(config).map_err(|e| e.to_string())?;
    let client = EmbeddingClient::new(Arc::new(backend), ClientOptions::default());
    let pair = vec![
        "engages in friendly banter".to_string(),
        "participates in friendly banter".to_string(),
    ];
    let e = embed_vocabulary(&client, &pair).map_err(|e| e.to_string())?;
    let sim = cosine(&e[0].vector, &e[1].vector);
    let u = unify(
        &e,
        &UnifierConfig {
            threshold: 0.63,
            seed: 0,
        },
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        u.clusters.len() == 1,
        "banter pair not merged, cosine {sim:.4}"
    );
    Ok(Outcome::Pass)
}

fn has(list: &[assocscan::stats::SignificantAssociation], concept: &str, label: &str) -> bool {
    list.iter()
        .any(|a| a.concept == concept && a.identity.label == label)
}

fn planted_end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config =
        RunConfig::from_path(&common::fixture("planted/run.toml")).map_err(|e| e.to_string())?;
    config.run_dir = dir.path().to_path_buf();
    let raw = common::read(&common::fixture("planted/run.toml"));
    let pipeline = Pipeline::new(config).map_err(|e| e.to_string())?;

    let first = pipeline.run_all(Some(&raw)).map_err(|e| e.to_string())?;
    ensure!(first.backend_calls() > 0, "first run made no backend calls");
    let significant: Vec<SignificantAssociation> =
        read_jsonl(&dir.path().join("significant.jsonl")).map_err(|e| e.to_string())?;
    let kept: Vec<BiasAssociation> =
        read_jsonl(&dir.path().join("bias_associations.jsonl")).map_err(|e| e.to_string())?;
    ensure!(
        has(&significant, "q", "Female"),
        "(q, Female) not significant"
    );
    let kept_assoc: Vec<SignificantAssociation> =
        kept.iter().map(|b| b.association.clone()).collect();
    ensure!(
        has(&kept_assoc, "q", "Female"),
        "(q, Female) did not pass the exclusivity filter"
    );
    ensure!(
        kept.iter().all(|b| b.verdict == Verdict::NotExclusive),
        "kept association with an exclusive verdict"
    );
    ensure!(
        !significant.iter().any(|a| a.concept == "u"),
        "uniform concept u was selected"
    );
    ensure!(
        !has(&kept_assoc, "female", "Female"),
        "definitional concept survived the filter"
    );
    common::check_golden(dir.path(), &common::fixture("planted/golden"))?;

    let before = common::snapshot(dir.path());
    let second = pipeline.run_all(Some(&raw)).map_err(|e| e.to_string())?;
    ensure!(
        second.backend_calls() == 0,
        "rerun made {} backend calls",
        second.backend_calls()
    );
    ensure!(
        common::snapshot(dir.path()) == before,
        "rerun changed the run directory"
    );

    let fresh = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = pipeline.config().clone();
    config.run_dir = fresh.path().to_path_buf();
    Pipeline::new(config)
        .and_then(|p| p.run_all(Some(&raw)))
        .map_err(|e| e.to_string())?;
    common::check_golden(fresh.path(), &common::fixture("planted/golden"))
        .map_err(|e| format!("fresh run: {e}"))?;
    Ok(Outcome::Pass)
}

/// Parses report_counts.csv without going through the library.
fn parse_counts_csv(text: &str) -> BTreeMap<String, (usize, Option<f64>, Option<f64>)> {
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("setting,category,identity,count,mean_score,mean_p_value")
    );
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |s: &str| (!s.is_empty()).then(|| s.parse::<f64>().unwrap());
            (
                f[2].to_string(),
                (f[3].parse().unwrap(), num(f[4]), num(f[5])),
            )
        })
        .collect()
}

fn recompute(associations: &[BiasAssociation]) -> BTreeMap<String, (usize, f64, f64)> {
    let mut out: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for a in associations {
        let e = out.entry(a.association.identity.label.clone()).or_default();
        e.0 += 1;
        e.1 += a.association.score;
        e.2 += a.association.p_value;
    }
    out
}

fn check_counts(
    csv: &str,
    associations: &[BiasAssociation],
    labels: &[&str],
) -> Result<(), String> {
    let parsed = parse_counts_csv(csv);
    let want = recompute(associations);
    ensure!(
        parsed.len() == labels.len(),
        "{} rows, want {}",
        parsed.len(),
        labels.len()
    );
    for label in labels {
        let &(count, score, p) = parsed.get(*label).ok_or(format!("missing row {label}"))?;
        match want.get(*label) {
            None => ensure!(
                count == 0 && score.is_none() && p.is_none(),
                "{label}: expected empty row"
            ),
            Some(&(n, s, q)) => {
                ensure!(count == n, "{label}: count {count} vs {n}");
                let (ms, mp) = (s / n as f64, q / n as f64);
                ensure!(
                    score.is_some_and(|x| (x - ms).abs() <= 1e-12),
                    "{label}: mean score {score:?} vs {ms}"
                );
                ensure!(
                    p.is_some_and(|x| (x - mp).abs() <= 1e-12 * mp.max(1e-300)),
                    "{label}: mean p {p:?} vs {mp}"
                );
            }
        }
    }
    Ok(())
}

fn bias(concept: &str, label: &str, location: &str, score: f64, p_value: f64) -> BiasAssociation {
    BiasAssociation {
        association: SignificantAssociation {
            concept: concept.into(),
            identity: Identity::new(DemographicCategory::Gender, label),
            location_category: location.into(),
            score,
            p_value,
            statistic: 0.0,
            df: 1,
            n_a: 0,
            n_b_min: 0,
            total_lists: 0,
            low_expected: false,
        },
        verdict: Verdict::NotExclusive,
        flagged: false,
    }
}

fn tie_fixture() -> Vec<BiasAssociation> {
    let mut out = Vec::new();
    for (i, concept) in ["b", "a", "c"].iter().enumerate() {
        for label in ["Male", "Female"] {
            for location in ["Healthcare", "Education"] {
                let score = [0.25, 0.5][i % 2];
                let p = if *concept == "c" { 0.01 } else { 0.001 };
                out.push(bias(concept, label, location, score, p));
            }
        }
    }
    out.push(bias("z", "Female", "Education", 0.5, 1e-8));
    out.push(bias("y", "Male", "Education", 0.75, 0.04));
    out
}

fn report_integrity() -> Check {
    let t = Taxonomy::mini();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config =
        RunConfig::from_path(&common::fixture("planted/run.toml")).map_err(|e| e.to_string())?;
    config.run_dir = dir.path().to_path_buf();
    Pipeline::new(config)
        .and_then(|p| p.run_all(None))
        .map_err(|e| e.to_string())?;
    let kept: Vec<BiasAssociation> =
        read_jsonl(&dir.path().join("bias_associations.jsonl")).map_err(|e| e.to_string())?;
    check_counts(
        &common::read(&dir.path().join("report_counts.csv")),
        &kept,
        &["Female", "Male"],
    )
    .map_err(|e| format!("planted run: {e}"))?;
    let golden = common::fixture("planted/golden");
    let golden_kept: Vec<BiasAssociation> =
        read_jsonl(&golden.join("bias_associations.jsonl")).map_err(|e| e.to_string())?;
    check_counts(
        &common::read(&golden.join("report_counts.csv")),
        &golden_kept,
        &["Female", "Male"],
    )
    .map_err(|e| format!("golden: {e}"))?;

    let ties = tie_fixture();
    let table = report_counts(&ties, &t, "two-base", &[DemographicCategory::Gender])
        .map_err(|e| e.to_string())?;
    check_counts(&table.to_csv(), &ties, &["Female", "Male"])
        .map_err(|e| format!("tie fixture: {e}"))?;

    let full = report_top_k(&ties, &t, ties.len()).map_err(|e| e.to_string())?;
    ensure!(
        full.len() == 1 && full[0].entries.len() == ties.len(),
        "top-k lost entries"
    );
    let entries = &full[0].entries;
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            let (a, b) = (&entries[i], &entries[j]);
            let in_order = if a.score != b.score {
                a.score > b.score
            } else if a.p_value != b.p_value {
                a.p_value < b.p_value
            } else if a.concept != b.concept {
                a.concept < b.concept
            } else if a.identity != b.identity {
                a.identity < b.identity
            } else {
                a.location_category < b.location_category
            };
            ensure!(in_order, "{} ranked before {}", a.display(), b.display());
        }
    }
    let top3 = report_top_k(&ties, &t, 3).map_err(|e| e.to_string())?;
    ensure!(
        top3[0].entries[..] == entries[..3],
        "top-3 is not a prefix of the full ranking"
    );
    Ok(Outcome::Pass)
}

fn stage_evaluation() -> Check {
    let dir = common::fixture("eval");
    let artifacts = StageArtifacts::load(&dir).map_err(|e| e.to_string())?;
    let gold = GoldAnnotations::from_path(&dir.join("gold.json")).map_err(|e| e.to_string())?;
    let row = eval_stages(&artifacts, &gold)
        .map_err(|e| e.to_string())?
        .row;

    let ent = |ps: &[f64]| -ps.iter().map(|p| p * p.ln()).sum::<f64>();
    let h_gold = ent(&[0.3, 0.3, 0.2, 0.2]);
    let h_gold_given_pred = 0.3 * ent(&[2.0 / 3.0, 1.0 / 3.0]);
    let h_pred = ent(&[0.3, 0.3, 0.2, 0.1, 0.1]);
    let h_pred_given_gold = 0.3 * ent(&[1.0 / 3.0, 2.0 / 3.0]) + 0.2 * 2f64.ln();
    let h = 1.0 - h_gold_given_pred / h_gold;
    let c = 1.0 - h_pred_given_gold / h_pred;
    let v = 2.0 * h * c / (h + c);
    let want = [7.0 / 9.0, 7.0 / 10.0, 0.8, h, c, v, 0.9];
    for ((name, got), want) in EvalRow::COLUMNS.iter().zip(row.values()).zip(want) {
        let got = got.ok_or(format!("{name} not computed"))?;
        ensure!((got - want).abs() <= 1e-12, "{name}: {got} vs {want}");
    }
    ensure!(
        EvalRow::COLUMNS == ["R", "P", "DA", "H", "C", "V", "EA"],
        "column order {:?}",
        EvalRow::COLUMNS
    );
    let header: Vec<String> = row
        .to_table()
        .lines()
        .next()
        .unwrap_or_default()
        .split_whitespace()
        .map(String::from)
        .collect();
    ensure!(header == EvalRow::COLUMNS, "printed header {header:?}");
    Ok(Outcome::Pass)
}

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let criteria: [(&str, fn() -> Check, Option<Duration>); 9] = [
        (
            "prompt-expansion combinatorics",
            prompt_combinatorics,
            secs(1),
        ),
        (
            "distinctiveness score properties",
            score_properties,
            secs(1),
        ),
        ("chi-square oracle equivalence", chi_square_oracle, secs(5)),
        (
            "clustering-metric oracle equivalence",
            clustering_metrics,
            secs(2),
        ),
        ("unifier properties", unifier_properties, None),
        (
            "unifier merges the banter pair on a live endpoint",
            unifier_banter_pair,
            None,
        ),
        ("planted-bias end-to-end", planted_end_to_end, secs(60)),
        ("report integrity", report_integrity, secs(1)),
        ("stage-evaluation harness", stage_evaluation, None),
    ];
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(_) if limit.is_some_and(|l| elapsed > l) => {
                Err(format!("took {elapsed:.2?}, limit {:?}", limit.unwrap()))
            }
            r => r,
        };
        match result {
            Ok(Outcome::Pass) => println!("PASS {name} ({elapsed:.2?})"),
            Ok(Outcome::Skip(why)) => println!("SKIP {name} ({elapsed:.2?}): {why}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({elapsed:.2?}): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
