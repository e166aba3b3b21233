//! Scores the LLM-assisted stages of a run against hand-made gold annotations.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exclusivity::{ExclusivityVerdict, Verdict};
use crate::extraction::{load_stage_records, ExtractionStage, StageRecord};
use crate::jsonl::{read_jsonl, JsonlError};
use crate::metrics::{homogeneity_completeness_v, MetricsError};
use crate::taxonomy::Identity;
use crate::unify::Unification;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold {section} entry refers to {key}, which the run does not contain")]
    Unresolved { section: &'static str, key: String },
    #[error("cannot read gold annotations: {0}")]
    Gold(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldList {
    pub story_id: String,
    pub descriptor: String,
    pub concepts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldDecomposition {
    pub story_id: String,
    pub descriptor: String,
    pub phrase: String,
    /// Whether the phrase should have been broken into components.
    pub split: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldCluster {
    pub concept: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldExclusivity {
    pub concept: String,
    pub identity: Identity,
    pub exclusive: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GoldAnnotations {
    pub extraction: Vec<GoldList>,
    pub decomposition: Vec<GoldDecomposition>,
    pub clusters: Vec<GoldCluster>,
    pub exclusivity: Vec<GoldExclusivity>,
}

impl GoldAnnotations {
    pub fn from_path(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvalError::Gold(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| EvalError::Gold(format!("{}: {e}", path.display())))
    }
}

/// The run outputs the harness looks at.
#[derive(Clone, Debug, Default)]
pub struct StageArtifacts {
    pub refine1: Vec<StageRecord>,
    pub decompose: Vec<StageRecord>,
    pub unification: Unification,
    pub verdicts: Vec<ExclusivityVerdict>,
}

impl StageArtifacts {
    pub fn load(run_dir: &Path) -> Result<Self, EvalError> {
        let optional = |name: &str| -> Result<Vec<ExclusivityVerdict>, JsonlError> {
            let p = run_dir.join(name);
            if p.exists() {
                read_jsonl(&p)
            } else {
                Ok(Vec::new())
            }
        };
        let map = run_dir.join("unify_map.jsonl");
        Ok(Self {
            refine1: load_stage_records(run_dir, ExtractionStage::Refine1)?,
            decompose: load_stage_records(run_dir, ExtractionStage::Decompose)?,
            unification: if map.exists() {
                Unification::load(&map)?
            } else {
                Unification::default()
            },
            verdicts: optional("verdicts.jsonl")?,
        })
    }
}

/// Whitespace- and case-insensitive form used for exact matching.
pub fn normalize_concept(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches(['.', ',', ';', ':', '!'])
        .to_lowercase()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NearMiss {
    pub story_id: String,
    pub descriptor: String,
    pub predicted: String,
    pub gold: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub decomposition_accuracy: Option<f64>,
    pub homogeneity: Option<f64>,
    pub completeness: Option<f64>,
    pub v_measure: Option<f64>,
    pub exclusivity_accuracy: Option<f64>,
}

impl EvalRow {
    pub const COLUMNS: [&'static str; 7] = ["R", "P", "DA", "H", "C", "V", "EA"];

    pub fn values(&self) -> [Option<f64>; 7] {
        [
            self.recall,
            self.precision,
            self.decomposition_accuracy,
            self.homogeneity,
            self.completeness,
            self.v_measure,
            self.exclusivity_accuracy,
        ]
    }

    /// Header plus one row; unevaluated columns print as `-`.
    pub fn to_table(&self) -> String {
        let cells: Vec<String> = self
            .values()
            .iter()
            .map(|v| v.map_or("-".to_string(), |x| format!("{x:.2}")))
            .collect();
        let mut out = String::new();
        for (i, c) in Self::COLUMNS.iter().enumerate() {
            let _ = write!(out, "{}{:>6}", if i == 0 { "" } else { " " }, c);
        }
        out.push('\n');
        for (i, c) in cells.iter().enumerate() {
            let _ = write!(out, "{}{:>6}", if i == 0 { "" } else { " " }, c);
        }
        out.push('\n');
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub row: EvalRow,
    pub near_misses: Vec<NearMiss>,
}

fn is_near(a: &str, b: &str) -> bool {
    if a.contains(b) || b.contains(a) {
        return true;
    }
    let ta: BTreeSet<&str> = a.split(' ').collect();
    let tb: BTreeSet<&str> = b.split(' ').collect();
    let inter = ta.intersection(&tb).count();
    let union = ta.union(&tb).count();
    union > 0 && inter * 2 >= union
}

fn concepts_for<'a>(
    records: &'a [StageRecord],
    story_id: &str,
    descriptor: &str,
) -> Option<&'a Vec<String>> {
    records
        .iter()
        .filter(|r| r.story_id == story_id)
        .flat_map(|r| &r.parsed)
        .find(|c| c.descriptor == descriptor)
        .map(|c| &c.concepts)
}

fn ratio(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Computes R, P, DA, H, C, V and EA; sections without gold stay `None`.
pub fn eval_stages(
    artifacts: &StageArtifacts,
    gold: &GoldAnnotations,
) -> Result<EvalReport, EvalError> {
    let mut report = EvalReport::default();

    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for g in &gold.extraction {
        let predicted =
            concepts_for(&artifacts.refine1, &g.story_id, &g.descriptor).ok_or_else(|| {
                EvalError::Unresolved {
                    section: "extraction",
                    key: format!("{}/{}", g.story_id, g.descriptor),
                }
            })?;
        let pred: BTreeSet<String> = predicted.iter().map(|c| normalize_concept(c)).collect();
        let gold_set: BTreeSet<String> = g.concepts.iter().map(|c| normalize_concept(c)).collect();
        tp += pred.intersection(&gold_set).count();
        n_pred += pred.len();
        n_gold += gold_set.len();
        for p in pred.difference(&gold_set) {
            if let Some(m) = gold_set.difference(&pred).find(|q| is_near(p, q)) {
                report.near_misses.push(NearMiss {
                    story_id: g.story_id.clone(),
                    descriptor: g.descriptor.clone(),
                    predicted: p.clone(),
                    gold: m.clone(),
                });
            }
        }
    }
    report.row.recall = ratio(tp, n_gold);
    report.row.precision = ratio(tp, n_pred);

    let mut correct = 0;
    for g in &gold.decomposition {
        let out =
            concepts_for(&artifacts.decompose, &g.story_id, &g.descriptor).ok_or_else(|| {
                EvalError::Unresolved {
                    section: "decomposition",
                    key: format!("{}/{}", g.story_id, g.descriptor),
                }
            })?;
        let phrase = normalize_concept(&g.phrase);
        let was_split = !out.iter().any(|c| normalize_concept(c) == phrase);
        correct += (was_split == g.split) as usize;
    }
    report.row.decomposition_accuracy = ratio(correct, gold.decomposition.len());

    if !gold.clusters.is_empty() {
        let cluster_of: HashMap<&str, usize> = artifacts
            .unification
            .clusters
            .iter()
            .flat_map(|c| c.members.iter().map(move |m| (m.as_str(), c.id)))
            .collect();
        let mut pred = Vec::with_capacity(gold.clusters.len());
        for g in &gold.clusters {
            pred.push(*cluster_of.get(g.concept.as_str()).ok_or_else(|| {
                EvalError::Unresolved {
                    section: "clusters",
                    key: g.concept.clone(),
                }
            })?);
        }
        let labels: Vec<&str> = gold.clusters.iter().map(|g| g.label.as_str()).collect();
        let r = homogeneity_completeness_v(&pred, &labels)?;
        report.row.homogeneity = Some(r.homogeneity);
        report.row.completeness = Some(r.completeness);
        report.row.v_measure = Some(r.v_measure);
    }

    let mut agree = 0;
    for g in &gold.exclusivity {
        let v = artifacts
            .verdicts
            .iter()
            .find(|v| v.concept == g.concept && v.identity == g.identity)
            .ok_or_else(|| EvalError::Unresolved {
                section: "exclusivity",
                key: format!("{} / {}", g.concept, g.identity.label),
            })?;
        agree += ((v.verdict == Verdict::Exclusive) == g.exclusive) as usize;
    }
    report.row.exclusivity_accuracy = ratio(agree, gold.exclusivity.len());
    Ok(report)
}
