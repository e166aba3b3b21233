//! Count tables, top-k rankings and per-location breakdowns of bias associations.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exclusivity::BiasAssociation;
use crate::extraction::CharacterConcepts;
use crate::jsonl::{read_jsonl, JsonlError};
use crate::taxonomy::{DemographicCategory, Identity, Taxonomy};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("association for {0:?} is outside the taxonomy")]
    UnknownIdentity(Identity),
    #[error("report total {report} disagrees with {file} associations on disk")]
    CountMismatch { report: usize, file: usize },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub identity: Identity,
    pub abbreviation: String,
    pub count: usize,
    pub mean_score: Option<f64>,
    pub mean_p_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub setting: String,
    pub rows: Vec<ReportRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One row per identity of the given categories, in taxonomy order.
pub fn report_counts(
    associations: &[BiasAssociation],
    taxonomy: &Taxonomy,
    setting: &str,
    categories: &[DemographicCategory],
) -> Result<ReportTable, ReportError> {
    for a in associations {
        if !taxonomy.identities().contains(&a.association.identity) {
            return Err(ReportError::UnknownIdentity(a.association.identity.clone()));
        }
    }
    if associations.is_empty() {
        log::warn!("no bias associations to report for {setting}");
    }
    let rows = categories
        .iter()
        .flat_map(|&c| taxonomy.identities_in(c))
        .map(|identity| {
            let mine: Vec<&BiasAssociation> = associations
                .iter()
                .filter(|a| a.association.identity == *identity)
                .collect();
            ReportRow {
                identity: identity.clone(),
                abbreviation: taxonomy.abbreviation(identity).to_string(),
                count: mine.len(),
                mean_score: mean(mine.iter().map(|a| a.association.score)),
                mean_p_value: mean(mine.iter().map(|a| a.association.p_value)),
            }
        })
        .collect();
    Ok(ReportTable {
        setting: setting.to_string(),
        rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ReportTable {
    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,category,identity,count,mean_score,mean_p_value\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.setting,
                r.identity.category.as_str(),
                r.identity.label,
                r.count,
                opt(r.mean_score),
                opt(r.mean_p_value)
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let header = ["Identity", "Count", "Mean score", "Mean p"];
        let body: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.identity.label.clone(),
                    r.count.to_string(),
                    r.mean_score.map_or("-".into(), |v| format!("{v:.4}")),
                    r.mean_p_value.map_or("-".into(), |v| format!("{v:.3e}")),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = format!("Setting: {}\n", self.setting);
        let line = |cells: [&str; 4]| {
            format!(
                "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}\n",
                cells[0],
                cells[1],
                cells[2],
                cells[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            )
        };
        out.push_str(&line(header));
        for row in &body {
            out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
        }
        out
    }
}

/// Score descending, then p ascending, concept, identity and location category.
pub fn ranking_order(a: &BiasAssociation, b: &BiasAssociation) -> Ordering {
    let (x, y) = (&a.association, &b.association);
    y.score
        .total_cmp(&x.score)
        .then(x.p_value.total_cmp(&y.p_value))
        .then_with(|| x.concept.cmp(&y.concept))
        .then_with(|| x.identity.cmp(&y.identity))
        .then_with(|| x.location_category.cmp(&y.location_category))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub location_category: String,
    pub concept: String,
    pub identity: Identity,
    pub abbreviation: String,
    pub score: f64,
    pub p_value: f64,
}

impl RankedEntry {
    pub fn display(&self) -> String {
        format!(
            "{}\u{2194}{} ({})",
            self.location_category, self.concept, self.abbreviation
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub category: DemographicCategory,
    pub entries: Vec<RankedEntry>,
}

/// Top `k` associations per demographic category present in the input.
pub fn report_top_k(
    associations: &[BiasAssociation],
    taxonomy: &Taxonomy,
    k: usize,
) -> Result<Vec<TopK>, ReportError> {
    if k == 0 {
        return Err(ReportError::InvalidK);
    }
    let mut by_cat: BTreeMap<DemographicCategory, Vec<&BiasAssociation>> = BTreeMap::new();
    for a in associations {
        by_cat
            .entry(a.association.identity.category)
            .or_default()
            .push(a);
    }
    Ok(by_cat
        .into_iter()
        .map(|(category, mut items)| {
            items.sort_by(|a, b| ranking_order(a, b));
            TopK {
                category,
                entries: items
                    .into_iter()
                    .take(k)
                    .map(|a| {
                        let s = &a.association;
                        RankedEntry {
                            location_category: s.location_category.clone(),
                            concept: s.concept.clone(),
                            identity: s.identity.clone(),
                            abbreviation: taxonomy.abbreviation(&s.identity).to_string(),
                            score: s.score,
                            p_value: s.p_value,
                        }
                    })
                    .collect(),
            }
        })
        .collect())
}

pub fn top_k_text(lists: &[TopK]) -> String {
    let mut out = String::new();
    for list in lists {
        let _ = writeln!(out, "{}", list.category.display_name());
        for (i, e) in list.entries.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:>3}. {}  score={:.4} p={:.3e}",
                i + 1,
                e.display(),
                e.score,
                e.p_value
            );
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationCount {
    pub identity: Identity,
    pub location_category: String,
    pub count: usize,
}

/// Counts per (identity, location category), zero rows included.
pub fn report_per_location(
    associations: &[BiasAssociation],
    taxonomy: &Taxonomy,
    categories: &[DemographicCategory],
) -> Vec<LocationCount> {
    let mut rows = Vec::new();
    for identity in categories.iter().flat_map(|&c| taxonomy.identities_in(c)) {
        for loc_cat in taxonomy.location_categories() {
            let count = associations
                .iter()
                .filter(|a| {
                    a.association.identity == *identity
                        && a.association.location_category == *loc_cat
                })
                .count();
            rows.push(LocationCount {
                identity: identity.clone(),
                location_category: loc_cat.clone(),
                count,
            });
        }
    }
    rows
}

pub fn per_location_csv(rows: &[LocationCount]) -> String {
    let mut out = String::from("category,identity,location_category,count\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.identity.category.as_str(),
            r.identity.label,
            csv_field(&r.location_category),
            r.count
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawLocationSupport {
    pub identity: Identity,
    pub location_category: String,
    pub location: String,
    pub concept: String,
    /// Concept lists of the identity at this location that contain the concept.
    pub lists: usize,
}

/// Breaks each association down to the concrete locations that support it.
pub fn report_raw_locations(
    associations: &[BiasAssociation],
    unified_lists: &[CharacterConcepts],
    taxonomy: &Taxonomy,
) -> Vec<RawLocationSupport> {
    let mut out = Vec::new();
    for a in associations {
        let s = &a.association;
        for loc in taxonomy
            .locations()
            .iter()
            .filter(|l| l.category == s.location_category)
        {
            let lists = unified_lists
                .iter()
                .filter(|l| {
                    l.identity == s.identity
                        && l.location == loc.name
                        && l.concepts.contains(&s.concept)
                })
                .count();
            out.push(RawLocationSupport {
                identity: s.identity.clone(),
                location_category: s.location_category.clone(),
                location: loc.name.clone(),
                concept: s.concept.clone(),
                lists,
            });
        }
    }
    out
}

pub fn raw_locations_csv(rows: &[RawLocationSupport]) -> String {
    let mut out = String::from("category,identity,location_category,location,concept,lists\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.identity.category.as_str(),
            r.identity.label,
            csv_field(&r.location_category),
            csv_field(&r.location),
            csv_field(&r.concept),
            r.lists
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Context printed under the tables so readers know what was and was not done.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunNotes {
    pub stories: usize,
    pub excluded_stories: usize,
    pub tested_concepts: usize,
    pub excluded_identities: Vec<(String, Identity)>,
    pub flagged_verdicts: Vec<(String, Identity)>,
}

pub struct ReportFiles {
    pub table: ReportTable,
    pub top_k: Vec<TopK>,
    pub per_location: Vec<LocationCount>,
}

/// Writes every report file for one run from `bias_associations.jsonl`.
///
/// The count table is checked against the number of records on disk.
pub fn write_reports(
    run_dir: &Path,
    taxonomy: &Taxonomy,
    setting: &str,
    categories: &[DemographicCategory],
    k: usize,
    notes: &RunNotes,
    unified_lists: Option<&[CharacterConcepts]>,
) -> Result<ReportFiles, ReportError> {
    let associations: Vec<BiasAssociation> = read_jsonl(&run_dir.join("bias_associations.jsonl"))?;
    let table = report_counts(&associations, taxonomy, setting, categories)?;
    if table.total() != associations.len() {
        return Err(ReportError::CountMismatch {
            report: table.total(),
            file: associations.len(),
        });
    }
    let top_k = report_top_k(&associations, taxonomy, k)?;
    let per_location = report_per_location(&associations, taxonomy, categories);

    std::fs::write(run_dir.join("report_counts.csv"), table.to_csv())?;
    std::fs::write(
        run_dir.join("per_location.csv"),
        per_location_csv(&per_location),
    )?;
    if let Some(lists) = unified_lists {
        let raw = report_raw_locations(&associations, lists, taxonomy);
        std::fs::write(
            run_dir.join("per_raw_location.csv"),
            raw_locations_csv(&raw),
        )?;
    }

    let mut text = table.to_text();
    let _ = writeln!(text, "\nTop {k} associations");
    text.push_str(&top_k_text(&top_k));
    let _ = writeln!(text, "\nNotes");
    let _ = writeln!(
        text,
        "- stories analysed: {} ({} excluded after extraction failures)",
        notes.stories, notes.excluded_stories
    );
    let _ = writeln!(
        text,
        "- concepts tested: {} (raw p-values, no multiple-testing correction)",
        notes.tested_concepts
    );
    let _ = writeln!(text, "- concepts were unified across this run only");
    for (loc, id) in &notes.excluded_identities {
        let _ = writeln!(
            text,
            "- {} has no concept lists in {loc}; left out of that test",
            id.label
        );
    }
    if !notes.flagged_verdicts.is_empty() {
        let _ = writeln!(text, "\nKept without a readable exclusivity verdict");
        for (concept, id) in &notes.flagged_verdicts {
            let _ = writeln!(text, "- {concept} ({})", id.label);
        }
    }
    std::fs::write(run_dir.join("report.txt"), text)?;
    Ok(ReportFiles {
        table,
        top_k,
        per_location,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exclusivity::Verdict;
    use crate::stats::SignificantAssociation;

    fn ba(concept: &str, label: &str, loc: &str, score: f64, p: f64) -> BiasAssociation {
        BiasAssociation {
            association: SignificantAssociation {
                concept: concept.into(),
                identity: Identity::new(DemographicCategory::Gender, label),
                location_category: loc.into(),
                score,
                p_value: p,
                statistic: 1.0,
                df: 1,
                n_a: 1,
                n_b_min: 0,
                total_lists: 10,
                low_expected: false,
            },
            verdict: Verdict::NotExclusive,
            flagged: false,
        }
    }

    #[test]
    fn counts_and_means() {
        let t = Taxonomy::bundled();
        let a = vec![
            ba("a", "Female", "Education", 0.1, 0.01),
            ba("b", "Female", "Education", 0.2, 0.02),
            ba("c", "Female", "Healthcare", 0.3, 0.03),
        ];
        let table = report_counts(&a, &t, "two-base", &[DemographicCategory::Gender]).unwrap();
        let f = &table.rows[0];
        assert_eq!((f.identity.label.as_str(), f.count), ("Female", 3));
        assert!((f.mean_score.unwrap() - 0.2).abs() < 1e-15);
        let m = &table.rows[1];
        assert_eq!((m.count, m.mean_score), (0, None));
        assert!(table.to_csv().ends_with("two-base,gender,Male,0,,\n"));
        assert!(table.to_text().contains("Female"));
    }

    #[test]
    fn empty_input_gives_zero_rows() {
        let t = Taxonomy::bundled();
        let table = report_counts(&[], &t, "x", &[DemographicCategory::Race]).unwrap();
        assert_eq!(table.rows.len(), 4);
        assert_eq!(table.total(), 0);
    }

    #[test]
    fn top_k_order() {
        let t = Taxonomy::bundled();
        let a = vec![
            ba("x", "Female", "Education", 0.4, 0.01),
            ba("y", "Male", "Education", 0.5, 0.01),
            ba("z", "Male", "Sports", 0.4, 0.001),
        ];
        let top = report_top_k(&a, &t, 1).unwrap();
        assert_eq!(top[0].entries.len(), 1);
        assert_eq!(top[0].entries[0].concept, "y");
        let all = report_top_k(&a, &t, 10).unwrap();
        let order: Vec<&str> = all[0].entries.iter().map(|e| e.concept.as_str()).collect();
        assert_eq!(order, vec!["y", "z", "x"]);
        assert_eq!(all[0].entries[0].display(), "Education\u{2194}y (m)");
        assert!(matches!(
            report_top_k(&a, &t, 0),
            Err(ReportError::InvalidK)
        ));
    }

    #[test]
    fn per_location_partitions_totals() {
        let t = Taxonomy::bundled();
        let a = vec![
            ba("x", "Female", "Education", 0.4, 0.01),
            ba("y", "Female", "Sports", 0.5, 0.01),
        ];
        let rows = report_per_location(&a, &t, &[DemographicCategory::Gender]);
        assert_eq!(rows.len(), 2 * t.location_categories().len());
        let female: usize = rows
            .iter()
            .filter(|r| r.identity.label == "Female")
            .map(|r| r.count)
            .sum();
        assert_eq!(female, 2);
        assert!(rows.iter().any(|r| r.count == 0));
    }
}
