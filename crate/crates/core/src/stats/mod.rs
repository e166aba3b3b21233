//! Contingency counts, the distinctiveness score and significance selection.

mod chi2;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chi2::{chi_square_independence, chi_square_sf, ln_gamma, ChiSquareResult};

use crate::extraction::CharacterConcepts;
use crate::taxonomy::{DemographicCategory, Identity, Taxonomy};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("chi-squared test needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("row {0} of the contingency table is empty")]
    EmptyRow(usize),
    #[error("statistic must be finite and non-negative, got {0}")]
    InvalidStatistic(f64),
    #[error("degrees of freedom must be at least 1")]
    InvalidDf,
    #[error("N_A must be positive")]
    NoLists,
    #[error("n_A = {n_a} exceeds N_A = {total}")]
    CountOutOfRange { n_a: u64, total: u64 },
    #[error("concept list {story_id}/{descriptor} names unknown location {location:?}")]
    UnknownLocation {
        story_id: String,
        descriptor: String,
        location: String,
    },
    #[error("location {location:?} belongs to {expected:?}, list says {found:?}")]
    LocationCategoryMismatch {
        location: String,
        expected: String,
        found: String,
    },
    #[error("identity {0:?} is not in the taxonomy")]
    UnknownIdentity(Identity),
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    pub alpha: f64,
    pub min_expected_warn: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            min_expected_warn: 5.0,
        }
    }
}

impl StatsConfig {
    pub fn validate(&self) -> Result<(), StatsError> {
        if self.alpha > 0.0 && self.alpha < 1.0 {
            Ok(())
        } else {
            Err(StatsError::InvalidAlpha(self.alpha))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityCounts {
    pub identity: Identity,
    /// N_A: concept lists attributed to this identity.
    pub lists: u64,
    /// n_A(Y): lists containing concept Y.
    pub concepts: BTreeMap<String, u64>,
}

impl IdentityCounts {
    pub fn count(&self, concept: &str) -> u64 {
        self.concepts.get(concept).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountsTable {
    pub location_category: String,
    pub demographic_category: DemographicCategory,
    /// Every identity of the category in taxonomy order, including ones with no lists.
    pub identities: Vec<IdentityCounts>,
}

impl CountsTable {
    pub fn vocabulary(&self) -> BTreeSet<&str> {
        self.identities
            .iter()
            .flat_map(|c| c.concepts.keys().map(String::as_str))
            .collect()
    }
}

/// Builds one table per (location category, demographic category) seen in the input.
pub fn aggregate_counts(
    lists: &[CharacterConcepts],
    taxonomy: &Taxonomy,
) -> Result<Vec<CountsTable>, StatsError> {
    let mut tables: BTreeMap<(usize, DemographicCategory), CountsTable> = BTreeMap::new();
    for list in lists {
        let loc = taxonomy
            .location(&list.location)
            .ok_or_else(|| StatsError::UnknownLocation {
                story_id: list.story_id.clone(),
                descriptor: list.descriptor.clone(),
                location: list.location.clone(),
            })?;
        if loc.category != list.location_category {
            return Err(StatsError::LocationCategoryMismatch {
                location: list.location.clone(),
                expected: loc.category.clone(),
                found: list.location_category.clone(),
            });
        }
        if !taxonomy.identities().contains(&list.identity) {
            return Err(StatsError::UnknownIdentity(list.identity.clone()));
        }
        let cat_index = taxonomy
            .location_categories()
            .iter()
            .position(|c| *c == loc.category)
            .expect("location category listed");
        let demo = list.identity.category;
        let table = tables
            .entry((cat_index, demo))
            .or_insert_with(|| CountsTable {
                location_category: loc.category.clone(),
                demographic_category: demo,
                identities: taxonomy
                    .identities_in(demo)
                    .map(|identity| IdentityCounts {
                        identity: identity.clone(),
                        lists: 0,
                        concepts: BTreeMap::new(),
                    })
                    .collect(),
            });
        let row = table
            .identities
            .iter_mut()
            .find(|c| c.identity == list.identity)
            .expect("identity listed");
        row.lists += 1;
        let present: BTreeSet<&str> = list.concepts.iter().map(String::as_str).collect();
        for concept in present {
            *row.concepts.entry(concept.to_string()).or_default() += 1;
        }
    }
    Ok(tables.into_values().collect())
}

/// `(n_A - n_B_min) / N_A`, clamped to 0 when `n_B_min >= n_A`.
pub fn distinctiveness_score(n_a: u64, n_b_min: u64, total: u64) -> Result<f64, StatsError> {
    if total == 0 {
        return Err(StatsError::NoLists);
    }
    if n_a > total {
        return Err(StatsError::CountOutOfRange { n_a, total });
    }
    if n_b_min >= n_a {
        return Ok(0.0);
    }
    Ok((n_a - n_b_min) as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificantAssociation {
    pub concept: String,
    pub identity: Identity,
    pub location_category: String,
    pub score: f64,
    pub p_value: f64,
    pub statistic: f64,
    pub df: u32,
    pub n_a: u64,
    pub n_b_min: u64,
    pub total_lists: u64,
    pub low_expected: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    /// (location category, concept) pairs that received a test.
    pub tested: usize,
    pub degenerate: usize,
    pub low_expected: usize,
    /// Identities left out of a table because they had no lists there.
    pub excluded_identities: Vec<(String, Identity)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub associations: Vec<SignificantAssociation>,
    pub summary: SelectionSummary,
}

/// Emits (concept, identity) pairs with a positive score under a significant test.
pub fn select_significant(
    tables: &[CountsTable],
    config: &StatsConfig,
) -> Result<Selection, StatsError> {
    config.validate()?;
    let mut out = Selection::default();
    for table in tables {
        let active: Vec<&IdentityCounts> =
            table.identities.iter().filter(|c| c.lists > 0).collect();
        for c in table.identities.iter().filter(|c| c.lists == 0) {
            out.summary
                .excluded_identities
                .push((table.location_category.clone(), c.identity.clone()));
        }
        if active.len() < 2 {
            continue;
        }
        for concept in table.vocabulary() {
            let rows: Vec<(u64, u64)> = active
                .iter()
                .map(|c| {
                    let n = c.count(concept);
                    (n, c.lists - n)
                })
                .collect();
            let test = chi_square_independence(&rows, config.min_expected_warn)?;
            out.summary.tested += 1;
            out.summary.degenerate += test.degenerate as usize;
            out.summary.low_expected += test.low_expected as usize;
            if test.degenerate || test.p_value >= config.alpha {
                continue;
            }
            for (i, a) in active.iter().enumerate() {
                let n_b_min = rows
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, r)| r.0)
                    .min()
                    .expect("at least one other identity");
                let score = distinctiveness_score(rows[i].0, n_b_min, a.lists)?;
                if score > 0.0 {
                    out.associations.push(SignificantAssociation {
                        concept: concept.to_string(),
                        identity: a.identity.clone(),
                        location_category: table.location_category.clone(),
                        score,
                        p_value: test.p_value,
                        statistic: test.statistic,
                        df: test.df,
                        n_a: rows[i].0,
                        n_b_min,
                        total_lists: a.lists,
                        low_expected: test.low_expected,
                    });
                }
            }
        }
    }
    out.associations.sort_by(|x, y| {
        (&x.location_category, &x.concept, &x.identity).cmp(&(
            &y.location_category,
            &y.concept,
            &y.identity,
        ))
    });
    Ok(out)
}
