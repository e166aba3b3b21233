//! Threshold clustering of concept embeddings and representative substitution.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::CharacterConcepts;
use crate::gateway::{EmbeddingClient, GatewayError};
use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};

const NORM_TOLERANCE: f64 = 1e-6;
const BLOCK: usize = 256;

#[derive(Debug, Error)]
pub enum UnifyError {
    #[error("embedding for {concept:?} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        concept: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding for {concept:?} is not unit norm (norm {norm})")]
    NotUnitNorm { concept: String, norm: f64 },
    #[error("threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("concept {0:?} has no entry in the mapping")]
    Unmapped(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnifierConfig {
    pub threshold: f64,
    pub seed: u64,
}

impl Default for UnifierConfig {
    fn default() -> Self {
        Self {
            threshold: 0.63,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptEmbedding {
    pub concept: String,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptCluster {
    pub id: usize,
    /// Sorted; clusters are numbered by their smallest member.
    pub members: Vec<String>,
    pub representative: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub concept: String,
    pub representative: String,
    pub cluster_id: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Unification {
    pub clusters: Vec<ConceptCluster>,
    pub mapping: BTreeMap<String, String>,
}

impl Unification {
    pub fn entries(&self) -> Vec<MappingEntry> {
        let mut out: Vec<MappingEntry> = self
            .clusters
            .iter()
            .flat_map(|c| {
                c.members.iter().map(|m| MappingEntry {
                    concept: m.clone(),
                    representative: c.representative.clone(),
                    cluster_id: c.id,
                })
            })
            .collect();
        out.sort_by(|a, b| a.concept.cmp(&b.concept));
        out
    }

    pub fn from_entries(entries: Vec<MappingEntry>) -> Self {
        let mut by_id: BTreeMap<usize, ConceptCluster> = BTreeMap::new();
        let mut mapping = BTreeMap::new();
        for e in entries {
            mapping.insert(e.concept.clone(), e.representative.clone());
            let c = by_id.entry(e.cluster_id).or_insert_with(|| ConceptCluster {
                id: e.cluster_id,
                members: Vec::new(),
                representative: e.representative.clone(),
            });
            c.members.push(e.concept);
        }
        let mut clusters: Vec<ConceptCluster> = by_id.into_values().collect();
        for c in &mut clusters {
            c.members.sort();
        }
        Self { clusters, mapping }
    }

    pub fn persist(&self, path: &Path) -> Result<(), JsonlError> {
        write_jsonl(path, &self.entries())
    }

    pub fn load(path: &Path) -> Result<Self, JsonlError> {
        Ok(Self::from_entries(read_jsonl(path)?))
    }
}

/// Sorted distinct concepts over all lists.
pub fn vocabulary(lists: &[CharacterConcepts]) -> Vec<String> {
    lists
        .iter()
        .flat_map(|l| l.concepts.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

pub fn embed_vocabulary(
    client: &EmbeddingClient,
    vocabulary: &[String],
) -> Result<Vec<ConceptEmbedding>, UnifyError> {
    let vectors = client.embed(vocabulary)?;
    Ok(vocabulary
        .iter()
        .cloned()
        .zip(vectors)
        .map(|(concept, vector)| ConceptEmbedding { concept, vector })
        .collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components of the graph joining concepts with cosine ≥ threshold.
///
/// Repeated concept strings are merged before clustering; the first vector wins.
pub fn unify(
    embeddings: &[ConceptEmbedding],
    config: &UnifierConfig,
) -> Result<Unification, UnifyError> {
    if !(config.threshold > 0.0 && config.threshold < 1.0) {
        return Err(UnifyError::InvalidThreshold(config.threshold));
    }
    let mut by_concept: BTreeMap<&str, &[f64]> = BTreeMap::new();
    for e in embeddings {
        by_concept.entry(e.concept.as_str()).or_insert(&e.vector);
    }
    let concepts: Vec<&str> = by_concept.keys().copied().collect();
    let vectors: Vec<&[f64]> = by_concept.values().copied().collect();
    if let Some(first) = vectors.first() {
        let dim = first.len();
        for (c, v) in concepts.iter().zip(&vectors) {
            if v.len() != dim {
                return Err(UnifyError::DimensionMismatch {
                    concept: c.to_string(),
                    expected: dim,
                    found: v.len(),
                });
            }
            let norm = cosine(v, v).sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(UnifyError::NotUnitNorm {
                    concept: c.to_string(),
                    norm,
                });
            }
        }
    }

    let n = concepts.len();
    let edges: Vec<(usize, usize)> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .flat_map_iter(|block| {
            let mut local = Vec::new();
            for i in block * BLOCK..((block + 1) * BLOCK).min(n) {
                for j in i + 1..n {
                    if cosine(vectors[i], vectors[j]) >= config.threshold {
                        local.push((i, j));
                    }
                }
            }
            local
        })
        .collect();

    let mut parent: Vec<usize> = (0..n).collect();
    for (i, j) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            // Keep the smaller index as root so roots are the smallest members.
            parent[ri.max(rj)] = ri.min(rj);
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, c) in concepts.iter().enumerate() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(c.to_string());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Unification::default();
    for (id, members) in groups.into_values().enumerate() {
        let representative = members[rng.random_range(0..members.len())].clone();
        for m in &members {
            out.mapping.insert(m.clone(), representative.clone());
        }
        out.clusters.push(ConceptCluster {
            id,
            members,
            representative,
        });
    }
    Ok(out)
}

/// Substitutes representatives, collapsing duplicates that the merge creates.
pub fn apply_mapping(
    lists: &[CharacterConcepts],
    mapping: &BTreeMap<String, String>,
) -> Result<Vec<CharacterConcepts>, UnifyError> {
    lists
        .iter()
        .map(|l| {
            let mut seen = BTreeSet::new();
            let mut concepts = Vec::with_capacity(l.concepts.len());
            for c in &l.concepts {
                let rep = mapping
                    .get(c)
                    .ok_or_else(|| UnifyError::Unmapped(c.clone()))?;
                if seen.insert(rep.as_str()) {
                    concepts.push(rep.clone());
                }
            }
            Ok(CharacterConcepts {
                concepts,
                ..l.clone()
            })
        })
        .collect()
}
