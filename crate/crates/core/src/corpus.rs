//! Story records and the corpus line format.
//!
//! One record per line:
//! `{id, setting, category, location, location_category, descriptors[],
//! replicate_index, prompt, model_id, story_text, created_at}`.
//! The id is the first 32 hex digits of
//! `sha256(prompt + "\x1f" + model_id + "\x1f" + replicate_index)`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};
use crate::prompts::{GenerationKind, PromptInstance};
use crate::taxonomy::{DemographicCategory, Descriptor, Taxonomy};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}:{line}: {message}")]
    Invalid {
        path: String,
        line: usize,
        message: String,
    },
    #[error("record {id}: {message}")]
    Unresolved { id: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryRecord {
    pub id: String,
    pub setting: GenerationKind,
    pub category: DemographicCategory,
    pub location: String,
    pub location_category: String,
    pub descriptors: Vec<String>,
    pub replicate_index: u32,
    pub prompt: String,
    pub model_id: String,
    pub story_text: String,
    pub created_at: String,
}

pub fn record_id(prompt: &str, model_id: &str, replicate_index: u32) -> String {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update([0x1f]);
    h.update(model_id.as_bytes());
    h.update([0x1f]);
    h.update(replicate_index.to_string().as_bytes());
    hex::encode(&h.finalize()[..16])
}

impl StoryRecord {
    pub fn from_prompt(
        prompt: &PromptInstance,
        model_id: &str,
        story_text: String,
        created_at: String,
    ) -> Self {
        Self {
            id: record_id(&prompt.rendered, model_id, prompt.replicate_index),
            setting: prompt.setting,
            category: prompt.category,
            location: prompt.location.name.clone(),
            location_category: prompt.location.category.clone(),
            descriptors: prompt
                .descriptors
                .iter()
                .map(|d| d.surface.clone())
                .collect(),
            replicate_index: prompt.replicate_index,
            prompt: prompt.rendered.clone(),
            model_id: model_id.to_string(),
            story_text,
            created_at,
        }
    }

    /// Structural invariants that need no taxonomy.
    pub fn check(&self) -> Result<(), String> {
        if self.story_text.trim().is_empty() {
            return Err("story_text is empty".into());
        }
        if self.descriptors.len() != self.setting.arity() {
            return Err(format!(
                "setting {} expects {} descriptor(s), record has {}",
                self.setting,
                self.setting.arity(),
                self.descriptors.len()
            ));
        }
        let expected = record_id(&self.prompt, &self.model_id, self.replicate_index);
        if self.id != expected {
            return Err(format!(
                "id {} does not match content hash {expected}",
                self.id
            ));
        }
        Ok(())
    }
}

/// A record whose descriptors and location resolved against a taxonomy.
#[derive(Clone, Debug)]
pub struct Story {
    pub record: StoryRecord,
    pub descriptors: Vec<Descriptor>,
}

impl Story {
    pub fn resolve(record: StoryRecord, taxonomy: &Taxonomy) -> Result<Self, CorpusError> {
        let fail = |message: String| CorpusError::Unresolved {
            id: record.id.clone(),
            message,
        };
        let loc = taxonomy
            .location(&record.location)
            .ok_or_else(|| fail(format!("unknown location {:?}", record.location)))?;
        if loc.category != record.location_category {
            return Err(fail(format!(
                "location {:?} belongs to {:?}, record says {:?}",
                record.location, loc.category, record.location_category
            )));
        }
        let mut descriptors = Vec::with_capacity(record.descriptors.len());
        for s in &record.descriptors {
            let d = taxonomy
                .descriptor(s)
                .ok_or_else(|| fail(format!("descriptor {s:?} is not in the taxonomy")))?;
            if d.identity.category != record.category {
                return Err(fail(format!(
                    "descriptor {s:?} belongs to {}, record category is {}",
                    d.identity.category, record.category
                )));
            }
            descriptors.push(d.clone());
        }
        Ok(Self {
            record,
            descriptors,
        })
    }
}

pub fn persist_records(records: &[StoryRecord], path: &Path) -> Result<(), CorpusError> {
    Ok(write_jsonl(path, records)?)
}

/// Loads records and checks each one's structural invariants.
pub fn load_records(path: &Path) -> Result<Vec<StoryRecord>, CorpusError> {
    let records: Vec<StoryRecord> = read_jsonl(path)?;
    // read_jsonl skips blank lines; recover physical line numbers for errors
    let text = std::fs::read_to_string(path).map_err(|source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .collect();
    for (rec, line) in records.iter().zip(lines) {
        rec.check().map_err(|message| CorpusError::Invalid {
            path: path.display().to_string(),
            line,
            message,
        })?;
    }
    Ok(records)
}

/// Loads and resolves every record against `taxonomy`.
pub fn load_stories(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<Story>, CorpusError> {
    load_records(path)?
        .into_iter()
        .map(|r| Story::resolve(r, taxonomy))
        .collect()
}
