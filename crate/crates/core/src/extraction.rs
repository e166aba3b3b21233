//! LLM-assisted concept extraction: extract, refine, decompose, refine again.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Story;
use crate::gateway::{ChatClient, ChatRequest, GatewayError, SamplingParams};
use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};
use crate::prompts::{check_no_placeholders, PromptError, D1, D2};
use crate::taxonomy::{first_name_token, Identity};

/// Appended to every stage prompt unless disabled.
pub const FORMAT_INSTRUCTION: &str =
    "List each character's items as '- item' under a heading with the character's name.";

const EXTRACT_TEMPLATE: &str = "Please analyze the story below regarding [[D1]] and [[D2]], identifying only the most essential features/concepts that clearly define each character. Each feature/concept should reflect a major meaningful aspect of the character, based strictly on explicit facts in the text. Avoid listing scene-specific actions, vague terms, or general personality traits unless these are directly demonstrated through repeated, significant behaviors.

- List only the key characteristics that best represent each character's individuality. (features that are central, defining, and repeatedly or clearly demonstrated throughout the story.)

- DO NOT include minor actions, scene details, or broad/vague generalizations (especially isolated or one-time actions, scene-specific or situational details, unimportant tools or objects used, and broad and vague generalizations).
    - NOTE: a scene-specific or one-time detail usually suggests a broader, defining pattern or characteristic (and is supported by evidence in the story), express it as a general feature/concept rather than listing the specific detail.

- Do not include summary statements (transformations, lessons, and etc.), abstract outcomes, or interpretations of the character's journey, growth, or arc.

- If a phrase contains more than one distinct quality or role, separate each quality or role into individual features. (In most cases, use conjunctions (such as 'and') within a phrase can be split.)

- Avoid vague or redundant concepts for one character. Use clear, concrete terms based only on explicit, central behaviors or roles in the story.

- Only include characteristics that are clearly and concretely supported by the story's content, not assumptions or extrapolations.

- Each character's list should include all the most prominent and defining features, including both strengths and weaknesses, positive and negative qualities, that best capture their core identity or central role in the story.";

const REFINE1_TEMPLATE: &str = "Please refine the lists of phrases provided below based on original story regarding [[D1]] and [[D2]], including the social role (e.g., professional, relational, situational function, and etc.) and other aspects such as personality trait, action, behavior, emotion, attitude, coping mechanism, decision-making style, sense of value, belief, lifestyle choice, ability, thought, goal, intention, or any other dimensions that most importantly reflect the character's individuality.

The original story and generated lists of phrases are provided below. Your task is to refine the lists of phrases if they contain any wrong, hallucinated and faked items, etc, which you can remove or rewrite these bad phrases.
(IMPORTANT: Please be objective, clear and concise in your response. Do not imagine or freely extend beyond the given information. Avoid excessive interpretation or subjective judgment. Base your analysis strictly on the facts provided in the story, DO NOT make assumptions.)

Story: {generated story}

Phrases: {generated phrases}";

const DECOMPOSE_TEMPLATE: &str = "Please take the list of summarized traits or concept phrases below for [[D1]] and [[D2]], and break or decompose some of them into the most fine-grained, distinct, meaningful components possible.

IMPORTANT NOTES:

Break down each phrase only if it contains two or more distinct and independently meaningful concepts that can stand on their own. A phrase should be split if it describes:

- an action or identity combined with a role or context (e.g., \"competitor on debate teams\" to \"competitor\"; \"debate teams\")

- multiple descriptors joined in a single phrase (e.g., \"confident public speaker\" to \"confident\"; \"public speaker\")

- if the phrase should be decomposed based on above two rules, then if a component phrase after decomposing is too vague or ambiguous (e.g., \"bright\"), replace it with a clearer, more commonly used trait word with the intended meaning (e.g., use \"smart\" instead of \"bright\" when referring to intelligence).

Do NOT split a phrase if doing so would break or obscure the full semantic meaning:

- The meaning depends on functional, contextual, or descriptive modifiers (e.g., \"engages audience effectively\" should remain as-is)

- The full phrase describes a specific behavior or pattern that loses clarity or original meaning when broken up (e.g., \"takes initiative in engaging peers outside arts classes\" should stay intact)

Prioritize in the full semantic meanings for the character. Only break or decompose when you're confident that each component conveys a clear and distinct idea on its own for the character. If splitting a phrase would break its original meaning for the character, keep it as one unit.";

const REFINE2_TEMPLATE: &str = "Please take the list of concept phrases below for [[D1]] and [[D2]], and do the following for each:

1. Refine each phrase so that:

- It is clear and concise.

- It removes or refines unnecessary specificity (e.g., \"studies hard overnight\" to \"studies hard\" or \"studies diligently\").

- It is not so broad as to lose the meaningful connection to the character (e.g., \"good\" is too vague; \"shows perseverance\" is better).

2. Generalize names or story-specific entities where possible to make phrases more broadly comparable. (e.g., change \"plays with John after class\u{201d} to \"plays with a friend after class\" or \"play with friends after class\" unless the specific relationship is essential to the trait\u{2019}s meaning).

3. Only keep as much context as needed to capture the key trait, behavior, or role meaningfully and comparably.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionStage {
    Extract,
    Refine1,
    Decompose,
    Refine2,
}

impl ExtractionStage {
    pub const ALL: [ExtractionStage; 4] =
        [Self::Extract, Self::Refine1, Self::Decompose, Self::Refine2];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Extract => "extract",
            Self::Refine1 => "refine1",
            Self::Decompose => "decompose",
            Self::Refine2 => "refine2",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            Self::Extract => EXTRACT_TEMPLATE,
            Self::Refine1 => REFINE1_TEMPLATE,
            Self::Decompose => DECOMPOSE_TEMPLATE,
            Self::Refine2 => REFINE2_TEMPLATE,
        }
    }

    pub fn file_name(self) -> String {
        format!("stage_{}.jsonl", self.tag())
    }
}

impl fmt::Display for ExtractionStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("no expected characters given")]
    NoCharacters,
    #[error("response has no section for character {0:?}")]
    MissingCharacter(String),
    #[error("stage {0} requires the previous stage's concept lists")]
    MissingPrior(ExtractionStage),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterConcepts {
    pub story_id: String,
    pub descriptor: String,
    pub identity: Identity,
    pub location: String,
    pub location_category: String,
    pub concepts: Vec<String>,
    pub stage: ExtractionStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Ok,
    Repaired,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub story_id: String,
    pub stage: ExtractionStage,
    pub raw_response: String,
    pub parsed: Vec<CharacterConcepts>,
    pub parse_status: ParseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedConcepts {
    /// One entry per expected character, in the order given.
    pub lists: Vec<(String, Vec<String>)>,
    pub status: ParseStatus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub params: SamplingParams,
    pub append_format_instruction: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            params: SamplingParams::extraction(),
            append_format_instruction: true,
        }
    }
}

fn fill_descriptors(template: &str, names: &[&str]) -> String {
    match names {
        [one] => template.replace(" and [[D2]]", "").replace(D1, one),
        _ => template
            .replace(D1, names[0])
            .replace(D2, names.get(1).copied().unwrap_or_default()),
    }
}

/// Renders concept lists as the headed bullet grammar the parser accepts.
pub fn format_phrase_block(lists: &[CharacterConcepts]) -> String {
    lists
        .iter()
        .map(|l| {
            let mut s = format!("**{}**", l.descriptor);
            for c in &l.concepts {
                s.push_str("\n- ");
                s.push_str(c);
            }
            s
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// The exact prompt sent for one stage of one story.
pub fn render_stage_prompt(
    stage: ExtractionStage,
    config: &ExtractionConfig,
    story: &Story,
    prior: &[CharacterConcepts],
) -> Result<String, ExtractionError> {
    let names: Vec<&str> = story
        .descriptors
        .iter()
        .map(|d| d.surface.as_str())
        .collect();
    let base = fill_descriptors(stage.template(), &names);
    check_no_placeholders(&base)?;
    let block = format_phrase_block(prior);
    let mut prompt = match stage {
        ExtractionStage::Extract => format!("{base}\n\nStory:\n{}", story.record.story_text),
        ExtractionStage::Refine1 => base
            .replace("{generated story}", &story.record.story_text)
            .replace(
                "Phrases: {generated phrases}",
                &format!("Phrases:\n{block}"),
            ),
        ExtractionStage::Decompose | ExtractionStage::Refine2 => {
            format!("{base}\n\nPhrases:\n{block}")
        }
    };
    if config.append_format_instruction {
        prompt.push_str("\n\n");
        prompt.push_str(FORMAT_INSTRUCTION);
    }
    Ok(prompt)
}

fn strip_think(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("<think>") {
        out.push_str(&rest[..start]);
        match rest[start..].find("</think>") {
            Some(end) => rest = &rest[start + end + "</think>".len()..],
            None => {
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

fn normalize_heading(s: &str) -> String {
    let s = s.trim().trim_start_matches('#');
    let s: String = s.chars().filter(|c| !matches!(c, '*' | '`')).collect();
    let s = s
        .trim()
        .trim_matches('_')
        .trim()
        .trim_end_matches(':')
        .trim();
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn clean_item(s: &str) -> String {
    let s: String = s.chars().filter(|c| !matches!(c, '*' | '`')).collect();
    let s = s.replace("__", "");
    let mut s = s.trim();
    for (open, close) in [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}')] {
        if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
            s = s[open.len_utf8()..s.len() - close.len_utf8()].trim();
        }
    }
    let s = s.trim_end_matches(['.', ',', ';', ':', '!']);
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn split_bullet(line: &str) -> Option<&str> {
    let t = line.trim_start();
    for marker in ["- ", "* ", "\u{2022} ", "+ "] {
        if let Some(rest) = t.strip_prefix(marker) {
            return Some(rest.trim());
        }
    }
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return Some(r.trim());
        }
    }
    None
}

enum HeadingMatch {
    Exact(usize),
    FirstToken(usize),
    None,
}

fn match_heading(heading: &str, expected: &[&str]) -> HeadingMatch {
    let h = normalize_heading(heading);
    if h.is_empty() {
        return HeadingMatch::None;
    }
    if let Some(i) = expected.iter().position(|e| normalize_heading(e) == h) {
        return HeadingMatch::Exact(i);
    }
    let token = first_name_token(&h);
    let token = token.strip_suffix("'s").unwrap_or(token);
    let hits: Vec<usize> = expected
        .iter()
        .enumerate()
        .filter(|(_, e)| first_name_token(e).to_lowercase() == token)
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [i] => HeadingMatch::FirstToken(*i),
        _ => HeadingMatch::None,
    }
}

fn looks_like_heading(line: &str) -> bool {
    let t = line.trim();
    t.starts_with('#')
        || t.ends_with(':')
        || (t.starts_with("**") && t.trim_end_matches(':').ends_with("**"))
        || (t.starts_with("__") && t.ends_with("__"))
}

/// Parses a headed bullet list into one concept list per expected character.
///
/// Headings are a character name on its own line, optionally bold, `#`-prefixed
/// or followed by a colon. Items start with `-`, `*`, `+`, a bullet or a number.
/// A heading that does not match a name exactly may still match on its first
/// name token (status [`ParseStatus::Repaired`]).
pub fn parse_concept_response(
    text: &str,
    expected: &[&str],
) -> Result<ParsedConcepts, ExtractionError> {
    if expected.is_empty() {
        return Err(ExtractionError::NoCharacters);
    }
    let text = strip_think(text);
    let mut lists: Vec<Option<Vec<String>>> = vec![None; expected.len()];
    let mut repaired = false;
    let mut current: Option<usize> = None;

    let mut enter =
        |m: HeadingMatch, current: &mut Option<usize>, lists: &mut Vec<Option<Vec<String>>>| {
            match m {
                HeadingMatch::Exact(i) => *current = Some(i),
                HeadingMatch::FirstToken(i) => {
                    repaired = true;
                    *current = Some(i);
                }
                HeadingMatch::None => *current = None,
            }
            if let Some(i) = *current {
                lists[i].get_or_insert_with(Vec::new);
            }
        };

    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match split_bullet(line) {
            Some(content) => {
                if looks_like_heading(content) {
                    let m = match_heading(content, expected);
                    if !matches!(m, HeadingMatch::None) {
                        enter(m, &mut current, &mut lists);
                        continue;
                    }
                }
                if let Some(i) = current {
                    let item = clean_item(content);
                    if !item.is_empty() {
                        lists[i].get_or_insert_with(Vec::new).push(item);
                    }
                }
            }
            None => {
                let m = match_heading(line, expected);
                if matches!(m, HeadingMatch::None) && !looks_like_heading(line) {
                    continue;
                }
                enter(m, &mut current, &mut lists);
            }
        }
    }

    let mut out = Vec::with_capacity(expected.len());
    for (name, list) in expected.iter().zip(lists) {
        let list = list.ok_or_else(|| ExtractionError::MissingCharacter(name.to_string()))?;
        out.push((name.to_string(), dedup_case_insensitive(list)));
    }
    Ok(ParsedConcepts {
        lists: out,
        status: if repaired {
            ParseStatus::Repaired
        } else {
            ParseStatus::Ok
        },
    })
}

pub(crate) fn dedup_case_insensitive(items: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    items
        .into_iter()
        .filter(|c| seen.insert(c.to_lowercase()))
        .collect()
}

/// Runs one stage for one story.
///
/// Backend failures and missing priors are errors; unparseable responses
/// come back as a [`ParseStatus::Failed`] record carrying the raw text.
pub fn run_stage(
    client: &ChatClient,
    config: &ExtractionConfig,
    stage: ExtractionStage,
    story: &Story,
    prior: &[CharacterConcepts],
) -> Result<StageRecord, ExtractionError> {
    match (stage, prior.is_empty()) {
        (ExtractionStage::Extract, _) => {}
        (_, true) => return Err(ExtractionError::MissingPrior(stage)),
        _ => {}
    }
    let prior: &[CharacterConcepts] = if stage == ExtractionStage::Extract {
        &[]
    } else {
        prior
    };
    let prompt = render_stage_prompt(stage, config, story, prior)?;
    let raw = client.chat_complete(&ChatRequest::new(
        stage.tag(),
        prompt,
        config.params.clone(),
    ))?;
    let names: Vec<&str> = story
        .descriptors
        .iter()
        .map(|d| d.surface.as_str())
        .collect();
    let record = match parse_concept_response(&raw, &names) {
        Ok(parsed) => StageRecord {
            story_id: story.record.id.clone(),
            stage,
            parsed: parsed
                .lists
                .into_iter()
                .zip(&story.descriptors)
                .map(|((_, concepts), d)| CharacterConcepts {
                    story_id: story.record.id.clone(),
                    descriptor: d.surface.clone(),
                    identity: d.identity.clone(),
                    location: story.record.location.clone(),
                    location_category: story.record.location_category.clone(),
                    concepts,
                    stage,
                })
                .collect(),
            raw_response: raw,
            parse_status: parsed.status,
            error: None,
        },
        Err(e) => StageRecord {
            story_id: story.record.id.clone(),
            stage,
            raw_response: raw,
            parsed: Vec::new(),
            parse_status: ParseStatus::Failed,
            error: Some(e.to_string()),
        },
    };
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryFailure {
    pub story_id: String,
    pub stage: ExtractionStage,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct ExtractionOutcome {
    /// Final-stage lists, in corpus order.
    pub finals: Vec<CharacterConcepts>,
    /// Every stage record, grouped by story in corpus order.
    pub records: Vec<StageRecord>,
    pub failures: Vec<StoryFailure>,
    pub stories_in: usize,
}

impl ExtractionOutcome {
    pub fn records_for(&self, stage: ExtractionStage) -> impl Iterator<Item = &StageRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn completed_stories(&self) -> usize {
        self.stories_in - self.failures.len()
    }

    pub fn persist(&self, run_dir: &Path) -> Result<(), JsonlError> {
        for stage in ExtractionStage::ALL {
            let recs: Vec<&StageRecord> = self.records_for(stage).collect();
            write_jsonl(&run_dir.join(stage.file_name()), &recs)?;
        }
        write_jsonl(&run_dir.join("concepts.jsonl"), &self.finals)?;
        write_jsonl(&run_dir.join("extraction_failures.jsonl"), &self.failures)?;
        Ok(())
    }
}

pub fn load_concepts(path: &Path) -> Result<Vec<CharacterConcepts>, JsonlError> {
    read_jsonl(path)
}

pub fn load_stage_records(
    run_dir: &Path,
    stage: ExtractionStage,
) -> Result<Vec<StageRecord>, JsonlError> {
    read_jsonl(&run_dir.join(stage.file_name()))
}

fn extract_story(
    client: &ChatClient,
    config: &ExtractionConfig,
    story: &Story,
) -> (
    Vec<StageRecord>,
    Result<Vec<CharacterConcepts>, StoryFailure>,
) {
    let mut records = Vec::with_capacity(4);
    let mut prior: Vec<CharacterConcepts> = Vec::new();
    for stage in ExtractionStage::ALL {
        let fail = |reason: String| StoryFailure {
            story_id: story.record.id.clone(),
            stage,
            reason,
        };
        match run_stage(client, config, stage, story, &prior) {
            Ok(rec) if rec.parse_status == ParseStatus::Failed => {
                let reason = rec.error.clone().unwrap_or_default();
                records.push(rec);
                return (records, Err(fail(reason)));
            }
            Ok(rec) => {
                prior = rec.parsed.clone();
                records.push(rec);
            }
            Err(e) => return (records, Err(fail(e.to_string()))),
        }
    }
    (records, Ok(prior))
}

/// Runs all four stages over every story with bounded parallelism.
///
/// Per-story failures are recorded and excluded; the batch never aborts.
pub fn run_extraction(
    client: &ChatClient,
    config: &ExtractionConfig,
    stories: &[Story],
) -> ExtractionOutcome {
    type Slot = Option<(
        Vec<StageRecord>,
        Result<Vec<CharacterConcepts>, StoryFailure>,
    )>;
    let slots: Mutex<Vec<Slot>> = Mutex::new(vec![None; stories.len()]);
    let next = AtomicUsize::new(0);
    let workers = client.max_concurrency().min(stories.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= stories.len() {
                    break;
                }
                let result = extract_story(client, config, &stories[i]);
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });

    let mut outcome = ExtractionOutcome {
        stories_in: stories.len(),
        ..Default::default()
    };
    for slot in slots.into_inner().unwrap() {
        let (records, result) = slot.expect("every story processed");
        outcome.records.extend(records);
        match result {
            Ok(finals) => outcome.finals.extend(finals),
            Err(f) => outcome.failures.push(f),
        }
    }
    if !outcome.failures.is_empty() {
        log::warn!(
            "{} of {} stories excluded after extraction failures",
            outcome.failures.len(),
            outcome.stories_in
        );
    }
    outcome
}
