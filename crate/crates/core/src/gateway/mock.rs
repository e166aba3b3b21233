//! Deterministic offline backend.
//!
//! Responses come from a table keyed by `(stage tag, sha256(prompt))`. Anything
//! not in the table falls back to a seeded procedural responder that mimics
//! each pipeline stage:
//!
//! * `generate` writes a short story with one `"<name> is described as <concept>."`
//!   line per character concept. Concepts come from `vocabulary` and from
//!   `planted` rules, which fire on an exact fraction of replicates.
//! * `extract` collects those lines into a headed bullet list.
//! * `refine1`, `decompose` and `refine2` echo the phrase block they were given.
//! * `judge` answers YES for phrases listed in `exclusive` or equal to the
//!   identity label, NO otherwise.
//!
//! Embeddings are seeded hash-derived unit vectors; `aliases` maps a text onto
//! a perturbation of another text's vector.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    ChatBackend, ChatRequest, Completion, EmbeddingBackend, GatewayError, TAG_GENERATE, TAG_JUDGE,
};
use crate::extraction::{ExtractionStage, FORMAT_INSTRUCTION};

fn default_period() -> u32 {
    20
}
fn default_dim() -> usize {
    64
}
fn default_traits() -> usize {
    3
}
fn default_vocabulary() -> Vec<String> {
    [
        "supportive",
        "observant",
        "determined",
        "anxious",
        "curious",
        "patient",
        "confident",
        "hardworking",
        "empathetic",
        "organized",
        "creative",
        "cautious",
    ]
    .map(String::from)
    .to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedConcept {
    /// Descriptor surfaces the rule applies to.
    pub descriptors: Vec<String>,
    pub concept: String,
    /// Fraction of replicates (per `period`) in which the concept appears.
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedResponse {
    pub tag: String,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub prompt_sha256: Option<String>,
    pub response: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_period")]
    pub period: u32,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_vocabulary")]
    pub vocabulary: Vec<String>,
    #[serde(default = "default_traits")]
    pub traits_per_character: usize,
    #[serde(default)]
    pub planted: Vec<PlantedConcept>,
    #[serde(default)]
    pub exclusive: Vec<String>,
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
    #[serde(default)]
    pub responses: Vec<ScriptedResponse>,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            seed: 0,
            period: default_period(),
            embedding_dim: default_dim(),
            vocabulary: default_vocabulary(),
            traits_per_character: default_traits(),
            planted: Vec::new(),
            exclusive: Vec::new(),
            aliases: BTreeMap::new(),
            responses: Vec::new(),
        }
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

fn hash64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub struct MockBackend {
    model_id: String,
    script: MockScript,
    table: HashMap<(String, String), String>,
    latency: Duration,
    failures: Mutex<VecDeque<GatewayError>>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    story_re: Regex,
    single_re: Regex,
    trait_re: Regex,
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl MockBackend {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self::with_script(model_id, MockScript::default())
    }

    pub fn with_script(model_id: impl Into<String>, script: MockScript) -> Self {
        let mut table = HashMap::new();
        for r in &script.responses {
            let hash = match (&r.prompt, &r.prompt_sha256) {
                (Some(p), _) => prompt_hash(p),
                (None, Some(h)) => h.to_ascii_lowercase(),
                (None, None) => continue,
            };
            table.insert((r.tag.clone(), hash), r.response.clone());
        }
        Self {
            model_id: model_id.into(),
            script,
            table,
            latency: Duration::ZERO,
            failures: Mutex::new(VecDeque::new()),
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            story_re: Regex::new(
                r"featuring (.+?) and (.+?) at the location of (.+?) in a real-world situation",
            )
            .expect("regex"),
            single_re: Regex::new(
                r"featuring (.+?) at the location of (.+?) in a real-world situation",
            )
            .expect("regex"),
            trait_re: Regex::new(r"^(.+?) is described as (.+)\.$").expect("regex"),
        }
    }

    pub fn with_response(mut self, tag: &str, prompt: &str, response: &str) -> Self {
        self.table
            .insert((tag.to_string(), prompt_hash(prompt)), response.to_string());
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Queues an error returned by the next backend call.
    pub fn push_failure(&self, error: GatewayError) {
        self.failures.lock().unwrap().push_back(error);
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn enter(&self) -> InFlight<'_> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlight(&self.in_flight)
    }

    fn respond(&self, req: &ChatRequest) -> String {
        if let Some(r) = self.table.get(&(req.tag.clone(), prompt_hash(&req.prompt))) {
            return r.clone();
        }
        match req.tag.as_str() {
            TAG_GENERATE => self.story(req),
            TAG_JUDGE => self.judge(&req.prompt),
            t if t == ExtractionStage::Extract.tag() => self.extract(&req.prompt),
            t if ExtractionStage::ALL[1..].iter().any(|s| s.tag() == t) => {
                echo_phrases(&req.prompt)
            }
            _ => format!(
                "mock response {:016x}",
                hash64(&[
                    &self.script.seed.to_le_bytes(),
                    req.prompt.as_bytes(),
                    &req.salt.to_le_bytes()
                ])
            ),
        }
    }

    fn planted_present(&self, rule: &PlantedConcept, salt: u64) -> bool {
        let period = u64::from(self.script.period.max(1));
        let hits = (rule.rate * period as f64).round() as u64;
        let offset = hash64(&[rule.concept.as_bytes()]) % period;
        (salt + offset) % period < hits
    }

    fn story(&self, req: &ChatRequest) -> String {
        let (names, location): (Vec<&str>, &str) =
            if let Some(c) = self.story_re.captures(&req.prompt) {
                (
                    vec![c.get(1).unwrap().as_str(), c.get(2).unwrap().as_str()],
                    c.get(3).unwrap().as_str(),
                )
            } else if let Some(c) = self.single_re.captures(&req.prompt) {
                (vec![c.get(1).unwrap().as_str()], c.get(2).unwrap().as_str())
            } else {
                return format!(
                    "Once upon a time (mock story {:016x}).",
                    hash64(&[req.prompt.as_bytes(), &req.salt.to_le_bytes()])
                );
            };

        let mut lines = vec![format!(
            "At the {location}, {} went about the day.",
            names.join(" and ")
        )];
        for name in &names {
            let mut concepts: Vec<&str> = Vec::new();
            let vocab = &self.script.vocabulary;
            if !vocab.is_empty() {
                for k in 0..self.script.traits_per_character as u64 {
                    let idx = hash64(&[
                        &self.script.seed.to_le_bytes(),
                        req.prompt.as_bytes(),
                        &req.salt.to_le_bytes(),
                        name.as_bytes(),
                        &k.to_le_bytes(),
                    ]) % vocab.len() as u64;
                    let c = vocab[idx as usize].as_str();
                    if !concepts.contains(&c) {
                        concepts.push(c);
                    }
                }
            }
            for rule in &self.script.planted {
                if rule.descriptors.iter().any(|d| d == name)
                    && self.planted_present(rule, req.salt)
                    && !concepts.contains(&rule.concept.as_str())
                {
                    concepts.push(&rule.concept);
                }
            }
            for c in concepts {
                lines.push(format!("{name} is described as {c}."));
            }
        }
        lines.push("The day ended quietly.".into());
        lines.join("\n")
    }

    fn extract(&self, prompt: &str) -> String {
        let mut groups: Vec<(String, Vec<String>)> = Vec::new();
        for line in prompt.lines() {
            if let Some(c) = self.trait_re.captures(line.trim()) {
                let name = c[1].to_string();
                let concept = c[2].to_string();
                match groups.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, v)) => v.push(concept),
                    None => groups.push((name, vec![concept])),
                }
            }
        }
        if groups.is_empty() {
            return "I could not identify any characters in this story.".into();
        }
        groups
            .iter()
            .map(|(n, cs)| {
                let items: Vec<String> = cs.iter().map(|c| format!("- {c}")).collect();
                format!("**{n}**\n{}", items.join("\n"))
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    fn judge(&self, prompt: &str) -> String {
        let field = |name: &str| {
            prompt
                .lines()
                .find_map(|l| l.trim().strip_prefix(name).map(|v| v.trim().to_lowercase()))
                .unwrap_or_default()
        };
        let phrase = field("Phrase:");
        let identity = field("Identity:");
        let exclusive = phrase == identity
            || self
                .script
                .exclusive
                .iter()
                .any(|e| e.to_lowercase() == phrase);
        if exclusive { "YES" } else { "NO" }.to_string()
    }

    fn vector(&self, text: &str) -> Vec<f64> {
        let base = |t: &str| -> Vec<f64> {
            let mut rng =
                ChaCha8Rng::seed_from_u64(hash64(&[&self.script.seed.to_le_bytes(), t.as_bytes()]));
            (0..self.script.embedding_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        };
        match self.script.aliases.get(text) {
            Some(root) => base(root)
                .into_iter()
                .zip(base(text))
                .map(|(a, b)| a + 0.25 * b)
                .collect(),
            None => base(text),
        }
    }
}

fn echo_phrases(prompt: &str) -> String {
    match prompt.rfind("Phrases:") {
        Some(i) => prompt[i + "Phrases:".len()..]
            .lines()
            .filter(|l| !l.starts_with(FORMAT_INSTRUCTION))
            .collect::<Vec<_>>()
            .join("\n")
            .trim()
            .to_string(),
        None => "No phrases were provided.".into(),
    }
}

impl ChatBackend for MockBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let _guard = self.enter();
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        if let Some(e) = self.failures.lock().unwrap().pop_front() {
            return Err(e);
        }
        Ok(Completion {
            text: self.respond(request),
            usage: None,
        })
    }
}

impl EmbeddingBackend for MockBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let _guard = self.enter();
        if let Some(e) = self.failures.lock().unwrap().pop_front() {
            return Err(e);
        }
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}
