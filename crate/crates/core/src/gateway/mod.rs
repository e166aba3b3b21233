//! Chat-completion and embedding clients.
//!
//! [`ChatClient`] and [`EmbeddingClient`] wrap a backend with a response
//! cache, bounded exponential-backoff retries and a cap on in-flight
//! requests. Backends are the OpenAI-compatible HTTP client in [`http`] and
//! the deterministic [`mock::MockBackend`].

mod cache;
pub mod http;
pub mod mock;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::ResponseCache;

pub const TAG_GENERATE: &str = "generate";
pub const TAG_JUDGE: &str = "judge";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("authentication failed (HTTP {status})")]
    Auth { status: u16 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        last: Box<GatewayError>,
    },
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("backend returned {got} embeddings for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("cannot embed a zero vector for {0:?}")]
    ZeroVector(String),
    #[error("embedding request has no texts")]
    EmptyInput,
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("missing API key: environment variable {0} is not set")]
    MissingApiKey(String),
}

impl GatewayError {
    pub fn is_transient(&self) -> bool {
        match self {
            Self::Http { status, .. } => *status == 429 || *status >= 500,
            Self::Transport(_) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    #[serde(default)]
    pub frequency_penalty: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_p: Option<f64>,
}

impl SamplingParams {
    /// Story generation: temperature 0.9, top_p 1, frequency penalty 0.6, 2048 tokens.
    pub fn generation() -> Self {
        Self {
            temperature: 0.9,
            top_p: 1.0,
            top_k: None,
            frequency_penalty: 0.6,
            max_tokens: 2048,
            min_p: None,
        }
    }

    /// Extraction and judging: temperature 0.7, top_p 0.8, top_k 20, min_p 0.
    pub fn extraction() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.8,
            top_k: Some(20),
            frequency_penalty: 0.0,
            max_tokens: 2048,
            min_p: Some(0.0),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidParams(format!(
                "temperature {} < 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidParams(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidParams(
                "max_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One chat request. `tag` names the pipeline stage; `salt` distinguishes
/// replicate requests whose prompts are identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub tag: String,
    pub prompt: String,
    pub params: SamplingParams,
    #[serde(default)]
    pub salt: u64,
}

impl ChatRequest {
    pub fn new(tag: &str, prompt: impl Into<String>, params: SamplingParams) -> Self {
        Self {
            tag: tag.to_string(),
            prompt: prompt.into(),
            params,
            salt: 0,
        }
    }

    pub fn with_salt(mut self, salt: u64) -> Self {
        self.salt = salt;
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default)]
    pub usage: Option<Usage>,
}

/// A cached request/response pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub model_id: String,
    pub tag: String,
    pub prompt: String,
    pub params: SamplingParams,
    pub salt: u64,
    pub response_text: String,
    #[serde(default)]
    pub usage: Option<Usage>,
}

pub trait ChatBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

#[derive(Clone, Debug)]
pub struct ClientOptions {
    pub max_retries: u32,
    pub max_concurrency: usize,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub cache_dir: Option<PathBuf>,
    pub embed_batch_size: usize,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            max_retries: 3,
            max_concurrency: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
            cache_dir: None,
            embed_batch_size: 64,
        }
    }
}

/// Caps the number of requests in flight.
#[derive(Debug)]
pub(crate) struct Limiter {
    slots: Mutex<usize>,
    freed: Condvar,
}

pub(crate) struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            slots: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut slots = self.slots.lock().unwrap();
        while *slots == 0 {
            slots = self.freed.wait(slots).unwrap();
        }
        *slots -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.slots.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

fn with_retries<T>(
    opts: &ClientOptions,
    limiter: &Limiter,
    calls: &AtomicUsize,
    mut f: impl FnMut() -> Result<T, GatewayError>,
) -> Result<T, GatewayError> {
    let mut attempt = 0u32;
    loop {
        let result = {
            let _permit = limiter.acquire();
            calls.fetch_add(1, Ordering::Relaxed);
            f()
        };
        match result {
            Ok(v) => return Ok(v),
            Err(e) if e.is_transient() && attempt < opts.max_retries => {
                let delay = opts
                    .base_delay
                    .saturating_mul(1u32 << attempt.min(16))
                    .min(opts.max_delay);
                log::warn!("transient backend error ({e}); retrying in {delay:?}");
                std::thread::sleep(delay);
                attempt += 1;
            }
            Err(e) if e.is_transient() => {
                return Err(GatewayError::Exhausted {
                    attempts: attempt + 1,
                    last: Box::new(e),
                })
            }
            Err(e) => return Err(e),
        }
    }
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub struct ChatClient {
    backend: Arc<dyn ChatBackend>,
    opts: ClientOptions,
    limiter: Limiter,
    disk: Option<ResponseCache>,
    memory: Mutex<HashMap<String, String>>,
    calls: AtomicUsize,
    hits: AtomicUsize,
}

impl ChatClient {
    pub fn new(backend: Arc<dyn ChatBackend>, opts: ClientOptions) -> Self {
        Self {
            limiter: Limiter::new(opts.max_concurrency),
            disk: opts.cache_dir.clone().map(ResponseCache::new),
            backend,
            opts,
            memory: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        }
    }

    pub fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    pub fn max_concurrency(&self) -> usize {
        self.opts.max_concurrency.max(1)
    }

    /// Backend requests issued so far, retries included.
    pub fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn cache_key(&self, request: &ChatRequest) -> String {
        let params = serde_json::to_vec(&request.params).expect("params serialize");
        sha256_hex(&[
            self.model_id().as_bytes(),
            request.prompt.as_bytes(),
            &params,
            &request.salt.to_le_bytes(),
        ])
    }

    pub fn chat_complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        request.params.validate()?;
        let key = self.cache_key(request);
        if let Some(text) = self.memory.lock().unwrap().get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(text.clone());
        }
        if let Some(disk) = &self.disk {
            if let Some(ex) = disk.get::<ChatExchange>(self.model_id(), &key) {
                self.hits.fetch_add(1, Ordering::Relaxed);
                self.memory
                    .lock()
                    .unwrap()
                    .insert(key, ex.response_text.clone());
                return Ok(ex.response_text);
            }
        }

        let completion = with_retries(&self.opts, &self.limiter, &self.calls, || {
            self.backend.complete(request)
        })?;
        if completion.text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion);
        }
        if let Some(disk) = &self.disk {
            let ex = ChatExchange {
                model_id: self.model_id().to_string(),
                tag: request.tag.clone(),
                prompt: request.prompt.clone(),
                params: request.params.clone(),
                salt: request.salt,
                response_text: completion.text.clone(),
                usage: completion.usage,
            };
            if let Err(e) = disk.put(self.model_id(), &key, &ex) {
                log::warn!("failed to write cache entry {key}: {e}");
            }
        }
        self.memory
            .lock()
            .unwrap()
            .insert(key, completion.text.clone());
        Ok(completion.text)
    }
}

#[derive(Serialize, Deserialize)]
struct CachedEmbedding {
    text: String,
    vector: Vec<f64>,
}

pub struct EmbeddingClient {
    backend: Arc<dyn EmbeddingBackend>,
    opts: ClientOptions,
    limiter: Limiter,
    disk: Option<ResponseCache>,
    calls: AtomicUsize,
}

impl EmbeddingClient {
    pub fn new(backend: Arc<dyn EmbeddingBackend>, opts: ClientOptions) -> Self {
        Self {
            limiter: Limiter::new(opts.max_concurrency),
            disk: opts.cache_dir.clone().map(ResponseCache::new),
            backend,
            opts,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    pub fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn key(&self, text: &str) -> String {
        sha256_hex(&[self.model_id().as_bytes(), b"embed", text.as_bytes()])
    }

    /// Embeds `texts` in order, returning unit-norm vectors.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        let mut missing = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            match self
                .disk
                .as_ref()
                .and_then(|d| d.get::<CachedEmbedding>(self.model_id(), &self.key(t)))
            {
                Some(c) if &c.text == t => out[i] = Some(c.vector),
                _ => missing.push(i),
            }
        }

        for chunk in missing.chunks(self.opts.embed_batch_size.max(1)) {
            let batch: Vec<String> = chunk.iter().map(|&i| texts[i].clone()).collect();
            let vectors = with_retries(&self.opts, &self.limiter, &self.calls, || {
                self.backend.embed_batch(&batch)
            })?;
            if vectors.len() != batch.len() {
                return Err(GatewayError::CountMismatch {
                    expected: batch.len(),
                    got: vectors.len(),
                });
            }
            for ((&i, text), v) in chunk.iter().zip(&batch).zip(vectors) {
                let v = normalize(v).ok_or_else(|| GatewayError::ZeroVector(text.clone()))?;
                if let Some(d) = &self.disk {
                    let entry = CachedEmbedding {
                        text: text.clone(),
                        vector: v.clone(),
                    };
                    if let Err(e) = d.put(self.model_id(), &self.key(text), &entry) {
                        log::warn!("failed to cache embedding: {e}");
                    }
                }
                out[i] = Some(v);
            }
        }

        let out: Vec<Vec<f64>> = out.into_iter().map(|v| v.expect("filled")).collect();
        let dim = out[0].len();
        if let Some(bad) = out.iter().find(|v| v.len() != dim) {
            return Err(GatewayError::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(out)
    }
}

pub(crate) fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}
