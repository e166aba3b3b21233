//! Run configuration and the generate → extract → unify → analyze → filter → report flow.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_records, load_stories, persist_records, record_id, StoryRecord};
use crate::exclusivity::{filter_associations, BiasAssociation, ExclusivityJudge};
use crate::extraction::{
    load_concepts, run_extraction, CharacterConcepts, ExtractionConfig, StoryFailure,
};
use crate::gateway::http::{BackendConfig, OpenAiCompatible};
use crate::gateway::mock::{MockBackend, MockScript};
use crate::gateway::{
    ChatBackend, ChatClient, ChatRequest, ClientOptions, EmbeddingBackend, EmbeddingClient,
    SamplingParams, TAG_GENERATE,
};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::prompts::{expand_prompts, GenerationKind, GenerationSetting, PromptInstance};
use crate::report::{write_reports, RunNotes};
use crate::stats::{
    aggregate_counts, select_significant, Selection, SignificantAssociation, StatsConfig,
};
use crate::taxonomy::{DemographicCategory, Taxonomy};
use crate::unify::{apply_mapping, embed_vocabulary, unify, vocabulary, UnifierConfig};

pub const BUILTIN_DEFAULT: &str = "builtin:default";
pub const BUILTIN_MINI: &str = "builtin:mini";

pub const STORIES_FILE: &str = "stories.jsonl";
pub const OPENBOX_PROMPTS_FILE: &str = "openbox_prompts.jsonl";
pub const CONCEPTS_FILE: &str = "concepts.jsonl";
pub const UNIFIED_FILE: &str = "unified_concepts.jsonl";
pub const UNIFY_MAP_FILE: &str = "unify_map.jsonl";
pub const SIGNIFICANT_FILE: &str = "significant.jsonl";
pub const SELECTION_SUMMARY_FILE: &str = "selection_summary.json";
pub const BIAS_FILE: &str = "bias_associations.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Generate,
    Extract,
    Unify,
    Analyze,
    Filter,
    Report,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Generate => "generate",
            Stage::Extract => "extract",
            Stage::Unify => "unify",
            Stage::Analyze => "analyze",
            Stage::Filter => "filter",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}\nfinished work is cached under the run directory; rerun `assocscan {stage}` or `assocscan run-all` to resume")]
    Stage { stage: Stage, message: String },
}

fn at<E: fmt::Display>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn default_mock_model() -> String {
    "mock".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendSpec {
    Mock {
        #[serde(default = "default_mock_model")]
        model: String,
    },
    OpenaiCompatible(BackendConfig),
}

impl BackendSpec {
    pub fn mock() -> Self {
        BackendSpec::Mock {
            model: default_mock_model(),
        }
    }

    pub fn model_id(&self) -> &str {
        match self {
            BackendSpec::Mock { model } => model,
            BackendSpec::OpenaiCompatible(c) => &c.model_id,
        }
    }
}

fn default_taxonomy() -> String {
    BUILTIN_DEFAULT.into()
}
fn default_setting() -> GenerationKind {
    GenerationKind::TwoBase
}
fn default_top_k() -> usize {
    10
}
fn default_backend() -> BackendSpec {
    BackendSpec::mock()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// A TOML file, `builtin:default` or `builtin:mini`.
    #[serde(default = "default_taxonomy")]
    pub taxonomy: String,
    #[serde(default = "default_setting")]
    pub setting: GenerationKind,
    /// Empty means every category the taxonomy configures.
    #[serde(default)]
    pub categories: Vec<DemographicCategory>,
    /// Overrides the taxonomy's per-category replicate count.
    #[serde(default)]
    pub stories_per_cell: Option<u32>,
    #[serde(default)]
    pub swap_order: bool,
    pub run_dir: PathBuf,
    /// Seeds the representative draw of the unifier.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_backend")]
    pub generation: BackendSpec,
    #[serde(default = "default_backend")]
    pub extraction: BackendSpec,
    #[serde(default = "default_backend")]
    pub embedding: BackendSpec,
    /// Exclusivity judge; defaults to the extraction backend.
    #[serde(default)]
    pub judge: Option<BackendSpec>,
    #[serde(default)]
    pub unifier: UnifierThreshold,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_true")]
    pub format_instruction: bool,
    /// Behaviour of every `mock` backend.
    #[serde(default)]
    pub mock: Option<MockScript>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnifierThreshold {
    pub threshold: f64,
}

impl Default for UnifierThreshold {
    fn default() -> Self {
        Self {
            threshold: UnifierConfig::default().threshold,
        }
    }
}

impl RunConfig {
    /// An all-mock configuration rooted at `run_dir`.
    pub fn mock(run_dir: impl Into<PathBuf>) -> Self {
        Self {
            taxonomy: default_taxonomy(),
            setting: default_setting(),
            categories: Vec::new(),
            stories_per_cell: None,
            swap_order: false,
            run_dir: run_dir.into(),
            seed: 0,
            generation: BackendSpec::mock(),
            extraction: BackendSpec::mock(),
            embedding: BackendSpec::mock(),
            judge: None,
            unifier: UnifierThreshold::default(),
            stats: StatsConfig::default(),
            top_k: default_top_k(),
            format_instruction: true,
            mock: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn unifier_config(&self) -> UnifierConfig {
        UnifierConfig {
            threshold: self.unifier.threshold,
            seed: self.seed,
        }
    }

    pub fn load_taxonomy(&self) -> Result<Taxonomy, PipelineError> {
        resolve_taxonomy(&self.taxonomy)
    }

    fn judge_spec(&self) -> &BackendSpec {
        self.judge.as_ref().unwrap_or(&self.extraction)
    }
}

/// Loads `builtin:default`, `builtin:mini` or a taxonomy TOML file.
pub fn resolve_taxonomy(source: &str) -> Result<Taxonomy, PipelineError> {
    match source {
        BUILTIN_DEFAULT => Ok(Taxonomy::bundled()),
        BUILTIN_MINI => Ok(Taxonomy::mini()),
        path => {
            if !Path::new(path).exists() {
                return Err(PipelineError::Config(format!(
                    "taxonomy file {path} does not exist"
                )));
            }
            Taxonomy::from_path(path).map_err(|e| PipelineError::Config(e.to_string()))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub items: usize,
    pub excluded: usize,
    pub backend_calls: usize,
    pub cache_hits: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stages: Vec<StageSummary>,
    pub bias_associations: usize,
}

impl RunSummary {
    pub fn backend_calls(&self) -> usize {
        self.stages.iter().map(|s| s.backend_calls).sum()
    }
}

/// A validated configuration bound to its taxonomy and run directory.
pub struct Pipeline {
    config: RunConfig,
    taxonomy: Taxonomy,
    categories: Vec<DemographicCategory>,
}

impl Pipeline {
    /// Validates everything that can be checked before doing any work.
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        let taxonomy = config.load_taxonomy()?;
        let categories = if config.categories.is_empty() {
            taxonomy.categories()
        } else {
            config.categories.clone()
        };
        for &c in &categories {
            taxonomy
                .rules(c)
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        config
            .stats
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let t = config.unifier.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(PipelineError::Config(format!(
                "unifier threshold must lie in (0, 1), got {t}"
            )));
        }
        if config.top_k == 0 {
            return Err(PipelineError::Config("top_k must be at least 1".into()));
        }
        if config.stories_per_cell == Some(0) {
            return Err(PipelineError::Config(
                "stories_per_cell must be at least 1".into(),
            ));
        }
        Ok(Self {
            config,
            taxonomy,
            categories,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn categories(&self) -> &[DemographicCategory] {
        &self.categories
    }

    pub fn run_dir(&self) -> &Path {
        &self.config.run_dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.config.run_dir.join(name)
    }

    /// Stores the config in the run directory; `raw` is written verbatim when given.
    pub fn persist_config(&self, raw: Option<&str>) -> Result<(), PipelineError> {
        let dir = self.run_dir();
        std::fs::create_dir_all(dir).map_err(at(Stage::Config))?;
        let text = raw
            .map(str::to_string)
            .unwrap_or_else(|| self.config.to_toml());
        std::fs::write(dir.join("config.toml"), text).map_err(at(Stage::Config))
    }

    fn options(&self, max_retries: u32, max_concurrency: usize) -> ClientOptions {
        ClientOptions {
            max_retries,
            max_concurrency,
            cache_dir: Some(self.path("cache")),
            ..Default::default()
        }
    }

    fn mock_backend(&self, model: &str) -> MockBackend {
        MockBackend::with_script(model, self.config.mock.clone().unwrap_or_default())
    }

    fn chat_client(&self, spec: &BackendSpec, stage: Stage) -> Result<ChatClient, PipelineError> {
        Ok(match spec {
            BackendSpec::Mock { model } => {
                let backend: Arc<dyn ChatBackend> = Arc::new(self.mock_backend(model));
                ChatClient::new(
                    backend,
                    ClientOptions {
                        base_delay: Duration::from_millis(1),
                        ..self.options(3, 4)
                    },
                )
            }
            BackendSpec::OpenaiCompatible(c) => {
                let backend: Arc<dyn ChatBackend> =
                    Arc::new(OpenAiCompatible::new(c.clone()).map_err(at(stage))?);
                ChatClient::new(backend, self.options(c.max_retries, c.max_concurrency))
            }
        })
    }

    fn embedding_client(&self) -> Result<EmbeddingClient, PipelineError> {
        Ok(match &self.config.embedding {
            BackendSpec::Mock { model } => {
                let backend: Arc<dyn EmbeddingBackend> = Arc::new(self.mock_backend(model));
                EmbeddingClient::new(backend, self.options(3, 4))
            }
            BackendSpec::OpenaiCompatible(c) => {
                let backend: Arc<dyn EmbeddingBackend> =
                    Arc::new(OpenAiCompatible::new(c.clone()).map_err(at(Stage::Unify))?);
                EmbeddingClient::new(backend, self.options(c.max_retries, c.max_concurrency))
            }
        })
    }

    /// Every prompt instance of the configured setting, category by category.
    pub fn prompts(&self) -> Result<Vec<PromptInstance>, PipelineError> {
        let mut out = Vec::new();
        for &category in &self.categories {
            let mut setting =
                GenerationSetting::for_category(self.config.setting, &self.taxonomy, category)
                    .map_err(at(Stage::Generate))?;
            if let Some(n) = self.config.stories_per_cell {
                setting.stories_per_cell = n;
            }
            setting.swap_order = self.config.swap_order;
            out.extend(
                expand_prompts(&self.taxonomy, &setting, category).map_err(at(Stage::Generate))?,
            );
        }
        Ok(out)
    }

    /// Generates missing stories; existing records in `stories.jsonl` are kept.
    ///
    /// The open-box setting only writes its prompts: the stories come from the
    /// Python patching generator, which writes `stories.jsonl` itself.
    pub fn generate(&self) -> Result<StageSummary, PipelineError> {
        let prompts = self.prompts()?;
        let stories_path = self.path(STORIES_FILE);
        if self.config.setting == GenerationKind::OpenBox {
            write_jsonl(&self.path(OPENBOX_PROMPTS_FILE), &prompts).map_err(at(Stage::Generate))?;
            if !stories_path.exists() {
                return Err(PipelineError::Stage {
                    stage: Stage::Generate,
                    message: format!(
                        "open-box stories are produced by the Python generator; {} prompts written to {}",
                        prompts.len(),
                        self.path(OPENBOX_PROMPTS_FILE).display()
                    ),
                });
            }
            let records =
                load_stories(&stories_path, &self.taxonomy).map_err(at(Stage::Generate))?;
            return Ok(StageSummary {
                stage: Stage::Generate.to_string(),
                items: records.len(),
                ..Default::default()
            });
        }

        let client = self.chat_client(&self.config.generation, Stage::Generate)?;
        let model = client.model_id().to_string();
        let existing: HashMap<String, StoryRecord> = if stories_path.exists() {
            load_records(&stories_path)
                .map_err(at(Stage::Generate))?
                .into_iter()
                .map(|r| (r.id.clone(), r))
                .collect()
        } else {
            HashMap::new()
        };

        let slots: Mutex<Vec<Option<Result<StoryRecord, String>>>> = Mutex::new(
            prompts
                .iter()
                .map(|p| {
                    existing
                        .get(&record_id(&p.rendered, &model, p.replicate_index))
                        .cloned()
                        .map(Ok)
                })
                .collect(),
        );
        let todo: Vec<usize> = slots
            .lock()
            .unwrap()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_none())
            .map(|(i, _)| i)
            .collect();
        let next = AtomicUsize::new(0);
        let params = SamplingParams::generation();
        std::thread::scope(|s| {
            for _ in 0..client.max_concurrency().min(todo.len()).max(1) {
                s.spawn(|| {
                    while let Some(&i) = todo.get(next.fetch_add(1, Ordering::Relaxed)) {
                        let p = &prompts[i];
                        let request =
                            ChatRequest::new(TAG_GENERATE, p.rendered.clone(), params.clone())
                                .with_salt(u64::from(p.replicate_index));
                        let result = client
                            .chat_complete(&request)
                            .map(|text| {
                                StoryRecord::from_prompt(
                                    p,
                                    &model,
                                    text,
                                    chrono::Utc::now().to_rfc3339(),
                                )
                            })
                            .map_err(|e| e.to_string());
                        slots.lock().unwrap()[i] = Some(result);
                    }
                });
            }
        });

        let mut records = Vec::with_capacity(prompts.len());
        let mut failures = Vec::new();
        for (p, slot) in prompts.iter().zip(slots.into_inner().unwrap()) {
            match slot.expect("every prompt handled") {
                Ok(r) => records.push(r),
                Err(reason) => failures.push(GenerationFailure {
                    prompt: p.rendered.clone(),
                    replicate_index: p.replicate_index,
                    reason,
                }),
            }
        }
        persist_records(&records, &stories_path).map_err(at(Stage::Generate))?;
        write_jsonl(&self.path("generation_failures.jsonl"), &failures)
            .map_err(at(Stage::Generate))?;
        if !failures.is_empty() {
            log::warn!(
                "{} prompts failed to generate; rerun to retry them",
                failures.len()
            );
        }
        Ok(StageSummary {
            stage: Stage::Generate.to_string(),
            items: records.len(),
            excluded: failures.len(),
            backend_calls: client.backend_calls(),
            cache_hits: client.cache_hits(),
        })
    }

    pub fn extract(&self) -> Result<StageSummary, PipelineError> {
        let stories =
            load_stories(&self.path(STORIES_FILE), &self.taxonomy).map_err(at(Stage::Extract))?;
        let client = self.chat_client(&self.config.extraction, Stage::Extract)?;
        let config = ExtractionConfig {
            append_format_instruction: self.config.format_instruction,
            ..Default::default()
        };
        let outcome = run_extraction(&client, &config, &stories);
        outcome
            .persist(self.run_dir())
            .map_err(at(Stage::Extract))?;
        Ok(StageSummary {
            stage: Stage::Extract.to_string(),
            items: outcome.completed_stories(),
            excluded: outcome.failures.len(),
            backend_calls: client.backend_calls(),
            cache_hits: client.cache_hits(),
        })
    }

    pub fn unify(&self) -> Result<StageSummary, PipelineError> {
        let lists = load_concepts(&self.path(CONCEPTS_FILE)).map_err(at(Stage::Unify))?;
        let vocab = vocabulary(&lists);
        let client = self.embedding_client()?;
        let embeddings = embed_vocabulary(&client, &vocab).map_err(at(Stage::Unify))?;
        let unification =
            unify(&embeddings, &self.config.unifier_config()).map_err(at(Stage::Unify))?;
        unification
            .persist(&self.path(UNIFY_MAP_FILE))
            .map_err(at(Stage::Unify))?;
        let unified = apply_mapping(&lists, &unification.mapping).map_err(at(Stage::Unify))?;
        write_jsonl(&self.path(UNIFIED_FILE), &unified).map_err(at(Stage::Unify))?;
        Ok(StageSummary {
            stage: Stage::Unify.to_string(),
            items: unification.clusters.len(),
            excluded: 0,
            backend_calls: client.backend_calls(),
            cache_hits: 0,
        })
    }

    pub fn analyze(&self) -> Result<Selection, PipelineError> {
        let lists: Vec<CharacterConcepts> =
            read_jsonl(&self.path(UNIFIED_FILE)).map_err(at(Stage::Analyze))?;
        let tables = aggregate_counts(&lists, &self.taxonomy).map_err(at(Stage::Analyze))?;
        let selection =
            select_significant(&tables, &self.config.stats).map_err(at(Stage::Analyze))?;
        write_jsonl(&self.path(SIGNIFICANT_FILE), &selection.associations)
            .map_err(at(Stage::Analyze))?;
        let summary = serde_json::to_string_pretty(&selection.summary).expect("summary serializes");
        std::fs::write(self.path(SELECTION_SUMMARY_FILE), summary + "\n")
            .map_err(at(Stage::Analyze))?;
        Ok(selection)
    }

    pub fn filter(&self) -> Result<StageSummary, PipelineError> {
        let significant: Vec<SignificantAssociation> =
            read_jsonl(&self.path(SIGNIFICANT_FILE)).map_err(at(Stage::Filter))?;
        let client = self.chat_client(self.config.judge_spec(), Stage::Filter)?;
        let judge = ExclusivityJudge::new(&client, SamplingParams::extraction());
        let outcome = filter_associations(&judge, &significant).map_err(at(Stage::Filter))?;
        outcome.persist(self.run_dir()).map_err(at(Stage::Filter))?;
        Ok(StageSummary {
            stage: Stage::Filter.to_string(),
            items: outcome.kept.len(),
            excluded: outcome.excluded.len(),
            backend_calls: client.backend_calls(),
            cache_hits: client.cache_hits(),
        })
    }

    pub fn report(&self) -> Result<usize, PipelineError> {
        let count_lines = |name: &str| -> Result<usize, PipelineError> {
            let p = self.path(name);
            if !p.exists() {
                return Ok(0);
            }
            Ok(std::fs::read_to_string(p)
                .map_err(at(Stage::Report))?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .count())
        };
        let selection: crate::stats::SelectionSummary =
            std::fs::read_to_string(self.path(SELECTION_SUMMARY_FILE))
                .map_err(at(Stage::Report))
                .and_then(|t| serde_json::from_str(&t).map_err(at(Stage::Report)))?;
        let kept: Vec<BiasAssociation> =
            read_jsonl(&self.path(BIAS_FILE)).map_err(at(Stage::Report))?;
        let failures: Vec<StoryFailure> =
            read_jsonl(&self.path("extraction_failures.jsonl")).map_err(at(Stage::Report))?;
        let notes = RunNotes {
            stories: count_lines(STORIES_FILE)?,
            excluded_stories: failures.len(),
            tested_concepts: selection.tested,
            excluded_identities: selection.excluded_identities,
            flagged_verdicts: kept
                .iter()
                .filter(|b| b.flagged)
                .map(|b| {
                    (
                        b.association.concept.clone(),
                        b.association.identity.clone(),
                    )
                })
                .collect(),
        };
        let unified: Option<Vec<CharacterConcepts>> = match self.path(UNIFIED_FILE) {
            p if p.exists() => Some(read_jsonl(&p).map_err(at(Stage::Report))?),
            _ => None,
        };
        let files = write_reports(
            self.run_dir(),
            &self.taxonomy,
            self.config.setting.as_str(),
            &self.categories,
            self.config.top_k,
            &notes,
            unified.as_deref(),
        )
        .map_err(at(Stage::Report))?;
        Ok(files.table.total())
    }

    /// Runs every stage in order; each stage resumes from cached work.
    pub fn run_all(&self, raw_config: Option<&str>) -> Result<RunSummary, PipelineError> {
        self.persist_config(raw_config)?;
        let mut summary = RunSummary::default();
        summary.stages.push(self.generate()?);
        summary.stages.push(self.extract()?);
        summary.stages.push(self.unify()?);
        let selection = self.analyze()?;
        summary.stages.push(StageSummary {
            stage: Stage::Analyze.to_string(),
            items: selection.associations.len(),
            ..Default::default()
        });
        summary.stages.push(self.filter()?);
        summary.bias_associations = self.report()?;
        Ok(summary)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub prompt: String,
    pub replicate_index: u32,
    pub reason: String,
}

/// Parses and validates a config, then runs every stage.
pub fn run_all(config: RunConfig) -> Result<RunSummary, PipelineError> {
    Pipeline::new(config)?.run_all(None)
}
