//! Python bindings. Structured results cross the boundary as JSON and are
//! decoded with the `json` module, so Python sees plain dicts and lists.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use assocscan::corpus::{load_records, CorpusError};
use assocscan::eval::{eval_stages, EvalError, EvalReport, GoldAnnotations, StageArtifacts};
use assocscan::exclusivity::BiasAssociation;
use assocscan::jsonl::{read_jsonl, JsonlError};
use assocscan::metrics::{homogeneity_completeness_v, MetricsError};
use assocscan::pipeline::{
    resolve_taxonomy, Pipeline, PipelineError, RunConfig, RunSummary, BIAS_FILE,
};
use assocscan::prompts::{
    expand_prompts, GenerationKind, GenerationSetting, PromptError, PromptInstance,
};
use assocscan::stats::{
    chi_square_independence, chi_square_sf, distinctiveness_score, ChiSquareResult, StatsError,
};
use assocscan::taxonomy::{DemographicCategory, Taxonomy, TaxonomyError};
use assocscan::unify::{unify, ConceptEmbedding, Unification, UnifierConfig, UnifyError};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;
use thiserror::Error;

create_exception!(assocscan_py, AssocscanError, PyException);

#[derive(Debug, Error)]
pub enum BindingError {
    #[error("{0} concepts but {1} vectors")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Unify(#[from] UnifyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<BindingError> for PyErr {
    fn from(e: BindingError) -> Self {
        AssocscanError::new_err(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, BindingError>;

/// Prompt instances for one setting and demographic category.
pub fn prompts_for(
    taxonomy: &Taxonomy,
    setting: &str,
    category: &str,
) -> Result<Vec<PromptInstance>> {
    let category = DemographicCategory::from_str(category)?;
    let setting =
        GenerationSetting::for_category(GenerationKind::from_str(setting)?, taxonomy, category)?;
    Ok(expand_prompts(taxonomy, &setting, category)?)
}

pub fn unify_concepts(
    concepts: Vec<String>,
    vectors: Vec<Vec<f64>>,
    threshold: f64,
    seed: u64,
) -> Result<Unification> {
    if concepts.len() != vectors.len() {
        return Err(BindingError::LengthMismatch(concepts.len(), vectors.len()));
    }
    let embeddings: Vec<ConceptEmbedding> = concepts
        .into_iter()
        .zip(vectors)
        .map(|(concept, vector)| ConceptEmbedding { concept, vector })
        .collect();
    Ok(unify(&embeddings, &UnifierConfig { threshold, seed })?)
}

/// Loads a config file and optionally points it at another run directory.
pub fn load_config(config: &Path, run_dir: Option<PathBuf>) -> Result<RunConfig> {
    let mut c = RunConfig::from_path(config)?;
    if let Some(dir) = run_dir {
        c.run_dir = dir;
    }
    Ok(c)
}

pub fn run_config(config: RunConfig) -> Result<RunSummary> {
    Ok(Pipeline::new(config)?.run_all(None)?)
}

pub fn evaluate(run_dir: &Path, gold: &Path) -> Result<EvalReport> {
    let artifacts = StageArtifacts::load(run_dir)?;
    Ok(eval_stages(&artifacts, &GoldAnnotations::from_path(gold)?)?)
}

pub fn bias_associations(run_dir: &Path) -> Result<Vec<BiasAssociation>> {
    Ok(read_jsonl(&run_dir.join(BIAS_FILE))?)
}

fn to_python<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(BindingError::from)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A location and demographic taxonomy.
#[pyclass(name = "Taxonomy", frozen, skip_from_py_object)]
pub struct PyTaxonomy {
    inner: Taxonomy,
}

#[pymethods]
impl PyTaxonomy {
    /// `builtin:default`, `builtin:mini` or a TOML path.
    #[new]
    #[pyo3(signature = (source = "builtin:default"))]
    fn new(source: &str) -> PyResult<Self> {
        let inner = resolve_taxonomy(source).map_err(BindingError::from)?;
        Ok(Self { inner })
    }

    fn categories(&self) -> Vec<&'static str> {
        self.inner
            .categories()
            .into_iter()
            .map(DemographicCategory::as_str)
            .collect()
    }

    fn location_categories(&self) -> Vec<String> {
        self.inner.location_categories().to_vec()
    }

    fn locations(&self) -> Vec<String> {
        self.inner
            .locations()
            .iter()
            .map(|l| l.name.clone())
            .collect()
    }

    fn identities(&self, category: &str) -> PyResult<Vec<String>> {
        let c = DemographicCategory::from_str(category).map_err(BindingError::from)?;
        Ok(self
            .inner
            .identities_in(c)
            .map(|i| i.label.clone())
            .collect())
    }

    fn prompt_count(&self, setting: &str, category: &str) -> PyResult<usize> {
        Ok(prompts_for(&self.inner, setting, category)?.len())
    }

    /// Prompt instances as dicts.
    fn expand_prompts<'py>(
        &self,
        py: Python<'py>,
        setting: &str,
        category: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        to_python(py, &prompts_for(&self.inner, setting, category)?)
    }

    fn __repr__(&self) -> String {
        format!(
            "Taxonomy({} locations, {} identities)",
            self.inner.locations().len(),
            self.inner.identities().len()
        )
    }
}

/// Story records from a JSONL corpus file, validated record by record.
#[pyfunction(name = "load_records")]
fn py_load_records<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let records = load_records(&path).map_err(BindingError::from)?;
    to_python(py, &records)
}

#[pyfunction(name = "distinctiveness_score")]
fn py_distinctiveness_score(n_a: u64, n_b_min: u64, total: u64) -> PyResult<f64> {
    Ok(distinctiveness_score(n_a, n_b_min, total).map_err(BindingError::from)?)
}

#[pyfunction(name = "chi_square_sf")]
fn py_chi_square_sf(x: f64, df: u32) -> PyResult<f64> {
    Ok(chi_square_sf(x, df).map_err(BindingError::from)?)
}

/// Pearson test on a k x 2 table of (with concept, without concept) rows.
#[pyfunction(name = "chi_square_independence")]
#[pyo3(signature = (rows, min_expected_warn = 5.0))]
fn py_chi_square_independence<'py>(
    py: Python<'py>,
    rows: Vec<(u64, u64)>,
    min_expected_warn: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let r: ChiSquareResult =
        chi_square_independence(&rows, min_expected_warn).map_err(BindingError::from)?;
    to_python(py, &r)
}

/// Returns (homogeneity, completeness, v_measure).
#[pyfunction(name = "homogeneity_completeness_v")]
fn py_homogeneity_completeness_v(pred: Vec<i64>, gold: Vec<i64>) -> PyResult<(f64, f64, f64)> {
    let r = homogeneity_completeness_v(&pred, &gold).map_err(BindingError::from)?;
    Ok((r.homogeneity, r.completeness, r.v_measure))
}

/// Maps each concept to its cluster representative.
#[pyfunction(name = "unify")]
#[pyo3(signature = (concepts, vectors, threshold = 0.63, seed = 0))]
fn py_unify(
    concepts: Vec<String>,
    vectors: Vec<Vec<f64>>,
    threshold: f64,
    seed: u64,
) -> PyResult<std::collections::BTreeMap<String, String>> {
    Ok(unify_concepts(concepts, vectors, threshold, seed)?.mapping)
}

/// Runs every stage for a config file; returns the run summary.
#[pyfunction(name = "run_all")]
#[pyo3(signature = (config, run_dir = None))]
fn py_run_all<'py>(
    py: Python<'py>,
    config: PathBuf,
    run_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let config = load_config(&config, run_dir)?;
    let summary = py.detach(|| run_config(config))?;
    to_python(py, &summary)
}

/// All-mock run over the given taxonomy.
#[pyfunction(name = "run_mock")]
#[pyo3(signature = (run_dir, taxonomy = "builtin:mini", seed = 0))]
fn py_run_mock<'py>(
    py: Python<'py>,
    run_dir: PathBuf,
    taxonomy: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let mut config = RunConfig::mock(run_dir);
    config.taxonomy = taxonomy.to_string();
    config.seed = seed;
    let summary = py.detach(|| run_config(config))?;
    to_python(py, &summary)
}

#[pyfunction(name = "bias_associations")]
fn py_bias_associations<'py>(py: Python<'py>, run_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_python(py, &bias_associations(&run_dir)?)
}

/// Stage metrics R, P, DA, H, C, V and EA against gold annotations.
#[pyfunction(name = "eval_stages")]
fn py_eval_stages<'py>(
    py: Python<'py>,
    run_dir: PathBuf,
    gold: PathBuf,
) -> PyResult<Bound<'py, PyAny>> {
    to_python(py, &evaluate(&run_dir, &gold)?)
}

#[pymodule]
fn assocscan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AssocscanError", m.py().get_type::<AssocscanError>())?;
    m.add_class::<PyTaxonomy>()?;
    m.add_function(wrap_pyfunction!(py_load_records, m)?)?;
    m.add_function(wrap_pyfunction!(py_distinctiveness_score, m)?)?;
    m.add_function(wrap_pyfunction!(py_chi_square_sf, m)?)?;
    m.add_function(wrap_pyfunction!(py_chi_square_independence, m)?)?;
    m.add_function(wrap_pyfunction!(py_homogeneity_completeness_v, m)?)?;
    m.add_function(wrap_pyfunction!(py_unify, m)?)?;
    m.add_function(wrap_pyfunction!(py_run_all, m)?)?;
    m.add_function(wrap_pyfunction!(py_run_mock, m)?)?;
    m.add_function(wrap_pyfunction!(py_bias_associations, m)?)?;
    m.add_function(wrap_pyfunction!(py_eval_stages, m)?)?;
    Ok(())
}
