use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use assocscan::eval::{eval_stages, GoldAnnotations, StageArtifacts};
use assocscan::gateway::http::BackendConfig;
use assocscan::pipeline::{
    resolve_taxonomy, BackendSpec, Pipeline, RunConfig, StageSummary, BUILTIN_DEFAULT,
};
use assocscan::prompts::{expand_prompts, GenerationKind, GenerationSetting};
use assocscan::taxonomy::DemographicCategory;
use clap::{ArgAction, Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "assocscan",
    version,
    about = "Find identity-concept associations in generated stories"
)]
struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect a taxonomy.
    Taxonomy {
        #[command(subcommand)]
        action: TaxonomyCommand,
    },
    /// Generate stories, or write prompts for the open-box generator.
    Generate(RunArgs),
    /// Extract per-character concept lists from stories.
    Extract(RunArgs),
    /// Merge near-duplicate concepts.
    Unify(RunArgs),
    /// Count concepts and select significant associations.
    Analyze(RunArgs),
    /// Drop associations that hold by definition.
    Filter(RunArgs),
    /// Write count tables, rankings and breakdowns.
    Report(RunArgs),
    /// Run every stage, resuming from cached work.
    RunAll(RunArgs),
    /// Score stage outputs against hand annotations.
    Eval(EvalArgs),
}

#[derive(Subcommand)]
enum TaxonomyCommand {
    /// Check a taxonomy and print its size and prompt counts.
    Validate {
        /// `builtin:default`, `builtin:mini` or a TOML file.
        #[arg(default_value = BUILTIN_DEFAULT)]
        taxonomy: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML). Defaults to `<run-dir>/config.toml`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Start from an all-mock configuration.
    #[arg(long, conflicts_with = "config")]
    mock: bool,
    #[arg(long)]
    taxonomy: Option<String>,
    #[arg(long)]
    setting: Option<GenerationKind>,
    /// Repeatable; replaces the configured categories.
    #[arg(long = "category")]
    categories: Vec<DemographicCategory>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// OpenAI-compatible endpoint used for every model role.
    #[arg(long, requires = "model")]
    backend_url: Option<String>,
    #[arg(long, requires = "backend_url")]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, requires = "backend_url")]
    api_key_env: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Gold annotations (JSON).
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    json: bool,
}

impl RunArgs {
    fn overrides(&self) -> bool {
        self.taxonomy.is_some()
            || self.setting.is_some()
            || !self.categories.is_empty()
            || self.threshold.is_some()
            || self.alpha.is_some()
            || self.seed.is_some()
            || self.top_k.is_some()
            || self.backend_url.is_some()
            || (self.run_dir.is_some() && self.config.is_some())
    }

    /// The effective config plus its original text when nothing was overridden.
    fn resolve(&self) -> Result<(RunConfig, Option<String>)> {
        let (mut config, raw) = if let Some(path) = &self.config {
            let raw = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            (RunConfig::from_toml(&raw)?, Some(raw))
        } else if self.mock {
            let Some(dir) = &self.run_dir else {
                bail!("--mock needs --run-dir");
            };
            (RunConfig::mock(dir), None)
        } else if let Some(dir) = &self.run_dir {
            let path = dir.join("config.toml");
            if !path.exists() {
                bail!("{} not found; pass --config or --mock", path.display());
            }
            let raw = std::fs::read_to_string(&path)?;
            (RunConfig::from_toml(&raw)?, Some(raw))
        } else {
            bail!("pass --config, --run-dir or --mock");
        };
        if let Some(dir) = &self.run_dir {
            config.run_dir = dir.clone();
        }
        if let Some(t) = &self.taxonomy {
            config.taxonomy = t.clone();
        }
        if let Some(s) = self.setting {
            config.setting = s;
        }
        if !self.categories.is_empty() {
            config.categories = self.categories.clone();
        }
        if let Some(t) = self.threshold {
            config.unifier.threshold = t;
        }
        if let Some(a) = self.alpha {
            config.stats.alpha = a;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(k) = self.top_k {
            config.top_k = k;
        }
        if let (Some(url), Some(model)) = (&self.backend_url, &self.model) {
            let mut backend = BackendConfig::new(url.clone(), model.clone());
            backend.api_key_env = self.api_key_env.clone();
            let spec = BackendSpec::OpenaiCompatible(backend);
            config.generation = spec.clone();
            config.extraction = spec.clone();
            config.embedding = spec;
            config.judge = None;
        }
        Ok((config, if self.overrides() { None } else { raw }))
    }
}

fn print_stage(s: &StageSummary) {
    println!(
        "{:<9} {} items, {} excluded, {} backend calls, {} cache hits",
        s.stage, s.items, s.excluded, s.backend_calls, s.cache_hits
    );
}

fn print_report(run_dir: &Path) -> Result<()> {
    let path = run_dir.join("report.txt");
    print!(
        "{}",
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?
    );
    Ok(())
}

fn validate_taxonomy(source: &str) -> Result<()> {
    let t = resolve_taxonomy(source)?;
    println!(
        "{} locations in {} categories",
        t.locations().len(),
        t.location_categories().len()
    );
    for category in t.categories() {
        let count = |kind| -> Result<usize> {
            let setting = GenerationSetting::for_category(kind, &t, category)?;
            Ok(expand_prompts(&t, &setting, category)?.len())
        };
        println!(
            "{}: {} identities, {} descriptors, {} two-character prompts, {} single-character prompts",
            category.display_name(),
            t.identities_in(category).count(),
            t.descriptors_in(category).count(),
            count(GenerationKind::TwoBase)?,
            count(GenerationKind::SingleBase)?
        );
    }
    Ok(())
}

fn run_stage(command: &Command, args: &RunArgs) -> Result<()> {
    let (config, raw) = args.resolve()?;
    let pipeline = Pipeline::new(config)?;
    if !matches!(command, Command::RunAll(_)) {
        pipeline.persist_config(raw.as_deref())?;
    }
    match command {
        Command::Generate(_) => print_stage(&pipeline.generate()?),
        Command::Extract(_) => print_stage(&pipeline.extract()?),
        Command::Unify(_) => print_stage(&pipeline.unify()?),
        Command::Analyze(_) => {
            let selection = pipeline.analyze()?;
            let s = &selection.summary;
            println!(
                "analyze   {} significant of {} tested ({} degenerate, {} with low expected counts)",
                selection.associations.len(),
                s.tested,
                s.degenerate,
                s.low_expected
            );
        }
        Command::Filter(_) => print_stage(&pipeline.filter()?),
        Command::Report(_) => {
            pipeline.report()?;
            print_report(pipeline.run_dir())?;
        }
        Command::RunAll(_) => {
            let summary = pipeline.run_all(raw.as_deref())?;
            summary.stages.iter().for_each(print_stage);
            println!("{} bias associations\n", summary.bias_associations);
            print_report(pipeline.run_dir())?;
        }
        Command::Taxonomy { .. } | Command::Eval(_) => unreachable!(),
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let artifacts = StageArtifacts::load(&args.run_dir)?;
    let gold = GoldAnnotations::from_path(&args.gold)?;
    let report = eval_stages(&artifacts, &gold)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    print!("{}", report.row.to_table());
    if !report.near_misses.is_empty() {
        println!("\nnear misses:");
        for m in &report.near_misses {
            println!(
                "  {}/{}: {:?} vs gold {:?}",
                m.story_id, m.descriptor, m.predicted, m.gold
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = ["warn", "info", "debug"][usize::from(cli.verbose.min(2))];
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Taxonomy {
            action: TaxonomyCommand::Validate { taxonomy },
        } => validate_taxonomy(taxonomy),
        Command::Eval(args) => run_eval(args),
        Command::Generate(a)
        | Command::Extract(a)
        | Command::Unify(a)
        | Command::Analyze(a)
        | Command::Filter(a)
        | Command::Report(a)
        | Command::RunAll(a) => run_stage(&cli.command, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
