use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybrec::llm::ProviderKind;
use hybrec::pipeline::{inspect, EmbedderKind, Pipeline, PipelineError, RunConfig, Stage, Variant};
use serde::de::DeserializeOwned;

/// Hybrid recommender pipeline: profiles, graph attention training, LLM re-ranking, evaluation.
///
/// Every stage subcommand runs the pipeline up to that stage. Earlier stages
/// are reused from the artifacts directory when their inputs are unchanged.
#[derive(Parser)]
#[command(name = "hybrec", version)]
struct Cli {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; per-stage seeds are derived as seed + stage index.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rebuild every stage even when cached artifacts match.
    #[arg(long, global = true)]
    force: bool,
    /// Where stage outputs and cache stamps are written.
    #[arg(long, global = true)]
    artifacts_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse ratings, attach metadata and write fold splits.
    Ingest {
        #[arg(long)]
        ratings: Option<PathBuf>,
        /// `100k` or `1m`.
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Generate item and user profiles.
    Profile {
        /// `mock` or `remote`.
        #[arg(long, value_parser = lowercase_enum::<ProviderKind>)]
        provider: Option<ProviderKind>,
        /// `unified` or `integrated`.
        #[arg(long, value_parser = lowercase_enum::<Variant>)]
        variant: Option<Variant>,
    },
    /// Embed profiles into the vector store.
    Embed {
        /// `mock`, `remote` or `file`.
        #[arg(long, value_parser = lowercase_enum::<EmbedderKind>)]
        embedder: Option<EmbedderKind>,
        /// Store file for `--embedder file`.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Train the graph attention network per fold.
    Train(FoldArgs),
    /// Re-rank GAT candidates and write recommendations.
    Rerank {
        #[command(flatten)]
        folds: FoldArgs,
        /// Strategies to run (repeatable): none, prompt, bst, batch, relevancy.
        #[arg(long)]
        strategy: Vec<String>,
        /// Fusion weight on the model score, in [0, 1].
        #[arg(long)]
        w: Option<f64>,
        /// `mock` or `remote`.
        #[arg(long, value_parser = lowercase_enum::<ProviderKind>)]
        provider: Option<ProviderKind>,
    },
    /// Score recommendations and write report.csv / report.md.
    Evaluate {
        #[command(flatten)]
        folds: FoldArgs,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run every stage.
    Run(FoldArgs),
    /// Describe an embedding store or GAT checkpoint.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct FoldArgs {
    /// Restrict to these fold indices (repeatable).
    #[arg(long)]
    fold: Vec<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    if let Command::Inspect { path } = &cli.command {
        emit(&format!("{}\n", inspect(path)?));
        return Ok(());
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.artifacts_dir {
        cfg.artifacts_dir = dir;
    }
    let until = match cli.command {
        Command::Ingest { ratings, format, fixtures } => {
            if let Some(r) = ratings {
                cfg.dataset.ratings = r;
            }
            if let Some(f) = format {
                cfg.dataset.format = f;
            }
            if fixtures.is_some() {
                cfg.dataset.fixtures = fixtures;
            }
            Stage::Ingest
        }
        Command::Profile { provider, variant } => {
            if let Some(p) = provider {
                cfg.provider.kind = p;
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            Stage::Profile
        }
        Command::Embed { embedder, store } => {
            if let Some(e) = embedder {
                cfg.embedder.kind = e;
            }
            if store.is_some() {
                cfg.embedder.file = store;
            }
            Stage::Embed
        }
        Command::Train(f) => {
            apply_folds(&mut cfg, f);
            Stage::Train
        }
        Command::Rerank { folds, strategy, w, provider } => {
            apply_folds(&mut cfg, folds);
            if !strategy.is_empty() {
                cfg.rerank.strategies = strategy;
            }
            if let Some(w) = w {
                cfg.rerank.w = w;
            }
            if let Some(p) = provider {
                cfg.provider.kind = p;
            }
            Stage::Rerank
        }
        Command::Evaluate { folds, k } => {
            apply_folds(&mut cfg, folds);
            if let Some(k) = k {
                cfg.k = k;
            }
            Stage::Evaluate
        }
        Command::Run(f) => {
            apply_folds(&mut cfg, f);
            Stage::Evaluate
        }
        Command::Inspect { .. } => unreachable!("handled above"),
    };
    let outcome = Pipeline::new(cfg, cli.force)?.run(until)?;
    let reused = outcome.stages.iter().filter(|s| s.skipped).count();
    let mut text = format!("{} artifacts built, {reused} reused\n", outcome.stages.len() - reused);
    if let Some(report) = outcome.report {
        text.push_str(&report.to_markdown());
    }
    emit(&text);
    Ok(())
}

/// Writes to stdout, treating a closed pipe (e.g. `| head`) as success.
fn emit(text: &str) {
    if let Err(e) = std::io::stdout().lock().write_all(text.as_bytes()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: {e}");
        }
    }
}

fn apply_folds(cfg: &mut RunConfig, f: FoldArgs) {
    if !f.fold.is_empty() {
        cfg.run_folds = f.fold;
    }
}

fn lowercase_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|e| e.to_string())
}
