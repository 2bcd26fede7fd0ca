//! Stage orchestration with content-hash caching.
//!
//! Every artifact gets a stamp under `stamps/` holding the hash of its inputs
//! (config section, upstream artifact hashes, stage seed) and of its own
//! bytes. A stage is skipped when both still match.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::{
    embed_subjects, store_load, store_save, Embedder, EmbeddingStore, MockEmbedder, Provenance, RemoteEmbedder,
    RemoteEmbedderConfig, STORE_MAGIC, STORE_VERSION,
};
use crate::eval::{emit_report, evaluate_run, popularity_for_user, popularity_order, relevance_sets, MetricsReport};
use crate::gat::{
    forward, full_scores, load_checkpoint, save_checkpoint, train, Adjacency, GatConfig, Mode, NodeFeatures,
    CHECKPOINT_MAGIC,
};
use crate::graph::{build_graph_with_nodes, BipartiteGraph};
use crate::ingest::{
    group_by_user, load_item_metadata, make_cold_start_slice, make_folds, parse_movielens, Dataset, FoldSplit,
    LiveSource, MetadataSource, RatingFormat, UserId,
};
use crate::llm::templates::PromptTemplates;
use crate::llm::{Gateway, ProviderConfig};
use crate::profiles::{
    generate_item_profiles, generate_user_profile, load_profiles, render_integrated_profile,
    render_integrated_text, render_profile, save_profile, seed_items, Profile, Subject,
};
use crate::rerank::{rerank_user, select_pool, Reranker, Strategy};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Profile,
    Embed,
    Train,
    Rerank,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Ingest, Stage::Profile, Stage::Embed, Stage::Train, Stage::Rerank, Stage::Evaluate];

    pub fn index(self) -> u64 {
        self as u64
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Profile => "profile",
            Stage::Embed => "embed",
            Stage::Train => "train",
            Stage::Rerank => "rerank",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

fn fold_suffix(fold: &Option<usize>) -> String {
    fold.map(|f| format!(" (fold {f})")).unwrap_or_default()
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} failed{}: {cause}", fold_suffix(.fold))]
    StageFailed { stage: Stage, fold: Option<usize>, cause: String },
    #[error("unknown artifact {path}: {reason}")]
    UnknownArtifact { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Four-section Markdown profiles are embedded.
    Unified,
    /// Plain concatenated metadata (items) and flattened profile text (users).
    Integrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub ratings: PathBuf,
    /// `100k` (tab separated) or `1m` (`::` separated).
    pub format: String,
    /// Directory of `<item_id>.json` metadata files.
    pub fixtures: Option<PathBuf>,
    /// Live metadata URL with an `{id}` placeholder; fetched items are cached in `fixtures`.
    pub live_endpoint: Option<String>,
    pub live_api_key_env: Option<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            ratings: PathBuf::from("data/ml-100k/u.data"),
            format: "100k".into(),
            fixtures: Some(PathBuf::from("data/ml-100k/fixtures")),
            live_endpoint: None,
            live_api_key_env: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Mock,
    Remote,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    /// Pre-computed store, used when `kind = "file"`.
    pub file: Option<PathBuf>,
    pub workers: usize,
    pub remote: RemoteEmbedderConfig,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { kind: EmbedderKind::Mock, file: None, workers: 4, remote: RemoteEmbedderConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    /// Any of `none`, `prompt`, `bst`, `batch`, `relevancy`.
    pub strategies: Vec<String>,
    pub w: f64,
    pub pool_size: usize,
    /// Pool for the batch-overlap and relevancy strategies.
    pub batch_pool_size: usize,
    /// Explanations for this many top items per user and strategy (0 disables).
    pub explain_top: usize,
    /// Evaluate a seeded sample of this many users per fold (0 = all eligible users).
    pub max_users: usize,
    pub popularity_baseline: bool,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.iter().map(|s| s.as_str().to_string()).collect(),
            w: 0.8,
            pool_size: 20,
            batch_pool_size: 30,
            explain_top: 3,
            max_users: 0,
            popularity_baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub artifacts_dir: PathBuf,
    pub k: usize,
    pub folds: usize,
    /// Fold indices to run; empty runs all of them.
    pub run_folds: Vec<usize>,
    /// Share of evaluable users turned into cold-start users per fold (0 disables).
    pub cold_start_fraction: f64,
    pub cold_start_max_train: usize,
    pub variant: Variant,
    /// Prompt template overrides; built-in templates when absent.
    pub templates_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub provider: ProviderConfig,
    pub embedder: EmbedderConfig,
    pub gat: GatConfig,
    pub rerank: RerankConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            artifacts_dir: PathBuf::from("artifacts"),
            k: 10,
            folds: 5,
            run_folds: Vec::new(),
            cold_start_fraction: 0.2,
            cold_start_max_train: 9,
            variant: Variant::Unified,
            templates_dir: None,
            dataset: DatasetConfig::default(),
            provider: ProviderConfig::default(),
            embedder: EmbedderConfig::default(),
            gat: GatConfig::default(),
            rerank: RerankConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if let Some(f) = self.run_folds.iter().find(|&&f| f >= self.folds) {
            return bad(format!("run_folds contains {f}, but there are only {} folds", self.folds));
        }
        if !(0.0..1.0).contains(&self.cold_start_fraction) {
            return bad(format!("cold_start_fraction {} outside [0, 1)", self.cold_start_fraction));
        }
        if self.cold_start_max_train < 3 {
            return bad("cold_start_max_train must be at least 3".into());
        }
        self.dataset.format.parse::<RatingFormat>().map_err(PipelineError::Config)?;
        self.gat.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.strategies()?;
        if !(0.0..=1.0).contains(&self.rerank.w) {
            return bad(format!("rerank.w {} outside [0, 1]", self.rerank.w));
        }
        if self.rerank.pool_size == 0 || self.rerank.batch_pool_size == 0 {
            return bad("pool sizes must be positive".into());
        }
        if self.embedder.kind == EmbedderKind::File && self.embedder.file.is_none() {
            return bad("embedder.kind = \"file\" needs embedder.file".into());
        }
        if self.embedder.kind == EmbedderKind::Remote && self.embedder.remote.endpoint.is_empty() {
            return bad("embedder.kind = \"remote\" needs embedder.remote.endpoint".into());
        }
        Ok(())
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>, PipelineError> {
        let mut out = Vec::new();
        for s in &self.rerank.strategies {
            let strategy: Strategy = s.parse().map_err(|e: crate::rerank::RerankError| PipelineError::Config(e.to_string()))?;
            if !out.contains(&strategy) {
                out.push(strategy);
            }
        }
        Ok(out)
    }

    pub fn fold_indices(&self) -> Vec<usize> {
        if self.run_folds.is_empty() {
            (0..self.folds).collect()
        } else {
            let set: BTreeSet<usize> = self.run_folds.iter().copied().collect();
            set.into_iter().collect()
        }
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_add(stage.index())
    }

    fn pool_size(&self, strategy: Strategy) -> usize {
        match strategy {
            Strategy::BatchOverlap | Strategy::Relevancy => self.rerank.batch_pool_size,
            _ => self.rerank.pool_size,
        }
    }
}

/// One line of `recs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecRecord {
    pub user_id: UserId,
    pub strategy: String,
    /// 1-based.
    pub rank: usize,
    pub item_id: u32,
    pub fused_score: f64,
    pub llm_score: Option<f64>,
    pub gat_score: Option<f64>,
    pub fallback_used: bool,
    pub explanation: Option<String>,
}

pub fn read_recs(path: &Path) -> Result<Vec<RecRecord>, BoxError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line).map_err(|e| format!("{} line {}: {e}", path.display(), n + 1))?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub fold: Option<usize>,
    pub artifact: String,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stamp {
    stage: Stage,
    input_hash: String,
    output_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a file's bytes, or of a directory's sorted relative paths and file hashes.
pub fn hash_path(path: &Path) -> std::io::Result<String> {
    if path.is_file() {
        return Ok(sha256_hex(&fs::read(path)?));
    }
    let mut entries = Vec::new();
    collect_files(path, path, &mut entries)?;
    entries.sort();
    let mut h = Sha256::new();
    for (rel, hash) in entries {
        h.update(rel.as_bytes());
        h.update(b"\0");
        h.update(hash.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.push((rel, sha256_hex(&fs::read(&p)?)));
        }
    }
    Ok(())
}

#[derive(Default)]
struct Cache {
    root: PathBuf,
    force: bool,
    records: Vec<StageRecord>,
}

impl Cache {
    fn stamp_path(&self, key: &str) -> PathBuf {
        self.root.join("stamps").join(format!("{key}.json"))
    }

    fn outputs_hash(outputs: &[PathBuf]) -> std::io::Result<String> {
        let mut h = Sha256::new();
        for o in outputs {
            h.update(hash_path(o)?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Builds `outputs` unless a stamp with the same input hash vouches for them. Returns the output hash.
    fn run(
        &mut self,
        stage: Stage,
        fold: Option<usize>,
        key: &str,
        inputs: &[&str],
        outputs: &[PathBuf],
        build: impl FnOnce() -> Result<(), BoxError>,
    ) -> Result<String, PipelineError> {
        let failed = |cause: String| PipelineError::StageFailed { stage, fold, cause };
        let mut h = Sha256::new();
        h.update(stage.as_str().as_bytes());
        for i in inputs {
            h.update(b"\n");
            h.update(i.as_bytes());
        }
        let input_hash = hex::encode(h.finalize());
        let stamp_path = self.stamp_path(key);

        if !self.force && outputs.iter().all(|o| o.exists()) {
            let stamp: Option<Stamp> = fs::read(&stamp_path).ok().and_then(|b| serde_json::from_slice(&b).ok());
            if let Some(stamp) = stamp {
                if stamp.input_hash == input_hash && Self::outputs_hash(outputs).ok().as_ref() == Some(&stamp.output_hash) {
                    log::info!("{stage}: {key} up to date");
                    self.records.push(StageRecord { stage, fold, artifact: key.into(), skipped: true });
                    return Ok(stamp.output_hash);
                }
            }
        }
        log::info!("{stage}: building {key}");
        for o in outputs {
            if o.is_dir() {
                fs::remove_dir_all(o)?;
            }
            if let Some(parent) = o.parent() {
                fs::create_dir_all(parent)?;
            }
        }
        build().map_err(|e| failed(e.to_string()))?;
        let output_hash = Self::outputs_hash(outputs).map_err(|e| failed(format!("output missing after build: {e}")))?;
        fs::create_dir_all(stamp_path.parent().expect("stamps dir"))?;
        let stamp = Stamp { stage, input_hash, output_hash: output_hash.clone() };
        fs::write(&stamp_path, serde_json::to_vec_pretty(&stamp).expect("stamp serializes"))?;
        self.records.push(StageRecord { stage, fold, artifact: key.into(), skipped: false });
        Ok(output_hash)
    }
}

fn section<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("config sections serialize")
}

/// Artifact locations under the artifacts directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.json")
    }
    pub fn item_profiles(&self) -> PathBuf {
        self.root.join("items")
    }
    pub fn item_embeddings(&self) -> PathBuf {
        self.root.join("item_embeddings.embs")
    }
    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.root.join(format!("fold_{fold}"))
    }
    pub fn split(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("split.json")
    }
    pub fn user_profiles(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("users")
    }
    pub fn embeddings(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("embeddings.embs")
    }
    pub fn checkpoint(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("model.gatc")
    }
    pub fn train_log(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("train_log.json")
    }
    pub fn recs(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("recs.jsonl")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }
    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    /// Present when the evaluate stage ran or was reused.
    pub report: Option<MetricsReport>,
    pub stages: Vec<StageRecord>,
}

impl PipelineOutcome {
    pub fn all_skipped(&self) -> bool {
        self.stages.iter().all(|s| s.skipped)
    }
}

pub struct Pipeline {
    cfg: RunConfig,
    templates: PromptTemplates,
    templates_hash: String,
    layout: Layout,
    cache: Cache,
}

#[derive(Default)]
struct FoldHashes {
    split: String,
    users: String,
    embeddings: String,
    model: String,
    recs: String,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, force: bool) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let (templates, templates_hash) = match &cfg.templates_dir {
            Some(dir) => (PromptTemplates::load_dir(dir)?, hash_path(dir)?),
            None => (PromptTemplates::default(), "builtin".to_string()),
        };
        let layout = Layout { root: cfg.artifacts_dir.clone() };
        let cache = Cache { root: cfg.artifacts_dir.clone(), force, records: Vec::new() };
        Ok(Self { cfg, templates, templates_hash, layout, cache })
    }

    /// [`Cache::run`] with the builder borrowing the pipeline.
    fn cached(
        &mut self,
        stage: Stage,
        fold: Option<usize>,
        key: &str,
        inputs: &[String],
        outputs: &[PathBuf],
        build: impl FnOnce(&Self) -> Result<(), BoxError>,
    ) -> Result<String, PipelineError> {
        let mut cache = std::mem::take(&mut self.cache);
        let inputs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        let result = cache.run(stage, fold, key, &inputs, outputs, || build(self));
        self.cache = cache;
        result
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Runs every stage up to and including `until`.
    pub fn run(mut self, until: Stage) -> Result<PipelineOutcome, PipelineError> {
        fs::create_dir_all(&self.layout.root)?;
        let folds = self.cfg.fold_indices();
        let dataset = self.ingest()?;
        let mut per_fold: BTreeMap<usize, FoldHashes> = BTreeMap::new();
        for &f in &folds {
            let split = self.split(f, &dataset)?;
            per_fold.insert(f, FoldHashes { split, ..Default::default() });
        }
        if until >= Stage::Profile {
            let items = self.item_profiles(&dataset)?;
            for &f in &folds {
                let h = per_fold.get_mut(&f).expect("fold present");
                h.users = self.user_profiles(f, &dataset, &h.split, &items)?;
            }
            if until >= Stage::Embed {
                let item_store = self.item_embeddings(&dataset, &items)?;
                for &f in &folds {
                    let h = per_fold.get_mut(&f).expect("fold present");
                    h.embeddings = self.fold_embeddings(f, &h.users, &item_store)?;
                }
            }
            if until >= Stage::Train {
                for &f in &folds {
                    let h = per_fold.get_mut(&f).expect("fold present");
                    h.model = self.train(f, &dataset, &h.split, &h.embeddings)?;
                }
            }
            if until >= Stage::Rerank {
                for &f in &folds {
                    let h = per_fold.get_mut(&f).expect("fold present");
                    h.recs = self.rerank(f, &dataset, h, &items)?;
                }
            }
        }
        let report = if until >= Stage::Evaluate { Some(self.evaluate(&per_fold)?) } else { None };
        Ok(PipelineOutcome { report, stages: self.cache.records })
    }

    fn gateway(&self, stage: Stage) -> Result<Gateway, BoxError> {
        let cfg = ProviderConfig { seed: self.cfg.stage_seed(stage), ..self.cfg.provider.clone() };
        Ok(Gateway::from_config(cfg)?)
    }

    fn provider_section(&self, stage: Stage) -> String {
        section(&ProviderConfig { seed: self.cfg.stage_seed(stage), ..self.cfg.provider.clone() })
    }

    fn ingest(&mut self) -> Result<String, PipelineError> {
        let d = self.cfg.dataset.clone();
        for p in [Some(&d.ratings), d.fixtures.as_ref().filter(|_| d.live_endpoint.is_none())].into_iter().flatten() {
            if !p.exists() {
                return Err(PipelineError::StageFailed {
                    stage: Stage::Ingest,
                    fold: None,
                    cause: format!("{} does not exist", p.display()),
                });
            }
        }
        // A live cache directory changes as it fills, so only fixture-only runs hash it.
        let fixtures_hash = match (&d.fixtures, &d.live_endpoint) {
            (Some(dir), None) => hash_path(dir)?,
            _ => String::new(),
        };
        let inputs = [section(&d), hash_path(&d.ratings)?, fixtures_hash];
        let out = self.layout.dataset();
        self.cached(Stage::Ingest, None, "dataset", &inputs, &[out.clone()], |_| build_dataset(&d, &out))
    }

    fn split(&mut self, fold: usize, dataset_hash: &str) -> Result<String, PipelineError> {
        let cfg = &self.cfg;
        let seed = cfg.stage_seed(Stage::Ingest);
        let params = format!(
            "folds={} fraction={} max_train={} seed={seed}",
            cfg.folds, cfg.cold_start_fraction, cfg.cold_start_max_train
        );
        let out = self.layout.split(fold);
        let key = format!("fold_{fold}.split");
        self.cached(Stage::Ingest, Some(fold), &key, &[dataset_hash.into(), params], &[out.clone()], |this| {
            let cfg = &this.cfg;
            let ds = Dataset::load(&this.layout.dataset())?;
            let mut folds = make_folds(&ds, cfg.folds, seed)?;
            let mut split = folds.swap_remove(fold);
            if cfg.cold_start_fraction > 0.0 {
                split = make_cold_start_slice(
                    &split,
                    cfg.cold_start_fraction,
                    cfg.cold_start_max_train,
                    seed.wrapping_add(1 + fold as u64),
                )?;
            }
            split.save(&out)?;
            Ok(())
        })
    }

    fn item_profiles(&mut self, dataset_hash: &str) -> Result<String, PipelineError> {
        let inputs = [dataset_hash.into(), self.provider_section(Stage::Profile), self.templates_hash.clone()];
        let out = self.layout.item_profiles();
        self.cached(Stage::Profile, None, "items", &inputs, &[out.clone()], |this| {
            let gw = this.gateway(Stage::Profile)?;
            let ds = Dataset::load(&this.layout.dataset())?;
            let metas: Vec<_> = ds.catalog.values().cloned().collect();
            fs::create_dir_all(&out)?;
            for generated in generate_item_profiles(&metas, &gw, &this.templates, this.cfg.provider.parallelism) {
                save_profile(&out, &generated.profile)?;
            }
            Ok(())
        })
    }

    fn user_profiles(&mut self, fold: usize, dataset_hash: &str, split_hash: &str, items_hash: &str) -> Result<String, PipelineError> {
        let inputs = [
            dataset_hash.into(),
            split_hash.into(),
            items_hash.into(),
            self.provider_section(Stage::Profile),
            self.templates_hash.clone(),
        ];
        let out = self.layout.user_profiles(fold);
        let key = format!("fold_{fold}.users");
        self.cached(Stage::Profile, Some(fold), &key, &inputs, &[out.clone()], |this| {
            let gw = this.gateway(Stage::Profile)?;
            let ds = Dataset::load(&this.layout.dataset())?;
            let split = FoldSplit::load(&this.layout.split(fold))?;
            let item_profiles = profiles_by_id(load_profiles(&this.layout.item_profiles())?);
            let by_user = group_by_user(&split.train);
            let no_ratings = Vec::new();
            let outcomes = crate::util::par_map(&ds.user_ids, this.cfg.provider.parallelism, |&u| {
                let seeds = seed_items(by_user.get(&u).unwrap_or(&no_ratings), &ds.catalog, &item_profiles);
                generate_user_profile(u, &seeds, &gw, &this.templates)
            });
            fs::create_dir_all(&out)?;
            for o in outcomes {
                save_profile(&out, &o.generated.profile)?;
            }
            Ok(())
        })
    }

    fn embedder(&self) -> Result<Box<dyn Embedder>, BoxError> {
        Ok(match self.cfg.embedder.kind {
            EmbedderKind::Mock => Box::new(MockEmbedder::new(self.cfg.stage_seed(Stage::Embed))),
            EmbedderKind::Remote => Box::new(RemoteEmbedder::new(self.cfg.embedder.remote.clone())?),
            EmbedderKind::File => return Err("file-backed stores are copied, not embedded".into()),
        })
    }

    fn embed_inputs(&self) -> Result<Vec<String>, PipelineError> {
        let e = &self.cfg.embedder;
        let mut inputs = vec![section(e), section(&self.cfg.variant), self.cfg.stage_seed(Stage::Embed).to_string()];
        if let (EmbedderKind::File, Some(path)) = (e.kind, &e.file) {
            let hash = hash_path(path).map_err(|err| PipelineError::StageFailed {
                stage: Stage::Embed,
                fold: None,
                cause: format!("embedding store {}: {err}", path.display()),
            })?;
            inputs.push(hash);
        }
        Ok(inputs)
    }

    fn file_store(&self) -> Option<&Path> {
        match (self.cfg.embedder.kind, &self.cfg.embedder.file) {
            (EmbedderKind::File, Some(path)) => Some(path),
            _ => None,
        }
    }

    fn item_embeddings(&mut self, dataset_hash: &str, items_hash: &str) -> Result<String, PipelineError> {
        let mut inputs = self.embed_inputs()?;
        inputs.extend([dataset_hash.to_string(), items_hash.to_string()]);
        let out = self.layout.item_embeddings();
        self.cached(Stage::Embed, None, "item_embeddings", &inputs, &[out.clone()], |this| {
            let store = if let Some(path) = this.file_store() {
                let mut s = store_load(path)?;
                s.user_vectors.clear();
                s
            } else {
                let texts: Vec<(Subject, String)> = match this.cfg.variant {
                    Variant::Unified => load_profiles(&this.layout.item_profiles())?
                        .iter()
                        .map(|p| (p.subject, render_profile(p)))
                        .collect(),
                    Variant::Integrated => Dataset::load(&this.layout.dataset())?
                        .catalog
                        .values()
                        .map(|m| (Subject::Item(m.item_id), render_integrated_text(m)))
                        .collect(),
                };
                let provenance = provenance(this.cfg.embedder.kind);
                embed_subjects(&texts, this.embedder()?.as_ref(), provenance, this.cfg.embedder.workers)?
            };
            store_save(&store, &out)?;
            Ok(())
        })
    }

    fn fold_embeddings(&mut self, fold: usize, users_hash: &str, item_store_hash: &str) -> Result<String, PipelineError> {
        let mut inputs = self.embed_inputs()?;
        inputs.extend([users_hash.to_string(), item_store_hash.to_string()]);
        let out = self.layout.embeddings(fold);
        let key = format!("fold_{fold}.embeddings");
        self.cached(Stage::Embed, Some(fold), &key, &inputs, &[out.clone()], |this| {
            let items = store_load(&this.layout.item_embeddings())?;
            let mut store = if let Some(path) = this.file_store() {
                store_load(path)?
            } else {
                let texts: Vec<(Subject, String)> = load_profiles(&this.layout.user_profiles(fold))?
                    .iter()
                    .map(|p| {
                        let text = match this.cfg.variant {
                            Variant::Unified => render_profile(p),
                            Variant::Integrated => render_integrated_profile(p),
                        };
                        (p.subject, text)
                    })
                    .collect();
                let provenance = provenance(this.cfg.embedder.kind);
                embed_subjects(&texts, this.embedder()?.as_ref(), provenance, this.cfg.embedder.workers)?
            };
            store.item_vectors = items.item_vectors;
            store_save(&store, &out)?;
            Ok(())
        })
    }

    fn gat_config(&self) -> GatConfig {
        GatConfig { seed: self.cfg.stage_seed(Stage::Train), ..self.cfg.gat.clone() }
    }

    fn train(&mut self, fold: usize, dataset_hash: &str, split_hash: &str, emb_hash: &str) -> Result<String, PipelineError> {
        let gat = self.gat_config();
        let outputs = [self.layout.checkpoint(fold), self.layout.train_log(fold)];
        let inputs = [dataset_hash.into(), split_hash.into(), emb_hash.into(), section(&gat)];
        let key = format!("fold_{fold}.model");
        self.cached(Stage::Train, Some(fold), &key, &inputs, &outputs, |this| {
            let ds = Dataset::load(&this.layout.dataset())?;
            let split = FoldSplit::load(&this.layout.split(fold))?;
            let graph = fold_graph(&ds, &split)?;
            let store = store_load(&this.layout.embeddings(fold))?;
            let (params, log) = train(&graph, &store, &gat)?;
            log::info!(
                "fold {fold}: {} epochs, best epoch {} (validation loss {:.5})",
                log.epochs_run,
                log.best_epoch,
                log.best_validation_loss
            );
            save_checkpoint(&outputs[0], &gat, &params)?;
            fs::write(&outputs[1], serde_json::to_vec_pretty(&log)?)?;
            Ok(())
        })
    }

    fn rerank(&mut self, fold: usize, dataset_hash: &str, h: &FoldHashes, items_hash: &str) -> Result<String, PipelineError> {
        let inputs = [
            dataset_hash.into(),
            h.split.clone(),
            h.users.clone(),
            items_hash.into(),
            h.embeddings.clone(),
            h.model.clone(),
            self.provider_section(Stage::Rerank),
            section(&self.cfg.rerank),
            format!("k={} seed={}", self.cfg.k, self.cfg.stage_seed(Stage::Rerank)),
            self.templates_hash.clone(),
        ];
        let out = self.layout.recs(fold);
        let key = format!("fold_{fold}.recs");
        self.cached(Stage::Rerank, Some(fold), &key, &inputs, &[out.clone()], |this| {
            let gw = this.gateway(Stage::Rerank)?;
            let recs = this.recommend(fold, &gw)?;
            let mut f = std::io::BufWriter::new(fs::File::create(&out)?);
            for r in &recs {
                serde_json::to_writer(&mut f, r)?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
            Ok(())
        })
    }

    /// Popularity and every configured strategy for each evaluated user of a fold.
    fn recommend(&self, fold: usize, gw: &Gateway) -> Result<Vec<RecRecord>, BoxError> {
        let cfg = &self.cfg;
        let ds = Dataset::load(&self.layout.dataset())?;
        let split = FoldSplit::load(&self.layout.split(fold))?;
        let graph = fold_graph(&ds, &split)?;
        let store = store_load(&self.layout.embeddings(fold))?;
        let (gat_cfg, params) = load_checkpoint(&self.layout.checkpoint(fold))?;
        let states = forward(&Adjacency::new(&graph), &params, &NodeFeatures::from_store(&graph, &store)?, &gat_cfg, Mode::Eval)?;
        let item_profiles = profiles_by_id(load_profiles(&self.layout.item_profiles())?);
        let user_profiles = profiles_by_id(load_profiles(&self.layout.user_profiles(fold))?);
        let users = evaluation_users(&split, cfg.rerank.max_users, cfg.stage_seed(Stage::Rerank));
        let strategies = cfg.strategies()?;
        let popularity = popularity_order(&graph);
        let reranker = Reranker { gateway: gw, templates: &self.templates, seed: cfg.stage_seed(Stage::Rerank) };

        let per_user = crate::util::par_map(&users, cfg.provider.parallelism, |&user| -> Result<Vec<RecRecord>, BoxError> {
            let mut out = Vec::new();
            if cfg.rerank.popularity_baseline {
                let counts: BTreeMap<u32, f64> = popularity.iter().copied().collect();
                for (r, item) in popularity_for_user(&popularity, &graph, user, cfg.k).into_iter().enumerate() {
                    out.push(RecRecord {
                        user_id: user,
                        strategy: "popularity".into(),
                        rank: r + 1,
                        item_id: item,
                        fused_score: counts[&item],
                        llm_score: None,
                        gat_score: None,
                        fallback_used: false,
                        explanation: None,
                    });
                }
            }
            let u = graph.user_index(user).ok_or_else(|| format!("user {user} is not in the graph"))?;
            let scored: Vec<(u32, f64)> =
                full_scores(&states, &graph, u).into_iter().map(|(i, s)| (graph.item_ids[i], s)).collect();
            let fallback_profile;
            let user_profile = match user_profiles.get(&user) {
                Some(p) => p,
                None => {
                    fallback_profile = crate::profiles::minimal_user_profile(user);
                    &fallback_profile
                }
            };
            for &strategy in &strategies {
                let pool = select_pool(user, &scored, cfg.pool_size(strategy).min(scored.len()))?;
                let explain_top = cfg.rerank.explain_top.min(cfg.k);
                let rr = rerank_user(&reranker, strategy, &pool, user_profile, &item_profiles, cfg.rerank.w, explain_top)?;
                for (r, item) in rr.fused.iter().take(cfg.k).enumerate() {
                    out.push(RecRecord {
                        user_id: user,
                        strategy: strategy.as_str().into(),
                        rank: r + 1,
                        item_id: item.item_id,
                        fused_score: item.fused_score,
                        llm_score: (strategy != Strategy::None).then_some(item.llm_score),
                        gat_score: Some(item.gat_score),
                        fallback_used: rr.result.fallback_used,
                        explanation: rr.explanations.iter().find(|e| e.item_id == item.item_id).map(|e| e.text.clone()),
                    });
                }
            }
            Ok(out)
        });
        let mut recs = Vec::new();
        for r in per_user {
            recs.extend(r?);
        }
        Ok(recs)
    }

    fn evaluate(&mut self, per_fold: &BTreeMap<usize, FoldHashes>) -> Result<MetricsReport, PipelineError> {
        let mut inputs = vec![format!("k={}", self.cfg.k), section(&self.cfg.rerank.strategies)];
        for (f, h) in per_fold {
            inputs.push(format!("{f}:{}:{}", h.split, h.recs));
        }
        let layout = self.layout.clone();
        let outputs = [layout.report_csv(), layout.report_md(), layout.report_json()];
        let folds: Vec<usize> = per_fold.keys().copied().collect();
        self.cached(Stage::Evaluate, None, "report", &inputs, &outputs, |this| {
            let strategies = this.cfg.strategies()?;
            let mut report = MetricsReport::default();
            for &fold in &folds {
                let split = FoldSplit::load(&layout.split(fold))?;
                let recs = read_recs(&layout.recs(fold))?;
                let labels = this
                    .cfg
                    .rerank
                    .popularity_baseline
                    .then_some("popularity")
                    .into_iter()
                    .chain(strategies.iter().map(|s| s.as_str()));
                report.merge(evaluate_fold(fold, &split, &recs, this.cfg.k, labels)?);
            }
            emit_report(&report, &layout.root)?;
            fs::write(layout.report_json(), serde_json::to_vec_pretty(&report)?)?;
            Ok(())
        })?;
        let bytes = fs::read(layout.report_json())?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::StageFailed {
            stage: Stage::Evaluate,
            fold: None,
            cause: format!("report.json: {e}"),
        })
    }
}

fn provenance(kind: EmbedderKind) -> Provenance {
    match kind {
        EmbedderKind::Mock => Provenance::Mock,
        EmbedderKind::Remote => Provenance::Real,
        EmbedderKind::File => Provenance::File,
    }
}

fn profiles_by_id(profiles: Vec<Profile>) -> BTreeMap<u32, Profile> {
    profiles
        .into_iter()
        .map(|p| {
            let id = match p.subject {
                Subject::Item(id) | Subject::User(id) => id,
            };
            (id, p)
        })
        .collect()
}

fn build_dataset(d: &DatasetConfig, out: &Path) -> Result<(), BoxError> {
    let format: RatingFormat = d.format.parse()?;
    let mut ds = parse_movielens(&d.ratings, format)?;
    let source = match (&d.live_endpoint, &d.fixtures) {
        (Some(endpoint), Some(cache_dir)) => Some(MetadataSource::LiveApi {
            live: LiveSource {
                endpoint_template: endpoint.clone(),
                api_key_env: d.live_api_key_env.clone(),
                max_retries: 3,
                backoff_ms: 500,
                parallelism: 4,
            },
            cache_dir: cache_dir.clone(),
        }),
        (Some(_), None) => return Err("live_endpoint needs a fixtures directory to cache into".into()),
        (None, Some(dir)) => Some(MetadataSource::FixtureDir(dir.clone())),
        (None, None) => None,
    };
    if let Some(source) = source {
        let metas = load_item_metadata(&ds.item_ids(), &source, &BTreeMap::new())?;
        ds.attach_metadata(metas);
    }
    ds.save(out)?;
    Ok(())
}

/// Train graph over every dataset user and item, so test-only items are scored too.
pub fn fold_graph(ds: &Dataset, split: &FoldSplit) -> Result<BipartiteGraph, BoxError> {
    Ok(build_graph_with_nodes(&split.train, &ds.user_ids, &ds.item_ids())?)
}

/// Users with at least one relevant test item, optionally a seeded sample of them, ascending.
pub fn evaluation_users(split: &FoldSplit, max_users: usize, seed: u64) -> Vec<UserId> {
    let eligible: Vec<UserId> = relevance_sets(&split.test, &split.train)
        .into_iter()
        .filter(|(u, rel)| !rel.is_empty() && !split.excluded_users.contains(u))
        .map(|(u, _)| u)
        .collect();
    if max_users == 0 || eligible.len() <= max_users {
        return eligible;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<UserId> = eligible.choose_multiple(&mut rng, max_users).copied().collect();
    chosen.sort_unstable();
    chosen
}

/// Scores one fold's recommendations per strategy over the users that received any.
pub fn evaluate_fold<'a>(
    fold: usize,
    split: &FoldSplit,
    recs: &[RecRecord],
    k: usize,
    strategies: impl IntoIterator<Item = &'a str>,
) -> Result<MetricsReport, BoxError> {
    let mut by_strategy: BTreeMap<&str, BTreeMap<UserId, Vec<(usize, u32)>>> = BTreeMap::new();
    let mut users = BTreeSet::new();
    for r in recs {
        users.insert(r.user_id);
        by_strategy.entry(r.strategy.as_str()).or_default().entry(r.user_id).or_default().push((r.rank, r.item_id));
    }
    let relevance: BTreeMap<UserId, BTreeSet<u32>> =
        relevance_sets(&split.test, &split.train).into_iter().filter(|(u, _)| users.contains(u)).collect();
    let mut report = MetricsReport::default();
    for label in strategies {
        let ranked: BTreeMap<UserId, Vec<u32>> = by_strategy
            .get(label)
            .map(|m| {
                m.iter()
                    .map(|(&u, items)| {
                        let mut items = items.clone();
                        items.sort_unstable();
                        (u, items.into_iter().map(|x| x.1).collect())
                    })
                    .collect()
            })
            .unwrap_or_default();
        let run = evaluate_run(&ranked, &relevance, k, &split.cold_start_users)?;
        report.add_run(fold, label, &run);
    }
    Ok(report)
}

/// Runs every stage with caching; `force` rebuilds everything.
pub fn run_pipeline(cfg: &RunConfig, force: bool) -> Result<PipelineOutcome, PipelineError> {
    Pipeline::new(cfg.clone(), force)?.run(Stage::Evaluate)
}

/// Runs the pipeline once per fold index, attaching the index to any failure.
pub fn cross_validate(cfg: &RunConfig, force: bool) -> Result<MetricsReport, PipelineError> {
    let mut report = MetricsReport::default();
    for fold in cfg.fold_indices() {
        let fold_cfg = RunConfig { run_folds: vec![fold], ..cfg.clone() };
        let outcome = run_pipeline(&fold_cfg, force).map_err(|e| match e {
            PipelineError::StageFailed { stage, cause, .. } => PipelineError::StageFailed { stage, fold: Some(fold), cause },
            other => other,
        })?;
        report.merge(outcome.report.expect("evaluate stage ran"));
    }
    Ok(report)
}

/// One-paragraph description of an embedding store or GAT checkpoint.
pub fn inspect(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path)?;
    let unknown = |reason: String| PipelineError::UnknownArtifact { path: path.to_path_buf(), reason };
    let magic = bytes.get(..4).ok_or_else(|| unknown("shorter than a header".into()))?;
    if magic == STORE_MAGIC {
        let store = EmbeddingStore::from_bytes(&bytes).map_err(|e| unknown(e.to_string()))?;
        return Ok(format!(
            "EMBS v{STORE_VERSION}, dim {}, {} vectors ({} users, {} items)",
            store.dim,
            store.len(),
            store.user_vectors.len(),
            store.item_vectors.len()
        ));
    }
    if magic == CHECKPOINT_MAGIC {
        let (cfg, params) = crate::gat::checkpoint_from_bytes(&bytes).map_err(|e| unknown(e.to_string()))?;
        let mut out = format!("GATC v{}, {} parameters\n", crate::gat::CHECKPOINT_VERSION, params.n_params());
        out.push_str(&toml::to_string(&cfg).expect("config serializes"));
        return Ok(out);
    }
    Err(unknown(format!("unrecognized magic {:?}", String::from_utf8_lossy(magic))))
}
