//! Rating ingestion, item metadata, cross-validation folds and cold-start slices.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type UserId = u32;
pub type ItemId = u32;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed rating line {0}")]
    MalformedLine(usize),
    #[error("no ratings found")]
    EmptyFile,
    #[error("rating {0} is outside 1..=5")]
    OutOfRange(i64),
    #[error("fold count must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("cold-start fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("cold-start max_train must be at least 3, got {0}")]
    InvalidMaxTrain(usize),
    #[error("bad fixture {path}: {reason}")]
    BadFixture { path: PathBuf, reason: String },
    #[error("network error fetching item {item}: {reason}")]
    NetworkError { item: ItemId, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One explicit rating event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RatingRecord {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub rating: u8,
    pub timestamp: u64,
}

impl RatingRecord {
    pub fn new(user_id: UserId, item_id: ItemId, rating: u8, timestamp: u64) -> Self {
        Self { user_id, item_id, rating, timestamp }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingFormat {
    /// `user\titem\trating\ttimestamp`
    Tab100k,
    /// `user::item::rating::timestamp`
    Colon1m,
}

impl std::str::FromStr for RatingFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "100k" | "tab100k" => Ok(Self::Tab100k),
            "1m" | "colon1m" => Ok(Self::Colon1m),
            other => Err(format!("unknown rating format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: ItemId,
    pub title: String,
    pub genres: Vec<String>,
    pub overview: String,
    /// Set when no metadata could be found for the item.
    #[serde(default)]
    pub missing: bool,
}

impl ItemMeta {
    pub fn missing(item_id: ItemId, title: impl Into<String>) -> Self {
        Self { item_id, title: title.into(), genres: Vec::new(), overview: String::new(), missing: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

/// Edge polarity of an explicit rating: 4-5 positive, 1-2 negative, 3 neutral.
pub fn polarity(rating: i64) -> Result<Polarity, IngestError> {
    match rating {
        4 | 5 => Ok(Polarity::Positive),
        1 | 2 => Ok(Polarity::Negative),
        3 => Ok(Polarity::Neutral),
        other => Err(IngestError::OutOfRange(other)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Canonically sorted by (user_id, item_id), one record per pair.
    pub ratings: Vec<RatingRecord>,
    pub catalog: BTreeMap<ItemId, ItemMeta>,
    pub user_ids: Vec<UserId>,
}

impl Dataset {
    /// Collapses duplicate pairs (latest timestamp wins) and sorts canonically.
    /// Items without catalog entries get flagged placeholders.
    pub fn from_ratings(ratings: Vec<RatingRecord>) -> Self {
        let mut latest: BTreeMap<(UserId, ItemId), RatingRecord> = BTreeMap::new();
        for r in ratings {
            latest
                .entry((r.user_id, r.item_id))
                .and_modify(|cur| {
                    if (r.timestamp, r.rating) > (cur.timestamp, cur.rating) {
                        *cur = r;
                    }
                })
                .or_insert(r);
        }
        let ratings: Vec<RatingRecord> = latest.into_values().collect();
        let user_ids: Vec<UserId> =
            ratings.iter().map(|r| r.user_id).collect::<BTreeSet<_>>().into_iter().collect();
        let catalog = ratings
            .iter()
            .map(|r| r.item_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|id| (id, ItemMeta::missing(id, "unknown")))
            .collect();
        Self { ratings, catalog, user_ids }
    }

    pub fn item_ids(&self) -> Vec<ItemId> {
        self.catalog.keys().copied().collect()
    }

    /// Replaces catalog entries with the supplied metadata.
    pub fn attach_metadata(&mut self, metas: BTreeMap<ItemId, ItemMeta>) {
        for (id, meta) in metas {
            self.catalog.insert(id, meta);
        }
    }

    pub fn ratings_by_user(&self) -> BTreeMap<UserId, Vec<RatingRecord>> {
        group_by_user(&self.ratings)
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

pub fn group_by_user(ratings: &[RatingRecord]) -> BTreeMap<UserId, Vec<RatingRecord>> {
    let mut out: BTreeMap<UserId, Vec<RatingRecord>> = BTreeMap::new();
    for r in ratings {
        out.entry(r.user_id).or_default().push(*r);
    }
    out
}

fn parse_line(line: &str, format: RatingFormat) -> Option<RatingRecord> {
    let fields: Vec<&str> = match format {
        RatingFormat::Tab100k => line.split('\t').collect(),
        RatingFormat::Colon1m => line.split("::").collect(),
    };
    if fields.len() != 4 {
        return None;
    }
    let user_id: UserId = fields[0].trim().parse().ok()?;
    let item_id: ItemId = fields[1].trim().parse().ok()?;
    let rating: u8 = fields[2].trim().parse().ok()?;
    let timestamp: u64 = fields[3].trim().parse().ok()?;
    if user_id == 0 || item_id == 0 || !(1..=5).contains(&rating) {
        return None;
    }
    Some(RatingRecord { user_id, item_id, rating, timestamp })
}

/// Parses MovieLens rating text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_ratings(text: &str, format: RatingFormat) -> Result<Dataset, IngestError> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(line, format).ok_or(IngestError::MalformedLine(idx + 1))?);
    }
    if records.is_empty() {
        return Err(IngestError::EmptyFile);
    }
    Ok(Dataset::from_ratings(records))
}

pub fn parse_movielens(path: &Path, format: RatingFormat) -> Result<Dataset, IngestError> {
    let bytes = fs::read(path)?;
    // 100k ships latin-1 item files; rating files are ASCII, so lossy decoding is exact here.
    parse_ratings(&String::from_utf8_lossy(&bytes), format)
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct FixtureDoc {
    id: ItemId,
    title: String,
    #[serde(default)]
    genres: Vec<String>,
    #[serde(default)]
    overview: String,
}

#[derive(Debug, Clone)]
pub struct LiveSource {
    /// URL with an `{id}` placeholder, e.g. `https://host/movie/{id}`.
    pub endpoint_template: String,
    /// Name of the environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub parallelism: usize,
}

#[derive(Debug, Clone)]
pub enum MetadataSource {
    FixtureDir(PathBuf),
    /// Fetches uncached ids and writes them to the fixture directory.
    LiveApi { live: LiveSource, cache_dir: PathBuf },
}

fn fixture_path(dir: &Path, id: ItemId) -> PathBuf {
    dir.join(format!("{id}.json"))
}

fn read_fixture(dir: &Path, id: ItemId) -> Result<Option<ItemMeta>, IngestError> {
    let path = fixture_path(dir, id);
    if !path.exists() {
        return Ok(None);
    }
    let doc: FixtureDoc = serde_json::from_slice(&fs::read(&path)?)
        .map_err(|e| IngestError::BadFixture { path: path.clone(), reason: e.to_string() })?;
    if doc.id != id {
        return Err(IngestError::BadFixture { path, reason: format!("id {} does not match file name", doc.id) });
    }
    Ok(Some(ItemMeta { item_id: id, title: doc.title, genres: doc.genres, overview: doc.overview, missing: false }))
}

pub fn write_fixture(dir: &Path, meta: &ItemMeta) -> Result<(), IngestError> {
    fs::create_dir_all(dir)?;
    let doc = FixtureDoc {
        id: meta.item_id,
        title: meta.title.clone(),
        genres: meta.genres.clone(),
        overview: meta.overview.clone(),
    };
    fs::write(fixture_path(dir, meta.item_id), serde_json::to_vec_pretty(&doc)?)?;
    Ok(())
}

fn fallback_meta(id: ItemId, title_hints: &BTreeMap<ItemId, String>) -> ItemMeta {
    let title = title_hints.get(&id).cloned().unwrap_or_else(|| "unknown".to_string());
    ItemMeta::missing(id, title)
}

/// Parses a metadata API response. Genres may be plain strings or `{ "name": .. }` objects.
fn parse_live_response(id: ItemId, body: &serde_json::Value) -> Option<ItemMeta> {
    let title = body.get("title").and_then(|t| t.as_str())?.to_string();
    let genres = body
        .get("genres")
        .and_then(|g| g.as_array())
        .map(|arr| {
            arr.iter()
                .filter_map(|g| g.as_str().or_else(|| g.get("name").and_then(|n| n.as_str())))
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default();
    let overview = body.get("overview").and_then(|o| o.as_str()).unwrap_or_default().to_string();
    Some(ItemMeta { item_id: id, title, genres, overview, missing: false })
}

fn fetch_live(
    client: &reqwest::blocking::Client,
    live: &LiveSource,
    id: ItemId,
) -> Result<Option<ItemMeta>, IngestError> {
    let url = live.endpoint_template.replace("{id}", &id.to_string());
    let key = live.api_key_env.as_ref().and_then(|name| std::env::var(name).ok());
    let mut last_err = String::new();
    for attempt in 0..=live.max_retries {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(live.backoff_ms << (attempt - 1).min(10)));
        }
        let mut req = client.get(&url);
        if let Some(key) = &key {
            req = req.bearer_auth(key);
        }
        match req.send() {
            Ok(resp) if resp.status() == reqwest::StatusCode::NOT_FOUND => return Ok(None),
            Ok(resp) if resp.status().is_success() => {
                let body: serde_json::Value = match resp.json() {
                    Ok(body) => body,
                    Err(_) => return Ok(None),
                };
                return Ok(parse_live_response(id, &body));
            }
            Ok(resp) => last_err = format!("status {}", resp.status().as_u16()),
            Err(e) => last_err = if e.is_timeout() { "timeout".into() } else { "transport failure".into() },
        }
    }
    Err(IngestError::NetworkError { item: id, reason: last_err })
}

/// Resolves metadata for every requested id. Missing items degrade to flagged
/// placeholders titled from `title_hints` (or "unknown").
pub fn load_item_metadata(
    item_ids: &[ItemId],
    source: &MetadataSource,
    title_hints: &BTreeMap<ItemId, String>,
) -> Result<BTreeMap<ItemId, ItemMeta>, IngestError> {
    let mut out = BTreeMap::new();
    match source {
        MetadataSource::FixtureDir(dir) => {
            for &id in item_ids {
                let meta = read_fixture(dir, id)?.unwrap_or_else(|| fallback_meta(id, title_hints));
                out.insert(id, meta);
            }
        }
        MetadataSource::LiveApi { live, cache_dir } => {
            let mut pending = Vec::new();
            for &id in item_ids {
                match read_fixture(cache_dir, id)? {
                    Some(meta) => {
                        out.insert(id, meta);
                    }
                    None => pending.push(id),
                }
            }
            let client = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .map_err(|_| IngestError::NetworkError { item: 0, reason: "client construction".into() })?;
            let queue = Mutex::new(pending.into_iter());
            let results = Mutex::new(Vec::new());
            let workers = live.parallelism.max(1);
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        let next = queue.lock().unwrap().next();
                        let Some(id) = next else { break };
                        let res = fetch_live(&client, live, id);
                        results.lock().unwrap().push((id, res));
                    });
                }
            });
            let mut results = results.into_inner().unwrap();
            results.sort_by_key(|(id, _)| *id);
            for (id, res) in results {
                match res? {
                    Some(meta) => {
                        write_fixture(cache_dir, &meta)?;
                        out.insert(id, meta);
                    }
                    None => {
                        out.insert(id, fallback_meta(id, title_hints));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One cross-validation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train: Vec<RatingRecord>,
    pub test: Vec<RatingRecord>,
    pub cold_start_users: BTreeSet<UserId>,
    /// Users with fewer than `k` ratings: fully in train, never evaluated.
    pub excluded_users: BTreeSet<UserId>,
}

impl FoldSplit {
    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Per-user k-fold split. Each user's ratings are shuffled with one seeded
/// stream (users visited in ascending id order) and cut into `k` near-equal buckets.
pub fn make_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<FoldSplit>, IngestError> {
    if k < 2 {
        return Err(IngestError::InvalidK(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<FoldSplit> = (0..k)
        .map(|fold_index| FoldSplit {
            fold_index,
            train: Vec::new(),
            test: Vec::new(),
            cold_start_users: BTreeSet::new(),
            excluded_users: BTreeSet::new(),
        })
        .collect();
    for (user, mut ratings) in dataset.ratings_by_user() {
        if ratings.len() < k {
            for fold in &mut folds {
                fold.train.extend_from_slice(&ratings);
                fold.excluded_users.insert(user);
            }
            continue;
        }
        ratings.shuffle(&mut rng);
        let n = ratings.len();
        let mut start = 0;
        let mut bounds = Vec::with_capacity(k);
        for b in 0..k {
            let len = n / k + usize::from(b < n % k);
            bounds.push(start..start + len);
            start += len;
        }
        for (fold_idx, fold) in folds.iter_mut().enumerate() {
            for (b, range) in bounds.iter().enumerate() {
                let target = if b == fold_idx { &mut fold.test } else { &mut fold.train };
                target.extend_from_slice(&ratings[range.clone()]);
            }
        }
    }
    for fold in &mut folds {
        fold.train.sort();
        fold.test.sort();
    }
    Ok(folds)
}

/// Marks a seeded `fraction` of evaluable users as cold-start and truncates
/// their train history to `n ~ U[3, max_train]` most recent ratings.
pub fn make_cold_start_slice(
    fold: &FoldSplit,
    fraction: f64,
    max_train: usize,
    seed: u64,
) -> Result<FoldSplit, IngestError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(IngestError::InvalidFraction(fraction));
    }
    if max_train < 3 {
        return Err(IngestError::InvalidMaxTrain(max_train));
    }
    let train_by_user = group_by_user(&fold.train);
    let test_users: BTreeSet<UserId> = fold.test.iter().map(|r| r.user_id).collect();
    let candidates: Vec<UserId> = test_users
        .iter()
        .copied()
        .filter(|u| !fold.excluded_users.contains(u))
        .filter(|u| train_by_user.get(u).map_or(0, Vec::len) >= 3)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_select = ((fraction * candidates.len() as f64).floor() as usize).max(1).min(candidates.len());
    let mut chosen: Vec<UserId> = candidates.choose_multiple(&mut rng, n_select).copied().collect();
    chosen.sort_unstable();

    let mut keep: BTreeMap<UserId, usize> = BTreeMap::new();
    for &u in &chosen {
        keep.insert(u, rng.random_range(3..=max_train));
    }
    let mut train = Vec::with_capacity(fold.train.len());
    for (user, mut ratings) in train_by_user {
        if let Some(&n) = keep.get(&user) {
            ratings.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then(a.item_id.cmp(&b.item_id)));
            ratings.truncate(n);
        }
        train.extend(ratings);
    }
    train.sort();
    Ok(FoldSplit {
        fold_index: fold.fold_index,
        train,
        test: fold.test.clone(),
        cold_start_users: chosen.into_iter().collect(),
        excluded_users: fold.excluded_users.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_100k_line() {
        let ds = parse_ratings("1\t50\t5\t874965758\n", RatingFormat::Tab100k).unwrap();
        assert_eq!(ds.ratings, vec![RatingRecord::new(1, 50, 5, 874965758)]);
        assert!(ds.catalog[&50].missing);
    }

    #[test]
    fn parses_1m_line() {
        let ds = parse_ratings("1::1193::5::978300760", RatingFormat::Colon1m).unwrap();
        assert_eq!(ds.ratings, vec![RatingRecord::new(1, 1193, 5, 978300760)]);
    }

    #[test]
    fn empty_and_malformed() {
        assert!(matches!(parse_ratings("", RatingFormat::Tab100k), Err(IngestError::EmptyFile)));
        assert!(matches!(parse_ratings("\n\n", RatingFormat::Tab100k), Err(IngestError::EmptyFile)));
        let bad = "1\t2\t5\t10\n1\t3\t9\t10\n";
        assert!(matches!(parse_ratings(bad, RatingFormat::Tab100k), Err(IngestError::MalformedLine(2))));
        assert!(matches!(
            parse_ratings("0\t3\t4\t10", RatingFormat::Tab100k),
            Err(IngestError::MalformedLine(1))
        ));
        assert!(matches!(
            parse_ratings("1::2::3::4", RatingFormat::Tab100k),
            Err(IngestError::MalformedLine(1))
        ));
    }

    #[test]
    fn duplicates_keep_latest_and_order_is_irrelevant() {
        let a = "2\t1\t3\t5\n1\t1\t2\t10\n1\t1\t5\t20\n";
        let b = "1\t1\t5\t20\n2\t1\t3\t5\n1\t1\t2\t10\n";
        let da = parse_ratings(a, RatingFormat::Tab100k).unwrap();
        let db = parse_ratings(b, RatingFormat::Tab100k).unwrap();
        assert_eq!(da, db);
        assert_eq!(da.ratings[0], RatingRecord::new(1, 1, 5, 20));
        assert_eq!(da.user_ids, vec![1, 2]);
    }

    #[test]
    fn polarity_table() {
        let expected = [
            (1, Polarity::Negative),
            (2, Polarity::Negative),
            (3, Polarity::Neutral),
            (4, Polarity::Positive),
            (5, Polarity::Positive),
        ];
        for (r, p) in expected {
            assert_eq!(polarity(r).unwrap(), p);
        }
        assert!(matches!(polarity(0), Err(IngestError::OutOfRange(0))));
        assert!(matches!(polarity(6), Err(IngestError::OutOfRange(6))));
    }

    fn dataset_with(users: &[(UserId, usize)]) -> Dataset {
        let mut ratings = Vec::new();
        for &(u, n) in users {
            for i in 0..n {
                ratings.push(RatingRecord::new(u, i as ItemId + 1, (i % 5) as u8 + 1, 1000 + i as u64));
            }
        }
        Dataset::from_ratings(ratings)
    }

    #[test]
    fn folds_split_evenly_and_cover() {
        let ds = dataset_with(&[(1, 100), (2, 3), (3, 12)]);
        let folds = make_folds(&ds, 5, 7).unwrap();
        let mut seen = Vec::new();
        for fold in &folds {
            assert_eq!(fold.test.iter().filter(|r| r.user_id == 1).count(), 20);
            assert!(fold.test.iter().all(|r| r.user_id != 2));
            assert_eq!(fold.train.iter().filter(|r| r.user_id == 2).count(), 3);
            assert!(fold.excluded_users.contains(&2));
            let n3 = fold.test.iter().filter(|r| r.user_id == 3).count();
            assert!(n3 == 2 || n3 == 3);
            assert_eq!(fold.train.len() + fold.test.len(), ds.ratings.len());
            seen.extend(fold.test.iter().copied());
        }
        seen.sort();
        let partitionable: Vec<_> = ds.ratings.iter().copied().filter(|r| r.user_id != 2).collect();
        assert_eq!(seen, partitionable);
    }

    #[test]
    fn folds_are_deterministic() {
        let ds = dataset_with(&[(1, 40), (2, 17)]);
        assert_eq!(make_folds(&ds, 5, 3).unwrap(), make_folds(&ds, 5, 3).unwrap());
        assert_ne!(make_folds(&ds, 5, 3).unwrap(), make_folds(&ds, 5, 4).unwrap());
        assert!(matches!(make_folds(&ds, 1, 3), Err(IngestError::InvalidK(1))));
    }

    #[test]
    fn cold_start_slice_truncates_to_most_recent() {
        let users: Vec<(UserId, usize)> = (1..=943).map(|u| (u, 20)).collect();
        let ds = dataset_with(&users);
        let fold = make_folds(&ds, 5, 1).unwrap().remove(0);
        let sliced = make_cold_start_slice(&fold, 0.1, 9, 11).unwrap();
        assert_eq!(sliced.cold_start_users.len(), 94);
        assert_eq!(sliced.test, fold.test);
        let before = group_by_user(&fold.train);
        let after = group_by_user(&sliced.train);
        for (u, ratings) in &after {
            if sliced.cold_start_users.contains(u) {
                assert!((3..=9).contains(&ratings.len()));
                let mut orig = before[u].clone();
                orig.sort_by(|a, b| b.timestamp.cmp(&a.timestamp));
                let min_kept = ratings.iter().map(|r| r.timestamp).min().unwrap();
                assert!(orig[..ratings.len()].iter().all(|r| r.timestamp >= min_kept));
            } else {
                assert_eq!(ratings, &before[u]);
            }
        }
        assert_eq!(sliced, make_cold_start_slice(&fold, 0.1, 9, 11).unwrap());
        assert!(make_cold_start_slice(&fold, 1.0, 9, 11).is_err());
    }

    #[test]
    fn cold_start_selects_at_least_one() {
        let ds = dataset_with(&[(1, 20), (2, 20)]);
        let fold = make_folds(&ds, 5, 1).unwrap().remove(0);
        let sliced = make_cold_start_slice(&fold, 0.01, 9, 0).unwrap();
        assert_eq!(sliced.cold_start_users.len(), 1);
    }

    #[test]
    fn fixture_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let alien = ItemMeta {
            item_id: 7,
            title: "Alien".into(),
            genres: vec!["Horror".into(), "SciFi".into()],
            overview: "In space no one can hear you scream.".into(),
            missing: false,
        };
        write_fixture(dir.path(), &alien).unwrap();
        let hints = BTreeMap::from([(8, "Heat".to_string())]);
        let metas =
            load_item_metadata(&[7, 8, 9], &MetadataSource::FixtureDir(dir.path().into()), &hints).unwrap();
        assert_eq!(metas[&7], alien);
        assert_eq!(metas[&8], ItemMeta::missing(8, "Heat"));
        assert_eq!(metas[&9], ItemMeta::missing(9, "unknown"));
    }
}
