#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use hybrec::ingest::{write_fixture, ItemMeta};
use hybrec::pipeline::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GENRES: [&str; 6] = ["Action", "Comedy", "Drama", "Horror", "Romance", "Sci-Fi"];

/// Writes a `u.data`-style file and metadata fixtures for a small random dataset.
///
/// Users prefer items whose genre index matches `user % 3`, so there is some signal.
pub fn synthetic_movielens(dir: &Path, n_users: u32, n_items: u32, seed: u64) -> (PathBuf, PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for u in 1..=n_users {
        let mut ts = 880_000_000u64 + u as u64 * 1000;
        for i in 1..=n_items {
            if rng.random::<f64>() > 0.45 {
                continue;
            }
            let liked = (i % 3) == (u % 3);
            let rating = if liked { rng.random_range(4..=5) } else { rng.random_range(1..=3) };
            ts += rng.random_range(1..500);
            writeln!(text, "{u}\t{i}\t{rating}\t{ts}").unwrap();
        }
    }
    let ratings = dir.join("u.data");
    fs::write(&ratings, text).unwrap();
    let fixtures = dir.join("fixtures");
    for i in 1..=n_items {
        let meta = ItemMeta {
            item_id: i,
            title: format!("Movie {i} (1995)"),
            genres: vec![GENRES[(i % 3) as usize].to_string(), GENRES[3 + (i % 2) as usize].to_string()],
            overview: format!("A story about group {} and thread {}.", i % 3, i % 5),
            missing: false,
        };
        write_fixture(&fixtures, &meta).unwrap();
    }
    (ratings, fixtures)
}

/// A fast configuration over a synthetic dataset in `dir`.
pub fn small_config(dir: &Path) -> RunConfig {
    let (ratings, fixtures) = synthetic_movielens(dir, 50, 60, 11);
    let mut cfg = RunConfig { artifacts_dir: dir.join("artifacts"), run_folds: vec![0], ..RunConfig::default() };
    cfg.dataset.ratings = ratings;
    cfg.dataset.fixtures = Some(fixtures);
    cfg.gat.hidden_dim = 8;
    cfg.gat.heads = 2;
    cfg.gat.layers = 2;
    cfg.gat.max_epochs = 3;
    cfg.gat.batch_size = 256;
    cfg.provider.parallelism = 1;
    cfg.embedder.workers = 1;
    cfg.rerank.pool_size = 10;
    cfg.rerank.batch_pool_size = 15;
    cfg
}

/// Every file under `root`, relative path to contents, skipping cache stamps.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                if !rel.starts_with("stamps") {
                    out.push((rel, fs::read(&path).unwrap()));
                }
            }
        }
    }
    out.sort();
    out
}

/// Minimal HTTP/1.1 server answering every request through `handler(index, path, body)`.
pub struct TestServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
    pub requests: Arc<Mutex<Vec<(String, String, String)>>>,
}

impl TestServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(usize, &str, &str) -> (u16, String) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let (h, r) = (hits.clone(), requests.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                if reader.read_line(&mut line).is_err() {
                    continue;
                }
                let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
                let (mut len, mut auth) = (0usize, String::new());
                loop {
                    let mut header = String::new();
                    if reader.read_line(&mut header).unwrap_or(0) == 0 || header == "\r\n" {
                        break;
                    }
                    let lower = header.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    if lower.starts_with("authorization:") {
                        auth = header["authorization:".len()..].trim().to_string();
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).ok();
                let body = String::from_utf8_lossy(&body).into_owned();
                let n = h.fetch_add(1, Ordering::SeqCst);
                let (status, reply) = handler(n, &path, &body);
                r.lock().unwrap().push((path, auth, body));
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
                stream.write_all(resp.as_bytes()).ok();
            }
        });
        Self { url, hits, requests }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

const WORDS: [&str; 12] =
    ["noir", "slow burn", "Space Opera", "twist", "ensemble cast", "1970s", "café", "coming-of-age", "heist", "a*b", "x#y", "ëlan"];

fn phrase(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.random_range(1..=max_words);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn paragraph(rng: &mut ChaCha8Rng) -> String {
    let lines = rng.random_range(0..4);
    let mut out = Vec::new();
    for _ in 0..lines {
        let line = match rng.random_range(0..5) {
            0 => String::new(),
            1 => format!("  {}  ", phrase(rng, 6)),
            2 => format!("# {}", phrase(rng, 2)),
            _ => phrase(rng, 8),
        };
        out.push(line);
    }
    out.join("\n")
}

/// A random profile built through the normalizing constructor.
pub fn random_profile(rng: &mut ChaCha8Rng) -> hybrec::profiles::Profile {
    use hybrec::profiles::{Profile, Subject};
    let subject = if rng.random() { Subject::User(rng.random_range(1..10_000)) } else { Subject::Item(rng.random_range(1..10_000)) };
    let tags = |rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..rng.random_range(0..6))
            .map(|_| match rng.random_range(0..4) {
                0 => format!("- {}", phrase(rng, 3)),
                1 => phrase(rng, 3).to_uppercase(),
                _ => phrase(rng, 3),
            })
            .collect()
    };
    let overview = format!("{}\n{}", phrase(rng, 10), paragraph(rng));
    let attrs = tags(rng);
    let dislikes = tags(rng);
    Profile::new(subject, &overview, attrs, &paragraph(rng), dislikes).unwrap()
}

/// A random unit-norm vector.
pub fn random_vector(rng: &mut ChaCha8Rng) -> hybrec::embed::EmbeddingVector {
    let values: Vec<f64> = (0..hybrec::embed::EMBED_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    hybrec::embed::EmbeddingVector::from_raw(&values).unwrap()
}

pub fn random_store(rng: &mut ChaCha8Rng) -> hybrec::embed::EmbeddingStore {
    use hybrec::embed::{EmbeddingStore, Provenance};
    use hybrec::profiles::Subject;
    let mut store = EmbeddingStore::new(Provenance::Mock);
    for _ in 0..rng.random_range(0..6) {
        let v = random_vector(rng);
        store.insert(Subject::User(rng.random_range(0..u32::MAX)), v);
    }
    for _ in 0..rng.random_range(0..6) {
        let v = random_vector(rng);
        store.insert(Subject::Item(rng.random_range(0..u32::MAX)), v);
    }
    store
}

/// A random configuration with freshly initialized parameters.
pub fn random_checkpoint(rng: &mut ChaCha8Rng) -> (hybrec::gat::GatConfig, hybrec::gat::GatParams) {
    use hybrec::gat::{init_params_random, GatConfig};
    let heads = rng.random_range(1..4);
    let cfg = GatConfig {
        input_dim: rng.random_range(1..40),
        hidden_dim: heads * rng.random_range(1..5),
        heads,
        layers: rng.random_range(1..4),
        dropout: rng.random_range(0.0..0.9),
        leaky_slope: rng.random(),
        lambda_cos: rng.random_range(0.0..2.0),
        lr: rng.random_range(1e-5..1e-1),
        weight_decay: rng.random_range(0.0..1e-2),
        max_epochs: rng.random_range(1..1000),
        patience: rng.random_range(0..50),
        batch_size: rng.random_range(1..4096),
        hard_prob: rng.random(),
        seed: rng.random(),
    };
    let params = init_params_random(&cfg, rng);
    (cfg, params)
}

/// A random ranking of distinct ids and a nonempty relevant set drawn from a small universe.
pub fn random_ranking(rng: &mut ChaCha8Rng) -> (Vec<u32>, std::collections::BTreeSet<u32>, usize) {
    use rand::seq::SliceRandom;
    let universe = rng.random_range(1..40u32);
    let mut ids: Vec<u32> = (0..universe).collect();
    ids.shuffle(rng);
    let len = rng.random_range(0..=universe as usize);
    let ranking = ids[..len].to_vec();
    let mut relevant = std::collections::BTreeSet::new();
    relevant.insert(rng.random_range(0..universe + 5));
    for _ in 0..rng.random_range(0..12) {
        relevant.insert(rng.random_range(0..universe + 5));
    }
    (ranking, relevant, rng.random_range(1..25))
}

/// Metrics computed directly from their definitions, position by position.
pub fn brute_force_metrics(ranking: &[u32], relevant: &std::collections::BTreeSet<u32>, k: usize) -> [f64; 4] {
    let top: Vec<u32> = ranking.iter().copied().take(k).collect();
    let is_rel: Vec<bool> = top.iter().map(|i| relevant.contains(i)).collect();
    let hits = is_rel.iter().filter(|&&b| b).count() as f64;
    let precision = hits / k as f64;
    let recall = hits / relevant.len() as f64;
    let discount = |pos: usize| 1.0 / (pos as f64 + 2.0).log2();
    let dcg: f64 = is_rel.iter().enumerate().filter(|(_, &b)| b).map(|(p, _)| discount(p)).sum();
    let mut ideal_gains = vec![0.0; k];
    for g in ideal_gains.iter_mut().take(relevant.len()) {
        *g = 1.0;
    }
    let idcg: f64 = ideal_gains.iter().enumerate().map(|(p, g)| g * discount(p)).sum();
    let mut ap = 0.0;
    for p in 0..is_rel.len() {
        if is_rel[p] {
            let prefix_hits = is_rel[..=p].iter().filter(|&&b| b).count() as f64;
            ap += prefix_hits / (p + 1) as f64;
        }
    }
    ap /= k.min(relevant.len()) as f64;
    [precision, recall, dcg / idcg, ap]
}
