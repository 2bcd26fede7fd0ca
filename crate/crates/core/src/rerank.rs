//! LLM re-ranking of the GAT candidate pool, score fusion and explanations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::blocks::render_block;
use crate::llm::templates::PromptTemplates;
use crate::llm::{ChatRequest, Expected, Gateway, Structured};
use crate::profiles::doc::{normalize_tag, render_sections};
use crate::profiles::Profile;
use crate::util::par_map;

pub const BATCH: usize = 5;
pub const BATCH_STRIDE: usize = 3;
pub const RELEVANCY_ROUNDS: usize = 3;
pub const MAX_PROMPT_POOL: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum RerankError {
    #[error("only {available} scored items, pool needs {size}")]
    PoolTooSmall { available: usize, size: usize },
    #[error("pool of {0} exceeds the single-prompt limit of {MAX_PROMPT_POOL}")]
    PoolTooLarge(usize),
    #[error("fusion weight {0} outside [0, 1]")]
    BadWeight(f64),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// GAT order, no model calls.
    None,
    PromptLevel,
    PairwiseBst,
    BatchOverlap,
    Relevancy,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::None, Strategy::PromptLevel, Strategy::PairwiseBst, Strategy::BatchOverlap, Strategy::Relevancy];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::PromptLevel => "prompt",
            Strategy::PairwiseBst => "bst",
            Strategy::BatchOverlap => "batch",
            Strategy::Relevancy => "relevancy",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = RerankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "none" | "gat" => Strategy::None,
            "prompt" | "prompt_level" => Strategy::PromptLevel,
            "bst" | "pairwise" | "pairwise_bst" => Strategy::PairwiseBst,
            "batch" | "batch_overlap" => Strategy::BatchOverlap,
            "relevancy" => Strategy::Relevancy,
            other => return Err(RerankError::UnknownStrategy(other.to_string())),
        })
    }
}

/// Top GAT candidates for one user, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub user: u32,
    pub items: Vec<(u32, f64)>,
    /// The next few GAT candidates after the pool, used for padding.
    pub reserve: Vec<(u32, f64)>,
}

fn gat_cmp(a: &(u32, f64), b: &(u32, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Takes the `size` best of `scored` (item id, GAT score), ties to the lower id.
pub fn select_pool(user: u32, scored: &[(u32, f64)], size: usize) -> Result<CandidatePool, RerankError> {
    if scored.len() < size {
        return Err(RerankError::PoolTooSmall { available: scored.len(), size });
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(gat_cmp);
    let reserve = sorted[size..].iter().take(BATCH - 1).copied().collect();
    sorted.truncate(size);
    Ok(CandidatePool { user, items: sorted, reserve })
}

impl CandidatePool {
    pub fn ids(&self) -> Vec<u32> {
        self.items.iter().map(|x| x.0).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Extends from the reserve until the length is a multiple of `m` (as far as the reserve allows).
    pub fn padded_to_multiple(&self, m: usize) -> Self {
        let mut out = self.clone();
        let mut reserve = out.reserve.drain(..).collect::<Vec<_>>().into_iter();
        while out.items.len() % m != 0 {
            match reserve.next() {
                Some(x) => out.items.push(x),
                None => break,
            }
        }
        out.reserve = reserve.collect();
        out
    }

    /// Min-max normalized GAT scores; 0.5 for all when they are equal.
    pub fn gat_norm(&self) -> BTreeMap<u32, f64> {
        let lo = self.items.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
        let hi = self.items.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        self.items
            .iter()
            .map(|&(id, s)| (id, if hi > lo { (s - lo) / (hi - lo) } else { 0.5 }))
            .collect()
    }
}

/// Rendered profile blocks for one user and their candidates, shared by re-ranking and explanation.
#[derive(Debug, Clone)]
pub struct PromptContext {
    pub user_block: String,
    pub item_blocks: BTreeMap<u32, String>,
    user_tags: BTreeSet<String>,
    item_tags: BTreeMap<u32, BTreeSet<String>>,
}

impl PromptContext {
    pub fn new(user_profile: &Profile, item_profiles: &BTreeMap<u32, Profile>, items: &[u32]) -> Self {
        let user_block = render_block("user_profile", &[], &render_sections(&user_profile.sections()));
        let mut item_blocks = BTreeMap::new();
        let mut item_tags = BTreeMap::new();
        for &id in items {
            let (body, tags) = match item_profiles.get(&id) {
                Some(p) => (render_sections(&p.sections()), p.attributes.iter().cloned().collect()),
                None => ("## Overview\nunknown\n".to_string(), BTreeSet::new()),
            };
            item_blocks.insert(id, render_block("item", &[&id.to_string()], &body));
            item_tags.insert(id, tags);
        }
        Self { user_block, item_blocks, user_tags: user_profile.attributes.iter().cloned().collect(), item_tags }
    }

    fn candidates(&self, ids: &[u32]) -> String {
        ids.iter().filter_map(|id| self.item_blocks.get(id)).map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResult {
    pub strategy: Strategy,
    pub order: Vec<u32>,
    pub llm_scores: BTreeMap<u32, f64>,
    pub fallback_used: bool,
    /// Structured gateway calls issued.
    pub calls: usize,
}

/// `(N - r + 1) / N` for 1-based rank `r`.
pub fn rank_score(rank: usize, n: usize) -> f64 {
    (n + 1 - rank) as f64 / n as f64
}

fn scores_from_order(order: &[u32]) -> BTreeMap<u32, f64> {
    order.iter().enumerate().map(|(r, &id)| (id, rank_score(r + 1, order.len()))).collect()
}

pub struct Reranker<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a PromptTemplates,
    pub seed: u64,
}

impl Reranker<'_> {
    fn request(&self, stage: &str, template: &str, ctx: &PromptContext, key: &str, ids: &[u32]) -> ChatRequest {
        let prompt = self.templates.render(template, &[("user_profile", &ctx.user_block), (key, &ctx.candidates(ids))]);
        ChatRequest::single(stage, self.templates.system(), prompt)
    }

    fn ranked(&self, stage: &str, key: &str, ctx: &PromptContext, ids: &[u32]) -> Option<Vec<u32>> {
        let req = self.request(stage, stage, ctx, key, ids);
        match self.gateway.complete_structured(&req, &Expected::RankedIdList { candidates: ids.to_vec() }) {
            Ok(Structured::RankedIds(order)) => Some(order),
            Ok(_) => None,
            Err(e) => {
                log::warn!("{stage}: falling back to GAT order: {e}");
                None
            }
        }
    }

    fn workers(&self) -> usize {
        self.gateway.config().parallelism.max(1)
    }

    pub fn rerank(&self, strategy: Strategy, pool: &CandidatePool, ctx: &PromptContext) -> Result<RerankResult, RerankError> {
        Ok(match strategy {
            Strategy::None => RerankResult {
                strategy,
                order: pool.ids(),
                llm_scores: pool.gat_norm(),
                fallback_used: false,
                calls: 0,
            },
            Strategy::PromptLevel => self.prompt_level(pool, ctx)?,
            Strategy::PairwiseBst => self.pairwise_bst(pool, ctx),
            Strategy::BatchOverlap => self.batch_overlap(pool, ctx),
            Strategy::Relevancy => self.relevancy(pool, ctx),
        })
    }

    /// All candidates in one ranked-list call.
    pub fn prompt_level(&self, pool: &CandidatePool, ctx: &PromptContext) -> Result<RerankResult, RerankError> {
        if pool.len() > MAX_PROMPT_POOL {
            return Err(RerankError::PoolTooLarge(pool.len()));
        }
        let ids = pool.ids();
        let (order, fallback_used) = match self.ranked("rerank_prompt", "candidates_block", ctx, &ids) {
            Some(order) => (order, false),
            None => (ids, true),
        };
        Ok(RerankResult {
            strategy: Strategy::PromptLevel,
            llm_scores: scores_from_order(&order),
            order,
            fallback_used,
            calls: 1,
        })
    }

    /// AVL insertion in GAT order with a memoized model comparator.
    pub fn pairwise_bst(&self, pool: &CandidatePool, ctx: &PromptContext) -> RerankResult {
        let position: HashMap<u32, usize> = pool.items.iter().enumerate().map(|(i, x)| (x.0, i)).collect();
        let gat: HashMap<u32, f64> = pool.items.iter().copied().collect();
        let mut memo: HashMap<(u32, u32), Option<u32>> = HashMap::new();
        let mut calls = 0;
        let mut fallback_used = false;
        // true when `new` should precede `old`.
        let mut before = |new: u32, old: u32| -> bool {
            let (a, b) = if position[&new] < position[&old] { (new, old) } else { (old, new) };
            let winner = *memo.entry((a, b)).or_insert_with(|| {
                calls += 1;
                let req = self.request("rerank_pair", "rerank_pair", ctx, "candidates_block", &[a, b]);
                match self.gateway.complete_structured(&req, &Expected::PairChoice { a, b }) {
                    Ok(Structured::Pair(choice)) => choice,
                    other => {
                        if let Err(e) = other {
                            log::warn!("rerank_pair: comparing by GAT score: {e}");
                        }
                        fallback_used = true;
                        if gat[&a] > gat[&b] {
                            Some(a)
                        } else if gat[&b] > gat[&a] {
                            Some(b)
                        } else {
                            None
                        }
                    }
                }
            });
            // Ties keep insertion (GAT) order.
            winner == Some(new)
        };
        let mut tree = Avl::default();
        for &(id, _) in &pool.items {
            tree.insert(id, &mut before);
        }
        let order = tree.in_order();
        RerankResult { strategy: Strategy::PairwiseBst, llm_scores: scores_from_order(&order), order, fallback_used, calls }
    }

    /// Windows of five at stride three; an item's score is its mean normalized position.
    pub fn batch_overlap(&self, pool: &CandidatePool, ctx: &PromptContext) -> RerankResult {
        let ids = pool.ids();
        let windows = overlap_windows(ids.len(), BATCH, BATCH_STRIDE);
        let answers = par_map(&windows, self.workers(), |&(start, end)| {
            self.ranked("rerank_batch", "batch_block", ctx, &ids[start..end])
        });
        let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        let mut fallback_used = false;
        for (&(start, end), answer) in windows.iter().zip(answers) {
            let batch = &ids[start..end];
            let scored: Vec<(u32, f64)> = match answer {
                Some(order) => order.iter().enumerate().map(|(r, &id)| (id, rank_score(r + 1, batch.len()))).collect(),
                None => {
                    // Pool-wide GAT position, so a run where every batch fails keeps GAT order.
                    fallback_used = true;
                    (start..end).map(|i| (ids[i], rank_score(i + 1, ids.len()))).collect()
                }
            };
            for (id, score) in scored {
                let e = sums.entry(id).or_default();
                e.0 += score;
                e.1 += 1;
            }
        }
        let llm_scores: BTreeMap<u32, f64> = sums.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect();
        RerankResult {
            strategy: Strategy::BatchOverlap,
            order: order_by_score(&ids, &llm_scores),
            llm_scores,
            fallback_used,
            calls: windows.len(),
        }
    }

    /// Three seeded partitions into batches of five, each batch scored 0-100.
    pub fn relevancy(&self, pool: &CandidatePool, ctx: &PromptContext) -> RerankResult {
        let pool = pool.padded_to_multiple(BATCH);
        let ids = pool.ids();
        let batches = relevancy_batches(&ids, self.seed ^ u64::from(pool.user).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let answers = par_map(&batches, self.workers(), |batch| {
            let req = self.request("rerank_relevancy", "rerank_relevancy", ctx, "batch_block", batch);
            match self.gateway.complete_structured(&req, &Expected::IdScoreList { candidates: batch.clone() }) {
                Ok(Structured::IdScores(s)) => Some(s),
                Ok(_) => None,
                Err(e) => {
                    log::warn!("rerank_relevancy: batch dropped: {e}");
                    None
                }
            }
        });
        let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        let mut fallback_used = false;
        for answer in answers {
            match answer {
                Some(scores) => {
                    for (id, s) in scores {
                        let e = sums.entry(id).or_default();
                        e.0 += f64::from(s);
                        e.1 += 1;
                    }
                }
                None => fallback_used = true,
            }
        }
        let gat_norm = pool.gat_norm();
        let llm_scores: BTreeMap<u32, f64> = ids
            .iter()
            .map(|id| match sums.get(id) {
                Some(&(s, n)) if n > 0 => (*id, s / n as f64 / 100.0),
                _ => (*id, gat_norm[id]),
            })
            .collect();
        RerankResult {
            strategy: Strategy::Relevancy,
            order: order_by_score(&ids, &llm_scores),
            llm_scores,
            fallback_used,
            calls: batches.len(),
        }
    }
}

/// `[start, end)` windows of `size` at `stride`, the last one right-aligned to the end.
pub fn overlap_windows(n: usize, size: usize, stride: usize) -> Vec<(usize, usize)> {
    if n <= size {
        return vec![(0, n)];
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + size <= n {
        out.push((start, start + size));
        start += stride;
    }
    if out.last().is_some_and(|w| w.1 < n) {
        out.push((n - size, n));
    }
    out
}

/// Three independent shuffles, each cut into consecutive batches of five.
pub fn relevancy_batches(ids: &[u32], seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..RELEVANCY_ROUNDS {
        let mut perm = ids.to_vec();
        perm.shuffle(&mut rng);
        out.extend(perm.chunks(BATCH).map(<[u32]>::to_vec));
    }
    out
}

/// Descending score, ties by position in `gat_order`.
fn order_by_score(gat_order: &[u32], scores: &BTreeMap<u32, f64>) -> Vec<u32> {
    let mut order = gat_order.to_vec();
    order.sort_by(|a, b| scores[b].total_cmp(&scores[a]));
    order
}

#[derive(Default)]
struct Avl {
    nodes: Vec<AvlNode>,
    root: Option<usize>,
}

struct AvlNode {
    item: u32,
    left: Option<usize>,
    right: Option<usize>,
    height: i32,
}

impl Avl {
    fn height(&self, n: Option<usize>) -> i32 {
        n.map_or(0, |i| self.nodes[i].height)
    }

    fn update(&mut self, i: usize) {
        self.nodes[i].height = 1 + self.height(self.nodes[i].left).max(self.height(self.nodes[i].right));
    }

    fn balance(&self, i: usize) -> i32 {
        self.height(self.nodes[i].left) - self.height(self.nodes[i].right)
    }

    fn rotate_right(&mut self, i: usize) -> usize {
        let l = self.nodes[i].left.expect("left child");
        self.nodes[i].left = self.nodes[l].right;
        self.nodes[l].right = Some(i);
        self.update(i);
        self.update(l);
        l
    }

    fn rotate_left(&mut self, i: usize) -> usize {
        let r = self.nodes[i].right.expect("right child");
        self.nodes[i].right = self.nodes[r].left;
        self.nodes[r].left = Some(i);
        self.update(i);
        self.update(r);
        r
    }

    fn insert(&mut self, item: u32, before: &mut impl FnMut(u32, u32) -> bool) {
        let root = self.root;
        self.root = Some(self.insert_at(root, item, before));
    }

    fn insert_at(&mut self, node: Option<usize>, item: u32, before: &mut impl FnMut(u32, u32) -> bool) -> usize {
        let Some(i) = node else {
            self.nodes.push(AvlNode { item, left: None, right: None, height: 1 });
            return self.nodes.len() - 1;
        };
        if before(item, self.nodes[i].item) {
            let l = self.insert_at(self.nodes[i].left, item, before);
            self.nodes[i].left = Some(l);
        } else {
            let r = self.insert_at(self.nodes[i].right, item, before);
            self.nodes[i].right = Some(r);
        }
        self.update(i);
        let b = self.balance(i);
        if b > 1 {
            let l = self.nodes[i].left.unwrap();
            if self.balance(l) < 0 {
                let nl = self.rotate_left(l);
                self.nodes[i].left = Some(nl);
            }
            return self.rotate_right(i);
        }
        if b < -1 {
            let r = self.nodes[i].right.unwrap();
            if self.balance(r) > 0 {
                let nr = self.rotate_right(r);
                self.nodes[i].right = Some(nr);
            }
            return self.rotate_left(i);
        }
        i
    }

    fn in_order(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = Vec::new();
        let mut cur = self.root;
        while cur.is_some() || !stack.is_empty() {
            while let Some(i) = cur {
                stack.push(i);
                cur = self.nodes[i].left;
            }
            let i = stack.pop().unwrap();
            out.push(self.nodes[i].item);
            cur = self.nodes[i].right;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedItem {
    pub item_id: u32,
    pub fused_score: f64,
    pub llm_score: f64,
    pub gat_score: f64,
}

/// `w * llm + (1 - w) * gat_norm`, best first, ties by GAT order.
pub fn fuse(pool: &CandidatePool, rr: &RerankResult, w: f64) -> Result<Vec<FusedItem>, RerankError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(RerankError::BadWeight(w));
    }
    let norm = pool.gat_norm();
    let mut out: Vec<FusedItem> = pool
        .items
        .iter()
        .map(|&(id, gat)| {
            let llm = rr.llm_scores.get(&id).copied().unwrap_or(norm[&id]);
            FusedItem { item_id: id, fused_score: w * llm + (1.0 - w) * norm[&id], llm_score: llm, gat_score: gat }
        })
        .collect();
    if w == 1.0 {
        // Pure model order, which may break score ties differently from GAT order.
        let rank: HashMap<u32, usize> = rr.order.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        out.sort_by_key(|f| rank.get(&f.item_id).copied().unwrap_or(usize::MAX));
    } else {
        out.sort_by(|a, b| b.fused_score.total_cmp(&a.fused_score));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub item_id: u32,
    pub text: String,
    pub cited_tags: Vec<String>,
}

/// One call covering the final top-k. Failures yield no explanations.
pub fn explain(items: &[u32], ctx: &PromptContext, gateway: &Gateway, templates: &PromptTemplates) -> Vec<Explanation> {
    if items.is_empty() {
        return Vec::new();
    }
    let prompt = templates.render("explain", &[("user_profile", &ctx.user_block), ("candidates_block", &ctx.candidates(items))]);
    let req = ChatRequest::single("explain", templates.system(), prompt);
    let raw = match gateway.complete_structured(&req, &Expected::ExplanationList { candidates: items.to_vec() }) {
        Ok(Structured::Explanations(raw)) => raw,
        Ok(_) => return Vec::new(),
        Err(e) => {
            log::warn!("explain: no explanations: {e}");
            return Vec::new();
        }
    };
    let empty = BTreeSet::new();
    raw.into_iter()
        .filter(|r| items.contains(&r.id) && !r.text.trim().is_empty())
        .map(|r| {
            let item_tags = ctx.item_tags.get(&r.id).unwrap_or(&empty);
            let mut cited = Vec::new();
            for tag in r.tags {
                let t = normalize_tag(&tag);
                if ctx.user_tags.contains(&t) || item_tags.contains(&t) {
                    if !cited.contains(&t) {
                        cited.push(t);
                    }
                } else {
                    log::warn!("explain: item {} cites unknown tag {tag:?}", r.id);
                }
            }
            Explanation { item_id: r.id, text: r.text.trim().to_string(), cited_tags: cited }
        })
        .collect()
}

/// Convenience wrapper: shared context, re-ranking, fusion and optional explanations.
pub struct UserRerank {
    pub result: RerankResult,
    pub fused: Vec<FusedItem>,
    pub explanations: Vec<Explanation>,
}

pub fn rerank_user(
    reranker: &Reranker,
    strategy: Strategy,
    pool: &CandidatePool,
    user_profile: &Profile,
    item_profiles: &BTreeMap<u32, Profile>,
    w: f64,
    explain_top: usize,
) -> Result<UserRerank, RerankError> {
    let mut ids = pool.ids();
    ids.extend(pool.reserve.iter().map(|x| x.0));
    let ctx = PromptContext::new(user_profile, item_profiles, &ids);
    let result = reranker.rerank(strategy, pool, &ctx)?;
    let fuse_pool = if strategy == Strategy::Relevancy { pool.padded_to_multiple(BATCH) } else { pool.clone() };
    let fused = fuse(&fuse_pool, &result, w)?;
    let explanations = if explain_top > 0 && strategy != Strategy::None {
        let top: Vec<u32> = fused.iter().take(explain_top).map(|f| f.item_id).collect();
        explain(&top, &ctx, reranker.gateway, reranker.templates)
    } else {
        Vec::new()
    };
    Ok(UserRerank { result, fused, explanations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{AttemptError, ChatProvider, ProviderConfig};
    use crate::profiles::Subject;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use std::sync::Arc;

    fn profile(subject: Subject, attrs: &[&str]) -> Profile {
        Profile::new(subject, "overview", attrs.iter().copied(), "", Vec::<String>::new()).unwrap()
    }

    fn pool(n: u32) -> CandidatePool {
        let items: Vec<(u32, f64)> = (0..n).map(|i| (100 + i, 10.0 - i as f64)).collect();
        select_pool(1, &items, n as usize).unwrap()
    }

    fn mock_gateway() -> Gateway {
        Gateway::from_config(ProviderConfig { parallelism: 1, ..ProviderConfig::mock(3) }).unwrap()
    }

    struct Broken;
    impl ChatProvider for Broken {
        fn id(&self) -> String {
            "broken".into()
        }
        fn send(&self, _: &ChatRequest) -> Result<String, AttemptError> {
            Ok("no fenced block here".into())
        }
    }

    fn broken_gateway() -> Gateway {
        Gateway::new(Arc::new(Broken), ProviderConfig { backoff_ms: 0, ..ProviderConfig::default() })
    }

    /// User tags t0..t9; item `100+i` shares `k_i` of them.
    fn world(shared: &[usize]) -> (Profile, BTreeMap<u32, Profile>) {
        let user_tags: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let user = profile(Subject::User(1), &user_tags.iter().map(String::as_str).collect::<Vec<_>>());
        let mut items = BTreeMap::new();
        for (i, &k) in shared.iter().enumerate() {
            let id = 100 + i as u32;
            let mut tags: Vec<String> = user_tags[..k].to_vec();
            tags.push(format!("own{i}"));
            items.insert(id, profile(Subject::Item(id), &tags.iter().map(String::as_str).collect::<Vec<_>>()));
        }
        (user, items)
    }

    #[test]
    fn pool_selection() {
        let scored: Vec<(u32, f64)> = (0..100).map(|i| (i, 100.0 - i as f64)).collect();
        assert_eq!(select_pool(1, &scored, 20).unwrap().ids(), (0..20).collect::<Vec<_>>());
        assert_eq!(
            select_pool(1, &scored[..15], 20),
            Err(RerankError::PoolTooSmall { available: 15, size: 20 })
        );
        let tied = vec![(9, 1.0), (5, 2.0), (7, 1.0), (3, 1.0)];
        assert_eq!(select_pool(1, &tied, 2).unwrap().ids(), vec![5, 3]);
    }

    #[test]
    fn windows() {
        assert_eq!(overlap_windows(8, 5, 3), vec![(0, 5), (3, 8)]);
        assert_eq!(overlap_windows(30, 5, 3).last(), Some(&(25, 30)));
        assert_eq!(overlap_windows(5, 5, 3), vec![(0, 5)]);
        let w = overlap_windows(30, 5, 3);
        assert!(w.windows(2).all(|p| p[1].0 < p[0].1), "consecutive windows overlap");
    }

    #[test]
    fn rank_scores() {
        assert_eq!(rank_score(1, 20), 1.0);
        assert_eq!(rank_score(20, 20), 0.05);
    }

    #[test]
    fn prompt_level_puts_best_overlap_first() {
        let (user, items) = world(&[1, 0, 8, 2]);
        let p = pool(4);
        let ctx = PromptContext::new(&user, &items, &p.ids());
        let gw = mock_gateway();
        let r = Reranker { gateway: &gw, templates: &PromptTemplates::default(), seed: 0 };
        let res = r.prompt_level(&p, &ctx).unwrap();
        assert_eq!(res.order[0], 102);
        assert!(!res.fallback_used);
        assert_eq!(res.llm_scores[&102], 1.0);

        let bad = broken_gateway();
        let r = Reranker { gateway: &bad, templates: &PromptTemplates::default(), seed: 0 };
        let res = r.prompt_level(&p, &ctx).unwrap();
        assert_eq!(res.order, p.ids());
        assert!(res.fallback_used);
        assert_eq!(bad.send_count(), 3);
    }

    #[test]
    fn bst_matches_sort_oracle() {
        // Distinct overlap counts form a total order under the mock comparator.
        let shared = [3, 9, 0, 5, 7, 1, 8, 2, 6, 4];
        let (user, items) = world(&shared);
        let p = pool(shared.len() as u32);
        let ctx = PromptContext::new(&user, &items, &p.ids());
        let gw = mock_gateway();
        let r = Reranker { gateway: &gw, templates: &PromptTemplates::default(), seed: 0 };
        let res = r.pairwise_bst(&p, &ctx);
        let mut oracle = p.ids();
        oracle.sort_by_key(|id| std::cmp::Reverse(shared[(id - 100) as usize]));
        assert_eq!(res.order, oracle);
        let n = shared.len() as f64;
        assert!(res.calls as f64 <= (n * n.log2()).ceil());
        assert_eq!(res.calls, gw.structured_call_count());
        assert!(!res.fallback_used);
    }

    #[test]
    fn bst_degenerate_and_ties() {
        let (user, items) = world(&[2, 2, 2, 2, 2, 2]);
        let gw = mock_gateway();
        let r = Reranker { gateway: &gw, templates: &PromptTemplates::default(), seed: 0 };
        let single = pool(1);
        let res = r.pairwise_bst(&single, &PromptContext::new(&user, &items, &single.ids()));
        assert_eq!((res.order, res.calls), (vec![100], 0));
        let p = pool(6);
        let res = r.pairwise_bst(&p, &PromptContext::new(&user, &items, &p.ids()));
        assert_eq!(res.order, p.ids());
    }

    #[test]
    fn batch_overlap_counts_and_fallback() {
        let (user, items) = world(&[0, 1, 2, 3, 9, 4, 5, 6]);
        let p = pool(8);
        let ctx = PromptContext::new(&user, &items, &p.ids());
        let gw = mock_gateway();
        let r = Reranker { gateway: &gw, templates: &PromptTemplates::default(), seed: 0 };
        let res = r.batch_overlap(&p, &ctx);
        assert_eq!(res.calls, 2);
        // Item 104 (9 shared) wins both of its batches.
        assert_eq!(res.llm_scores[&104], 1.0);
        assert_eq!(res.order[0], 104);

        let bad = broken_gateway();
        let r = Reranker { gateway: &bad, templates: &PromptTemplates::default(), seed: 0 };
        let res = r.batch_overlap(&p, &ctx);
        assert_eq!(res.order, p.ids());
        assert!(res.fallback_used);
    }

    #[test]
    fn relevancy_three_appearances() {
        let shared: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let (user, items) = world(&shared);
        let p = pool(20);
        let ctx = PromptContext::new(&user, &items, &p.ids());
        let batches = relevancy_batches(&p.ids(), 5);
        assert_eq!(batches.len(), 12);
        for id in p.ids() {
            assert_eq!(batches.iter().filter(|b| b.contains(&id)).count(), 3);
        }
        let gw = mock_gateway();
        let r = Reranker { gateway: &gw, templates: &PromptTemplates::default(), seed: 5 };
        let res = r.relevancy(&p, &ctx);
        assert_eq!(res.calls, 12);
        assert_eq!(gw.structured_call_count(), 12);
        assert!(!res.fallback_used);
    }

    #[test]
    fn relevancy_pads_from_reserve() {
        let items: Vec<(u32, f64)> = (0..30).map(|i| (i, 30.0 - i as f64)).collect();
        let p = select_pool(1, &items, 18).unwrap();
        let padded = p.padded_to_multiple(5);
        assert_eq!(padded.len(), 20);
        assert_eq!(padded.ids()[18..], [18, 19]);
    }

    #[test]
    fn fusion() {
        let p = CandidatePool { user: 1, items: vec![(1, 4.0), (2, 3.0), (3, 2.0)], reserve: vec![] };
        let rr = RerankResult {
            strategy: Strategy::PromptLevel,
            order: vec![3, 2, 1],
            llm_scores: BTreeMap::from([(1, 0.0), (2, 1.0), (3, 0.5)]),
            fallback_used: false,
            calls: 1,
        };
        let f = fuse(&p, &rr, 0.8).unwrap();
        // item 2: 0.8 * 1.0 + 0.2 * 0.5
        assert!((f[0].fused_score - 0.9).abs() < 1e-12);
        assert_eq!(f[0].item_id, 2);
        assert_eq!(fuse(&p, &rr, 0.0).unwrap().iter().map(|x| x.item_id).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(fuse(&p, &rr, 1.0).unwrap().iter().map(|x| x.item_id).collect::<Vec<_>>(), vec![3, 2, 1]);
        assert!(fuse(&p, &rr, 1.5).is_err());
        let flat = CandidatePool { user: 1, items: vec![(1, 2.0), (2, 2.0)], reserve: vec![] };
        assert_eq!(flat.gat_norm(), BTreeMap::from([(1, 0.5), (2, 0.5)]));
    }

    #[test]
    fn explanations_cite_shared_tags() {
        let (user, items) = world(&[3, 0]);
        let p = pool(2);
        let ctx = PromptContext::new(&user, &items, &p.ids());
        let gw = mock_gateway();
        let ex = explain(&p.ids(), &ctx, &gw, &PromptTemplates::default());
        assert_eq!(ex.len(), 2);
        assert!(ex[0].text.contains("t0"));
        assert_eq!(ex[0].cited_tags, vec!["t0"]);
        assert!(ex[1].cited_tags.is_empty() && !ex[1].text.is_empty());
        assert!(explain(&p.ids(), &ctx, &broken_gateway(), &PromptTemplates::default()).is_empty());
    }

    fn is_perm(order: &[u32], pool: &[u32]) -> bool {
        let mut a = order.to_vec();
        let mut b = pool.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn every_strategy_permutes_the_pool(shared in proptest::collection::vec(0usize..10, 5..21), broken in any::<bool>()) {
            let (user, items) = world(&shared);
            let p = pool(shared.len() as u32);
            let ctx = PromptContext::new(&user, &items, &p.ids());
            let gw = if broken { broken_gateway() } else { mock_gateway() };
            let r = Reranker { gateway: &gw, templates: &PromptTemplates::default(), seed: 1 };
            for s in Strategy::ALL {
                let res = r.rerank(s, &p, &ctx).unwrap();
                let expected_pool = if s == Strategy::Relevancy { p.padded_to_multiple(BATCH).ids() } else { p.ids() };
                prop_assert!(is_perm(&res.order, &expected_pool));
                prop_assert_eq!(res.llm_scores.len(), expected_pool.len());
                if broken && s != Strategy::None {
                    prop_assert!(res.fallback_used);
                    prop_assert_eq!(&res.order, &expected_pool);
                }
            }
        }

        #[test]
        fn fuse_is_monotone(scores in proptest::collection::vec(0.0f64..1.0, 6), idx in 0usize..6, bump in 0.0f64..1.0) {
            let p = pool(6);
            let mk = |s: &[f64]| RerankResult {
                strategy: Strategy::Relevancy,
                order: p.ids(),
                llm_scores: p.ids().into_iter().zip(s.iter().copied()).collect(),
                fallback_used: false,
                calls: 0,
            };
            let id = 100 + idx as u32;
            let rank_of = |f: &[FusedItem]| f.iter().position(|x| x.item_id == id).unwrap();
            let before = rank_of(&fuse(&p, &mk(&scores), 0.8).unwrap());
            let mut raised = scores.clone();
            raised[idx] += bump;
            let after = rank_of(&fuse(&p, &mk(&raised), 0.8).unwrap());
            prop_assert!(after <= before);
        }
    }
}
