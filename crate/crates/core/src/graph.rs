//! Bipartite user-item graph built from train ratings.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{polarity, ItemId, Polarity, RatingRecord, UserId};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("user index {0} has positive edges to every item")]
    NoNegativeAvailable(usize),
    #[error("graph has no positive edges")]
    NoEdges,
    #[error("rating {0} outside 1..=5")]
    BadRating(u8),
}

/// Dense indices: users `0..n_users`, items `0..n_items`, each in ascending external-id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BipartiteGraph {
    pub n_users: usize,
    pub n_items: usize,
    pub user_ids: Vec<UserId>,
    pub item_ids: Vec<ItemId>,
    pub pos_adj_user: Vec<Vec<u32>>,
    pub pos_adj_item: Vec<Vec<u32>>,
    pub neg_pairs: Vec<Vec<u32>>,
    #[serde(skip)]
    user_index: BTreeMap<UserId, usize>,
    #[serde(skip)]
    item_index: BTreeMap<ItemId, usize>,
    #[serde(skip)]
    edges: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainTriple {
    pub user: usize,
    pub pos_item: usize,
    pub neg_item: usize,
}

/// Node set taken from the ratings themselves.
pub fn build_graph(train: &[RatingRecord]) -> Result<BipartiteGraph, GraphError> {
    build_graph_with_nodes(train, &[], &[])
}

/// Like [`build_graph`] but also adds the given users and items as (possibly isolated) nodes.
pub fn build_graph_with_nodes(
    train: &[RatingRecord],
    extra_users: &[UserId],
    extra_items: &[ItemId],
) -> Result<BipartiteGraph, GraphError> {
    let users: BTreeSet<UserId> = train.iter().map(|r| r.user_id).chain(extra_users.iter().copied()).collect();
    let items: BTreeSet<ItemId> = train.iter().map(|r| r.item_id).chain(extra_items.iter().copied()).collect();
    let user_ids: Vec<UserId> = users.into_iter().collect();
    let item_ids: Vec<ItemId> = items.into_iter().collect();
    let user_index: BTreeMap<UserId, usize> = user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let item_index: BTreeMap<ItemId, usize> = item_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();

    let mut pos: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); user_ids.len()];
    let mut neg: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); user_ids.len()];
    for r in train {
        let u = user_index[&r.user_id];
        let i = item_index[&r.item_id] as u32;
        match polarity(i64::from(r.rating)).map_err(|_| GraphError::BadRating(r.rating))? {
            Polarity::Positive => {
                pos[u].insert(i);
            }
            Polarity::Negative => {
                neg[u].insert(i);
            }
            Polarity::Neutral => {}
        }
    }
    // A pair rated both ways keeps only the positive edge.
    for (p, n) in pos.iter().zip(neg.iter_mut()) {
        n.retain(|i| !p.contains(i));
    }

    let mut pos_adj_item: Vec<Vec<u32>> = vec![Vec::new(); item_ids.len()];
    let mut edges = Vec::new();
    for (u, set) in pos.iter().enumerate() {
        for &i in set {
            pos_adj_item[i as usize].push(u as u32);
            edges.push((u as u32, i));
        }
    }
    Ok(BipartiteGraph {
        n_users: user_ids.len(),
        n_items: item_ids.len(),
        pos_adj_user: pos.into_iter().map(|s| s.into_iter().collect()).collect(),
        pos_adj_item,
        neg_pairs: neg.into_iter().map(|s| s.into_iter().collect()).collect(),
        user_ids,
        item_ids,
        user_index,
        item_index,
        edges,
    })
}

impl BipartiteGraph {
    pub fn user_index(&self, id: UserId) -> Option<usize> {
        self.user_index.get(&id).copied()
    }

    pub fn item_index(&self, id: ItemId) -> Option<usize> {
        self.item_index.get(&id).copied()
    }

    /// Positive edges as (user index, item index), ordered by user then item.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_positive(&self, user: usize, item: usize) -> bool {
        self.pos_adj_user[user].binary_search(&(item as u32)).is_ok()
    }

    /// Same node set, positive edges restricted to `keep`.
    pub fn with_edges(&self, keep: &[(u32, u32)]) -> Self {
        let mut pos_adj_user = vec![Vec::new(); self.n_users];
        let mut pos_adj_item = vec![Vec::new(); self.n_items];
        let mut edges = keep.to_vec();
        edges.sort_unstable();
        edges.dedup();
        for &(u, i) in &edges {
            pos_adj_user[u as usize].push(i);
            pos_adj_item[i as usize].push(u);
        }
        for adj in &mut pos_adj_item {
            adj.sort_unstable();
        }
        Self { pos_adj_user, pos_adj_item, edges, ..self.clone() }
    }

    /// Rebuilds the lookup tables after deserialization.
    pub fn reindex(&mut self) {
        self.user_index = self.user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        self.item_index = self.item_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        self.edges = self
            .pos_adj_user
            .iter()
            .enumerate()
            .flat_map(|(u, adj)| adj.iter().map(move |&i| (u as u32, i)))
            .collect();
    }
}

pub fn sample_negative<R: Rng>(
    graph: &BipartiteGraph,
    user: usize,
    rng: &mut R,
    hard_prob: f64,
) -> Result<usize, GraphError> {
    let pos = &graph.pos_adj_user[user];
    if pos.len() >= graph.n_items {
        return Err(GraphError::NoNegativeAvailable(user));
    }
    let hard = &graph.neg_pairs[user];
    if !hard.is_empty() && rng.random::<f64>() < hard_prob {
        return Ok(hard[rng.random_range(0..hard.len())] as usize);
    }
    for _ in 0..64 {
        let i = rng.random_range(0..graph.n_items);
        if pos.binary_search(&(i as u32)).is_err() {
            return Ok(i);
        }
    }
    // Dense rows: pick the k-th non-positive item directly.
    let k = rng.random_range(0..graph.n_items - pos.len());
    let mut seen = 0;
    for i in 0..graph.n_items {
        if pos.binary_search(&(i as u32)).is_err() {
            if seen == k {
                return Ok(i);
            }
            seen += 1;
        }
    }
    unreachable!("complement has n_items - |pos| elements")
}

pub fn make_training_batch<R: Rng>(
    graph: &BipartiteGraph,
    batch_size: usize,
    hard_prob: f64,
    rng: &mut R,
) -> Result<Vec<TrainTriple>, GraphError> {
    if batch_size == 0 {
        return Ok(Vec::new());
    }
    if graph.edges.is_empty() {
        return Err(GraphError::NoEdges);
    }
    let mut out = Vec::with_capacity(batch_size);
    while out.len() < batch_size {
        let (u, i) = graph.edges[rng.random_range(0..graph.edges.len())];
        let neg_item = sample_negative(graph, u as usize, rng, hard_prob)?;
        out.push(TrainTriple { user: u as usize, pos_item: i as usize, neg_item });
    }
    Ok(out)
}
