//! Graph attention network over the bipartite graph, with a hand-written backward pass.
//!
//! Nodes share one index space: users `0..n_users`, then items. Every node attends over its
//! positive-edge neighbours plus itself.

mod checkpoint;
mod train;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbeddingStore;
use crate::graph::{BipartiteGraph, GraphError, TrainTriple};
use crate::profiles::Subject;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes};
pub use train::{train, train_with, AdamW, EpochLog, TrainLog};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum GatError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no embedding for {0}")]
    MissingEmbedding(Subject),
    #[error("non-finite values in layer {0}")]
    NonFinite(usize),
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub lambda_cos: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Share of training negatives drawn from the user's explicit dislikes.
    pub hard_prob: f64,
    pub seed: u64,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            input_dim: 384,
            hidden_dim: 64,
            heads: 4,
            layers: 3,
            dropout: 0.1,
            leaky_slope: 0.2,
            lambda_cos: 0.5,
            lr: 1e-3,
            weight_decay: 1e-5,
            max_epochs: 300,
            patience: 10,
            batch_size: 1024,
            hard_prob: 0.0,
            seed: 0,
        }
    }
}

impl GatConfig {
    pub fn validate(&self) -> Result<(), GatError> {
        let bad = |m: String| Err(GatError::InvalidConfig(m));
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!("hidden_dim {} not divisible by heads {}", self.hidden_dim, self.heads));
        }
        if self.input_dim == 0 || self.layers == 0 {
            return bad("input_dim and layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.lambda_cos < 0.0 || !self.lambda_cos.is_finite() {
            return bad(format!("lambda_cos {} must be >= 0", self.lambda_cos));
        }
        if !(0.0..=1.0).contains(&self.hard_prob) {
            return bad(format!("hard_prob {} outside [0, 1]", self.hard_prob));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `hidden × hidden`; columns `h*dk..(h+1)*dk` are head `h`'s feature map.
    pub w: Array2<f64>,
    /// `heads × 2*dk`; the first half scores the attending node, the second its neighbour.
    pub att: Array2<f64>,
    pub ln_scale: Array2<f64>,
    pub ln_shift: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatParams {
    pub input_w: Array2<f64>,
    pub input_b: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

impl GatParams {
    pub fn zeros(cfg: &GatConfig) -> Self {
        let d = cfg.hidden_dim;
        Self {
            input_w: Array2::zeros((cfg.input_dim, d)),
            input_b: Array2::zeros((1, d)),
            layers: (0..cfg.layers)
                .map(|_| LayerParams {
                    w: Array2::zeros((d, d)),
                    att: Array2::zeros((cfg.heads, 2 * cfg.head_dim())),
                    ln_scale: Array2::zeros((1, d)),
                    ln_shift: Array2::zeros((1, d)),
                })
                .collect(),
        }
    }

    /// Tensors in checkpoint order, with names.
    pub fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![("input_w".to_string(), &self.input_w), ("input_b".to_string(), &self.input_b)];
        for (l, lp) in self.layers.iter().enumerate() {
            out.push((format!("layer{}.w", l + 1), &lp.w));
            out.push((format!("layer{}.att", l + 1), &lp.att));
            out.push((format!("layer{}.ln_scale", l + 1), &lp.ln_scale));
            out.push((format!("layer{}.ln_shift", l + 1), &lp.ln_shift));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.input_w, &mut self.input_b];
        for lp in &mut self.layers {
            out.push(&mut lp.w);
            out.push(&mut lp.att);
            out.push(&mut lp.ln_scale);
            out.push(&mut lp.ln_shift);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Input features, one row per node in unified order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub x: Array2<f64>,
}

impl NodeFeatures {
    pub fn from_store(graph: &BipartiteGraph, store: &EmbeddingStore) -> Result<Self, GatError> {
        let subjects = graph
            .user_ids
            .iter()
            .map(|&u| Subject::User(u))
            .chain(graph.item_ids.iter().map(|&i| Subject::Item(i)));
        let mut x = Array2::zeros((graph.n_users + graph.n_items, store.dim));
        for (row, subject) in subjects.enumerate() {
            let v = store.get(subject).ok_or(GatError::MissingEmbedding(subject))?;
            for (dst, &src) in x.row_mut(row).iter_mut().zip(v.values()) {
                *dst = f64::from(src);
            }
        }
        Ok(Self { x })
    }
}

/// Neighbourhoods in CSR form, self-loop included, columns sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    pub n_users: usize,
    pub n_nodes: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
}

impl Adjacency {
    pub fn new(graph: &BipartiteGraph) -> Self {
        let nu = graph.n_users;
        let n = nu + graph.n_items;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(n + 2 * graph.n_edges());
        row_ptr.push(0);
        for (u, adj) in graph.pos_adj_user.iter().enumerate() {
            cols.push(u as u32);
            cols.extend(adj.iter().map(|&i| i + nu as u32));
            row_ptr.push(cols.len());
        }
        for (i, adj) in graph.pos_adj_item.iter().enumerate() {
            // Users sort before items, so the self-loop goes last.
            cols.extend_from_slice(adj);
            cols.push((nu + i) as u32);
            row_ptr.push(cols.len());
        }
        Self { n_users: nu, n_nodes: n, row_ptr, cols }
    }

    fn row(&self, v: usize) -> std::ops::Range<usize> {
        self.row_ptr[v]..self.row_ptr[v + 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates {
    pub user_states: Array2<f64>,
    pub item_states: Array2<f64>,
}

impl NodeStates {
    fn from_unified(h: &Array2<f64>, n_users: usize) -> Self {
        Self {
            user_states: h.slice(ndarray::s![..n_users, ..]).to_owned(),
            item_states: h.slice(ndarray::s![n_users.., ..]).to_owned(),
        }
    }
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

/// Checks that `store` covers every node, then draws Xavier-uniform weights.
pub fn init_params<R: Rng>(
    cfg: &GatConfig,
    graph: &BipartiteGraph,
    store: &EmbeddingStore,
    rng: &mut R,
) -> Result<GatParams, GatError> {
    cfg.validate()?;
    for &u in &graph.user_ids {
        store.get(Subject::User(u)).ok_or(GatError::MissingEmbedding(Subject::User(u)))?;
    }
    for &i in &graph.item_ids {
        store.get(Subject::Item(i)).ok_or(GatError::MissingEmbedding(Subject::Item(i)))?;
    }
    if store.dim != cfg.input_dim {
        return Err(GatError::InvalidConfig(format!("store dim {} != input_dim {}", store.dim, cfg.input_dim)));
    }
    Ok(init_params_random(cfg, rng))
}

pub fn init_params_random<R: Rng>(cfg: &GatConfig, rng: &mut R) -> GatParams {
    let d = cfg.hidden_dim;
    let dk = cfg.head_dim();
    let input_w = xavier_uniform(cfg.input_dim, d, cfg.input_dim, d, rng);
    let layers = (0..cfg.layers)
        .map(|_| {
            let mut w = Array2::zeros((d, d));
            for h in 0..cfg.heads {
                let block = xavier_uniform(d, dk, d, dk, rng);
                w.slice_mut(ndarray::s![.., h * dk..(h + 1) * dk]).assign(&block);
            }
            let att = xavier_uniform(cfg.heads, 2 * dk, 2 * dk, 1, rng);
            LayerParams { w, att, ln_scale: Array2::ones((1, d)), ln_shift: Array2::zeros((1, d)) }
        })
        .collect();
    GatParams { input_w, input_b: Array2::zeros((1, d)), layers }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Derivative of LeakyReLU; at exactly 0 the mean of the one-sided slopes.
fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        slope
    } else {
        0.5 * (1.0 + slope)
    }
}

/// Inverted-dropout scale factors: 0 with probability `p`, else `1/(1-p)`.
fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
}

struct LayerCache {
    input: Array2<f64>,
    in_mask: Option<Vec<f64>>,
    dropped: Option<Array2<f64>>,
    z: Array2<f64>,
    /// Pre-activation logits and attention weights, indexed `entry * heads + head`.
    pre: Vec<f64>,
    alpha: Vec<f64>,
    att_mask: Option<Vec<f64>>,
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
    y: Array2<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    out: Array2<f64>,
}

fn layer_forward(
    adj: &Adjacency,
    lp: &LayerParams,
    cfg: &GatConfig,
    input: Array2<f64>,
    activate: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, LayerCache) {
    let n = adj.n_nodes;
    let d = cfg.hidden_dim;
    let heads = cfg.heads;
    let dk = cfg.head_dim();
    let slope = cfg.leaky_slope;
    let p = cfg.dropout;

    let in_mask = match rng.as_deref_mut() {
        Some(r) if p > 0.0 => Some(dropout_mask(r, n * d, p)),
        _ => None,
    };
    let dropped = in_mask.as_ref().map(|m| {
        let mut x = input.clone();
        x.as_slice_mut().unwrap().iter_mut().zip(m).for_each(|(v, s)| *v *= s);
        x
    });
    let z = dropped.as_ref().unwrap_or(&input).dot(&lp.w);
    let zs = z.as_slice().unwrap();
    let att = lp.att.as_slice().unwrap();

    // Per-node halves of the attention logit.
    let mut s_self = vec![0.0; n * heads];
    let mut s_nbr = vec![0.0; n * heads];
    for v in 0..n {
        for h in 0..heads {
            let zv = &zs[v * d + h * dk..v * d + (h + 1) * dk];
            let a = &att[h * 2 * dk..(h + 1) * 2 * dk];
            s_self[v * heads + h] = zv.iter().zip(&a[..dk]).map(|(x, y)| x * y).sum();
            s_nbr[v * heads + h] = zv.iter().zip(&a[dk..]).map(|(x, y)| x * y).sum();
        }
    }

    let n_entries = adj.cols.len();
    let mut pre = vec![0.0; n_entries * heads];
    let mut alpha = vec![0.0; n_entries * heads];
    for v in 0..n {
        let row = adj.row(v);
        for h in 0..heads {
            let mut max = f64::NEG_INFINITY;
            for e in row.clone() {
                let u = adj.cols[e] as usize;
                let x = s_self[v * heads + h] + s_nbr[u * heads + h];
                pre[e * heads + h] = x;
                max = max.max(leaky(x, slope));
            }
            let mut sum = 0.0;
            for e in row.clone() {
                let w = (leaky(pre[e * heads + h], slope) - max).exp();
                alpha[e * heads + h] = w;
                sum += w;
            }
            for e in row.clone() {
                alpha[e * heads + h] /= sum;
            }
        }
    }
    let att_mask = match rng {
        Some(r) if p > 0.0 => Some(dropout_mask(r, n_entries * heads, p)),
        _ => None,
    };

    // Residual: aggregation is added onto the undropped input.
    let mut r = input.clone();
    {
        let rs = r.as_slice_mut().unwrap();
        for v in 0..n {
            for e in adj.row(v) {
                let u = adj.cols[e] as usize;
                for h in 0..heads {
                    let mut a = alpha[e * heads + h];
                    if let Some(m) = &att_mask {
                        a *= m[e * heads + h];
                    }
                    if a == 0.0 {
                        continue;
                    }
                    let dst = &mut rs[v * d + h * dk..v * d + (h + 1) * dk];
                    let src = &zs[u * d + h * dk..u * d + (h + 1) * dk];
                    dst.iter_mut().zip(src).for_each(|(o, s)| *o += a * s);
                }
            }
        }
    }

    let (xhat, inv_std) = layer_norm(&r);
    let y = &xhat * &lp.ln_scale + &lp.ln_shift;
    let out = if activate { y.mapv(|x| leaky(x, slope)) } else { y.clone() };
    let cache = LayerCache { input, in_mask, dropped, z, pre, alpha, att_mask, xhat, inv_std, y };
    (out, cache)
}

fn layer_norm(r: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let d = r.ncols() as f64;
    let mut xhat = r.clone();
    let mut inv_std = Vec::with_capacity(r.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
        let s = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|x| (x - mean) * s);
        inv_std.push(s);
    }
    (xhat, inv_std)
}

fn forward_cached(
    adj: &Adjacency,
    params: &GatParams,
    features: &NodeFeatures,
    cfg: &GatConfig,
    mode: Mode,
) -> Result<ForwardCache, GatError> {
    let mut rng = match mode {
        Mode::Eval => None,
        Mode::Train(r) => Some(r),
    };
    let h0 = features.x.dot(&params.input_w) + &params.input_b;
    if !h0.iter().all(|v| v.is_finite()) {
        return Err(GatError::NonFinite(0));
    }
    let mut h = h0;
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, lp) in params.layers.iter().enumerate() {
        let activate = l + 1 < params.layers.len();
        let (out, cache) = layer_forward(adj, lp, cfg, h, activate, rng.as_deref_mut());
        if !out.iter().all(|v| v.is_finite()) {
            return Err(GatError::NonFinite(l + 1));
        }
        layers.push(cache);
        h = out;
    }
    Ok(ForwardCache { layers, out: h })
}

/// Runs all layers. In eval mode this is a pure function of its inputs.
pub fn forward(
    adj: &Adjacency,
    params: &GatParams,
    features: &NodeFeatures,
    cfg: &GatConfig,
    mode: Mode,
) -> Result<NodeStates, GatError> {
    let cache = forward_cached(adj, params, features, cfg, mode)?;
    Ok(NodeStates::from_unified(&cache.out, adj.n_users))
}

/// Attention weights of one layer in eval mode, `entry * heads + head` indexed over `adj.cols`.
pub fn attention_weights(
    adj: &Adjacency,
    params: &GatParams,
    features: &NodeFeatures,
    cfg: &GatConfig,
    layer: usize,
) -> Result<Vec<f64>, GatError> {
    let cache = forward_cached(adj, params, features, cfg, Mode::Eval)?;
    cache
        .layers
        .get(layer)
        .map(|c| c.alpha.clone())
        .ok_or_else(|| GatError::IndexOutOfRange(format!("layer {layer}")))
}

pub fn score(states: &NodeStates, user: usize, item: usize) -> Result<f64, GatError> {
    if user >= states.user_states.nrows() || item >= states.item_states.nrows() {
        return Err(GatError::IndexOutOfRange(format!("user {user}, item {item}")));
    }
    Ok(states.user_states.row(user).dot(&states.item_states.row(item)))
}

/// Scores of all items the user has no train positive with, best first, ties by item index.
pub fn full_scores(states: &NodeStates, graph: &BipartiteGraph, user: usize) -> Vec<(usize, f64)> {
    let scores = states.item_states.dot(&states.user_states.row(user));
    let mut out: Vec<(usize, f64)> =
        scores.iter().enumerate().filter(|(i, _)| !graph.is_positive(user, *i)).map(|(i, &s)| (i, s)).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

/// Mean of `-ln σ(s_ui - s_uj) + λ (1 - cos(u, i))` over the triples.
pub fn hybrid_loss(states: &NodeStates, triples: &[TrainTriple], lambda_cos: f64) -> f64 {
    let (bpr, cos) = loss_terms(states, triples);
    bpr + lambda_cos * cos
}

/// Mean BPR term and mean cosine term, separately.
pub fn loss_terms(states: &NodeStates, triples: &[TrainTriple]) -> (f64, f64) {
    if triples.is_empty() {
        return (0.0, 0.0);
    }
    let us = &states.user_states;
    let is = &states.item_states;
    let (mut bpr, mut cos) = (0.0, 0.0);
    for t in triples {
        let u = us.row(t.user);
        let (i, j) = (is.row(t.pos_item), is.row(t.neg_item));
        let diff = u.dot(&i) - u.dot(&j);
        bpr += softplus(-diff);
        cos += 1.0 - cosine(u.as_slice().unwrap(), i.as_slice().unwrap());
    }
    let b = triples.len() as f64;
    (bpr / b, cos / b)
}

/// Loss and its gradient with respect to the unified final states.
fn loss_grad_states(out: &Array2<f64>, n_users: usize, triples: &[TrainTriple], lambda: f64) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(out.raw_dim());
    let b = triples.len() as f64;
    let mut loss = 0.0;
    for t in triples {
        let (ui, ii, ji) = (t.user, n_users + t.pos_item, n_users + t.neg_item);
        let u = out.row(ui).to_vec();
        let i = out.row(ii).to_vec();
        let j = out.row(ji).to_vec();
        let diff = dot(&u, &i) - dot(&u, &j);
        loss += softplus(-diff);
        let g = -sigmoid(-diff) / b;
        let (nu, ni) = (norm(&u), norm(&i));
        let c = if nu * ni == 0.0 { 0.0 } else { dot(&u, &i) / (nu * ni) };
        loss += lambda * (1.0 - c);
        for k in 0..u.len() {
            grad[[ui, k]] += g * (i[k] - j[k]);
            grad[[ii, k]] += g * u[k];
            grad[[ji, k]] -= g * u[k];
        }
        if lambda != 0.0 && nu * ni != 0.0 {
            let s = -lambda / b;
            for k in 0..u.len() {
                grad[[ui, k]] += s * (i[k] / (nu * ni) - c * u[k] / (nu * nu));
                grad[[ii, k]] += s * (u[k] / (nu * ni) - c * i[k] / (ni * ni));
            }
        }
    }
    (loss / b, grad)
}

fn layer_backward(
    adj: &Adjacency,
    lp: &LayerParams,
    cfg: &GatConfig,
    c: &LayerCache,
    activate: bool,
    d_out: Array2<f64>,
    grad: &mut LayerParams,
) -> Array2<f64> {
    let n = adj.n_nodes;
    let d = cfg.hidden_dim;
    let heads = cfg.heads;
    let dk = cfg.head_dim();
    let slope = cfg.leaky_slope;

    let mut dy = d_out;
    if activate {
        dy.zip_mut_with(&c.y, |g, &y| *g *= leaky_grad(y, slope));
    }
    grad.ln_scale = (&dy * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    grad.ln_shift = dy.sum_axis(Axis(0)).insert_axis(Axis(0));

    // Layer-norm backward, row by row.
    let mut dr = &dy * &lp.ln_scale;
    for (v, mut row) in dr.rows_mut().into_iter().enumerate() {
        let xh = c.xhat.row(v);
        let m1 = row.mean().unwrap();
        let m2 = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let s = c.inv_std[v];
        row.iter_mut().zip(xh.iter()).for_each(|(g, &x)| *g = s * (*g - m1 - x * m2));
    }

    let zs = c.z.as_slice().unwrap();
    let drs = dr.as_slice().unwrap();
    let att = lp.att.as_slice().unwrap();
    let mut dz = Array2::<f64>::zeros((n, d));
    let mut ds_self = vec![0.0; n * heads];
    let mut ds_nbr = vec![0.0; n * heads];
    {
        let dzs = dz.as_slice_mut().unwrap();
        let mut dalpha = Vec::new();
        for v in 0..n {
            let row = adj.row(v);
            for h in 0..heads {
                let g_out = &drs[v * d + h * dk..v * d + (h + 1) * dk];
                dalpha.clear();
                let mut weighted = 0.0;
                for e in row.clone() {
                    let u = adj.cols[e] as usize;
                    let z_u = &zs[u * d + h * dk..u * d + (h + 1) * dk];
                    let mut a = c.alpha[e * heads + h];
                    let mut da = dot(g_out, z_u);
                    if let Some(m) = &c.att_mask {
                        a *= m[e * heads + h];
                        da *= m[e * heads + h];
                    }
                    if a != 0.0 {
                        let dz_u = &mut dzs[u * d + h * dk..u * d + (h + 1) * dk];
                        dz_u.iter_mut().zip(g_out).for_each(|(t, g)| *t += a * g);
                    }
                    weighted += c.alpha[e * heads + h] * da;
                    dalpha.push(da);
                }
                for (k, e) in row.clone().enumerate() {
                    let u = adj.cols[e] as usize;
                    let de = c.alpha[e * heads + h] * (dalpha[k] - weighted);
                    let dp = de * leaky_grad(c.pre[e * heads + h], slope);
                    ds_self[v * heads + h] += dp;
                    ds_nbr[u * heads + h] += dp;
                }
            }
        }
        let mut datt = Array2::<f64>::zeros((heads, 2 * dk));
        let datts = datt.as_slice_mut().unwrap();
        for v in 0..n {
            for h in 0..heads {
                let z_v = &zs[v * d + h * dk..v * d + (h + 1) * dk];
                let (gs, gn) = (ds_self[v * heads + h], ds_nbr[v * heads + h]);
                let a = &att[h * 2 * dk..(h + 1) * 2 * dk];
                let da = &mut datts[h * 2 * dk..(h + 1) * 2 * dk];
                let dz_v = &mut dzs[v * d + h * dk..v * d + (h + 1) * dk];
                for k in 0..dk {
                    da[k] += gs * z_v[k];
                    da[dk + k] += gn * z_v[k];
                    dz_v[k] += gs * a[k] + gn * a[dk + k];
                }
            }
        }
        grad.att = datt;
    }

    let layer_in = c.dropped.as_ref().unwrap_or(&c.input);
    grad.w = layer_in.t().dot(&dz);
    let mut d_in = dz.dot(&lp.w.t());
    if let Some(m) = &c.in_mask {
        d_in.as_slice_mut().unwrap().iter_mut().zip(m).for_each(|(g, s)| *g *= s);
    }
    d_in + dr
}

/// Hybrid loss on `triples` and its exact gradient with respect to every parameter tensor.
pub fn loss_and_grad(
    adj: &Adjacency,
    params: &GatParams,
    features: &NodeFeatures,
    triples: &[TrainTriple],
    cfg: &GatConfig,
    mode: Mode,
) -> Result<(f64, GatParams), GatError> {
    let cache = forward_cached(adj, params, features, cfg, mode)?;
    let (loss, mut d_h) = loss_grad_states(&cache.out, adj.n_users, triples, cfg.lambda_cos);
    let mut grads = GatParams::zeros(cfg);
    let n_layers = params.layers.len();
    for l in (0..n_layers).rev() {
        d_h = layer_backward(adj, &params.layers[l], cfg, &cache.layers[l], l + 1 < n_layers, d_h, &mut grads.layers[l]);
        if !d_h.iter().all(|v| v.is_finite()) {
            return Err(GatError::NonFinite(l + 1));
        }
    }
    grads.input_w = features.x.t().dot(&d_h);
    grads.input_b = d_h.sum_axis(Axis(0)).insert_axis(Axis(0));
    Ok((loss, grads))
}

/// Gradients with dropout disabled.
pub fn backward(
    adj: &Adjacency,
    params: &GatParams,
    features: &NodeFeatures,
    triples: &[TrainTriple],
    cfg: &GatConfig,
) -> Result<GatParams, GatError> {
    loss_and_grad(adj, params, features, triples, cfg, Mode::Eval).map(|(_, g)| g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub rel_error: f64,
    /// Coordinates left out because the perturbation crossed a LeakyReLU kink.
    pub skipped: usize,
    pub checked: usize,
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Inputs of every LeakyReLU in the network.
fn kink_inputs(cache: &ForwardCache) -> Vec<f64> {
    let n_layers = cache.layers.len();
    let mut out = Vec::new();
    for (l, c) in cache.layers.iter().enumerate() {
        out.extend_from_slice(&c.pre);
        if l + 1 < n_layers {
            out.extend(c.y.iter().copied());
        }
    }
    out
}

/// Compares analytic gradients against central finite differences, per tensor.
///
/// Error is `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12)` over the coordinates
/// whose `±eps` perturbation keeps every nonzero LeakyReLU input on the same side of zero.
/// Inputs exactly at zero stay in: the analytic derivative there is the mean slope, which is
/// what a central difference measures.
pub fn gradient_check(
    adj: &Adjacency,
    params: &GatParams,
    features: &NodeFeatures,
    triples: &[TrainTriple],
    cfg: &GatConfig,
    eps: f64,
) -> Result<Vec<TensorCheck>, GatError> {
    let analytic = backward(adj, params, features, triples, cfg)?;
    let eval = |p: &GatParams| -> Result<(f64, Vec<f64>), GatError> {
        let cache = forward_cached(adj, p, features, cfg, Mode::Eval)?;
        let states = NodeStates::from_unified(&cache.out, adj.n_users);
        Ok((hybrid_loss(&states, triples, cfg.lambda_cos), kink_inputs(&cache)))
    };
    let (_, base_kinks) = eval(params)?;
    let mut work = params.clone();
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic_tensors: Vec<Array2<f64>> = analytic.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let mut out = Vec::new();
    for (t, name) in names.into_iter().enumerate() {
        let a = analytic_tensors[t].as_slice().unwrap();
        let (mut kept_a, mut kept_n) = (Vec::new(), Vec::new());
        for (k, &ak) in a.iter().enumerate() {
            let orig = work.tensors_mut()[t].as_slice().unwrap()[k];
            work.tensors_mut()[t].as_slice_mut().unwrap()[k] = orig + eps;
            let (plus, kp) = eval(&work)?;
            work.tensors_mut()[t].as_slice_mut().unwrap()[k] = orig - eps;
            let (minus, km) = eval(&work)?;
            work.tensors_mut()[t].as_slice_mut().unwrap()[k] = orig;
            let crossed = base_kinks
                .iter()
                .zip(kp.iter().zip(&km))
                .any(|(&b, (&p, &m))| b != 0.0 && (sign(p) != sign(b) || sign(m) != sign(b)));
            if !crossed {
                kept_a.push(ak);
                kept_n.push((plus - minus) / (2.0 * eps));
            }
        }
        let diff: f64 = kept_a.iter().zip(&kept_n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let an = norm(&kept_a);
        let denom = an.max(norm(&kept_n)).max(1e-12);
        out.push(TensorCheck {
            name,
            analytic_norm: an,
            rel_error: diff / denom,
            skipped: a.len() - kept_a.len(),
            checked: kept_a.len(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{mock_embed, MockEmbedder, Provenance};
    use crate::graph::build_graph_with_nodes;
    use crate::ingest::RatingRecord;
    use rand::SeedableRng;

    pub(crate) fn small_cfg() -> GatConfig {
        GatConfig { input_dim: 384, hidden_dim: 8, heads: 2, layers: 3, ..GatConfig::default() }
    }

    pub(crate) fn toy(seed: u64) -> (BipartiteGraph, EmbeddingStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ratings = Vec::new();
        for u in 1..=5u32 {
            for i in 1..=8u32 {
                if rng.random::<f64>() < 0.5 {
                    ratings.push(RatingRecord::new(u, i, rng.random_range(1..=5), 0));
                }
            }
        }
        let users: Vec<u32> = (1..=5).collect();
        let items: Vec<u32> = (1..=8).collect();
        let g = build_graph_with_nodes(&ratings, &users, &items).unwrap();
        let e = MockEmbedder::new(seed);
        let mut store = EmbeddingStore::new(Provenance::Mock);
        for u in users {
            store.insert(Subject::User(u), mock_embed(&format!("user {u} drama tag{}", u % 3), &e).unwrap());
        }
        for i in items {
            store.insert(Subject::Item(i), mock_embed(&format!("item {i} tag{} comedy", i % 3), &e).unwrap());
        }
        (g, store)
    }

    #[test]
    fn shapes_and_attention_rows() {
        let (g, store) = toy(1);
        let cfg = GatConfig::default();
        let params = init_params(&cfg, &g, &store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let feats = NodeFeatures::from_store(&g, &store).unwrap();
        let adj = Adjacency::new(&g);
        let s = forward(&adj, &params, &feats, &cfg, Mode::Eval).unwrap();
        assert_eq!(s.user_states.dim(), (5, 64));
        assert_eq!(s.item_states.dim(), (8, 64));
        assert_eq!(s, forward(&adj, &params, &feats, &cfg, Mode::Eval).unwrap());
        for layer in 0..3 {
            let alpha = attention_weights(&adj, &params, &feats, &cfg, layer).unwrap();
            for v in 0..adj.n_nodes {
                for h in 0..cfg.heads {
                    let sum: f64 = adj.row(v).map(|e| alpha[e * cfg.heads + h]).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
        assert!(params.layers.iter().all(|l| l.ln_scale.iter().all(|&x| x == 1.0)));
        assert!(params.layers.iter().all(|l| l.ln_shift.iter().all(|&x| x == 0.0)));
        let again = init_params(&cfg, &g, &store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(params, again);
    }

    #[test]
    fn missing_embedding() {
        let (g, mut store) = toy(2);
        store.item_vectors.remove(&3);
        let err = init_params(&GatConfig::default(), &g, &store, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(GatError::MissingEmbedding(Subject::Item(3)))));
    }

    #[test]
    fn isolated_nodes_see_only_themselves() {
        let (g, store) = toy(3);
        let empty = g.with_edges(&[]);
        let cfg = small_cfg();
        let params = init_params_random(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let feats = NodeFeatures::from_store(&empty, &store).unwrap();
        let adj = Adjacency::new(&empty);
        assert_eq!(adj.cols.len(), adj.n_nodes);
        let alpha = attention_weights(&adj, &params, &feats, &cfg, 0).unwrap();
        assert!(alpha.iter().all(|&a| a == 1.0));
        // Changing one node's feature leaves every other node's state alone.
        let base = forward(&adj, &params, &feats, &cfg, Mode::Eval).unwrap();
        let mut f2 = feats.clone();
        f2.x.row_mut(0).mapv_inplace(|x| -x);
        let moved = forward(&adj, &params, &f2, &cfg, Mode::Eval).unwrap();
        assert_ne!(base.user_states.row(0), moved.user_states.row(0));
        assert_eq!(base.user_states.slice(ndarray::s![1.., ..]), moved.user_states.slice(ndarray::s![1.., ..]));
        assert_eq!(base.item_states, moved.item_states);
    }

    #[test]
    fn scoring() {
        let user_states = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let item_states = Array2::from_shape_vec((3, 2), vec![0.0, 0.0, 1.0, 2.0, 1.0, 1.0]).unwrap();
        let s = NodeStates { user_states, item_states };
        assert_eq!(score(&s, 0, 0).unwrap(), 0.0);
        assert_eq!(score(&s, 0, 1).unwrap(), 5.0);
        assert!(score(&s, 2, 0).is_err());
        let g = build_graph_with_nodes(&[RatingRecord::new(1, 11, 5, 0)], &[1, 2], &[10, 11, 12]).unwrap();
        // user 0: item 1 is positive; item 2 scores 3, item 0 scores 0.
        assert_eq!(full_scores(&s, &g, 0), vec![(2, 3.0), (0, 0.0)]);
        let tie = NodeStates {
            user_states: Array2::from_elem((1, 2), 1.0),
            item_states: Array2::from_elem((3, 2), 0.5),
        };
        let g1 = build_graph_with_nodes(&[], &[1], &[1, 2, 3]).unwrap();
        assert_eq!(full_scores(&tie, &g1, 0).iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn loss_values() {
        let v = Array2::from_shape_vec((1, 2), vec![0.6, 0.8]).unwrap();
        let items = Array2::from_shape_vec((2, 2), vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        let s = NodeStates { user_states: v.clone(), item_states: items };
        let t = [TrainTriple { user: 0, pos_item: 0, neg_item: 1 }];
        assert!((hybrid_loss(&s, &t, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((hybrid_loss(&s, &t, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        let far = NodeStates {
            user_states: v * 1e3,
            item_states: Array2::from_shape_vec((2, 2), vec![600.0, 800.0, -600.0, -800.0]).unwrap(),
        };
        assert!(hybrid_loss(&far, &t, 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_decomposes() {
        let (g, store) = toy(5);
        let cfg = small_cfg();
        let params = init_params_random(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let feats = NodeFeatures::from_store(&g, &store).unwrap();
        let s = forward(&Adjacency::new(&g), &params, &feats, &cfg, Mode::Eval).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let triples = crate::graph::make_training_batch(&g, 16, 0.5, &mut rng).unwrap();
        let (_, cos) = loss_terms(&s, &triples);
        for lambda in [0.0, 0.3, 0.5, 2.0] {
            let lhs = hybrid_loss(&s, &triples, lambda);
            assert!((lhs - (hybrid_loss(&s, &triples, 0.0) + lambda * cos)).abs() < 1e-9);
        }
    }

    fn assert_grads_match(cfg: &GatConfig, params: &GatParams, g: &BipartiteGraph, store: &EmbeddingStore, seed: u64) {
        let feats = NodeFeatures::from_store(g, store).unwrap();
        let adj = Adjacency::new(g);
        let triples = crate::graph::make_training_batch(g, 12, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let checks = gradient_check(&adj, params, &feats, &triples, cfg, 1e-4).unwrap();
        let skipped: usize = checks.iter().map(|c| c.skipped).sum();
        assert!(skipped * 100 < params.n_params(), "{checks:#?}");
        assert!(checks.iter().all(|c| c.rel_error < 1e-4 && c.analytic_norm.is_finite()), "{checks:#?}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (g, store) = toy(7);
        let cfg = small_cfg();
        for seed in 0..4 {
            let params = init_params_random(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_grads_match(&cfg, &params, &g, &store, seed);
        }
    }

    #[test]
    fn zero_attention_gradients() {
        let (g, store) = toy(4);
        let cfg = small_cfg();
        let mut params = init_params_random(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        for lp in &mut params.layers {
            lp.att.fill(0.0);
        }
        assert_grads_match(&cfg, &params, &g, &store, 1);
    }

    #[test]
    fn train_mode_dropout_is_seeded() {
        let (g, store) = toy(8);
        let cfg = small_cfg();
        let params = init_params_random(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let feats = NodeFeatures::from_store(&g, &store).unwrap();
        let adj = Adjacency::new(&g);
        let a = forward(&adj, &params, &feats, &cfg, Mode::Train(&mut ChaCha8Rng::seed_from_u64(6))).unwrap();
        let b = forward(&adj, &params, &feats, &cfg, Mode::Train(&mut ChaCha8Rng::seed_from_u64(6))).unwrap();
        let e = forward(&adj, &params, &feats, &cfg, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, e);
    }
}
