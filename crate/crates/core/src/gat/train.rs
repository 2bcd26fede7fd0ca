use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, hybrid_loss, init_params, loss_and_grad, Adjacency, GatConfig, GatError, GatParams, Mode, NodeFeatures};
use crate::embed::EmbeddingStore;
use crate::graph::{make_training_batch, sample_negative, BipartiteGraph, GraphError, TrainTriple};

const MIN_IMPROVEMENT: f64 = 1e-5;
const VALIDATION_FRACTION: f64 = 0.1;

// Independent ChaCha streams for each consumer of the seed.
const STREAM_INIT: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Validation loss of the initial parameters.
    pub initial_validation_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// 0 when no epoch beat the initial parameters.
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub n_train_edges: usize,
    pub n_validation_edges: usize,
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(params: &GatParams, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f64>> =
            params.named_tensors().into_iter().map(|(_, t)| Array2::zeros(t.raw_dim())).collect();
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut GatParams, grads: &GatParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, wd, eps) = (self.beta1, self.beta2, self.lr, self.weight_decay, self.eps);
        let grads = grads.named_tensors();
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[k].1;
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * wd * *p;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Splits positive edges into train and held-out validation, seeded.
fn split_edges(graph: &BipartiteGraph, rng: &mut ChaCha8Rng) -> (Vec<(u32, u32)>, Vec<(u32, u32)>) {
    let mut edges = graph.edges().to_vec();
    edges.shuffle(rng);
    let n_val = if edges.len() >= 2 { ((edges.len() as f64 * VALIDATION_FRACTION).round() as usize).max(1) } else { 0 };
    let val = edges.split_off(edges.len() - n_val);
    edges.sort_unstable();
    (edges, val)
}

pub fn train(graph: &BipartiteGraph, store: &EmbeddingStore, cfg: &GatConfig) -> Result<(GatParams, TrainLog), GatError> {
    train_with(graph, store, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    graph: &BipartiteGraph,
    store: &EmbeddingStore,
    cfg: &GatConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(GatParams, TrainLog), GatError> {
    cfg.validate()?;
    if graph.n_edges() == 0 {
        return Err(GatError::Graph(GraphError::NoEdges));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(STREAM_INIT);
    let mut params = init_params(cfg, graph, store, &mut init_rng)?;
    let features = NodeFeatures::from_store(graph, store)?;

    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(STREAM_SPLIT);
    let (train_edges, val_edges) = split_edges(graph, &mut split_rng);
    let train_graph = graph.with_edges(&train_edges);
    let adj = Adjacency::new(&train_graph);
    let mut val_triples = Vec::with_capacity(val_edges.len());
    for &(u, i) in &val_edges {
        let neg_item = sample_negative(graph, u as usize, &mut split_rng, cfg.hard_prob)?;
        val_triples.push(TrainTriple { user: u as usize, pos_item: i as usize, neg_item });
    }

    let validation_loss = |p: &GatParams, fallback: f64| -> Result<f64, GatError> {
        if val_triples.is_empty() {
            return Ok(fallback);
        }
        let states = forward(&adj, p, &features, cfg, Mode::Eval)?;
        Ok(hybrid_loss(&states, &val_triples, cfg.lambda_cos))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_TRAIN);
    let mut opt = AdamW::new(&params, cfg.lr, cfg.weight_decay);
    let steps = train_edges.len().div_ceil(cfg.batch_size);

    let initial = validation_loss(&params, f64::INFINITY)?;
    let mut best = (0usize, initial, params.clone());
    let mut log = TrainLog {
        initial_validation_loss: initial,
        epochs: Vec::new(),
        epochs_run: 0,
        stopped_early: false,
        best_epoch: 0,
        best_validation_loss: initial,
        n_train_edges: train_edges.len(),
        n_validation_edges: val_edges.len(),
    };
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let triples = make_training_batch(&train_graph, cfg.batch_size, cfg.hard_prob, &mut rng)?;
            let (loss, grads) = match loss_and_grad(&adj, &params, &features, &triples, cfg, Mode::Train(&mut rng)) {
                Ok(x) => x,
                Err(GatError::NonFinite(_)) => return Err(GatError::Diverged(epoch)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(GatError::Diverged(epoch));
            }
            total += loss;
            opt.step(&mut params, &grads);
        }
        let train_loss = total / steps as f64;
        let val = match validation_loss(&params, train_loss) {
            Err(GatError::NonFinite(_)) => return Err(GatError::Diverged(epoch)),
            other => other?,
        };
        let entry = EpochLog { epoch, train_loss, validation_loss: val };
        on_epoch(&entry);
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val:.5}");
        log.epochs.push(entry);
        log.epochs_run = epoch;
        if val < best.1 - MIN_IMPROVEMENT {
            best = (epoch, val, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                log.stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    log.best_epoch = best.0;
    log.best_validation_loss = best.1;
    Ok((best.2, log))
}
