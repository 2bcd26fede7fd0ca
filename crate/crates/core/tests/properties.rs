mod common;

use hybrec::embed::{EmbeddingStore, Provenance};
use hybrec::eval::metrics_at_k;
use hybrec::gat::{checkpoint_bytes, checkpoint_from_bytes, forward, init_params_random, Adjacency, GatConfig, Mode, NodeFeatures};
use hybrec::graph::build_graph_with_nodes;
use hybrec::ingest::RatingRecord;
use hybrec::profiles::{parse_profile, render_profile, Subject};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn profiles_round_trip(seed in any::<u64>()) {
        let p = common::random_profile(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(p.is_valid());
        let text = render_profile(&p);
        prop_assert_eq!(parse_profile(&text).unwrap(), p.clone());
        prop_assert_eq!(render_profile(&parse_profile(&text).unwrap()), text);
    }

    #[test]
    fn stores_round_trip(seed in any::<u64>()) {
        let store = common::random_store(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = store.to_bytes();
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &store);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>()) {
        let (cfg, params) = common::random_checkpoint(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = checkpoint_bytes(&cfg, &params);
        let (cfg2, params2) = checkpoint_from_bytes(&bytes).unwrap();
        prop_assert_eq!(cfg2, cfg);
        prop_assert_eq!(params2, params);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let (cfg, params) = common::random_checkpoint(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = checkpoint_bytes(&cfg, &params);
        let at = (bytes.len() as f64 * cut) as usize;
        prop_assert!(checkpoint_from_bytes(&bytes[..at]).is_err());
    }

    #[test]
    fn metrics_match_brute_force(seed in any::<u64>()) {
        let (ranking, relevant, k) = common::random_ranking(&mut ChaCha8Rng::seed_from_u64(seed));
        let got = metrics_at_k(&ranking, &relevant, k).unwrap().values();
        let want = common::brute_force_metrics(&ranking, &relevant, k);
        for (g, w) in got.iter().zip(want) {
            prop_assert!((g - w).abs() < 1e-9, "{got:?} vs {want:?}");
            prop_assert!((0.0..=1.0 + 1e-12).contains(g));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Renaming users and items permutes the node states and changes nothing else.
    #[test]
    fn gat_is_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nu, ni) = (rng.random_range(2..7u32), rng.random_range(2..9u32));
        let mut ratings = Vec::new();
        for u in 0..nu {
            for i in 0..ni {
                if rng.random::<f64>() < 0.4 {
                    ratings.push(RatingRecord::new(u, i, rng.random_range(1..=5), 0));
                }
            }
        }
        let mut pu: Vec<u32> = (0..nu).collect();
        let mut pi: Vec<u32> = (0..ni).collect();
        pu.shuffle(&mut rng);
        pi.shuffle(&mut rng);
        let renamed: Vec<RatingRecord> =
            ratings.iter().map(|r| RatingRecord::new(pu[r.user_id as usize], pi[r.item_id as usize], r.rating, 0)).collect();

        let users: Vec<u32> = (0..nu).collect();
        let items: Vec<u32> = (0..ni).collect();
        let g = build_graph_with_nodes(&ratings, &users, &items).unwrap();
        let g2 = build_graph_with_nodes(&renamed, &users, &items).unwrap();
        let mut store = EmbeddingStore::new(Provenance::Mock);
        let mut store2 = EmbeddingStore::new(Provenance::Mock);
        for u in 0..nu {
            let v = common::random_vector(&mut rng);
            store2.insert(Subject::User(pu[u as usize]), v.clone());
            store.insert(Subject::User(u), v);
        }
        for i in 0..ni {
            let v = common::random_vector(&mut rng);
            store2.insert(Subject::Item(pi[i as usize]), v.clone());
            store.insert(Subject::Item(i), v);
        }

        let cfg = GatConfig { hidden_dim: 8, heads: 2, layers: 2, ..GatConfig::default() };
        let params = init_params_random(&cfg, &mut rng);
        let run = |g, s| forward(&Adjacency::new(g), &params, &NodeFeatures::from_store(g, s).unwrap(), &cfg, Mode::Eval).unwrap();
        let a = run(&g, &store);
        let b = run(&g2, &store2);
        let close = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-9);
        for u in 0..nu as usize {
            prop_assert!(close(a.user_states.row(u), b.user_states.row(pu[u] as usize)));
        }
        for i in 0..ni as usize {
            prop_assert!(close(a.item_states.row(i), b.item_states.row(pi[i] as usize)));
        }
    }
}

#[test]
fn metric_edge_cases() {
    let rel = |ids: &[u32]| ids.iter().copied().collect::<std::collections::BTreeSet<u32>>();
    let m = metrics_at_k(&[1, 2, 3], &rel(&[1, 2, 3]), 3).unwrap();
    assert_eq!(m.values(), [1.0, 1.0, 1.0, 1.0]);
    let m = metrics_at_k(&[], &rel(&[7]), 5).unwrap();
    assert_eq!(m.values(), [0.0; 4]);
    assert!(metrics_at_k(&[1], &rel(&[]), 5).is_err());
    assert!(metrics_at_k(&[1], &rel(&[1]), 0).is_err());
    // One hit at rank 2 of 2 relevant: AP = (1/2) / 2.
    let m = metrics_at_k(&[9, 1, 8], &rel(&[1, 2]), 3).unwrap();
    assert!((m.map - 0.25).abs() < 1e-12);
}
