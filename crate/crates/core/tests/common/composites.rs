//! Composite losses for finite-difference checks.

use permgnn::adversary::{gumbel_sinkhorn, init_adversary, seed_matrix, SinkhornConfig};
use permgnn::autodiff::CsrMatrix;

use super::{random_matrix, rng, store_grad_error, StoreLossFn};
use permgnn::graph::Graph;
use permgnn::hash::{hash_loss, init_hasher, soft_codes, HashWeights};
use permgnn::model::{
    encode_batch, init_encoder, ranking_loss, EncoderConfig, RankPair, Reduction, SeqInput,
};
use rand::SeedableRng;
use std::sync::Arc;

pub const COMPOSITE_TOL: f64 = 1e-3;

/// Two triangles joined by the edge 2–3.
fn toy(seed: u64) -> Graph {
    let mut g = rng(seed);
    let feats = CsrMatrix::from_dense(&random_matrix(&mut g, 6, 3, 1.0));
    Graph::new(
        6,
        [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)],
        Some(feats),
    )
    .unwrap()
}

fn small_encoder(reduction: Reduction) -> EncoderConfig {
    EncoderConfig {
        feature_dim: 3,
        hidden: 4,
        embed_dim: 3,
        reduction,
    }
}

const PAIRS: [(usize, usize, usize); 4] = [(0, 1, 4), (2, 3, 5), (3, 4, 0), (5, 4, 1)];

fn rank_pairs() -> Vec<RankPair> {
    PAIRS
        .iter()
        .map(|&(query, pos, neg)| RankPair { query, pos, neg })
        .collect()
}

/// Ranking loss through the LSTM encoder, alternating reductions.
pub fn ranking_error(seed: u64) -> f64 {
    {
        let g = toy(seed);
        let reduction = if seed.is_multiple_of(2) {
            Reduction::Final
        } else {
            Reduction::Mean
        };
        let theta = init_encoder(&small_encoder(reduction), &mut rng(seed)).unwrap();
        let feats = Arc::clone(g.features());
        let orders: Vec<Vec<usize>> = (0..6).map(|u| g.neighbors(u).unwrap().members).collect();
        let loss: Box<StoreLossFn> = Box::new(move |_t, b| {
            let inputs: Vec<SeqInput> = orders.iter().map(|o| SeqInput::plain(o.clone())).collect();
            let enc = encode_batch(b, &feats, &inputs, reduction, false).unwrap();
            ranking_loss(enc.embeddings, &rank_pairs(), 0.5).unwrap()
        });
        store_grad_error(&*loss, &theta, 1e-6)
    }
}

/// The three-term hashing objective through the soft hash layer.
pub fn hash_error(seed: u64) -> f64 {
    {
        let mut g = rng(seed);
        let emb = random_matrix(&mut g, 8, 4, 1.0);
        let psi = init_hasher(4, 5, &mut g);
        let non_edges = [(0, 3), (1, 6), (2, 7), (4, 5)];
        let w = HashWeights {
            alpha: 0.3,
            beta: 0.3,
            gamma: 0.4,
        };
        let loss: Box<StoreLossFn> = Box::new(move |t, b| {
            let z = soft_codes(b, t.constant(emb.clone())).unwrap();
            hash_loss(z, &non_edges, &w).unwrap()
        });
        store_grad_error(&*loss, &psi, 1e-6)
    }
}

/// Adversary seed matrix → Gumbel–Sinkhorn → encoder → ranking loss.
pub fn sinkhorn_path_error(seed: u64) -> f64 {
    {
        let g = toy(seed);
        let mut r = rng(seed);
        let theta = init_encoder(&small_encoder(Reduction::Final), &mut r).unwrap();
        let phi = init_adversary(3, g.max_neighborhood_size(), &mut r);
        let params = theta.merged(&phi);
        let feats = Arc::clone(g.features());
        let orders: Vec<Vec<usize>> = (0..6).map(|u| g.neighbors(u).unwrap().members).collect();
        let cfg = SinkhornConfig::default();
        let loss: Box<StoreLossFn> = Box::new(move |_t, b| {
            let mut noise = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<SeqInput> = orders
                .iter()
                .map(|o| {
                    let a = seed_matrix(b, &feats, o, cfg.temperature).unwrap();
                    let p = gumbel_sinkhorn(a, &cfg, &mut noise).unwrap();
                    SeqInput {
                        order: o.clone(),
                        perm: Some(p),
                    }
                })
                .collect();
            let enc = encode_batch(b, &feats, &inputs, Reduction::Final, false).unwrap();
            ranking_loss(enc.embeddings, &rank_pairs(), 0.5).unwrap()
        });
        store_grad_error(&*loss, &params, 1e-6)
    }
}
