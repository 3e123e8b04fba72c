//! Seeded synthetic graphs and embeddings for tests and benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::CsrMatrix;
use crate::graph::Graph;

/// Planted-partition (stochastic block) graph.
///
/// With `vocabulary > 0` every node gets a binary bag of `words_per_node`
/// words, each drawn from its community's slice of the vocabulary with
/// probability `topic_fidelity` and uniformly otherwise; with 0 features are
/// one-hot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedPartition {
    pub communities: usize,
    pub community_size: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub vocabulary: usize,
    pub words_per_node: usize,
    pub topic_fidelity: f64,
    pub seed: u64,
}

impl Default for PlantedPartition {
    fn default() -> Self {
        Self {
            communities: 10,
            community_size: 30,
            p_in: 0.25,
            p_out: 0.005,
            vocabulary: 100,
            words_per_node: 8,
            topic_fidelity: 0.6,
            seed: 0,
        }
    }
}

pub fn planted_partition(p: &PlantedPartition) -> Graph {
    let n = p.communities * p.community_size;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let same = u / p.community_size == v / p.community_size;
            let prob = if same { p.p_in } else { p.p_out };
            if rng.gen::<f64>() < prob {
                edges.push((u, v));
            }
        }
    }
    let features = (p.vocabulary > 0).then(|| bag_of_words(p, &mut rng));
    Graph::new(n, edges, features).expect("generated edges are in range and loop-free")
}

fn bag_of_words(p: &PlantedPartition, rng: &mut ChaCha8Rng) -> CsrMatrix {
    let n = p.communities * p.community_size;
    let slice = (p.vocabulary / p.communities.max(1)).max(1);
    let rows = (0..n)
        .map(|u| {
            let c = u / p.community_size;
            let mut words = std::collections::BTreeSet::new();
            for _ in 0..p.words_per_node {
                let w = if rng.gen::<f64>() < p.topic_fidelity {
                    (c * slice + rng.gen_range(0..slice)) % p.vocabulary
                } else {
                    rng.gen_range(0..p.vocabulary)
                };
                words.insert(w);
            }
            words.into_iter().map(|w| (w, 1.0)).collect()
        })
        .collect();
    CsrMatrix::from_rows(p.vocabulary, rows)
}

/// `n` unit-norm embeddings of width `dim` drawn around `clusters` random
/// centers, plus each point's cluster.
pub fn clustered_embeddings(
    n: usize,
    dim: usize,
    clusters: usize,
    spread: f64,
    seed: u64,
) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = Array2::<f64>::from_shape_simple_fn((clusters.max(1), dim), || {
        StandardNormal.sample(&mut rng)
    });
    let mut out = Array2::<f64>::zeros((n, dim));
    let mut assign = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.gen_range(0..clusters.max(1));
        assign.push(c);
        let mut row = out.row_mut(i);
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            row[j] = centers[[c, j]] + spread * z;
        }
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    (out, assign)
}
