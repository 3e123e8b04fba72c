//! Independent reference checks. Each returns a summary on success and a
//! description of the first mismatch otherwise.

use std::collections::BTreeSet;

use permgnn::adversary::{gumbel_sinkhorn, harden, init_adversary, seed_matrix, SinkhornConfig};
use permgnn::autodiff::{CsrMatrix, Tape};
use permgnn::eval::{aa_score, cn_score, compute_metrics, RankedEntry, RankedList};
use permgnn::graph::Graph;
use permgnn::hash::{build_index, random_hyperplane_codes, topk_predict, Candidates};
use permgnn::model::similarity;
use permgnn::synth::{clustered_embeddings, planted_partition, PlantedPartition};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{random_matrix, rng};

pub type Outcome = std::result::Result<String, String>;

pub const ROW_TOL: f64 = 1e-9;
pub const COL_TOL: f64 = 1e-3;
pub const HARDEN_AGREEMENT: f64 = 0.95;
pub const METRIC_TOL: f64 = 1e-12;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Noise-free Gumbel–Sinkhorn on 500 adversary seed matrices of sizes
/// 2–12 with ten normalization rounds.
pub fn sinkhorn_invariants() -> Outcome {
    let cfg = SinkhornConfig {
        iterations: 10,
        noise_factor: 0.0,
        ..SinkhornConfig::default()
    };
    let perms3 = permutations(3);
    let (mut worst_row, mut worst_col) = (0.0f64, 0.0f64);
    let (mut agree, mut total3) = (0usize, 0usize);
    let mut trial = 0u64;
    let mut check = |delta: usize, trial: u64| -> std::result::Result<(), String> {
        let mut g = rng(70_000 + trial);
        let feats = CsrMatrix::from_dense(&random_matrix(&mut g, delta, 6, 1.0));
        let phi = init_adversary(6, 12, &mut g);
        let tape = Tape::new();
        let members: Vec<usize> = (0..delta).collect();
        let a = seed_matrix(
            &phi.bind(&tape, false),
            &std::sync::Arc::new(feats),
            &members,
            cfg.temperature,
        )
        .map_err(|e| e.to_string())?;
        let p = gumbel_sinkhorn(a, &cfg, &mut g)
            .map_err(|e| e.to_string())?
            .to_matrix();
        for r in p.rows() {
            worst_row = worst_row.max((r.sum() - 1.0).abs());
        }
        for c in p.columns() {
            worst_col = worst_col.max((c.sum() - 1.0).abs());
        }
        let hard = harden(&p);
        let mut seen = hard.clone();
        seen.sort_unstable();
        if seen != members {
            return Err(format!("trial {trial}: harden gave {hard:?}"));
        }
        if delta == 3 {
            let obj =
                |q: &[usize]| -> f64 { q.iter().enumerate().map(|(i, &j)| p[[i, j]].ln()).sum() };
            let best = perms3
                .iter()
                .max_by(|a, b| obj(a).total_cmp(&obj(b)))
                .unwrap();
            total3 += 1;
            if obj(best) - obj(&hard) <= 1e-12 {
                agree += 1;
            }
        }
        Ok(())
    };
    for _ in 0..500 {
        check(2 + (trial as usize % 11), trial)?;
        trial += 1;
    }
    // extra 3×3 cases so the agreement rate rests on a few hundred samples
    for _ in 0..200 {
        check(3, trial)?;
        trial += 1;
    }
    let rate = agree as f64 / total3 as f64;
    let detail = format!(
        "max |row−1| {worst_row:.1e}, max |col−1| {worst_col:.1e}, 3×3 agreement {agree}/{total3}"
    );
    if worst_row <= ROW_TOL && worst_col <= COL_TOL && rate >= HARDEN_AGREEMENT {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Scored pairs under hashing equal the pairs colliding on all `J` bits of
/// some projection (restricted to candidates), with exhaustive scores.
pub fn lsh_oracle() -> Outcome {
    let mut total_pairs = 0usize;
    for trial in 0..20u64 {
        let mut g = rng(90_000 + trial);
        let communities = g.gen_range(2..=5);
        let community_size = g.gen_range(8..=20);
        let graph = planted_partition(&PlantedPartition {
            communities,
            community_size,
            p_in: 0.3,
            p_out: 0.02,
            seed: trial,
            ..Default::default()
        });
        let n = graph.num_nodes();
        let (emb, _) = clustered_embeddings(n, 8, communities, 0.4, trial);
        let bits = g.gen_range(4..=16);
        let codes = random_hyperplane_codes(&emb, bits, trial).map_err(|e| e.to_string())?;
        let j = g.gen_range(1..=bits.min(6));
        let l = g.gen_range(1..=4);
        let index = build_index(&codes, j, l, trial).map_err(|e| e.to_string())?;
        let mut queries: Vec<usize> = (0..n).collect();
        queries.shuffle(&mut g);
        queries.truncate(n / 2);
        let is_query: BTreeSet<usize> = queries.iter().copied().collect();

        let hashed = topk_predict(
            Some(&index),
            &emb,
            &queries,
            Candidates::PotentialEdges(&graph),
            n,
            true,
        )
        .map_err(|e| e.to_string())?;
        let exhaustive = topk_predict(
            None,
            &emb,
            &queries,
            Candidates::PotentialEdges(&graph),
            n,
            false,
        )
        .map_err(|e| e.to_string())?;

        let mut expected = BTreeSet::new();
        for u in 0..n {
            for v in (u + 1)..n {
                let collide = index
                    .projections
                    .iter()
                    .any(|proj| proj.iter().all(|&h| codes.get(u, h) == codes.get(v, h)));
                let candidate =
                    (is_query.contains(&u) || is_query.contains(&v)) && !graph.has_edge(u, v);
                if collide && candidate {
                    expected.insert((u, v));
                }
            }
        }
        let got: BTreeSet<(usize, usize)> = hashed
            .scored
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        if got != expected {
            let extra: Vec<_> = got.difference(&expected).take(3).collect();
            let missing: Vec<_> = expected.difference(&got).take(3).collect();
            return Err(format!(
                "trial {trial}: extra {extra:?}, missing {missing:?}"
            ));
        }
        if hashed.comparisons as usize != expected.len() {
            return Err(format!(
                "trial {trial}: comparisons {} vs {}",
                hashed.comparisons,
                expected.len()
            ));
        }
        for (q, list) in &hashed.lists {
            let full = &exhaustive.lists[q];
            for &(v, s) in list {
                let reference = full.iter().find(|e| e.0 == v).map(|e| e.1);
                let direct = similarity(emb.row(*q), emb.row(v));
                if reference.map(f64::to_bits) != Some(s.to_bits())
                    || direct.to_bits() != s.to_bits()
                {
                    return Err(format!("trial {trial}: score of ({q},{v}) differs"));
                }
            }
        }
        total_pairs += expected.len();
    }
    Ok(format!("20 graphs, {total_pairs} scored pairs matched"))
}

/// AA and CN against adjacency-matrix sums on 50 random graphs.
pub fn baseline_oracle() -> Outcome {
    let mut checked = 0usize;
    for trial in 0..50u64 {
        let mut g = rng(50_000 + trial);
        let n = g.gen_range(2..=40);
        let p = g.gen_range(0.05..0.5);
        let mut adj = vec![vec![false; n]; n];
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if g.gen::<f64>() < p {
                    adj[u][v] = true;
                    adj[v][u] = true;
                    edges.push((u, v));
                }
            }
        }
        let graph = Graph::new(n, edges, None).map_err(|e| e.to_string())?;
        let deg: Vec<usize> = adj
            .iter()
            .map(|r| r.iter().filter(|&&b| b).count())
            .collect();
        for u in 0..n {
            for v in 0..n {
                if u == v {
                    continue;
                }
                let mut cn = 0.0;
                let mut aa = 0.0;
                for w in 0..n {
                    if adj[u][w] && adj[v][w] {
                        cn += 1.0;
                        if deg[w] > 1 {
                            aa += 1.0 / (deg[w] as f64).ln();
                        }
                    }
                }
                if cn_score(&graph, u, v) != cn || aa_score(&graph, u, v) != aa {
                    return Err(format!("trial {trial}: pair ({u},{v})"));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} ordered pairs exact"))
}

fn naive_ap(rel: &[bool]) -> Option<f64> {
    let hits: Vec<usize> = (0..rel.len()).filter(|&i| rel[i]).collect();
    if hits.is_empty() {
        return None;
    }
    let precisions: Vec<f64> = hits
        .iter()
        .map(|&i| rel[..=i].iter().filter(|&&r| r).count() as f64 / (i + 1) as f64)
        .collect();
    Some(precisions.iter().sum::<f64>() / hits.len() as f64)
}

fn naive_dcg(rel: &[bool]) -> f64 {
    rel.iter()
        .enumerate()
        .map(|(i, &r)| {
            if r {
                1.0 / (i as f64 + 2.0).log2()
            } else {
                0.0
            }
        })
        .sum()
}

/// MAP, MRR and NDCG against direct definitions on 1000 random lists.
pub fn metric_oracle() -> Outcome {
    let mut g = rng(31_337);
    let mut lists = Vec::new();
    for q in 0..1000 {
        let len = g.gen_range(1..=30);
        let p_rel = g.gen_range(0.0..0.6);
        let entries: Vec<RankedEntry> = (0..len)
            .map(|v| RankedEntry {
                partner: v,
                // coarse scores force ties, broken by partner id
                score: (g.gen_range(0..12) as f64) / 4.0,
                relevant: g.gen::<f64>() < p_rel,
            })
            .collect();
        lists.push(RankedList::from_scored(q, entries));
    }
    for cutoff in [None, Some(5)] {
        let report = compute_metrics(&lists, cutoff);
        let (mut ap, mut rr, mut nd, mut count, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for list in &lists {
            // rank independently: sort (−score, partner) pairs
            let mut order: Vec<&RankedEntry> = list.entries.iter().collect();
            order.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then(a.partner.cmp(&b.partner))
            });
            let full: Vec<bool> = order.iter().map(|e| e.relevant).collect();
            let total_rel = full.iter().filter(|&&r| r).count();
            if total_rel == 0 {
                skipped += 1;
                continue;
            }
            let rel: Vec<bool> = full
                .iter()
                .copied()
                .take(cutoff.unwrap_or(usize::MAX))
                .collect();
            ap += naive_ap(&rel).unwrap_or(0.0);
            rr += rel
                .iter()
                .position(|&r| r)
                .map_or(0.0, |i| 1.0 / (i as f64 + 1.0));
            let mut ideal = full.clone();
            ideal.sort_by(|a, b| b.cmp(a));
            ideal.truncate(rel.len());
            let idcg = naive_dcg(&ideal);
            nd += if idcg > 0.0 {
                naive_dcg(&rel) / idcg
            } else {
                0.0
            };
            count += 1;
        }
        let n = count as f64;
        let diffs = [
            (report.map - ap / n).abs(),
            (report.mrr - rr / n).abs(),
            (report.ndcg - nd / n).abs(),
        ];
        let worst = diffs.iter().copied().fold(0.0, f64::max);
        if worst > METRIC_TOL || report.skipped != skipped || report.evaluated() != count {
            return Err(format!(
                "cutoff {cutoff:?}: max deviation {worst:e}, skipped {} vs {skipped}",
                report.skipped
            ));
        }
    }
    Ok("1000 lists, full and cutoff 5, within 1e-12".to_string())
}
