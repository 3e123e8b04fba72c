//! Retrieval cost/quality sweeps over hashing schemes and (J, L).

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::eval::ndcg;
use crate::graph::{EvalSplit, Fold, Graph, Label, NodeId};
use crate::hash::{
    build_index, random_hyperplane_codes, topk_predict, train_hasher, Candidates, HashCodes,
    HasherConfig, Prediction,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum HashMethod {
    /// Score every candidate pair.
    None,
    Hyperplane,
    Learned,
}

impl FromStr for HashMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "hyperplane" => Ok(Self::Hyperplane),
            "learned" => Ok(Self::Learned),
            other => Err(Error::Config(format!("unknown hash method `{other}`"))),
        }
    }
}

impl fmt::Display for HashMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Hyperplane => "hyperplane",
            Self::Learned => "learned",
        })
    }
}

/// Mean NDCG of the predicted lists, relevance being membership in the
/// query's test-fold edges. Queries without test edges are skipped.
pub fn retrieval_ndcg(pred: &Prediction, split: &EvalSplit) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for s in &split.queries {
        let positives: BTreeSet<NodeId> = s.partners(Fold::Test, Label::Edge).collect();
        if positives.is_empty() {
            continue;
        }
        let rel: Vec<bool> = pred
            .lists
            .get(&s.query)
            .map(|l| l.iter().map(|(v, _)| positives.contains(v)).collect())
            .unwrap_or_default();
        total += ndcg(&rel, positives.len());
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub k: usize,
    pub js: Vec<usize>,
    pub ls: Vec<usize>,
    pub hasher: HasherConfig,
    pub methods: Vec<HashMethod>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            k: 10,
            js: vec![2, 3, 4, 6, 8, 10, 12],
            ls: vec![1, 2, 4, 8, 16],
            hasher: HasherConfig::default(),
            methods: vec![
                HashMethod::None,
                HashMethod::Hyperplane,
                HashMethod::Learned,
            ],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: HashMethod,
    pub j: usize,
    pub l: usize,
    pub comparisons: u64,
    pub seconds: f64,
    pub ndcg: f64,
    /// NDCG relative to exhaustive scoring.
    pub retention: f64,
    /// Exhaustive comparisons over these comparisons.
    pub reduction: f64,
}

/// Exhaustive scoring once, then every hashing method for each (J, L).
pub fn bench_predict(
    emb: &Matrix,
    train: &Graph,
    split: &EvalSplit,
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    let queries = split.query_ids();
    let candidates = Candidates::PotentialEdges(train);
    let start = Instant::now();
    let full = topk_predict(None, emb, &queries, candidates, cfg.k, false)?;
    let full_secs = start.elapsed().as_secs_f64();
    let full_ndcg = retrieval_ndcg(&full, split);
    let mut rows = vec![BenchRow {
        method: HashMethod::None,
        j: 0,
        l: 0,
        comparisons: full.comparisons,
        seconds: full_secs,
        ndcg: full_ndcg,
        retention: 1.0,
        reduction: 1.0,
    }];
    for &method in &cfg.methods {
        let codes: HashCodes = match method {
            HashMethod::None => continue,
            HashMethod::Hyperplane => random_hyperplane_codes(emb, cfg.hasher.bits, cfg.seed)?,
            HashMethod::Learned => train_hasher(emb, train, &cfg.hasher)?.codes,
        };
        for &j in &cfg.js {
            if j > codes.bits() {
                log::warn!("skipping J = {j}: codes have {} bits", codes.bits());
                continue;
            }
            for &l in &cfg.ls {
                let start = Instant::now();
                let index = build_index(&codes, j, l, cfg.seed)?;
                let pred = topk_predict(Some(&index), emb, &queries, candidates, cfg.k, false)?;
                let seconds = start.elapsed().as_secs_f64();
                let score = retrieval_ndcg(&pred, split);
                rows.push(BenchRow {
                    method,
                    j,
                    l,
                    comparisons: pred.comparisons,
                    seconds,
                    ndcg: score,
                    retention: if full_ndcg > 0.0 {
                        score / full_ndcg
                    } else {
                        0.0
                    },
                    reduction: full.comparisons as f64 / pred.comparisons.max(1) as f64,
                });
            }
        }
    }
    Ok(rows)
}

/// Largest reduction `method` achieves while keeping `retention ≥ threshold`.
pub fn best_reduction(rows: &[BenchRow], method: HashMethod, threshold: f64) -> Option<&BenchRow> {
    rows.iter()
        .filter(|r| r.method == method && r.retention >= threshold)
        .max_by(|a, b| a.reduction.total_cmp(&b.reduction))
}

pub fn write_bench_csv(w: &mut impl Write, rows: &[BenchRow]) -> Result<()> {
    writeln!(w, "method,J,L,comparisons,seconds,ndcg,retention,reduction")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.method, r.j, r.l, r.comparisons, r.seconds, r.ndcg, r.retention, r.reduction
        )?;
    }
    Ok(())
}
