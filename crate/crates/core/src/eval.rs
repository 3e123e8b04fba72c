//! Heuristic baselines, ranking metrics and permutation-sensitivity probes.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::graph::{Fold, Graph, Label, NodeId, QuerySplit};
use crate::model::similarity;

pub fn cn_score(g: &Graph, u: NodeId, v: NodeId) -> f64 {
    g.common_neighbors(u, v).len() as f64
}

/// Adamic–Adar; common neighbors of degree ≤ 1 contribute 0.
pub fn aa_score(g: &Graph, u: NodeId, v: NodeId) -> f64 {
    g.common_neighbors(u, v)
        .into_iter()
        .map(|w| g.degree(w))
        .filter(|&d| d > 1)
        .map(|d| 1.0 / (d as f64).ln())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub partner: NodeId,
    pub score: f64,
    pub relevant: bool,
}

/// A query's candidates ranked by decreasing score.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: NodeId,
    pub entries: Vec<RankedEntry>,
    /// Relevant candidates in the full candidate set (may exceed those
    /// present in a truncated list).
    pub num_relevant: usize,
}

/// Score order: higher first, ties by ascending partner id.
pub fn score_order(a: (f64, NodeId), b: (f64, NodeId)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl RankedList {
    pub fn from_scored(query: NodeId, mut entries: Vec<RankedEntry>) -> Self {
        entries.sort_by(|a, b| score_order((a.score, a.partner), (b.score, b.partner)));
        let num_relevant = entries.iter().filter(|e| e.relevant).count();
        Self {
            query,
            entries,
            num_relevant,
        }
    }

    pub fn relevance(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.relevant).collect()
    }
}

/// Rank every item of `fold` for `split.query` with `score`.
pub fn rank_fold(
    split: &QuerySplit,
    fold: Fold,
    mut score: impl FnMut(NodeId, NodeId) -> f64,
) -> RankedList {
    let entries = split
        .fold(fold)
        .iter()
        .map(|it| RankedEntry {
            partner: it.partner,
            score: score(split.query, it.partner),
            relevant: it.label == Label::Edge,
        })
        .collect();
    RankedList::from_scored(split.query, entries)
}

/// Mean over relevant ranks `i` of `hits@i / i`; 0 without hits.
pub fn average_precision(rel: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, &r) in rel.iter().enumerate() {
        if r {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        total / hits as f64
    }
}

pub fn reciprocal_rank(rel: &[bool]) -> f64 {
    rel.iter()
        .position(|&r| r)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Binary-gain NDCG; the ideal ranking places `num_relevant` hits first
/// (truncated to the list length).
pub fn ndcg(rel: &[bool], num_relevant: usize) -> f64 {
    let disc = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = rel
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| disc(i))
        .sum();
    let ideal: f64 = (0..num_relevant.min(rel.len())).map(disc).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// Fraction of (relevant, irrelevant) pairs ordered correctly, ties ½.
/// `None` unless both classes are present.
pub fn auc(entries: &[RankedEntry]) -> Option<f64> {
    let pos: Vec<f64> = entries
        .iter()
        .filter(|e| e.relevant)
        .map(|e| e.score)
        .collect();
    let neg: Vec<f64> = entries
        .iter()
        .filter(|e| !e.relevant)
        .map(|e| e.score)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut good = 0.0;
    for &p in &pos {
        for &n in &neg {
            good += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(good / (pos.len() * neg.len()) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub map: f64,
    pub mrr: f64,
    pub ndcg: f64,
    /// `(query, AP)` for every query that entered the averages.
    pub per_query_ap: Vec<(NodeId, f64)>,
    /// Queries left out for lacking a relevant candidate.
    pub skipped: usize,
    pub cutoff: Option<usize>,
}

impl MetricsReport {
    pub fn evaluated(&self) -> usize {
        self.per_query_ap.len()
    }

    pub fn write(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "map = {}", self.map)?;
        writeln!(w, "mrr = {}", self.mrr)?;
        writeln!(w, "ndcg = {}", self.ndcg)?;
        writeln!(w, "queries = {}", self.evaluated())?;
        writeln!(w, "skipped = {}", self.skipped)?;
        match self.cutoff {
            Some(k) => writeln!(w, "cutoff = {k}")?,
            None => writeln!(w, "cutoff = inf")?,
        }
        Ok(())
    }

    pub fn write_per_query_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "query,ap")?;
        for (q, ap) in &self.per_query_ap {
            writeln!(w, "{q},{ap}")?;
        }
        Ok(())
    }
}

/// MAP, MRR and NDCG over lists truncated to `cutoff` entries.
pub fn compute_metrics(lists: &[RankedList], cutoff: Option<usize>) -> MetricsReport {
    let mut per_query_ap = Vec::new();
    let (mut mrr, mut nd) = (0.0, 0.0);
    let mut skipped = 0;
    for list in lists {
        if list.num_relevant == 0 {
            skipped += 1;
            continue;
        }
        let mut rel = list.relevance();
        if let Some(k) = cutoff {
            rel.truncate(k);
        }
        let ap = average_precision(&rel);
        per_query_ap.push((list.query, ap));
        mrr += reciprocal_rank(&rel);
        nd += ndcg(&rel, list.num_relevant);
    }
    if skipped > 0 {
        log::warn!("{skipped} queries have no relevant candidates and are excluded");
    }
    let n = per_query_ap.len() as f64;
    let mean = |x: f64| if n > 0.0 { x / n } else { 0.0 };
    MetricsReport {
        map: mean(per_query_ap.iter().map(|p| p.1).sum()),
        mrr: mean(mrr),
        ndcg: mean(nd),
        per_query_ap,
        skipped,
        cutoff,
    }
}

/// Mean per-query AUC and AP of `lists`, skipping lists where either is
/// undefined.
pub fn auc_ap(lists: &[RankedList]) -> (f64, f64) {
    let aucs: Vec<f64> = lists.iter().filter_map(|l| auc(&l.entries)).collect();
    let aps: Vec<f64> = lists
        .iter()
        .filter(|l| l.num_relevant > 0)
        .map(|l| average_precision(&l.relevance()))
        .collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    (mean(&aucs), mean(&aps))
}

/// Kendall's τ between two rankings of the same items, given as sequences.
pub fn kendall_tau(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "kendall tau of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let x = (a[i] as i64 - a[j] as i64).signum();
            let y = (b[i] as i64 - b[j] as i64).signum();
            s += x * y;
        }
    }
    Ok(s as f64 / (n * (n - 1) / 2) as f64)
}

/// Collapse a `δ×k` sequence into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeqReduction {
    /// Rows laid end to end, so positions are compared with positions.
    #[default]
    Concat,
    Sum,
}

impl FromStr for SeqReduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "sum" => Ok(Self::Sum),
            _ => Err(Error::Config(format!("unknown sequence reduction `{s}`"))),
        }
    }
}

impl fmt::Display for SeqReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Concat => "concat",
            Self::Sum => "sum",
        })
    }
}

pub fn reduce_sequence(seq: &Matrix, how: SeqReduction) -> Array1<f64> {
    match how {
        SeqReduction::Concat => seq.iter().copied().collect(),
        SeqReduction::Sum => seq.sum_axis(ndarray::Axis(0)),
    }
}

/// Mean cosine similarity between paired representations.
pub fn insensitivity<'a>(
    under_pi: impl IntoIterator<Item = ArrayView1<'a, f64>>,
    under_pi0: impl IntoIterator<Item = ArrayView1<'a, f64>>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    let mut b = under_pi0.into_iter();
    for x in under_pi {
        let y = b
            .next()
            .ok_or_else(|| Error::Dimension("insensitivity inputs differ in length".into()))?;
        if x.len() != y.len() {
            return Err(Error::Dimension(format!(
                "vectors of width {} and {}",
                x.len(),
                y.len()
            )));
        }
        total += similarity(x, y);
        n += 1;
    }
    if b.next().is_some() {
        return Err(Error::Dimension(
            "insensitivity inputs differ in length".into(),
        ));
    }
    if n == 0 {
        return Err(Error::Contract("insensitivity of no nodes".into()));
    }
    Ok(total / n as f64)
}
