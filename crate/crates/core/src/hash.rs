//! Binary hash codes (learned and random-hyperplane), (J, L) bucket tables
//! and top-K retrieval over them.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::io::{BufRead, Write};

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Matrix, Optimizer, OptimizerConfig, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::score_order;
use crate::graph::{EvalSplit, Fold, Graph, NodeId};
use crate::model::similarity;

pub const HASH_W: &str = "hash.w";
pub const HASH_B: &str = "hash.b";

/// Codes are stored as bitmasks, so at most this many bits.
pub const MAX_BITS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for HashWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.01,
            gamma: 0.98,
        }
    }
}

impl HashWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::Config(format!(
                "hash loss weights must lie in (0,1): {w:?}"
            )));
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "hash loss weights must sum to 1: {w:?}"
            )));
        }
        Ok(())
    }
}

/// Per-node codes in {−1,+1}^H; bit `h` set means +1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashCodes {
    bits: usize,
    codes: Vec<u64>,
}

impl HashCodes {
    pub fn new(bits: usize, codes: Vec<u64>) -> Result<Self> {
        if bits == 0 || bits > MAX_BITS {
            return Err(Error::Config(format!(
                "code width must be in 1..={MAX_BITS}, got {bits}"
            )));
        }
        Ok(Self { bits, codes })
    }

    /// `sign(z)` row-wise, with sign(0) = +1.
    pub fn from_signs(z: &Matrix) -> Result<Self> {
        let codes = z
            .rows()
            .into_iter()
            .map(|r| {
                r.iter().enumerate().fold(
                    0u64,
                    |acc, (h, &v)| if v >= 0.0 { acc | (1 << h) } else { acc },
                )
            })
            .collect();
        Self::new(z.ncols(), codes)
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn raw(&self, u: NodeId) -> u64 {
        self.codes[u]
    }

    /// `b_u[h]` as ±1.
    pub fn get(&self, u: NodeId, h: usize) -> i8 {
        if self.codes[u] >> h & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// `|Σ_u b_u[h]| / N` averaged over bits.
    pub fn mean_imbalance(&self) -> f64 {
        let n = self.codes.len().max(1) as f64;
        (0..self.bits)
            .map(|h| {
                let s: i64 = (0..self.codes.len()).map(|u| self.get(u, h) as i64).sum();
                s.unsigned_abs() as f64 / n
            })
            .sum::<f64>()
            / self.bits as f64
    }

    pub fn write(&self, w: &mut impl Write, header: &[String]) -> Result<()> {
        for line in header {
            writeln!(w, "# {line}")?;
        }
        for u in 0..self.codes.len() {
            let s: String = (0..self.bits)
                .map(|h| if self.get(u, h) > 0 { '+' } else { '-' })
                .collect();
            writeln!(w, "{u} {s}")?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead, source_name: &str) -> Result<Self> {
        let mut codes = Vec::new();
        let mut bits = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                msg,
            };
            let mut f = line.split_whitespace();
            let (Some(id), Some(code)) = (f.next(), f.next()) else {
                return Err(err("expected `node code`".into()));
            };
            let id: usize = id.parse().map_err(|_| err(format!("bad node id `{id}`")))?;
            if id != codes.len() {
                return Err(err(format!("codes out of order at node {id}")));
            }
            let mut c = 0u64;
            for (h, ch) in code.chars().enumerate() {
                match ch {
                    '+' => c |= 1 << h.min(63),
                    '-' => {}
                    _ => return Err(err(format!("bad code character `{ch}`"))),
                }
            }
            let n = code.chars().count();
            if *bits.get_or_insert(n) != n {
                return Err(err(format!(
                    "code width {n} differs from {}",
                    bits.unwrap_or(0)
                )));
            }
            codes.push(c);
        }
        Self::new(bits.unwrap_or(1), codes)
    }
}

/// Random-hyperplane codes: `b_u[h] = sign(n_h · x_u)` for `H` uniform unit
/// normals.
pub fn random_hyperplane_codes(emb: &Matrix, bits: usize, seed: u64) -> Result<HashCodes> {
    let normals = random_unit_normals(emb.ncols(), bits, seed);
    HashCodes::from_signs(&emb.dot(&normals.t()))
}

/// `H×D` matrix of uniformly distributed unit vectors.
pub fn random_unit_normals(dim: usize, bits: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n =
        Array2::<f64>::from_shape_simple_fn((bits, dim), || StandardNormal.sample(&mut rng));
    for mut row in n.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    n
}

pub fn init_hasher(dim: usize, bits: usize, rng: &mut impl Rng) -> ParamStore {
    let bound = 1.0 / (dim as f64).sqrt();
    let mut p = ParamStore::new();
    p.insert_uniform(HASH_W, (dim, bits), bound, rng);
    p.insert_uniform(HASH_B, (1, bits), bound, rng);
    p
}

/// `tanh(C_ψ(x))` for every row of `emb`.
pub fn soft_codes<'t>(psi: &crate::autodiff::Bound<'t>, emb: Var<'t>) -> Result<Var<'t>> {
    Ok(emb
        .matmul(psi.get(HASH_W)?)?
        .add_row(psi.get(HASH_B)?)?
        .tanh())
}

/// The three-term code loss: bit balance, saturation, and decorrelation of
/// sampled non-edges.
pub fn hash_loss<'t>(
    z: Var<'t>,
    non_edges: &[(NodeId, NodeId)],
    w: &HashWeights,
) -> Result<Var<'t>> {
    let n = z.shape()[0] as f64;
    let balance = z.row_sum().abs().sum().scale(w.alpha / n);
    let fence = z.abs().add_scalar(-1.0).abs().sum().scale(w.beta / n);
    let total = balance.add(fence)?;
    if non_edges.is_empty() {
        log::warn!("empty non-edge sample; the decorrelation term is 0");
        return Ok(total);
    }
    let a = z.gather_rows(non_edges.iter().map(|p| p.0).collect())?;
    let b = z.gather_rows(non_edges.iter().map(|p| p.1).collect())?;
    let decor = a
        .mul(b)?
        .row_sum()
        .abs()
        .sum()
        .scale(w.gamma / non_edges.len() as f64);
    total.add(decor)
}

/// `count` distinct non-edges `(u, v)`, `u < v`, drawn uniformly.
pub fn sample_non_edges(g: &Graph, count: usize, rng: &mut impl Rng) -> Vec<(NodeId, NodeId)> {
    let n = g.num_nodes();
    let total = n * n.saturating_sub(1) / 2 - g.num_edges();
    let count = count.min(total);
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    if count * 2 > total {
        // dense request: enumerate then subsample
        let all: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| ((u + 1)..n).map(move |v| (u, v)))
            .filter(|&(u, v)| !g.has_edge(u, v))
            .collect();
        return sample(rng, all.len(), count)
            .into_iter()
            .map(|i| all[i])
            .collect();
    }
    while out.len() < count {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        if u == v || g.has_edge(u, v) {
            continue;
        }
        let pair = (u.min(v), u.max(v));
        if seen.insert(pair) {
            out.push(pair);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct HasherConfig {
    pub bits: usize,
    pub weights: HashWeights,
    pub lr: f64,
    pub epochs: usize,
    /// Non-edges sampled per edge.
    pub sample_factor: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for HasherConfig {
    fn default() -> Self {
        Self {
            bits: 16,
            weights: HashWeights::default(),
            lr: 0.05,
            epochs: 500,
            sample_factor: 10,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HasherOutcome {
    pub psi: ParamStore,
    pub codes: HashCodes,
    pub best_epoch: usize,
    /// `(train loss, validation loss)` per epoch, before that epoch's step.
    pub history: Vec<(f64, f64)>,
}

/// Full-batch SGD on the code loss over frozen embeddings, keeping ψ with
/// the lowest loss on held-out non-edges.
pub fn train_hasher(emb: &Matrix, g: &Graph, cfg: &HasherConfig) -> Result<HasherOutcome> {
    cfg.weights.validate()?;
    if cfg.bits == 0 || cfg.bits > MAX_BITS {
        return Err(Error::Config(format!(
            "code width must be in 1..={MAX_BITS}"
        )));
    }
    if emb.nrows() != g.num_nodes() {
        return Err(Error::Dimension(format!(
            "{} embeddings for {} nodes",
            emb.nrows(),
            g.num_nodes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut psi = init_hasher(emb.ncols(), cfg.bits, &mut rng);
    let mut sample = sample_non_edges(g, cfg.sample_factor * g.num_edges().max(1), &mut rng);
    let n_val = ((sample.len() as f64) * cfg.val_fraction).round() as usize;
    let val = sample.split_off(sample.len() - n_val.min(sample.len()));
    let train = sample;
    let mut opt = Optimizer::new(OptimizerConfig::sgd(cfg.lr))?;

    let evaluate = |psi: &ParamStore, pairs: &[(NodeId, NodeId)]| -> Result<f64> {
        let tape = Tape::new();
        let b = psi.bind(&tape, false);
        let z = soft_codes(&b, tape.constant(emb.clone()))?;
        Ok(hash_loss(z, pairs, &cfg.weights)?.item())
    };

    let mut best = (f64::INFINITY, 0usize, psi.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..=cfg.epochs {
        let val_loss = evaluate(&psi, &val)?;
        if val_loss < best.0 {
            best = (val_loss, epoch, psi.clone());
        }
        if epoch == cfg.epochs {
            break;
        }
        let tape = Tape::new();
        let b = psi.bind(&tape, true);
        let z = soft_codes(&b, tape.constant(emb.clone()))?;
        let loss = hash_loss(z, &train, &cfg.weights)?;
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("hash loss became {lv}"),
            });
        }
        history.push((lv, val_loss));
        let grads = b.collect(&tape.backward(loss)?);
        opt.step(&mut psi, &grads)?;
    }
    let (_, best_epoch, psi) = best;
    let codes = codes_from_hasher(&psi, emb)?;
    Ok(HasherOutcome {
        psi,
        codes,
        best_epoch,
        history,
    })
}

pub fn codes_from_hasher(psi: &ParamStore, emb: &Matrix) -> Result<HashCodes> {
    let pre = emb.dot(psi.get(HASH_W)?) + psi.get(HASH_B)?;
    HashCodes::from_signs(&pre)
}

/// L tables; table ℓ buckets each node by its code bits at positions I_ℓ.
#[derive(Debug, Clone)]
pub struct HashIndex {
    pub j: usize,
    pub projections: Vec<Vec<usize>>,
    /// Non-empty buckets per table, keyed by the J-bit bucket id.
    pub tables: Vec<BTreeMap<u64, Vec<NodeId>>>,
    num_nodes: usize,
}

/// Bucket id: bit `k` is code bit `proj[k]`.
pub fn bucket_id(code: u64, proj: &[usize]) -> u64 {
    proj.iter()
        .enumerate()
        .fold(0u64, |acc, (k, &h)| acc | ((code >> h & 1) << k))
}

pub fn build_index(codes: &HashCodes, j: usize, l: usize, seed: u64) -> Result<HashIndex> {
    if j == 0 || j > codes.bits() {
        return Err(Error::Config(format!(
            "J must be in 1..={} (the code width), got {j}",
            codes.bits()
        )));
    }
    if l == 0 {
        return Err(Error::Config("L must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projections: Vec<Vec<usize>> = (0..l)
        .map(|_| sample(&mut rng, codes.bits(), j).into_vec())
        .collect();
    let tables = projections
        .iter()
        .map(|proj| {
            let mut t: BTreeMap<u64, Vec<NodeId>> = BTreeMap::new();
            for u in 0..codes.len() {
                t.entry(bucket_id(codes.raw(u), proj)).or_default().push(u);
            }
            t
        })
        .collect();
    Ok(HashIndex {
        j,
        projections,
        tables,
        num_nodes: codes.len(),
    })
}

impl HashIndex {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn mean_occupancy(&self) -> f64 {
        let buckets = (1u128 << self.j) as f64;
        self.num_nodes as f64 / buckets
    }
}

/// Which node pairs count as candidates for a query.
#[derive(Clone, Copy)]
pub enum Candidates<'a> {
    /// Every non-self pair that is not an edge of the given training graph.
    PotentialEdges(&'a Graph),
    /// Only the query's own test-fold partners.
    TestFold(&'a EvalSplit),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    score: f64,
    partner: NodeId,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    // the heap's maximum is the entry to evict first
    fn cmp(&self, other: &Self) -> Ordering {
        score_order((self.score, self.partner), (other.score, other.partner))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Per query: `(partner, score)` by decreasing score.
    pub lists: BTreeMap<NodeId, Vec<(NodeId, f64)>>,
    /// Distinct unordered pairs whose similarity was computed.
    pub comparisons: u64,
    /// The scored pairs `(min, max)`, when requested.
    pub scored: Option<HashSet<(NodeId, NodeId)>>,
}

struct Collector<'a> {
    emb: &'a Matrix,
    k: usize,
    is_query: Vec<bool>,
    candidates: Candidates<'a>,
    test_sets: BTreeMap<NodeId, HashSet<NodeId>>,
    heaps: BTreeMap<NodeId, BinaryHeap<HeapEntry>>,
    seen: HashSet<(NodeId, NodeId)>,
    comparisons: u64,
}

impl<'a> Collector<'a> {
    fn new(emb: &'a Matrix, queries: &[NodeId], k: usize, candidates: Candidates<'a>) -> Self {
        let mut is_query = vec![false; emb.nrows()];
        let mut heaps = BTreeMap::new();
        for &q in queries {
            if q < emb.nrows() {
                is_query[q] = true;
                heaps.insert(q, BinaryHeap::with_capacity(k + 1));
            } else {
                log::warn!("query {q} is not in the index; returning an empty list");
            }
        }
        let test_sets = match candidates {
            Candidates::TestFold(split) => split
                .queries
                .iter()
                .filter(|s| is_query.get(s.query).copied().unwrap_or(false))
                .map(|s| {
                    (
                        s.query,
                        s.fold(Fold::Test).iter().map(|it| it.partner).collect(),
                    )
                })
                .collect(),
            Candidates::PotentialEdges(_) => BTreeMap::new(),
        };
        Self {
            emb,
            k,
            is_query,
            candidates,
            test_sets,
            heaps,
            seen: HashSet::new(),
            comparisons: 0,
        }
    }

    fn wants(&self, q: NodeId, v: NodeId) -> bool {
        if !self.is_query[q] || q == v {
            return false;
        }
        match self.candidates {
            Candidates::PotentialEdges(g) => !g.has_edge(q, v),
            Candidates::TestFold(_) => self.test_sets.get(&q).is_some_and(|s| s.contains(&v)),
        }
    }

    /// Score the unordered pair once and push it wherever it is wanted.
    fn offer(&mut self, a: NodeId, b: NodeId) {
        let (u, v) = (a.min(b), a.max(b));
        let (fwd, back) = (self.wants(u, v), self.wants(v, u));
        if !(fwd || back) || !self.seen.insert((u, v)) {
            return;
        }
        let s = similarity(self.emb.row(u), self.emb.row(v));
        self.comparisons += 1;
        if fwd {
            self.push(u, v, s);
        }
        if back {
            self.push(v, u, s);
        }
    }

    fn push(&mut self, q: NodeId, partner: NodeId, score: f64) {
        let heap = self.heaps.get_mut(&q).expect("query heap");
        heap.push(HeapEntry { score, partner });
        if heap.len() > self.k {
            heap.pop();
        }
    }

    fn finish(self, record: bool) -> Prediction {
        let lists = self
            .heaps
            .into_iter()
            .map(|(q, h)| {
                let mut v: Vec<(NodeId, f64)> =
                    h.into_iter().map(|e| (e.partner, e.score)).collect();
                v.sort_by(|a, b| score_order((a.1, a.0), (b.1, b.0)));
                (q, v)
            })
            .collect();
        Prediction {
            lists,
            comparisons: self.comparisons,
            scored: record.then_some(self.seen),
        }
    }
}

/// Top-K partners per query. With an index only pairs sharing a bucket in
/// some table are scored; without one every candidate pair is.
pub fn topk_predict(
    index: Option<&HashIndex>,
    emb: &Matrix,
    queries: &[NodeId],
    candidates: Candidates<'_>,
    k: usize,
    record_pairs: bool,
) -> Result<Prediction> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let mut c = Collector::new(emb, queries, k, candidates);
    match index {
        Some(idx) => {
            if idx.num_nodes() != emb.nrows() {
                return Err(Error::Dimension(format!(
                    "index over {} nodes, {} embeddings",
                    idx.num_nodes(),
                    emb.nrows()
                )));
            }
            for table in &idx.tables {
                for bucket in table.values() {
                    for (i, &a) in bucket.iter().enumerate() {
                        for &b in &bucket[i + 1..] {
                            c.offer(a, b);
                        }
                    }
                }
            }
        }
        None => {
            let qs: Vec<NodeId> = c.heaps.keys().copied().collect();
            for q in qs {
                match candidates {
                    Candidates::PotentialEdges(_) => {
                        for v in 0..emb.nrows() {
                            c.offer(q, v);
                        }
                    }
                    Candidates::TestFold(split) => {
                        if let Some(s) = split.get(q) {
                            for it in s.fold(Fold::Test) {
                                c.offer(q, it.partner);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(c.finish(record_pairs))
}

/// Tab-separated `query partner score rank` lines.
pub fn write_predictions(w: &mut impl Write, p: &Prediction, header: &[String]) -> Result<()> {
    for line in header {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "# comparisons {}", p.comparisons)?;
    for (q, list) in &p.lists {
        for (rank, (v, s)) in list.iter().enumerate() {
            writeln!(w, "{q}\t{v}\t{s:e}\t{}", rank + 1)?;
        }
    }
    Ok(())
}

pub fn read_predictions(
    r: impl BufRead,
    source_name: &str,
) -> Result<BTreeMap<NodeId, Vec<(NodeId, f64)>>> {
    let mut out: BTreeMap<NodeId, Vec<(NodeId, f64)>> = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(err("expected `query partner score rank`".into()));
        }
        let q: NodeId = f[0].parse().map_err(|_| err("bad query".into()))?;
        let v: NodeId = f[1].parse().map_err(|_| err("bad partner".into()))?;
        let s: f64 = f[2].parse().map_err(|_| err("bad score".into()))?;
        out.entry(q).or_default().push((v, s));
    }
    Ok(out)
}

/// Mean per-node activation magnitude `|tanh(C_ψ(x))|`.
pub fn mean_activation(psi: &ParamStore, emb: &Matrix) -> Result<f64> {
    let pre = emb.dot(psi.get(HASH_W)?) + psi.get(HASH_B)?;
    Ok(pre.mapv(|v| v.tanh().abs()).mean().unwrap_or(0.0))
}

/// Column sums of ±1 codes, for inspection.
pub fn bit_sums(codes: &HashCodes) -> Vec<i64> {
    let m = Array2::from_shape_fn((codes.len(), codes.bits()), |(u, h)| codes.get(u, h) as i64);
    m.sum_axis(Axis(0)).to_vec()
}
