//! Undirected graphs with node features, neighborhoods, query selection and
//! the per-query train/validation/test protocol.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::CsrMatrix;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Undirected simple graph. Adjacency lists are sorted and symmetric and
/// never contain the node itself.
#[derive(Debug, Clone)]
pub struct Graph {
    adj: Vec<Vec<NodeId>>,
    num_edges: usize,
    features: Arc<CsrMatrix>,
}

/// `nbr(u)`: the center plus its adjacent nodes, ascending by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    pub center: NodeId,
    pub members: Vec<NodeId>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl Graph {
    /// Build from an edge list. Duplicate and reversed pairs collapse to one
    /// edge; self-loops are rejected. Without `features` every node gets a
    /// one-hot identity row.
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
        features: Option<CsrMatrix>,
    ) -> Result<Self> {
        let mut sets: Vec<BTreeSet<NodeId>> = vec![BTreeSet::new(); num_nodes];
        for (u, v) in edges {
            for w in [u, v] {
                if w >= num_nodes {
                    return Err(Error::Index { node: w, num_nodes });
                }
            }
            if u == v {
                return Err(Error::Contract(format!("self-loop on node {u}")));
            }
            sets[u].insert(v);
            sets[v].insert(u);
        }
        let features = match features {
            Some(f) if f.rows() != num_nodes => {
                return Err(Error::Dimension(format!(
                    "{} feature rows for {} nodes",
                    f.rows(),
                    num_nodes
                )))
            }
            Some(f) => f,
            None => CsrMatrix::identity(num_nodes),
        };
        let adj: Vec<Vec<NodeId>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let num_edges = adj.iter().map(Vec::len).sum::<usize>() / 2;
        Ok(Self {
            adj,
            num_edges,
            features: Arc::new(features),
        })
    }

    /// Same nodes and features, different edges.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = (NodeId, NodeId)>) -> Result<Self> {
        let mut g = Graph::new(self.num_nodes(), edges, None)?;
        g.features = Arc::clone(&self.features);
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Arc<CsrMatrix> {
        &self.features
    }

    fn check(&self, u: NodeId) -> Result<()> {
        if u >= self.num_nodes() {
            Err(Error::Index {
                node: u,
                num_nodes: self.num_nodes(),
            })
        } else {
            Ok(())
        }
    }

    /// Adjacent nodes of `u`, excluding `u` itself. Panics when out of range.
    pub fn adjacent(&self, u: NodeId) -> &[NodeId] {
        &self.adj[u]
    }

    pub fn degree(&self, u: NodeId) -> usize {
        self.adj[u].len()
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        u < self.adj.len() && self.adj[u].binary_search(&v).is_ok()
    }

    /// Every edge once, as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(u, vs)| vs.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
    }

    pub fn neighbors(&self, u: NodeId) -> Result<Neighborhood> {
        self.check(u)?;
        let adj = &self.adj[u];
        let split = adj.partition_point(|&v| v < u);
        let mut members = Vec::with_capacity(adj.len() + 1);
        members.extend_from_slice(&adj[..split]);
        members.push(u);
        members.extend_from_slice(&adj[split..]);
        Ok(Neighborhood { center: u, members })
    }

    /// Largest `|nbr(u)|` over all nodes (at least 1).
    pub fn max_neighborhood_size(&self) -> usize {
        self.adj.iter().map(|a| a.len() + 1).max().unwrap_or(1)
    }

    /// Nodes at shortest-path distance exactly 2 from `u`, ascending.
    pub fn two_hop(&self, u: NodeId) -> Result<Vec<NodeId>> {
        self.check(u)?;
        let mut out = BTreeSet::new();
        for &v in &self.adj[u] {
            for &w in &self.adj[v] {
                if w != u && !self.has_edge(u, w) {
                    out.insert(w);
                }
            }
        }
        Ok(out.into_iter().collect())
    }

    /// Whether `u` closes at least one triangle.
    pub fn in_triangle(&self, u: NodeId) -> bool {
        let a = &self.adj[u];
        a.iter().any(|&v| sorted_intersects(a, &self.adj[v]))
    }

    /// Query nodes: exactly the nodes lying on at least one triangle.
    pub fn select_queries(&self) -> Vec<NodeId> {
        (0..self.num_nodes())
            .filter(|&u| self.in_triangle(u))
            .collect()
    }

    /// Common adjacent nodes of `u` and `v`, ascending.
    pub fn common_neighbors(&self, u: NodeId, v: NodeId) -> Vec<NodeId> {
        let (a, b) = (&self.adj[u], &self.adj[v]);
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::new();
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out
    }
}

fn sorted_intersects(a: &[NodeId], b: &[NodeId]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

/// Parse a whitespace-separated edge list. Blank lines and `#` comments are
/// skipped.
pub fn parse_edges(reader: impl BufRead, source_name: &str) -> Result<Vec<(NodeId, NodeId)>> {
    let mut edges = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            msg,
        };
        let mut parts = trimmed.split_whitespace();
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err(format!("expected two node ids, got `{trimmed}`")));
        };
        let u: NodeId = a.parse().map_err(|_| err(format!("bad node id `{a}`")))?;
        let v: NodeId = b.parse().map_err(|_| err(format!("bad node id `{b}`")))?;
        if u == v {
            return Err(err(format!("self-loop on node {u}")));
        }
        edges.push((u, v));
    }
    Ok(edges)
}

/// Parse dense feature rows, one per node.
pub fn parse_features(reader: impl BufRead, source_name: &str) -> Result<CsrMatrix> {
    let mut rows = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut row = Vec::new();
        let mut n = 0;
        for (c, tok) in trimmed.split_whitespace().enumerate() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                msg: format!("bad feature value `{tok}`"),
            })?;
            if v != 0.0 {
                row.push((c, v));
            }
            n += 1;
        }
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(Error::Dimension(format!(
                    "{source_name}:{}: row has {n} values, expected {w}",
                    i + 1
                )))
            }
            _ => {}
        }
        rows.push(row);
    }
    Ok(CsrMatrix::from_rows(width.unwrap_or(0), rows))
}

/// Load an edge file and optional feature file.
pub fn load_graph(edge_file: &Path, feature_file: Option<&Path>) -> Result<Graph> {
    let name = edge_file.display().to_string();
    let reader = std::io::BufReader::new(std::fs::File::open(edge_file)?);
    let edges = parse_edges(reader, &name)?;
    let num_nodes = edges.iter().map(|&(u, v)| u.max(v) + 1).max().unwrap_or(0);
    let features = match feature_file {
        Some(p) => {
            let r = std::io::BufReader::new(std::fs::File::open(p)?);
            Some(parse_features(r, &p.display().to_string())?)
        }
        None => None,
    };
    Graph::new(num_nodes, edges, features)
}

/// Load a citation dataset in the LINQS `.content` / `.cites` layout
/// (`id word... label` rows and `cited citing` pairs). Ids are remapped to
/// `0..n` in content-file order; citations to unknown papers and
/// self-citations are dropped.
pub fn load_linqs(content: &Path, cites: &Path) -> Result<Graph> {
    use std::collections::HashMap;
    let name = content.display().to_string();
    let reader = std::io::BufReader::new(std::fs::File::open(content)?);
    let mut ids: HashMap<String, NodeId> = HashMap::new();
    let mut rows = Vec::new();
    let mut width = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 3 {
            return Err(Error::Parse {
                source_name: name.clone(),
                line: i + 1,
                msg: "expected `id features... label`".into(),
            });
        }
        let feats = &toks[1..toks.len() - 1];
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(Error::Dimension(format!(
                    "{name}:{}: {} features, expected {w}",
                    i + 1,
                    feats.len()
                )))
            }
            _ => {}
        }
        let mut row = Vec::new();
        for (c, t) in feats.iter().enumerate() {
            let v: f64 = t.parse().map_err(|_| Error::Parse {
                source_name: name.clone(),
                line: i + 1,
                msg: format!("bad feature `{t}`"),
            })?;
            if v != 0.0 {
                row.push((c, v));
            }
        }
        let next = ids.len();
        ids.entry(toks[0].to_string()).or_insert(next);
        rows.push(row);
    }
    let reader = std::io::BufReader::new(std::fs::File::open(cites)?);
    let mut edges = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            continue;
        }
        if let (Some(&u), Some(&v)) = (ids.get(toks[0]), ids.get(toks[1])) {
            if u != v {
                edges.push((u, v));
            }
        }
    }
    let n = rows.len();
    Graph::new(
        n,
        edges,
        Some(CsrMatrix::from_rows(width.unwrap_or(0), rows)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Fold {
    Train,
    Val,
    Test,
}

impl fmt::Display for Fold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fold::Train => "train",
            Fold::Val => "val",
            Fold::Test => "test",
        })
    }
}

impl FromStr for Fold {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Fold::Train),
            "val" => Ok(Fold::Val),
            "test" => Ok(Fold::Test),
            _ => Err(Error::Contract(format!("unknown fold `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Edge,
    NonEdge,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Edge => "edge",
            Label::NonEdge => "nonedge",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge" => Ok(Label::Edge),
            "nonedge" => Ok(Label::NonEdge),
            _ => Err(Error::Contract(format!("unknown label `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SplitItem {
    pub partner: NodeId,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuerySplit {
    pub query: NodeId,
    pub train: Vec<SplitItem>,
    pub val: Vec<SplitItem>,
    pub test: Vec<SplitItem>,
}

impl QuerySplit {
    pub fn fold(&self, fold: Fold) -> &[SplitItem] {
        match fold {
            Fold::Train => &self.train,
            Fold::Val => &self.val,
            Fold::Test => &self.test,
        }
    }

    fn fold_mut(&mut self, fold: Fold) -> &mut Vec<SplitItem> {
        match fold {
            Fold::Train => &mut self.train,
            Fold::Val => &mut self.val,
            Fold::Test => &mut self.test,
        }
    }

    pub fn partners(&self, fold: Fold, label: Label) -> impl Iterator<Item = NodeId> + '_ {
        self.fold(fold)
            .iter()
            .filter(move |it| it.label == label)
            .map(|it| it.partner)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Config(format!(
                "split ratios must be positive: {all:?}"
            )));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1: {all:?}"
            )));
        }
        Ok(())
    }

    /// Fold sizes for `n` items: floor each share, then hand out the
    /// remainder one at a time to train, test, val (cycling).
    pub fn fold_sizes(&self, n: usize) -> [usize; 3] {
        let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let mut sizes = [floor(self.train), floor(self.val), floor(self.test)];
        let mut rem = n - sizes.iter().sum::<usize>();
        // order: train, test, val
        let order = [0usize, 2, 1];
        let mut k = 0;
        while rem > 0 {
            sizes[order[k % 3]] += 1;
            rem -= 1;
            k += 1;
        }
        sizes
    }
}

/// Per-query partition of neighbors and 2-hop non-neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub ratios: SplitRatios,
    pub seed: u64,
    /// Sorted by query id.
    pub queries: Vec<QuerySplit>,
    /// Number of (query, fold) pairs that came out empty.
    pub empty_folds: usize,
}

/// Partition every query's candidates uniformly at random by `ratios`.
pub fn make_split(g: &Graph, ratios: SplitRatios, seed: u64) -> Result<EvalSplit> {
    ratios.validate()?;
    let queries = g.select_queries();
    if queries.is_empty() {
        return Err(Error::Contract(
            "graph has no query nodes (no triangles)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(queries.len());
    let mut empty_folds = 0;
    for &q in &queries {
        let mut split = QuerySplit {
            query: q,
            ..Default::default()
        };
        let mut pos: Vec<NodeId> = g.adjacent(q).to_vec();
        let mut neg: Vec<NodeId> = g.two_hop(q)?;
        for (items, label) in [(&mut pos, Label::Edge), (&mut neg, Label::NonEdge)] {
            items.shuffle(&mut rng);
            let [a, b, _] = ratios.fold_sizes(items.len());
            for (i, &partner) in items.iter().enumerate() {
                let fold = if i < a {
                    Fold::Train
                } else if i < a + b {
                    Fold::Val
                } else {
                    Fold::Test
                };
                split.fold_mut(fold).push(SplitItem { partner, label });
            }
        }
        for fold in [Fold::Train, Fold::Val, Fold::Test] {
            let list = split.fold_mut(fold);
            list.sort();
            if list.is_empty() {
                empty_folds += 1;
            }
        }
        out.push(split);
    }
    if empty_folds > 0 {
        log::warn!("{empty_folds} query folds are empty after rounding");
    }
    Ok(EvalSplit {
        ratios,
        seed,
        queries: out,
        empty_folds,
    })
}

impl EvalSplit {
    pub fn query_ids(&self) -> Vec<NodeId> {
        self.queries.iter().map(|q| q.query).collect()
    }

    pub fn get(&self, q: NodeId) -> Option<&QuerySplit> {
        self.queries
            .binary_search_by_key(&q, |s| s.query)
            .ok()
            .map(|i| &self.queries[i])
    }

    /// Edges marked `test` by at least one query endpoint.
    pub fn test_edges(&self) -> BTreeSet<(NodeId, NodeId)> {
        self.queries
            .iter()
            .flat_map(|s| {
                s.partners(Fold::Test, Label::Edge)
                    .map(move |v| (s.query.min(v), s.query.max(v)))
            })
            .collect()
    }

    /// The graph disclosed to the model: every edge except those any query
    /// endpoint placed in its test fold.
    pub fn training_graph(&self, g: &Graph) -> Result<Graph> {
        let hidden = self.test_edges();
        g.with_edges(g.edges().filter(|e| !hidden.contains(e)))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "# permgnn split v1")?;
        writeln!(
            w,
            "# ratios {} {} {}",
            self.ratios.train, self.ratios.val, self.ratios.test
        )?;
        writeln!(w, "# seed {}", self.seed)?;
        for s in &self.queries {
            for fold in [Fold::Train, Fold::Val, Fold::Test] {
                for it in s.fold(fold) {
                    writeln!(w, "{}\t{}\t{}\t{}", s.query, fold, it.partner, it.label)?;
                }
            }
        }
        Ok(())
    }

    pub fn read(r: impl BufRead, source_name: &str) -> Result<Self> {
        let mut ratios = None;
        let mut seed = None;
        let mut queries: Vec<QuerySplit> = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let err = |msg: String| Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                msg,
            };
            if let Some(rest) = line.strip_prefix("# ratios ") {
                let v: Vec<f64> = rest
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| err(format!("bad ratio `{t}`"))))
                    .collect::<Result<_>>()?;
                if v.len() != 3 {
                    return Err(err("expected three ratios".into()));
                }
                ratios = Some(SplitRatios::new(v[0], v[1], v[2])?);
                continue;
            }
            if let Some(rest) = line.strip_prefix("# seed ") {
                seed = Some(rest.trim().parse().map_err(|_| err("bad seed".into()))?);
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(err(format!(
                    "expected 4 tab-separated fields, got `{line}`"
                )));
            }
            let q: NodeId = f[0]
                .parse()
                .map_err(|_| err(format!("bad query `{}`", f[0])))?;
            let fold: Fold = f[1].parse().map_err(|e: Error| err(e.to_string()))?;
            let partner: NodeId = f[2]
                .parse()
                .map_err(|_| err(format!("bad partner `{}`", f[2])))?;
            let label: Label = f[3].parse().map_err(|e: Error| err(e.to_string()))?;
            if queries.last().map(|s| s.query) != Some(q) {
                queries.push(QuerySplit {
                    query: q,
                    ..Default::default()
                });
            }
            queries
                .last_mut()
                .expect("pushed above")
                .fold_mut(fold)
                .push(SplitItem { partner, label });
        }
        queries.sort_by_key(|s| s.query);
        let empty_folds = queries
            .iter()
            .map(|s| {
                [&s.train, &s.val, &s.test]
                    .iter()
                    .filter(|l| l.is_empty())
                    .count()
            })
            .sum();
        Ok(EvalSplit {
            ratios: ratios.ok_or_else(|| Error::Contract("split file lacks ratios".into()))?,
            seed: seed.ok_or_else(|| Error::Contract("split file lacks seed".into()))?,
            queries,
            empty_folds,
        })
    }
}
