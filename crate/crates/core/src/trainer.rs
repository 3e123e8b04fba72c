//! The alternating encoder/adversary game, the canonical-order and
//! multi-permutation ablations, and early stopping.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{gumbel_sinkhorn, init_adversary, seed_matrix, SinkhornConfig};
use crate::autodiff::{GradMap, Matrix, Method, Optimizer, OptimizerConfig, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{auc_ap, rank_fold};
use crate::graph::{EvalSplit, Fold, Graph, Label, NodeId};
use crate::model::{
    encode_batch, init_encoder, ranking_loss, similarity, EncoderConfig, RankPair, Reduction,
    SeqInput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    PermGnn,
    OnePerm,
    MultiPerm(usize),
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permgnn" => Ok(Mode::PermGnn),
            "one_perm" | "1perm" => Ok(Mode::OnePerm),
            _ => {
                let m = s
                    .strip_prefix("multi_perm")
                    .map(|r| r.trim_start_matches(['(', ':', '=']).trim_end_matches(')'))
                    .and_then(|r| r.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))?;
                Ok(Mode::MultiPerm(m))
            }
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::PermGnn => f.write_str("permgnn"),
            Mode::OnePerm => f.write_str("one_perm"),
            Mode::MultiPerm(m) => write!(f, "multi_perm({m})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub optimizer: OptimizerConfig,
    /// Adversary optimizer; `None` reuses the encoder's.
    pub adversary_optimizer: Option<OptimizerConfig>,
    pub margin: f64,
    pub k_neg: usize,
    pub epochs_max: usize,
    pub patience: usize,
    pub rel_tol: f64,
    /// Encoder epochs per round.
    pub theta_epochs: usize,
    /// Adversary epochs per round.
    pub phi_epochs: usize,
    /// Queries per mini-batch; 0 means the whole training set at once.
    pub batch_queries: usize,
    pub sinkhorn: SinkhornConfig,
    pub hidden: usize,
    pub embed_dim: usize,
    pub reduction: Reduction,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset("cora").expect("built-in preset")
    }
}

impl TrainConfig {
    /// Per-dataset optimizer, learning rate and margin.
    pub fn preset(name: &str) -> Result<Self> {
        let (optimizer, margin) = match name.to_ascii_lowercase().as_str() {
            "twitter" => (OptimizerConfig::adam(5e-4), 0.01),
            "google+" | "gplus" => (OptimizerConfig::sgd(5e-5), 0.01),
            "citeseer" | "cora" => (OptimizerConfig::sgd(5e-5), 0.1),
            "pb" => (OptimizerConfig::sgd(5e-6), 0.01),
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        Ok(Self {
            mode: Mode::PermGnn,
            optimizer,
            adversary_optimizer: None,
            margin,
            k_neg: 5,
            epochs_max: 1000,
            patience: 100,
            rel_tol: 1e-4,
            theta_epochs: 1,
            phi_epochs: 1,
            batch_queries: 1,
            sinkhorn: SinkhornConfig::default(),
            hidden: 32,
            embed_dim: 16,
            reduction: Reduction::Final,
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if let Some(a) = &self.adversary_optimizer {
            a.validate()?;
        }
        self.sinkhorn.validate()?;
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config("rel_tol must be positive".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if self.k_neg == 0 || self.theta_epochs == 0 {
            return Err(Error::Config(
                "k_neg and theta_epochs must be at least 1".into(),
            ));
        }
        if let Mode::MultiPerm(m) = self.mode {
            if m == 0 {
                return Err(Error::Config("multi_perm needs m ≥ 1".into()));
            }
        }
        Ok(())
    }

    pub fn encoder(&self, feature_dim: usize) -> EncoderConfig {
        EncoderConfig {
            feature_dim,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            reduction: self.reduction,
        }
    }

    pub fn adversary_opt(&self) -> OptimizerConfig {
        self.adversary_optimizer.unwrap_or(self.optimizer)
    }

    /// Set one field from its `key = value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}`: bad number `{v}`")))
        };
        let int = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}`: bad integer `{v}`")))
        };
        match key {
            "preset" => {
                let seed = self.seed;
                *self = Self::preset(value)?;
                self.seed = seed;
            }
            "mode" => self.mode = value.parse()?,
            "optimizer" => self.optimizer.method = value.parse()?,
            "lr" => self.optimizer.lr = num(value)?,
            "adversary_optimizer" => {
                let mut a = self.adversary_opt();
                a.method = value.parse::<Method>()?;
                self.adversary_optimizer = Some(a);
            }
            "adversary_lr" => {
                let mut a = self.adversary_opt();
                a.lr = num(value)?;
                self.adversary_optimizer = Some(a);
            }
            "margin" => self.margin = num(value)?,
            "k_neg" => self.k_neg = int(value)?,
            "epochs_max" | "epochs" => self.epochs_max = int(value)?,
            "patience" => self.patience = int(value)?,
            "rel_tol" => self.rel_tol = num(value)?,
            "theta_epochs" => self.theta_epochs = int(value)?,
            "phi_epochs" => self.phi_epochs = int(value)?,
            "batch_queries" => self.batch_queries = int(value)?,
            "sinkhorn_iterations" => self.sinkhorn.iterations = int(value)?,
            "temperature" => self.sinkhorn.temperature = num(value)?,
            "noise_factor" => self.sinkhorn.noise_factor = num(value)?,
            "hidden" => self.hidden = int(value)?,
            "embed_dim" => self.embed_dim = int(value)?,
            "reduction" => self.reduction = value.parse()?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("`seed`: bad integer `{value}`")))?
            }
            other => return Err(Error::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical `key = value` listing (inverse of [`set`](Self::set)).
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let a = self.adversary_opt();
        [
            ("mode", self.mode.to_string()),
            ("optimizer", self.optimizer.method.to_string()),
            ("lr", self.optimizer.lr.to_string()),
            ("adversary_optimizer", a.method.to_string()),
            ("adversary_lr", a.lr.to_string()),
            ("margin", self.margin.to_string()),
            ("k_neg", self.k_neg.to_string()),
            ("epochs_max", self.epochs_max.to_string()),
            ("patience", self.patience.to_string()),
            ("rel_tol", self.rel_tol.to_string()),
            ("theta_epochs", self.theta_epochs.to_string()),
            ("phi_epochs", self.phi_epochs.to_string()),
            ("batch_queries", self.batch_queries.to_string()),
            ("sinkhorn_iterations", self.sinkhorn.iterations.to_string()),
            ("temperature", self.sinkhorn.temperature.to_string()),
            ("noise_factor", self.sinkhorn.noise_factor.to_string()),
            ("hidden", self.hidden.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("reduction", self.reduction.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str, source_name: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_auc: f64,
    pub val_ap: f64,
    /// Wall-clock seconds since training began, validation included.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "epoch,loss,val_auc,val_ap,seconds")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.epoch, r.loss, r.val_auc, r.val_ap, r.seconds
            )?;
        }
        Ok(())
    }

    pub fn best_val_ap(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.val_ap)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Seconds until validation AP first reached `target`.
    pub fn time_to_reach(&self, target: f64) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.val_ap >= target)
            .map(|r| r.seconds)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: ParamStore,
    pub phi: Option<ParamStore>,
    pub trace: TrainTrace,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Stateless 64-bit mixer for per-(epoch, node) random streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(z << 6)
            .wrapping_add(z >> 2);
        z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z ^= z >> 31;
    }
    z
}

const PHASE_THETA: u64 = 1;
const PHASE_PHI: u64 = 2;
const PHASE_EVAL: u64 = 3;

/// Which parameter group receives gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Theta,
    Phi,
}

/// Per-query training material.
#[derive(Debug, Clone)]
struct QueryPairs {
    query: NodeId,
    positives: Vec<NodeId>,
    negatives: Vec<NodeId>,
}

/// Ranking triples `(query, positive, negative)` by node id.
pub type Triple = (NodeId, NodeId, NodeId);

/// Everything the training loop reads: the disclosed graph, the split and
/// the configuration.
pub struct Trainer<'a> {
    pub graph: &'a Graph,
    pub split: &'a EvalSplit,
    pub cfg: TrainConfig,
    features: Arc<crate::autodiff::CsrMatrix>,
    neighborhoods: Vec<Vec<NodeId>>,
    queries: Vec<QueryPairs>,
}

impl<'a> Trainer<'a> {
    /// `graph` must be the training graph of `split`.
    pub fn new(graph: &'a Graph, split: &'a EvalSplit, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let neighborhoods = (0..graph.num_nodes())
            .map(|u| graph.neighbors(u).map(|n| n.members))
            .collect::<Result<_>>()?;
        let mut queries = Vec::new();
        for s in &split.queries {
            // positives hidden by the other endpoint's test fold are dropped
            let positives: Vec<NodeId> = s
                .partners(Fold::Train, Label::Edge)
                .filter(|&v| graph.has_edge(s.query, v))
                .collect();
            let negatives: Vec<NodeId> = s.partners(Fold::Train, Label::NonEdge).collect();
            if !positives.is_empty() && !negatives.is_empty() {
                queries.push(QueryPairs {
                    query: s.query,
                    positives,
                    negatives,
                });
            }
        }
        if queries.is_empty() {
            return Err(Error::Contract(
                "no query has both training positives and negatives".into(),
            ));
        }
        Ok(Self {
            graph,
            split,
            cfg,
            features: Arc::clone(graph.features()),
            neighborhoods,
            queries,
        })
    }

    pub fn delta_max(&self) -> usize {
        self.graph.max_neighborhood_size()
    }

    pub fn neighborhood(&self, u: NodeId) -> &[NodeId] {
        &self.neighborhoods[u]
    }

    /// Fresh θ and φ from the configured seed.
    pub fn init_params(&self) -> Result<(ParamStore, ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, 0xC0DE]));
        let theta = init_encoder(&self.cfg.encoder(self.graph.feature_dim()), &mut rng)?;
        let phi = init_adversary(self.graph.feature_dim(), self.delta_max(), &mut rng);
        Ok((theta, phi))
    }

    /// Mini-batches of ranking triples for one epoch.
    pub fn sample_batches(&self, epoch: usize, phase: Phase) -> Vec<Vec<Triple>> {
        let tag = if phase == Phase::Theta {
            PHASE_THETA
        } else {
            PHASE_PHI
        };
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, tag, epoch as u64, 0xBA7C]));
        let mut order: Vec<usize> = (0..self.queries.len()).collect();
        order.shuffle(&mut rng);
        let per = if self.cfg.batch_queries == 0 {
            order.len()
        } else {
            self.cfg.batch_queries
        };
        order
            .chunks(per)
            .map(|chunk| {
                let mut triples = Vec::new();
                for &qi in chunk {
                    let qp = &self.queries[qi];
                    for &p in &qp.positives {
                        for _ in 0..self.cfg.k_neg {
                            let n = qp.negatives[rng.gen_range(0..qp.negatives.len())];
                            triples.push((qp.query, p, n));
                        }
                    }
                }
                triples
            })
            .collect()
    }

    /// Every training triple once: each positive of a query against each of
    /// its negatives.
    pub fn exhaustive_triples(&self) -> Vec<Triple> {
        let mut out = Vec::new();
        for qp in &self.queries {
            for &p in &qp.positives {
                for &n in &qp.negatives {
                    out.push((qp.query, p, n));
                }
            }
        }
        out
    }

    /// Encode `nodes` on `tape` the way training does in `epoch`.
    fn encode_train<'t>(
        &self,
        tape: &'t Tape,
        theta: &ParamStore,
        phi: Option<&ParamStore>,
        nodes: &[NodeId],
        epoch: usize,
        phase: Phase,
    ) -> Result<(
        Var<'t>,
        crate::autodiff::Bound<'t>,
        Option<crate::autodiff::Bound<'t>>,
    )> {
        let tb = theta.bind(tape, phase == Phase::Theta);
        let tag = if phase == Phase::Theta {
            PHASE_THETA
        } else {
            PHASE_PHI
        };
        match self.cfg.mode {
            Mode::PermGnn => {
                let phi = phi.ok_or_else(|| Error::Contract("permgnn training needs φ".into()))?;
                let pb = phi.bind(tape, phase == Phase::Phi);
                let mut inputs = Vec::with_capacity(nodes.len());
                for &w in nodes {
                    let members = self.neighborhoods[w].clone();
                    let a =
                        seed_matrix(&pb, &self.features, &members, self.cfg.sinkhorn.temperature)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                        self.cfg.seed,
                        tag,
                        epoch as u64,
                        w as u64,
                    ]));
                    let p = gumbel_sinkhorn(a, &self.cfg.sinkhorn, &mut rng)?;
                    inputs.push(SeqInput {
                        order: members,
                        perm: Some(p),
                    });
                }
                let enc = encode_batch(&tb, &self.features, &inputs, self.cfg.reduction, false)?;
                Ok((enc.embeddings, tb, Some(pb)))
            }
            Mode::OnePerm => {
                let inputs: Vec<SeqInput> = nodes
                    .iter()
                    .map(|&w| SeqInput::plain(self.neighborhoods[w].clone()))
                    .collect();
                let enc = encode_batch(&tb, &self.features, &inputs, self.cfg.reduction, false)?;
                Ok((enc.embeddings, tb, None))
            }
            Mode::MultiPerm(m) => {
                let emb =
                    self.multi_perm_embed(&tb, nodes, m, &[self.cfg.seed, tag, epoch as u64])?;
                Ok((emb, tb, None))
            }
        }
    }

    /// Mean of `m` encodings under uniformly random neighbor orders.
    fn multi_perm_embed<'t>(
        &self,
        tb: &crate::autodiff::Bound<'t>,
        nodes: &[NodeId],
        m: usize,
        stream: &[u64],
    ) -> Result<Var<'t>> {
        let mut inputs = Vec::with_capacity(nodes.len() * m);
        for j in 0..m {
            for &w in nodes {
                let mut parts = stream.to_vec();
                parts.extend([w as u64, j as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&parts));
                let mut order = self.neighborhoods[w].clone();
                order.shuffle(&mut rng);
                inputs.push(SeqInput::plain(order));
            }
        }
        let enc = encode_batch(tb, &self.features, &inputs, self.cfg.reduction, false)?;
        let b = nodes.len();
        let mut acc = enc.embeddings.slice_rows(0, b)?;
        for j in 1..m {
            acc = acc.add(enc.embeddings.slice_rows(j * b, (j + 1) * b)?)?;
        }
        Ok(acc.scale(1.0 / m as f64))
    }

    /// Loss of `triples` and, when `want_grads`, the gradient for `phase`.
    pub fn batch_objective(
        &self,
        theta: &ParamStore,
        phi: Option<&ParamStore>,
        triples: &[Triple],
        epoch: usize,
        phase: Phase,
        want_grads: bool,
    ) -> Result<(f64, GradMap)> {
        let mut row_of: BTreeMap<NodeId, usize> = BTreeMap::new();
        for &(q, p, n) in triples {
            for w in [q, p, n] {
                let next = row_of.len();
                row_of.entry(w).or_insert(next);
            }
        }
        let mut nodes = vec![0; row_of.len()];
        for (&w, &r) in &row_of {
            nodes[r] = w;
        }
        let tape = Tape::new();
        let (emb, tb, pb) = self.encode_train(&tape, theta, phi, &nodes, epoch, phase)?;
        let pairs: Vec<RankPair> = triples
            .iter()
            .map(|&(q, p, n)| RankPair {
                query: row_of[&q],
                pos: row_of[&p],
                neg: row_of[&n],
            })
            .collect();
        let loss = ranking_loss(emb, &pairs, self.cfg.margin)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("training loss became {value}"),
            });
        }
        if !want_grads {
            return Ok((value, GradMap::new()));
        }
        let grads = tape.backward(loss)?;
        let g = match phase {
            Phase::Theta => tb.collect(&grads),
            Phase::Phi => pb
                .ok_or_else(|| Error::Contract("adversary phase without φ".into()))?
                .collect(&grads),
        };
        Ok((value, g))
    }

    /// One descent epoch on θ; returns the mean batch loss.
    pub fn theta_epoch(
        &self,
        theta: &mut ParamStore,
        phi: Option<&ParamStore>,
        opt: &mut Optimizer,
        epoch: usize,
    ) -> Result<f64> {
        let batches = self.sample_batches(epoch, Phase::Theta);
        let mut total = 0.0;
        for b in &batches {
            let (loss, g) = self.batch_objective(theta, phi, b, epoch, Phase::Theta, true)?;
            opt.step(theta, &g)?;
            total += loss;
        }
        Ok(total / batches.len() as f64)
    }

    /// One ascent epoch on φ (descent on the negated loss).
    pub fn phi_epoch(
        &self,
        theta: &ParamStore,
        phi: &mut ParamStore,
        opt: &mut Optimizer,
        epoch: usize,
    ) -> Result<f64> {
        let batches = self.sample_batches(epoch, Phase::Phi);
        let mut total = 0.0;
        for b in &batches {
            let (loss, g) = self.batch_objective(theta, Some(phi), b, epoch, Phase::Phi, true)?;
            let neg: GradMap = g.into_iter().map(|(k, v)| (k, -v)).collect();
            opt.step(phi, &neg)?;
            total += loss;
        }
        Ok(total / batches.len() as f64)
    }

    /// Evaluation-time embeddings of every node: canonical order, or the
    /// m-sample average under a fixed evaluation stream for MultiPerm.
    pub fn embed_all(&self, theta: &ParamStore) -> Result<Matrix> {
        embed_nodes(
            self.graph,
            theta,
            self.cfg.reduction,
            self.cfg.mode,
            self.cfg.seed,
            None,
        )
    }

    /// Mean per-query AUC and AP on the validation fold.
    pub fn validate(&self, emb: &Matrix) -> (f64, f64) {
        let lists: Vec<_> = self
            .split
            .queries
            .iter()
            .map(|s| rank_fold(s, Fold::Val, |q, v| similarity(emb.row(q), emb.row(v))))
            .collect();
        auc_ap(&lists)
    }

    /// Train with the configured mode. `theta0`/`phi0` default to seeded
    /// initializations.
    pub fn run(
        &self,
        theta0: Option<ParamStore>,
        phi0: Option<ParamStore>,
    ) -> Result<TrainOutcome> {
        let (t_init, p_init) = self.init_params()?;
        let mut theta = theta0.unwrap_or(t_init);
        let mut phi = match self.cfg.mode {
            Mode::PermGnn => Some(phi0.unwrap_or(p_init)),
            _ => None,
        };
        let mut opt_t = Optimizer::new(self.cfg.optimizer)?;
        let mut opt_p = Optimizer::new(self.cfg.adversary_opt())?;
        let start = Instant::now();
        let mut trace = TrainTrace::default();
        let mut stopper = EarlyStopper::new(self.cfg.patience, self.cfg.rel_tol);
        let mut stopped_early = false;
        for epoch in 0..self.cfg.epochs_max {
            let mut loss = 0.0;
            for k in 0..self.cfg.theta_epochs {
                let e = epoch * self.cfg.theta_epochs + k;
                loss = self.theta_epoch(&mut theta, phi.as_ref(), &mut opt_t, e)?;
            }
            if let Some(phi) = phi.as_mut() {
                for k in 0..self.cfg.phi_epochs {
                    let e = epoch * self.cfg.phi_epochs.max(1) + k;
                    self.phi_epoch(&theta, phi, &mut opt_p, e)?;
                }
            }
            if !theta.all_finite() || phi.as_ref().is_some_and(|p| !p.all_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    detail: "parameters became non-finite".into(),
                });
            }
            let emb = self.embed_all(&theta)?;
            let (val_auc, val_ap) = self.validate(&emb);
            trace.records.push(EpochRecord {
                epoch,
                loss,
                val_auc,
                val_ap,
                seconds: start.elapsed().as_secs_f64(),
            });
            log::debug!("epoch {epoch}: loss {loss:.6} val_auc {val_auc:.4} val_ap {val_ap:.4}");
            let snapshot = Snapshot {
                theta: theta.clone(),
                phi: phi.clone(),
            };
            if stopper.observe(epoch, val_auc, val_ap, snapshot) {
                stopped_early = true;
                break;
            }
        }
        let (best_epoch, snap) = if stopped_early {
            stopper.best_in_window()
        } else {
            stopper.best_overall()
        }
        .ok_or_else(|| Error::Contract("training ran zero epochs".into()))?;
        Ok(TrainOutcome {
            theta: snap.theta,
            phi: snap.phi,
            trace,
            best_epoch,
            stopped_early,
        })
    }

    /// Exhaustive training loss with every neighborhood ordered by the
    /// global relabeling `ranks` (node → rank); `None` is π₀.
    pub fn probe_loss(&self, theta: &ParamStore, ranks: Option<&[usize]>) -> Result<f64> {
        let emb = embed_nodes(
            self.graph,
            theta,
            self.cfg.reduction,
            Mode::OnePerm,
            0,
            ranks,
        )?;
        let triples = self.exhaustive_triples();
        let total: f64 = triples
            .iter()
            .map(|&(q, p, n)| {
                crate::model::hinge(
                    similarity(emb.row(q), emb.row(p)),
                    similarity(emb.row(q), emb.row(n)),
                    self.cfg.margin,
                )
            })
            .sum();
        Ok(total / triples.len() as f64)
    }
}

/// Neighborhood of `u` ordered by `ranks` (ascending rank), or by id.
pub fn ordered_neighborhood(g: &Graph, u: NodeId, ranks: Option<&[usize]>) -> Result<Vec<NodeId>> {
    let mut m = g.neighbors(u)?.members;
    if let Some(r) = ranks {
        m.sort_by_key(|&v| r[v]);
    }
    Ok(m)
}

/// Embeddings for every node of `g`. For MultiPerm the m random orders come
/// from a fixed evaluation stream; otherwise neighborhoods follow `ranks`.
pub fn embed_nodes(
    g: &Graph,
    theta: &ParamStore,
    reduction: Reduction,
    mode: Mode,
    seed: u64,
    ranks: Option<&[usize]>,
) -> Result<Matrix> {
    let n = g.num_nodes();
    let tape = Tape::new();
    let tb = theta.bind(&tape, false);
    let feats = Arc::clone(g.features());
    let emb = match mode {
        Mode::MultiPerm(m) => {
            let mut inputs = Vec::with_capacity(n * m);
            for j in 0..m {
                for u in 0..n {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                        seed, PHASE_EVAL, u as u64, j as u64,
                    ]));
                    let mut order = g.neighbors(u)?.members;
                    order.shuffle(&mut rng);
                    inputs.push(SeqInput::plain(order));
                }
            }
            let enc = encode_batch(&tb, &feats, &inputs, reduction, false)?
                .embeddings
                .to_matrix();
            let mut acc = Array2::zeros((n, enc.ncols()));
            for j in 0..m {
                acc += &enc.slice(ndarray::s![j * n..(j + 1) * n, ..]);
            }
            acc / m as f64
        }
        _ => {
            let inputs: Vec<SeqInput> = (0..n)
                .map(|u| ordered_neighborhood(g, u, ranks).map(SeqInput::plain))
                .collect::<Result<_>>()?;
            encode_batch(&tb, &feats, &inputs, reduction, false)?
                .embeddings
                .to_matrix()
        }
    };
    if !emb.iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence {
            epoch: 0,
            detail: "non-finite embedding".into(),
        });
    }
    Ok(emb)
}

/// Parameters remembered by early stopping.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub theta: ParamStore,
    pub phi: Option<ParamStore>,
}

/// Stops once validation AUC and AP have both varied by less than
/// `rel_tol` (relative) over the last `patience` epochs.
#[derive(Debug)]
pub struct EarlyStopper {
    patience: usize,
    rel_tol: f64,
    window: VecDeque<(usize, f64, f64)>,
    /// Decreasing-AP candidates for the best snapshot within the window.
    best: VecDeque<(usize, f64, Snapshot)>,
    overall: Option<(usize, f64, Snapshot)>,
}

impl EarlyStopper {
    pub fn new(patience: usize, rel_tol: f64) -> Self {
        Self {
            patience,
            rel_tol,
            window: VecDeque::new(),
            best: VecDeque::new(),
            overall: None,
        }
    }

    fn stagnant(values: impl Iterator<Item = f64> + Clone, tol: f64) -> bool {
        let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
        let min = values.fold(f64::INFINITY, f64::min);
        let scale = max.abs().max(min.abs());
        if scale == 0.0 {
            return true;
        }
        (max - min) / scale < tol
    }

    /// Record an epoch; true when training should stop.
    pub fn observe(&mut self, epoch: usize, auc: f64, ap: f64, snap: Snapshot) -> bool {
        if self.overall.as_ref().map_or(true, |o| ap > o.1) {
            self.overall = Some((epoch, ap, snap.clone()));
        }
        self.window.push_back((epoch, auc, ap));
        if self.window.len() > self.patience {
            self.window.pop_front();
        }
        // keep the earliest epoch among ties: only strictly better entries evict
        while self.best.back().is_some_and(|b| b.1 < ap) {
            self.best.pop_back();
        }
        self.best.push_back((epoch, ap, snap));
        let first = self.window.front().map_or(epoch, |w| w.0);
        while self.best.front().is_some_and(|b| b.0 < first) {
            self.best.pop_front();
        }
        self.window.len() == self.patience
            && Self::stagnant(self.window.iter().map(|w| w.1), self.rel_tol)
            && Self::stagnant(self.window.iter().map(|w| w.2), self.rel_tol)
    }

    pub fn best_in_window(&self) -> Option<(usize, Snapshot)> {
        self.best.front().map(|b| (b.0, b.2.clone()))
    }

    pub fn best_overall(&self) -> Option<(usize, Snapshot)> {
        self.overall.as_ref().map(|b| (b.0, b.2.clone()))
    }
}
