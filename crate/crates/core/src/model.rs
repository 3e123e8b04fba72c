//! The LSTM neighborhood encoder, cosine scoring and the hinge ranking loss.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;

use crate::autodiff::{stack_rows, Bound, CsrMatrix, Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::NodeId;

pub const W_X: &str = "enc.w_x";
pub const W_H: &str = "enc.w_h";
pub const B_GATE: &str = "enc.b";
pub const W_OUT: &str = "enc.w_o";
pub const B_OUT: &str = "enc.b_o";

/// How the LSTM output sequence is reduced before the output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Final,
    Mean,
}

impl FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Reduction::Final),
            "mean" => Ok(Reduction::Mean),
            _ => Err(Error::Config(format!("unknown reduction `{s}`"))),
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Final => "final",
            Reduction::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub reduction: Reduction,
}

impl EncoderConfig {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            hidden: 32,
            embed_dim: 16,
            reduction: Reduction::Final,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// θ: gate weights are laid out as `[input | forget | cell | output]`
/// column blocks of width `hidden`.
pub fn init_encoder(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let h = cfg.hidden;
    let bound = 1.0 / (h as f64).sqrt();
    let mut p = ParamStore::new();
    p.insert_uniform(W_X, (cfg.feature_dim, 4 * h), bound, rng);
    p.insert_uniform(W_H, (h, 4 * h), bound, rng);
    p.insert_uniform(B_GATE, (1, 4 * h), bound, rng);
    p.get_mut(B_GATE)?.slice_mut(s![.., h..2 * h]).fill(1.0);
    p.insert_uniform(W_OUT, (h, cfg.embed_dim), bound, rng);
    p.insert_uniform(B_OUT, (1, cfg.embed_dim), bound, rng);
    Ok(p)
}

/// Every encoder tensor set to zero.
pub fn zero_encoder(cfg: &EncoderConfig) -> ParamStore {
    let h = cfg.hidden;
    let mut p = ParamStore::new();
    p.insert(W_X, Array2::zeros((cfg.feature_dim, 4 * h)));
    p.insert(W_H, Array2::zeros((h, 4 * h)));
    p.insert(B_GATE, Array2::zeros((1, 4 * h)));
    p.insert(W_OUT, Array2::zeros((h, cfg.embed_dim)));
    p.insert(B_OUT, Array2::zeros((1, cfg.embed_dim)));
    p
}

/// One sequence to encode: feature rows `order` (indices into the feature
/// matrix), optionally mixed by a soft permutation `P` of matching size.
#[derive(Clone)]
pub struct SeqInput<'t> {
    pub order: Vec<NodeId>,
    pub perm: Option<Var<'t>>,
}

impl<'t> SeqInput<'t> {
    pub fn plain(order: Vec<NodeId>) -> Self {
        Self { order, perm: None }
    }
}

pub struct Encoded<'t> {
    /// `B×D`, one row per input, in input order.
    pub embeddings: Var<'t>,
    /// Per input, its `δ×H` LSTM output sequence (only when requested).
    pub states: Option<Vec<Matrix>>,
}

/// Run the LSTM over a batch of sequences on `tape`. Sequences are processed
/// in lockstep: step `k` advances every sequence longer than `k`.
pub fn encode_batch<'t>(
    theta: &Bound<'t>,
    features: &Arc<CsrMatrix>,
    inputs: &[SeqInput<'t>],
    reduction: Reduction,
    keep_states: bool,
) -> Result<Encoded<'t>> {
    if inputs.is_empty() {
        return Err(Error::Contract("empty encoding batch".into()));
    }
    let w_x = theta.get(W_X)?;
    let w_h = theta.get(W_H)?;
    let b = theta.get(B_GATE)?;
    let h = w_h.shape()[0];

    // projected input rows X·W_x for every sequence, in one sparse product
    let mut all_rows = Vec::new();
    let mut offsets = Vec::with_capacity(inputs.len());
    for inp in inputs {
        if inp.order.is_empty() {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        offsets.push(all_rows.len());
        all_rows.extend_from_slice(&inp.order);
    }
    let projected = w_x.project_rows(features, all_rows)?;
    let mut seqs: Vec<(Var<'t>, usize)> = Vec::with_capacity(inputs.len());
    for (inp, &off) in inputs.iter().zip(&offsets) {
        let len = inp.order.len();
        match inp.perm {
            Some(p) => {
                let block = projected.slice_rows(off, off + len)?;
                seqs.push((p.matmul(block)?, 0));
            }
            None => seqs.push((projected, off)),
        }
    }

    // longest first, ties by input position, so active rows form a prefix
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.sort_by(|&a, &b| {
        inputs[b]
            .order
            .len()
            .cmp(&inputs[a].order.len())
            .then(a.cmp(&b))
    });
    let max_len = inputs[order[0]].order.len();

    let mut h_prev: Option<Var<'t>> = None;
    let mut c_prev: Option<Var<'t>> = None;
    let mut sum_prev: Option<Var<'t>> = None;
    let mut steps: Vec<Var<'t>> = Vec::with_capacity(max_len);
    // (step var, row) of the reduced state for each sorted position
    let mut finals: Vec<Option<(Var<'t>, usize)>> = vec![None; inputs.len()];
    for k in 0..max_len {
        let active = order
            .iter()
            .take_while(|&&i| inputs[i].order.len() > k)
            .count();
        let rows: Vec<(Var<'t>, usize)> = order[..active]
            .iter()
            .map(|&i| (seqs[i].0, seqs[i].1 + k))
            .collect();
        let mut z = stack_rows(&rows)?;
        let cp = match (h_prev, c_prev) {
            (Some(hp), Some(cp)) => {
                z = z.add(prefix(hp, active)?.matmul(w_h)?)?;
                Some(prefix(cp, active)?)
            }
            _ => None,
        };
        z = z.add_row(b)?;
        let gi = z.slice_cols(0, h)?.sigmoid();
        let gf = z.slice_cols(h, 2 * h)?.sigmoid();
        let gg = z.slice_cols(2 * h, 3 * h)?.tanh();
        let go = z.slice_cols(3 * h, 4 * h)?.sigmoid();
        let mut c = gi.mul(gg)?;
        if let Some(cp) = cp {
            c = c.add(gf.mul(cp)?)?;
        }
        let hk = go.mul(c.tanh())?;
        let reduced = match reduction {
            Reduction::Final => hk,
            Reduction::Mean => match sum_prev {
                Some(sp) => hk.add(prefix(sp, active)?)?,
                None => hk,
            },
        };
        for (pos, &i) in order[..active].iter().enumerate() {
            if inputs[i].order.len() == k + 1 {
                finals[i] = Some((reduced, pos));
            }
        }
        steps.push(hk);
        h_prev = Some(hk);
        c_prev = Some(c);
        sum_prev = Some(reduced);
    }

    let picked: Vec<(Var<'t>, usize)> = finals
        .into_iter()
        .map(|f| f.expect("every sequence ends"))
        .collect();
    let mut y = stack_rows(&picked)?;
    if reduction == Reduction::Mean {
        y = y.scale_rows(inputs.iter().map(|i| 1.0 / i.order.len() as f64).collect())?;
    }
    let x = y
        .matmul(theta.get(W_OUT)?)?
        .add_row(theta.get(B_OUT)?)?
        .tanh();

    let states = keep_states.then(|| {
        let mut pos_of = vec![0; inputs.len()];
        for (pos, &i) in order.iter().enumerate() {
            pos_of[i] = pos;
        }
        inputs
            .iter()
            .enumerate()
            .map(|(i, inp)| {
                let mut m = Array2::zeros((inp.order.len(), h));
                for (k, step) in steps.iter().take(inp.order.len()).enumerate() {
                    m.row_mut(k).assign(&step.value().row(pos_of[i]));
                }
                m
            })
            .collect()
    });
    Ok(Encoded {
        embeddings: x,
        states,
    })
}

fn prefix(v: Var<'_>, rows: usize) -> Result<Var<'_>> {
    if v.shape()[0] == rows {
        Ok(v)
    } else {
        v.slice_rows(0, rows)
    }
}

/// Encode one dense `δ×F` feature matrix given in its presentation order.
/// Returns the LSTM output sequence and the embedding.
pub fn encode(
    theta: &ParamStore,
    rows: &Matrix,
    reduction: Reduction,
) -> Result<(Matrix, Array1<f64>)> {
    if rows.nrows() == 0 {
        return Err(Error::Contract("cannot encode an empty sequence".into()));
    }
    let feats = Arc::new(CsrMatrix::from_dense(rows));
    let tape = Tape::new();
    let bound = theta.bind(&tape, false);
    let enc = encode_batch(
        &bound,
        &feats,
        &[SeqInput::plain((0..rows.nrows()).collect())],
        reduction,
        true,
    )?;
    let x = enc.embeddings.value().row(0).to_owned();
    Ok((enc.states.expect("requested").swap_remove(0), x))
}

/// Cosine similarity; 0 (with a warning) when either vector is zero.
pub fn similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity with a zero vector, defined as 0");
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Cosine similarity of rows `pairs[i] = (a, b)` of `emb`, as a `P×1` var.
pub fn pair_similarity<'t>(emb: Var<'t>, pairs: &[(usize, usize)]) -> Result<Var<'t>> {
    let u = emb.gather_rows(pairs.iter().map(|p| p.0).collect())?;
    let v = emb.gather_rows(pairs.iter().map(|p| p.1).collect())?;
    let dots = u.mul(v)?.row_sum();
    let nu = u.mul(u)?.row_sum().sqrt();
    let nv = v.mul(v)?.row_sum().sqrt();
    // the tiny offset keeps 0/0 at 0 and is absorbed by any normal product
    dots.div(nu.mul(nv)?.add_scalar(f64::MIN_POSITIVE))
}

/// `[Δ + s_neg − s_pos]₊`.
pub fn hinge(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (margin + s_neg - s_pos).max(0.0)
}

/// One ranking pair: a positive `(q, pos)` against a negative `(q, neg)`,
/// given as row indices into the embedding matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankPair {
    pub query: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Mean hinge loss over `pairs`.
pub fn ranking_loss<'t>(emb: Var<'t>, pairs: &[RankPair], margin: f64) -> Result<Var<'t>> {
    if pairs.is_empty() {
        return Err(Error::Contract(
            "ranking loss needs at least one pair".into(),
        ));
    }
    if !(margin > 0.0) {
        return Err(Error::Config(format!(
            "margin must be positive, got {margin}"
        )));
    }
    let pos: Vec<(usize, usize)> = pairs.iter().map(|p| (p.query, p.pos)).collect();
    let neg: Vec<(usize, usize)> = pairs.iter().map(|p| (p.query, p.neg)).collect();
    let sp = pair_similarity(emb, &pos)?;
    let sn = pair_similarity(emb, &neg)?;
    Ok(sn.sub(sp)?.add_scalar(margin).relu().mean())
}

/// Embeddings as a plain matrix, one row per node.
pub fn write_embeddings(
    w: &mut impl std::io::Write,
    emb: &Matrix,
    header: &[String],
) -> Result<()> {
    for line in header {
        writeln!(w, "# {line}")?;
    }
    for (u, row) in emb.rows().into_iter().enumerate() {
        write!(w, "{u}")?;
        for v in row {
            write!(w, " {v:e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_embeddings(r: impl std::io::BufRead, source_name: &str) -> Result<Matrix> {
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
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
        let mut toks = line.split_whitespace();
        let id: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| err("bad node id".into()))?;
        let vals: Vec<f64> = toks
            .map(|t| t.parse().map_err(|_| err(format!("bad value `{t}`"))))
            .collect::<Result<_>>()?;
        rows.push((id, vals));
    }
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.1.len());
    let mut m = Array2::zeros((n, d));
    for (k, (id, vals)) in rows.into_iter().enumerate() {
        if id != k {
            return Err(Error::Contract(format!(
                "embedding rows out of order at node {id}"
            )));
        }
        if vals.len() != d {
            return Err(Error::Dimension(format!(
                "node {id} has {} values, expected {d}",
                vals.len()
            )));
        }
        m.row_mut(k).assign(&Array1::from(vals));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_theta(f: usize, seed: u64) -> (EncoderConfig, ParamStore) {
        let cfg = EncoderConfig::new(f);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = init_encoder(&cfg, &mut rng).unwrap();
        (cfg, p)
    }

    #[test]
    fn zero_parameters_give_zero_states_and_embedding() {
        let cfg = EncoderConfig::new(3);
        let theta = zero_encoder(&cfg);
        let rows = array![[1.0, 2.0, 3.0], [0.5, -1.0, 0.0]];
        let (ys, x) = encode(&theta, &rows, Reduction::Final).unwrap();
        assert!(ys.iter().all(|&v| v == 0.0));
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let (cfg, p) = random_theta(4, 1);
        let b = p.get(B_GATE).unwrap();
        assert!(b
            .slice(s![.., cfg.hidden..2 * cfg.hidden])
            .iter()
            .all(|&v| v == 1.0));
        let bound = 1.0 / (cfg.hidden as f64).sqrt();
        assert!(p.get(W_X).unwrap().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn single_row_depends_only_on_that_row() {
        let (_, p) = random_theta(3, 2);
        let (ys, x1) = encode(&p, &array![[0.3, -0.2, 1.0]], Reduction::Final).unwrap();
        assert_eq!(ys.nrows(), 1);
        let (_, x2) = encode(&p, &array![[0.3, -0.2, 1.0]], Reduction::Final).unwrap();
        assert_eq!(x1, x2);
    }

    #[test]
    fn reordering_rows_changes_embedding() {
        let (_, p) = random_theta(4, 3);
        let rows = array![
            [1.0, 0.0, 0.0, 0.5],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, -0.5]
        ];
        let swapped = array![
            [0.0, 0.0, 1.0, -0.5],
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.5]
        ];
        let (_, a) = encode(&p, &rows, Reduction::Final).unwrap();
        let (_, b) = encode(&p, &swapped, Reduction::Final).unwrap();
        let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff > 0.0);
    }

    #[test]
    fn batched_encoding_matches_one_at_a_time() {
        let (_, p) = random_theta(5, 4);
        let feats = Arc::new(CsrMatrix::from_dense(&Array2::from_shape_fn(
            (5, 5),
            |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0,
        )));
        let orders = [vec![0, 1, 2], vec![3], vec![4, 2, 0, 1], vec![1, 3]];
        for reduction in [Reduction::Final, Reduction::Mean] {
            let tape = Tape::new();
            let b = p.bind(&tape, false);
            let inputs: Vec<SeqInput> = orders.iter().cloned().map(SeqInput::plain).collect();
            let batch = encode_batch(&b, &feats, &inputs, reduction, true).unwrap();
            for (i, o) in orders.iter().enumerate() {
                let dense = feats.dense_rows(o);
                let (ys, x) = encode(&p, &dense, reduction).unwrap();
                let got = batch.embeddings.value().row(i).to_owned();
                assert!(
                    (&got - &x).iter().all(|d| d.abs() < 1e-14),
                    "{reduction}: {got} vs {x}"
                );
                assert_eq!(batch.states.as_ref().unwrap()[i].dim(), ys.dim());
            }
        }
    }

    #[test]
    fn identity_soft_permutation_is_a_noop() {
        let (_, p) = random_theta(3, 5);
        let feats = Arc::new(CsrMatrix::from_dense(&array![
            [1.0, 0.0, 2.0],
            [0.0, -1.0, 0.0],
            [3.0, 1.0, 0.0]
        ]));
        let tape = Tape::new();
        let b = p.bind(&tape, false);
        let eye = tape.constant(Array2::eye(3));
        let a = encode_batch(
            &b,
            &feats,
            &[SeqInput::plain(vec![0, 1, 2])],
            Reduction::Final,
            false,
        )
        .unwrap();
        let c = encode_batch(
            &b,
            &feats,
            &[SeqInput {
                order: vec![0, 1, 2],
                perm: Some(eye),
            }],
            Reduction::Final,
            false,
        )
        .unwrap();
        assert_eq!(a.embeddings.to_matrix(), c.embeddings.to_matrix());
    }

    #[test]
    fn similarity_examples() {
        let x = array![0.3, -1.2, 2.0];
        assert!((similarity(x.view(), x.view()) - 1.0).abs() < 1e-15);
        assert_eq!(
            similarity(array![1.0, 0.0].view(), array![0.0, 1.0].view()),
            0.0
        );
        let nx = -&x;
        assert!((similarity(x.view(), nx.view()) + 1.0).abs() < 1e-15);
        assert_eq!(similarity(array![0.0, 0.0].view(), x.slice(s![..2])), 0.0);
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge(0.9, 0.2, 0.1), 0.0);
        assert!((hinge(0.3, 0.3, 0.1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn tape_cosine_matches_plain_cosine() {
        let m = array![[0.3, -1.0], [2.0, 0.1], [-0.5, -0.5]];
        let tape = Tape::new();
        let e = tape.constant(m.clone());
        let s = pair_similarity(e, &[(0, 1), (1, 2), (2, 2)])
            .unwrap()
            .to_matrix();
        for (k, (a, b)) in [(0, 1), (1, 2), (2, 2)].into_iter().enumerate() {
            assert!((s[[k, 0]] - similarity(m.row(a), m.row(b))).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_file_round_trip() {
        let m = array![[0.1, -2.5e-7], [3.0, 0.0]];
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &m, &["seed 1".into()]).unwrap();
        assert_eq!(read_embeddings(buf.as_slice(), "mem").unwrap(), m);
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric_and_scale_invariant(
            x in proptest::collection::vec(-5.0f64..5.0, 4),
            y in proptest::collection::vec(-5.0f64..5.0, 4),
            alpha in 0.01f64..100.0,
        ) {
            let (x, y) = (Array1::from(x), Array1::from(y));
            prop_assume!(x.dot(&x) > 1e-6 && y.dot(&y) > 1e-6);
            let s = similarity(x.view(), y.view());
            prop_assert!((s - similarity(y.view(), x.view())).abs() <= 1e-12);
            let ax = &x * alpha;
            prop_assert!((s - similarity(ax.view(), y.view())).abs() <= 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        }

        #[test]
        fn ranking_loss_nonnegative_and_zero_iff_margins_hold(
            vals in proptest::collection::vec(-1.0f64..1.0, 12),
            margin in 0.01f64..0.5,
        ) {
            let m = Array2::from_shape_vec((4, 3), vals).unwrap();
            let tape = Tape::new();
            let e = tape.constant(m.clone());
            let pairs = [
                RankPair { query: 0, pos: 1, neg: 2 },
                RankPair { query: 0, pos: 1, neg: 3 },
            ];
            let loss = ranking_loss(e, &pairs, margin).unwrap().item();
            prop_assert!(loss >= 0.0);
            let all_hold = pairs.iter().all(|p| {
                similarity(m.row(0), m.row(p.pos)) - similarity(m.row(0), m.row(p.neg)) >= margin
            });
            prop_assert_eq!(loss == 0.0, all_hold);
        }
    }
}
