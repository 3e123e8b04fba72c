//! The permutation adversary: a shared seed network T_φ, Gumbel noise and
//! Sinkhorn normalization into soft permutations.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, CsrMatrix, Matrix, ParamStore, Tape, Var, EXP_CLAMP};
use crate::error::{Error, Result};
use crate::graph::NodeId;

pub const W1: &str = "adv.w1";
pub const B1: &str = "adv.b1";
pub const W2: &str = "adv.w2";
pub const B2: &str = "adv.b2";

/// Width of the seed network's hidden layer.
pub const LATENT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub iterations: usize,
    pub temperature: f64,
    pub noise_factor: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            temperature: 0.5,
            noise_factor: 1.0,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config(
                "sinkhorn iterations must be at least 1".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.noise_factor >= 0.0) {
            return Err(Error::Config(format!(
                "noise factor must be nonnegative, got {}",
                self.noise_factor
            )));
        }
        Ok(())
    }
}

/// φ for feature width `feature_dim` and capacity `delta_max`, uniform in
/// ±1/√fan_in.
pub fn init_adversary(feature_dim: usize, delta_max: usize, rng: &mut impl Rng) -> ParamStore {
    let mut p = ParamStore::new();
    let b1 = 1.0 / (feature_dim.max(1) as f64).sqrt();
    let b2 = 1.0 / (LATENT as f64).sqrt();
    p.insert_uniform(W1, (feature_dim, LATENT), b1, rng);
    p.insert_uniform(B1, (1, LATENT), b1, rng);
    p.insert_uniform(W2, (LATENT, delta_max), b2, rng);
    p.insert_uniform(B2, (1, delta_max), b2, rng);
    p
}

pub fn zero_adversary(feature_dim: usize, delta_max: usize) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert(W1, Array2::zeros((feature_dim, LATENT)));
    p.insert(B1, Array2::zeros((1, LATENT)));
    p.insert(W2, Array2::zeros((LATENT, delta_max)));
    p.insert(B2, Array2::zeros((1, delta_max)));
    p
}

/// `A^w = T_φ(F_w / τ)` for the neighborhood whose feature rows are
/// `members`, as a `δ×δ` var. T_φ acts row-wise, so zero-padding the input
/// to `δ_max` rows and cropping the output is the same as keeping the first
/// `δ` output columns.
pub fn seed_matrix<'t>(
    phi: &Bound<'t>,
    features: &Arc<CsrMatrix>,
    members: &[NodeId],
    temperature: f64,
) -> Result<Var<'t>> {
    let w2 = phi.get(W2)?;
    let delta_max = w2.shape()[1];
    let delta = members.len();
    if delta > delta_max {
        return Err(Error::Capacity(format!(
            "neighborhood of size {delta} exceeds adversary capacity {delta_max}"
        )));
    }
    if delta == 0 {
        return Err(Error::Contract("empty neighborhood".into()));
    }
    let hidden = phi
        .get(W1)?
        .project_rows(features, members.to_vec())?
        .scale(1.0 / temperature)
        .add_row(phi.get(B1)?)?
        .relu();
    let (w2, b2) = if delta == delta_max {
        (w2, phi.get(B2)?)
    } else {
        (w2.slice_cols(0, delta)?, phi.get(B2)?.slice_cols(0, delta)?)
    };
    hidden.matmul(w2)?.add_row(b2)
}

/// One standard Gumbel draw.
pub fn gumbel(rng: &mut impl Rng) -> f64 {
    // open interval keeps both logs finite
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// `GSⁿ(A + noise·G)`: exponentiate (clamped), then `n` rounds of row then
/// column normalization, then a final row normalization so rows sum to one.
pub fn gumbel_sinkhorn<'t>(
    a: Var<'t>,
    cfg: &SinkhornConfig,
    rng: &mut impl Rng,
) -> Result<Var<'t>> {
    let [r, c] = a.shape();
    if r != c {
        return Err(Error::Shape {
            op: "gumbel_sinkhorn",
            left: [r, c],
            right: [c, r],
        });
    }
    let x = if cfg.noise_factor > 0.0 {
        let g = Array2::from_shape_simple_fn((r, c), || cfg.noise_factor * gumbel(rng));
        a.add(a.tape().constant(g))?
    } else {
        a
    };
    let mut p = x.exp_clamped(EXP_CLAMP);
    for _ in 0..cfg.iterations {
        p = p.row_normalize().col_normalize();
    }
    Ok(p.row_normalize())
}

/// Noise-free GS on a plain matrix.
pub fn sinkhorn(a: &Matrix, iterations: usize) -> Matrix {
    let tape = Tape::new();
    let cfg = SinkhornConfig {
        iterations,
        noise_factor: 0.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    gumbel_sinkhorn(tape.constant(a.clone()), &cfg, &mut rng)
        .expect("square input")
        .to_matrix()
}

/// Hard permutation closest to `P`: the assignment maximizing
/// `Σᵢ log P[i, π(i)]`, i.e. the permutation matrix Π maximizing `Tr[Πᵀ A]`
/// for `P = GSⁿ(A)` (log P differs from A by row and column offsets only).
/// Returns `perm` with `perm[i]` the column chosen for row `i`; ties resolve
/// towards lower indices.
pub fn harden(p: &Matrix) -> Vec<usize> {
    let n = p.nrows();
    assert_eq!(n, p.ncols(), "harden needs a square matrix");
    let floor = f64::MIN_POSITIVE.ln();
    let cost = p.mapv(|v| -(if v > 0.0 { v.ln().max(floor) } else { floor }));
    hungarian(&cost)
}

/// Minimum-cost assignment (shortest augmenting paths with potentials).
fn hungarian(cost: &Matrix) -> Vec<usize> {
    let n = cost.nrows();
    let inf = f64::INFINITY;
    // 1-based arrays, column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    perm
}

/// Permutation matrix with a one at `(i, perm[i])`.
pub fn permutation_matrix(perm: &[usize]) -> Matrix {
    let mut m = Array2::zeros((perm.len(), perm.len()));
    for (i, &j) in perm.iter().enumerate() {
        m[[i, j]] = 1.0;
    }
    m
}

/// `P · F_w`.
pub fn apply_soft_perm<'t>(p: Var<'t>, f: Var<'t>) -> Result<Var<'t>> {
    p.matmul(f)
}
