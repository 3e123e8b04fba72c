//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use permgnn::autodiff::{Matrix, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod composites;
pub mod oracles;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-scale..scale))
}

/// Entries bounded away from zero, for ops with a kink or pole there.
pub fn away_from_zero(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || {
        let m = rng.gen_range(lo..hi);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

pub fn positive_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(0.2..2.0))
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central differences of a scalar function of several matrices.
pub fn numeric_grads(f: &dyn Fn(&[Matrix]) -> f64, inputs: &[Matrix], h: f64) -> Vec<Matrix> {
    let mut work: Vec<Matrix> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Array2::zeros(inputs[k].dim());
        for idx in 0..inputs[k].len() {
            let (r, c) = (idx / inputs[k].ncols(), idx % inputs[k].ncols());
            let x0 = work[k][[r, c]];
            work[k][[r, c]] = x0 + h;
            let up = f(&work);
            work[k][[r, c]] = x0 - h;
            let down = f(&work);
            work[k][[r, c]] = x0;
            g[[r, c]] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Builds a scalar loss on a tape from leaf variables.
pub type LossFn = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

/// Largest relative error between the tape gradient and central
/// differences over all input entries.
pub fn max_grad_error(loss: &LossFn, inputs: &[Matrix], floor: f64) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = loss(&tape, &vars);
    let grads = tape.backward(out).expect("scalar loss");
    let eval = |xs: &[Matrix]| {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|m| t.constant(m.clone())).collect();
        loss(&t, &vs).item()
    };
    let numeric = numeric_grads(&eval, inputs, FD_STEP);
    let mut worst: f64 = 0.0;
    for (v, n) in vars.iter().zip(&numeric) {
        let a = grads.get_or_zeros(*v);
        for (x, y) in a.iter().zip(n.iter()) {
            worst = worst.max(rel_err(*x, *y, floor));
        }
    }
    worst
}

/// Reduce any output to a scalar through fixed random weights so every
/// output entry's gradient is exercised.
pub fn weighted_sum<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Var<'t> {
    let [r, c] = out.shape();
    let mut g = rng(seed ^ 0x5eed);
    let w = tape.constant(random_matrix(&mut g, r, c, 1.0));
    out.mul(w).unwrap().sum()
}

/// Every differentiable tape op, by name.
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "add_row",
    "scale",
    "neg",
    "add_scalar",
    "scale_rows",
    "matmul",
    "transpose",
    "sum",
    "mean",
    "row_sum",
    "col_sum",
    "abs",
    "exp",
    "exp_clamped",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "sqrt",
    "row_normalize",
    "col_normalize",
    "l2_norm",
    "dot",
    "slice_rows",
    "slice_cols",
    "gather_rows",
    "project_rows",
    "concat_rows",
    "concat_cols",
    "stack_rows",
];

/// Random-input gradient check of one op; returns the worst relative error.
pub fn op_error(name: &str, seed: u64) -> f64 {
    use permgnn::autodiff::{concat_cols, concat_rows, stack_rows, CsrMatrix, EXP_CLAMP};
    use std::sync::Arc;

    let mut g = rng(seed);
    let r = g.gen_range(1..5usize);
    let c = g.gen_range(1..5usize);
    let k = g.gen_range(1..4usize);
    let a = random_matrix(&mut g, r, c, 2.0);
    let b = random_matrix(&mut g, r, c, 2.0);
    let floor = 1e-6;
    macro_rules! check {
        ($inputs:expr, |$t:ident, $v:ident| $body:expr) => {{
            let f: &LossFn = &move |$t: &Tape, $v: &[Var]| {
                let out: Var = $body;
                weighted_sum($t, out, seed)
            };
            max_grad_error(f, &$inputs, floor)
        }};
    }
    match name {
        "add" => check!([a, b], |t, v| v[0].add(v[1]).unwrap()),
        "sub" => check!([a, b], |t, v| v[0].sub(v[1]).unwrap()),
        "mul" => check!([a, b], |t, v| v[0].mul(v[1]).unwrap()),
        "div" => {
            let d = away_from_zero(&mut g, r, c, 0.5, 2.0);
            check!([a, d], |t, v| v[0].div(v[1]).unwrap())
        }
        "add_row" => {
            let row = random_matrix(&mut g, 1, c, 1.0);
            check!([a, row], |t, v| v[0].add_row(v[1]).unwrap())
        }
        "scale" => check!([a], |t, v| v[0].scale(-1.7)),
        "neg" => check!([a], |t, v| v[0].neg()),
        "add_scalar" => check!([a], |t, v| v[0].add_scalar(0.3)),
        "scale_rows" => {
            let f: Vec<f64> = (0..r).map(|_| g.gen_range(-2.0..2.0)).collect();
            check!([a], |t, v| v[0].scale_rows(f.clone()).unwrap())
        }
        "matmul" => {
            let m = random_matrix(&mut g, c, k, 1.0);
            check!([a, m], |t, v| v[0].matmul(v[1]).unwrap())
        }
        "transpose" => check!([a], |t, v| v[0].transpose()),
        "sum" => check!([a], |t, v| v[0].sum()),
        "mean" => check!([a], |t, v| v[0].mean()),
        "row_sum" => check!([a], |t, v| v[0].row_sum()),
        "col_sum" => check!([a], |t, v| v[0].col_sum()),
        "abs" => {
            let x = away_from_zero(&mut g, r, c, 0.01, 2.0);
            check!([x], |t, v| v[0].abs())
        }
        "exp" => check!([a], |t, v| v[0].exp()),
        "exp_clamped" => {
            // entries on both sides of the clamp, never within a step of it
            let x = a.mapv(|x| if x > 0.0 { EXP_CLAMP + 1.0 + x } else { x });
            check!([x], |t, v| v[0]
                .exp_clamped(EXP_CLAMP)
                .scale((-EXP_CLAMP).exp()))
        }
        "log" => check!([positive_matrix(&mut g, r, c)], |t, v| v[0].log()),
        "tanh" => check!([a], |t, v| v[0].tanh()),
        "sigmoid" => check!([a], |t, v| v[0].sigmoid()),
        "relu" => {
            let x = away_from_zero(&mut g, r, c, 0.01, 2.0);
            check!([x], |t, v| v[0].relu())
        }
        "sqrt" => check!([positive_matrix(&mut g, r, c)], |t, v| v[0].sqrt()),
        "row_normalize" => check!([positive_matrix(&mut g, r, c)], |t, v| v[0].row_normalize()),
        "col_normalize" => check!([positive_matrix(&mut g, r, c)], |t, v| v[0].col_normalize()),
        "l2_norm" => check!([away_from_zero(&mut g, r, c, 0.2, 2.0)], |t, v| v[0]
            .l2_norm()),
        "dot" => {
            let x = random_matrix(&mut g, 1, c, 1.0);
            let y = random_matrix(&mut g, 1, c, 1.0);
            check!([x, y], |t, v| v[0].dot(v[1]).unwrap())
        }
        "slice_rows" => {
            let s = g.gen_range(0..r);
            let e = g.gen_range(s + 1..=r);
            check!([a], |t, v| v[0].slice_rows(s, e).unwrap())
        }
        "slice_cols" => {
            let s = g.gen_range(0..c);
            let e = g.gen_range(s + 1..=c);
            check!([a], |t, v| v[0].slice_cols(s, e).unwrap())
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..g.gen_range(1..6)).map(|_| g.gen_range(0..r)).collect();
            check!([a], |t, v| v[0].gather_rows(idx.clone()).unwrap())
        }
        "project_rows" => {
            let n = g.gen_range(2..6usize);
            let dense = Array2::from_shape_simple_fn((n, c), || {
                if g.gen::<f64>() < 0.5 {
                    g.gen_range(-1.0..1.0)
                } else {
                    0.0
                }
            });
            let feats = Arc::new(CsrMatrix::from_dense(&dense));
            let rows: Vec<usize> = (0..g.gen_range(1..5)).map(|_| g.gen_range(0..n)).collect();
            let w = random_matrix(&mut g, c, k, 1.0);
            check!([w], |t, v| v[0].project_rows(&feats, rows.clone()).unwrap())
        }
        "concat_rows" => {
            let m = random_matrix(&mut g, k, c, 1.0);
            check!([a, m], |t, v| concat_rows(&[v[0], v[1], v[0]]).unwrap())
        }
        "concat_cols" => {
            let m = random_matrix(&mut g, r, k, 1.0);
            check!([a, m], |t, v| concat_cols(&[v[1], v[0]]).unwrap())
        }
        "stack_rows" => {
            let m = random_matrix(&mut g, k, c, 1.0);
            let picks: Vec<(usize, usize)> = (0..g.gen_range(1..6))
                .map(|_| {
                    if g.gen::<bool>() {
                        (0, g.gen_range(0..r))
                    } else {
                        (1, g.gen_range(0..k))
                    }
                })
                .collect();
            check!([a, m], |t, v| {
                let src: Vec<(Var, usize)> = picks.iter().map(|&(s, i)| (v[s], i)).collect();
                stack_rows(&src).unwrap()
            })
        }
        other => panic!("unknown op {other}"),
    }
}

/// Builds a scalar loss from every parameter of a store bound on a tape.
pub type StoreLossFn = dyn for<'t> Fn(&'t Tape, &permgnn::autodiff::Bound<'t>) -> Var<'t>;

/// Largest relative error between tape gradients and central differences
/// over every scalar of `store`.
pub fn store_grad_error(
    loss: &StoreLossFn,
    store: &permgnn::autodiff::ParamStore,
    floor: f64,
) -> f64 {
    let tape = Tape::new();
    let bound = store.bind(&tape, true);
    let out = loss(&tape, &bound);
    let grads = bound.collect(&tape.backward(out).expect("scalar loss"));
    let eval = |s: &permgnn::autodiff::ParamStore| {
        let t = Tape::new();
        let b = s.bind(&t, false);
        loss(&t, &b).item()
    };
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let (rows, cols) = store.get(&name).unwrap().dim();
        for r in 0..rows {
            for c in 0..cols {
                let x0 = work.get(&name).unwrap()[[r, c]];
                work.get_mut(&name).unwrap()[[r, c]] = x0 + FD_STEP;
                let up = eval(&work);
                work.get_mut(&name).unwrap()[[r, c]] = x0 - FD_STEP;
                let down = eval(&work);
                work.get_mut(&name).unwrap()[[r, c]] = x0;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let analytic = grads.get(&name).map_or(0.0, |g| g[[r, c]]);
                worst = worst.max(rel_err(analytic, numeric, floor));
            }
        }
    }
    worst
}
