//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! Every value is two dimensional; vectors are `1×n` rows or `m×1` columns
//! and scalars are `1×1`. Broadcasting is limited to a row vector against a
//! matrix (`add_row`) so that shape errors stay explicit.
//!
//! A [`Tape`] records operations as they are evaluated. [`Var`] is a cheap
//! copyable handle into the tape. Calling [`Tape::backward`] on a scalar
//! walks the tape in reverse and returns [`Gradients`] for every node that
//! depends on a trainable leaf.

pub mod archive;
pub mod optim;
pub mod params;
pub mod sparse;

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub use optim::{Method, Optimizer, OptimizerConfig};
pub use params::{Bound, GradMap, ParamStore};
pub use sparse::CsrMatrix;

pub type Matrix = Array2<f64>;

/// Upper bound applied to `exp` inputs on the Sinkhorn path.
pub const EXP_CLAMP: f64 = 30.0;

enum Value {
    Owned(Matrix),
    Shared(Arc<Matrix>),
}

impl Value {
    fn get(&self) -> &Matrix {
        match self {
            Value::Owned(m) => m,
            Value::Shared(m) => m,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ScaleRows(usize, Vec<f64>),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    ColSum(usize),
    Abs(usize),
    Exp(usize, f64),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Sqrt(usize),
    RowNormalize(usize),
    ColNormalize(usize),
    L2Norm(usize),
    Dot(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    StackRows(Vec<(usize, usize)>),
    ProjectRows(usize, Arc<CsrMatrix>, Vec<usize>),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one backward pass. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

fn dim(m: &Matrix) -> [usize; 2] {
    let (r, c) = m.dim();
    [r, c]
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Value, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.push(Value::Owned(value), Op::Leaf, true)
    }

    pub fn param_shared(&self, value: Arc<Matrix>) -> Var<'_> {
        self.push(Value::Shared(value), Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(Value::Owned(value), Op::Leaf, false)
    }

    pub fn constant_shared(&self, value: Arc<Matrix>) -> Var<'_> {
        self.push(Value::Shared(value), Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), v))
    }

    fn unary(&self, a: usize, f: impl FnOnce(&Matrix) -> Matrix, op: Op) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(nodes[a].value.get())
        };
        let rg = self.rg(&[a]);
        self.push(Value::Owned(value), op, rg)
    }

    fn binary_same_shape(
        &self,
        name: &'static str,
        a: usize,
        b: usize,
        f: impl FnOnce(&Matrix, &Matrix) -> Matrix,
        op: Op,
    ) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (nodes[a].value.get(), nodes[b].value.get());
            if x.dim() != y.dim() {
                return Err(Error::Shape {
                    op: name,
                    left: dim(x),
                    right: dim(y),
                });
            }
            f(x, y)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Value::Owned(value), op, rg))
    }

    /// Reverse pass from a `1×1` loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = dim(nodes[loss.id].value.get());
        if shape != [1, 1] {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Array2::ones((1, 1)));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Matrix>], id: usize, delta: Matrix) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_with(
    nodes: &[Node],
    grads: &mut [Option<Matrix>],
    id: usize,
    f: impl FnOnce() -> Matrix,
) {
    if nodes[id].requires_grad {
        let delta = f();
        accumulate(nodes, grads, id, delta);
    }
}

/// Add into the parent's gradient buffer without a full-size temporary.
fn accumulate_in_place(
    nodes: &[Node],
    grads: &mut [Option<Matrix>],
    id: usize,
    f: impl FnOnce(&mut Matrix),
) {
    if nodes[id].requires_grad {
        let slot = grads[id].get_or_insert_with(|| Array2::zeros(nodes[id].value.get().dim()));
        f(slot);
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
    let val = |i: usize| nodes[i].value.get();
    let out = val(id);
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate_with(nodes, grads, *a, || g.clone());
            accumulate_with(nodes, grads, *b, || g.clone());
        }
        Op::Sub(a, b) => {
            accumulate_with(nodes, grads, *a, || g.clone());
            accumulate_with(nodes, grads, *b, || -g);
        }
        Op::Mul(a, b) => {
            accumulate_with(nodes, grads, *a, || g * val(*b));
            accumulate_with(nodes, grads, *b, || g * val(*a));
        }
        Op::Div(a, b) => {
            accumulate_with(nodes, grads, *a, || g / val(*b));
            accumulate_with(nodes, grads, *b, || {
                let mut d = g * out;
                d /= val(*b);
                -d
            });
        }
        Op::AddRow(a, r) => {
            accumulate_with(nodes, grads, *a, || g.clone());
            accumulate_with(nodes, grads, *r, || {
                g.sum_axis(Axis(0)).insert_axis(Axis(0))
            });
        }
        Op::Scale(a, c) => accumulate_with(nodes, grads, *a, || g * *c),
        Op::AddScalar(a) => accumulate_with(nodes, grads, *a, || g.clone()),
        Op::ScaleRows(a, factors) => accumulate_with(nodes, grads, *a, || {
            let mut d = g.clone();
            for (mut row, &f) in d.rows_mut().into_iter().zip(factors) {
                row *= f;
            }
            d
        }),
        Op::MatMul(a, b) => {
            accumulate_with(nodes, grads, *a, || g.dot(&val(*b).t()));
            accumulate_with(nodes, grads, *b, || val(*a).t().dot(g));
        }
        Op::Transpose(a) => accumulate_with(nodes, grads, *a, || g.t().to_owned()),
        Op::Sum(a) => accumulate_with(nodes, grads, *a, || {
            Array2::from_elem(val(*a).dim(), g[[0, 0]])
        }),
        Op::Mean(a) => accumulate_with(nodes, grads, *a, || {
            let x = val(*a);
            Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64)
        }),
        Op::RowSum(a) => accumulate_with(nodes, grads, *a, || {
            let x = val(*a);
            let mut d = Array2::zeros(x.dim());
            for (mut row, &gi) in d.rows_mut().into_iter().zip(g.column(0)) {
                row.fill(gi);
            }
            d
        }),
        Op::ColSum(a) => accumulate_with(nodes, grads, *a, || {
            let x = val(*a);
            let mut d = Array2::zeros(x.dim());
            for mut row in d.rows_mut() {
                row.assign(&g.row(0));
            }
            d
        }),
        Op::Abs(a) => accumulate_with(nodes, grads, *a, || {
            let mut d = g.clone();
            Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                *d *= if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            });
            d
        }),
        Op::Exp(a, clamp) => accumulate_with(nodes, grads, *a, || {
            let mut d = g * out;
            Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                if x > *clamp {
                    *d = 0.0;
                }
            });
            d
        }),
        Op::Log(a) => accumulate_with(nodes, grads, *a, || g / val(*a)),
        Op::Tanh(a) => accumulate_with(nodes, grads, *a, || {
            let mut d = g.clone();
            Zip::from(&mut d)
                .and(out)
                .for_each(|d, &y| *d *= 1.0 - y * y);
            d
        }),
        Op::Sigmoid(a) => accumulate_with(nodes, grads, *a, || {
            let mut d = g.clone();
            Zip::from(&mut d)
                .and(out)
                .for_each(|d, &y| *d *= y * (1.0 - y));
            d
        }),
        Op::Relu(a) => accumulate_with(nodes, grads, *a, || {
            let mut d = g.clone();
            Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                if x <= 0.0 {
                    *d = 0.0;
                }
            });
            d
        }),
        Op::Sqrt(a) => accumulate_with(nodes, grads, *a, || {
            let mut d = g.clone();
            Zip::from(&mut d)
                .and(out)
                .for_each(|d, &y| *d = if y > 0.0 { *d / (2.0 * y) } else { 0.0 });
            d
        }),
        Op::RowNormalize(a) => accumulate_with(nodes, grads, *a, || {
            // y = x / s, s = row sum: dx = (g - <g, y>_row) / s
            let x = val(*a);
            let sums = x.sum_axis(Axis(1));
            let inner = (g * out).sum_axis(Axis(1));
            let mut d = g.clone();
            for ((mut row, &s), &ip) in d.rows_mut().into_iter().zip(&sums).zip(&inner) {
                row.mapv_inplace(|v| (v - ip) / s);
            }
            d
        }),
        Op::ColNormalize(a) => accumulate_with(nodes, grads, *a, || {
            let x = val(*a);
            let sums = x.sum_axis(Axis(0));
            let inner = (g * out).sum_axis(Axis(0));
            let mut d = g.clone();
            for ((mut col, &s), &ip) in d.columns_mut().into_iter().zip(&sums).zip(&inner) {
                col.mapv_inplace(|v| (v - ip) / s);
            }
            d
        }),
        Op::L2Norm(a) => accumulate_with(nodes, grads, *a, || {
            let n = out[[0, 0]];
            if n > 0.0 {
                val(*a) * (g[[0, 0]] / n)
            } else {
                Array2::zeros(val(*a).dim())
            }
        }),
        Op::Dot(a, b) => {
            accumulate_with(nodes, grads, *a, || val(*b) * g[[0, 0]]);
            accumulate_with(nodes, grads, *b, || val(*a) * g[[0, 0]]);
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let n = val(p).nrows();
                accumulate_with(nodes, grads, p, || {
                    g.slice(s![start..start + n, ..]).to_owned()
                });
                start += n;
            }
        }
        Op::ConcatCols(parts) => {
            let mut start = 0;
            for &p in parts {
                let n = val(p).ncols();
                accumulate_with(nodes, grads, p, || {
                    g.slice(s![.., start..start + n]).to_owned()
                });
                start += n;
            }
        }
        Op::SliceRows(a, start) => accumulate_in_place(nodes, grads, *a, |d| {
            let mut dst = d.slice_mut(s![*start..*start + g.nrows(), ..]);
            dst += g;
        }),
        Op::SliceCols(a, start) => accumulate_in_place(nodes, grads, *a, |d| {
            let mut dst = d.slice_mut(s![.., *start..*start + g.ncols()]);
            dst += g;
        }),
        Op::GatherRows(a, index) => accumulate_in_place(nodes, grads, *a, |d| {
            for (r, &i) in index.iter().enumerate() {
                let mut dst = d.row_mut(i);
                dst += &g.row(r);
            }
        }),
        Op::StackRows(sources) => {
            // Group by source tensor so each parent receives one accumulation.
            let mut order: Vec<usize> = (0..sources.len()).collect();
            order.sort_by_key(|&r| sources[r].0);
            let mut i = 0;
            while i < order.len() {
                let src = sources[order[i]].0;
                let mut j = i;
                while j < order.len() && sources[order[j]].0 == src {
                    j += 1;
                }
                accumulate_in_place(nodes, grads, src, |d| {
                    for &r in &order[i..j] {
                        let mut dst = d.row_mut(sources[r].1);
                        dst += &g.row(r);
                    }
                });
                i = j;
            }
        }
        Op::ProjectRows(w, features, rows) => accumulate_in_place(nodes, grads, *w, |d| {
            for (r, &i) in rows.iter().enumerate() {
                let gr = g.row(r);
                for (c, v) in features.row(i) {
                    d.row_mut(c).scaled_add(v, &gr);
                }
            }
        }),
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of a leaf. `None` when the leaf is not trainable or not on
    /// the path to the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros for unreachable leaves.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Matrix {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(var.value().dim()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Matrix> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.get())
    }

    pub fn to_matrix(&self) -> Matrix {
        self.value().clone()
    }

    pub fn shape(&self) -> [usize; 2] {
        dim(&self.value())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a `1×1` variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary_same_shape(
            "add",
            self.id,
            other.id,
            |a, b| a + b,
            Op::Add(self.id, other.id),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary_same_shape(
            "sub",
            self.id,
            other.id,
            |a, b| a - b,
            Op::Sub(self.id, other.id),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary_same_shape(
            "mul",
            self.id,
            other.id,
            |a, b| a * b,
            Op::Mul(self.id, other.id),
        )
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary_same_shape(
            "div",
            self.id,
            other.id,
            |a, b| a / b,
            Op::Div(self.id, other.id),
        )
    }

    /// `self + row` with `row` a `1×n` vector broadcast over every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, r) = (nodes[self.id].value.get(), nodes[row.id].value.get());
            if r.nrows() != 1 || r.ncols() != a.ncols() {
                return Err(Error::Shape {
                    op: "add_row",
                    left: dim(a),
                    right: dim(r),
                });
            }
            a + r
        };
        let rg = self.tape.rg(&[self.id, row.id]);
        Ok(self
            .tape
            .push(Value::Owned(value), Op::AddRow(self.id, row.id), rg))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a * c, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a + c, Op::AddScalar(self.id))
    }

    /// Multiply row `i` by the constant `factors[i]`.
    pub fn scale_rows(self, factors: Vec<f64>) -> Result<Var<'t>> {
        let shape = self.shape();
        if factors.len() != shape[0] {
            return Err(Error::Shape {
                op: "scale_rows",
                left: shape,
                right: [factors.len(), 1],
            });
        }
        let f2 = factors.clone();
        Ok(self.tape.unary(
            self.id,
            move |a| {
                let mut out = a.clone();
                for (mut row, &f) in out.rows_mut().into_iter().zip(&f2) {
                    row *= f;
                }
                out
            },
            Op::ScaleRows(self.id, factors),
        ))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (nodes[self.id].value.get(), nodes[other.id].value.get());
            if a.ncols() != b.nrows() {
                return Err(Error::Shape {
                    op: "matmul",
                    left: dim(a),
                    right: dim(b),
                });
            }
            a.dot(b)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self
            .tape
            .push(Value::Owned(value), Op::MatMul(self.id, other.id), rg))
    }

    pub fn transpose(self) -> Var<'t> {
        self.tape
            .unary(self.id, |a| a.t().to_owned(), Op::Transpose(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| Array2::from_elem((1, 1), a.sum()),
            Op::Sum(self.id),
        )
    }

    pub fn mean(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| Array2::from_elem((1, 1), a.sum() / a.len() as f64),
            Op::Mean(self.id),
        )
    }

    /// `m×n → m×1`.
    pub fn row_sum(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::RowSum(self.id),
        )
    }

    /// `m×n → 1×n`.
    pub fn col_sum(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| a.sum_axis(Axis(0)).insert_axis(Axis(0)),
            Op::ColSum(self.id),
        )
    }

    /// Subgradient 0 at 0.
    pub fn abs(self) -> Var<'t> {
        self.tape
            .unary(self.id, |a| a.mapv(f64::abs), Op::Abs(self.id))
    }

    /// Elementwise sign with `sign(0) = +1`. Recorded as a constant.
    pub fn sign(self) -> Var<'t> {
        let v = self.value().mapv(|x| if x >= 0.0 { 1.0 } else { -1.0 });
        self.tape.constant(v)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| a.mapv(f64::exp),
            Op::Exp(self.id, f64::INFINITY),
        )
    }

    /// `exp(min(x, clamp))`; gradient is zero where the clamp is active.
    pub fn exp_clamped(self, clamp: f64) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| a.mapv(|x| x.min(clamp).exp()),
            Op::Exp(self.id, clamp),
        )
    }

    pub fn log(self) -> Var<'t> {
        self.tape
            .unary(self.id, |a| a.mapv(f64::ln), Op::Log(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape
            .unary(self.id, |a| a.mapv(f64::tanh), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape
            .unary(self.id, |a| a.mapv(sigmoid), Op::Sigmoid(self.id))
    }

    /// `max(0, x)`.
    pub fn relu(self) -> Var<'t> {
        self.tape
            .unary(self.id, |a| a.mapv(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape
            .unary(self.id, |a| a.mapv(f64::sqrt), Op::Sqrt(self.id))
    }

    /// Divide each row by its sum.
    pub fn row_normalize(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                let sums = a.sum_axis(Axis(1)).insert_axis(Axis(1));
                a / &sums
            },
            Op::RowNormalize(self.id),
        )
    }

    /// Divide each column by its sum.
    pub fn col_normalize(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                let sums = a.sum_axis(Axis(0)).insert_axis(Axis(0));
                a / &sums
            },
            Op::ColNormalize(self.id),
        )
    }

    /// Frobenius norm as a `1×1`.
    pub fn l2_norm(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| Array2::from_elem((1, 1), a.iter().map(|x| x * x).sum::<f64>().sqrt()),
            Op::L2Norm(self.id),
        )
    }

    /// Full inner product as a `1×1`.
    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary_same_shape(
            "dot",
            self.id,
            other.id,
            |a, b| Array2::from_elem((1, 1), (a * b).sum()),
            Op::Dot(self.id, other.id),
        )
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if start > end || end > shape[0] {
            return Err(Error::Shape {
                op: "slice_rows",
                left: shape,
                right: [start, end],
            });
        }
        Ok(self.tape.unary(
            self.id,
            |a| a.slice(s![start..end, ..]).to_owned(),
            Op::SliceRows(self.id, start),
        ))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if start > end || end > shape[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                left: shape,
                right: [start, end],
            });
        }
        Ok(self.tape.unary(
            self.id,
            |a| a.slice(s![.., start..end]).to_owned(),
            Op::SliceCols(self.id, start),
        ))
    }

    pub fn gather_rows(self, index: Vec<usize>) -> Result<Var<'t>> {
        let shape = self.shape();
        if let Some(&bad) = index.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::Shape {
                op: "gather_rows",
                left: shape,
                right: [bad, shape[1]],
            });
        }
        let idx = index.clone();
        Ok(self.tape.unary(
            self.id,
            move |a| a.select(Axis(0), &idx),
            Op::GatherRows(self.id, index),
        ))
    }

    /// `X[rows] · self` where `X` is a constant sparse matrix.
    pub fn project_rows(self, features: &Arc<CsrMatrix>, rows: Vec<usize>) -> Result<Var<'t>> {
        let shape = self.shape();
        if features.cols() != shape[0] {
            return Err(Error::Shape {
                op: "project_rows",
                left: [features.rows(), features.cols()],
                right: shape,
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= features.rows()) {
            return Err(Error::Shape {
                op: "project_rows",
                left: [features.rows(), features.cols()],
                right: [bad, shape[1]],
            });
        }
        let f = Arc::clone(features);
        let r2 = rows.clone();
        Ok(self.tape.unary(
            self.id,
            move |w| f.project_rows(&r2, w),
            Op::ProjectRows(self.id, Arc::clone(features), rows),
        ))
    }
}

/// Vertical concatenation.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_rows of zero parts".into()))?;
    let tape = first.tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let cols = nodes[first.id].value.get().ncols();
        let mut views = Vec::with_capacity(parts.len());
        for p in parts {
            let v = nodes[p.id].value.get();
            if v.ncols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: dim(nodes[first.id].value.get()),
                    right: dim(v),
                });
            }
            views.push(v.view());
        }
        ndarray::concatenate(Axis(0), &views).expect("shapes checked")
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.rg(&ids);
    Ok(tape.push(Value::Owned(value), Op::ConcatRows(ids), rg))
}

/// Horizontal concatenation.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_cols of zero parts".into()))?;
    let tape = first.tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let rows = nodes[first.id].value.get().nrows();
        let mut views = Vec::with_capacity(parts.len());
        for p in parts {
            let v = nodes[p.id].value.get();
            if v.nrows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: dim(nodes[first.id].value.get()),
                    right: dim(v),
                });
            }
            views.push(v.view());
        }
        ndarray::concatenate(Axis(1), &views).expect("shapes checked")
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.rg(&ids);
    Ok(tape.push(Value::Owned(value), Op::ConcatCols(ids), rg))
}

/// Build a matrix whose row `i` is row `sources[i].1` of `sources[i].0`.
pub fn stack_rows<'t>(sources: &[(Var<'t>, usize)]) -> Result<Var<'t>> {
    let (first, _) = sources
        .first()
        .ok_or_else(|| Error::Contract("stack_rows of zero rows".into()))?;
    let tape = first.tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let cols = nodes[first.id].value.get().ncols();
        let mut out = Array2::zeros((sources.len(), cols));
        for (r, (v, row)) in sources.iter().enumerate() {
            let m = nodes[v.id].value.get();
            if m.ncols() != cols || *row >= m.nrows() {
                return Err(Error::Shape {
                    op: "stack_rows",
                    left: [*row, cols],
                    right: dim(m),
                });
            }
            out.row_mut(r).assign(&m.row(*row));
        }
        out
    };
    let ids: Vec<(usize, usize)> = sources.iter().map(|(v, r)| (v.id, *r)).collect();
    let plain: Vec<usize> = ids.iter().map(|p| p.0).collect();
    let rg = tape.rg(&plain);
    Ok(tape.push(Value::Owned(value), Op::StackRows(ids), rg))
}
