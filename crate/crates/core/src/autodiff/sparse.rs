use ndarray::Array2;

use super::Matrix;

/// Row-compressed constant matrix. Node features live here so that
/// one-hot and bag-of-words inputs never get densified.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(m: &Matrix) -> Self {
        let (rows, cols) = m.dim();
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in m.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    /// Build from per-row `(column, value)` lists. Columns need not be sorted.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        let n = rows.len();
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                debug_assert!(c < cols);
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            rows: n,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// Dense copy of the selected rows, in the given order.
    pub fn dense_rows(&self, rows: &[usize]) -> Matrix {
        let mut out = Array2::zeros((rows.len(), self.cols));
        for (r, &i) in rows.iter().enumerate() {
            for (c, v) in self.row(i) {
                out[[r, c]] = v;
            }
        }
        out
    }

    /// `X[rows] · w` without materializing `X[rows]`.
    pub fn project_rows(&self, rows: &[usize], w: &Matrix) -> Matrix {
        let out_dim = w.ncols();
        let mut out = Array2::zeros((rows.len(), out_dim));
        for (r, &i) in rows.iter().enumerate() {
            let mut dst = out.row_mut(r);
            for (c, v) in self.row(i) {
                dst.scaled_add(v, &w.row(c));
            }
        }
        out
    }
}
