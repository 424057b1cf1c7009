use super::{Matrix, TensorError};
use crate::par;

/// Compressed sparse row matrix with explicit values.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a CSR matrix from `(row, col, value)` triplets. Duplicate
    /// coordinates are summed; column indices within a row end up sorted.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, TensorError> {
        let mut sorted = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(TensorError::IndexOutOfBounds {
                    index: (r, c),
                    shape: (rows, cols),
                });
            }
        }
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// An `n x n` matrix without stored entries.
    pub fn empty(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: vec![0; n + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Number of stored entries.
    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values stored in row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// Iterates `(row, col, value)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.iter() {
            out.set(r, c, v);
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && self.iter().all(|(r, c, v)| self.get(c, r) == v)
    }

    /// Sparse-dense product `self · dense`.
    pub fn spmm(&self, dense: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != dense.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "spmm",
                left: self.shape(),
                right: dense.shape(),
            });
        }
        let k = dense.cols();
        let mut out = Matrix::zeros(self.rows, k);
        let src = dense.as_slice();
        par::for_each_row(out.as_mut_slice(), k, |r, out_row| {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let d_row = &src[c * k..(c + 1) * k];
                for (o, &d) in out_row.iter_mut().zip(d_row) {
                    *o += v * d;
                }
            }
        });
        Ok(out)
    }

    /// `selfᵀ · dense`, accumulated in row order of `self`.
    pub fn spmm_transposed(&self, dense: &Matrix) -> Result<Matrix, TensorError> {
        if self.rows != dense.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "spmm_transposed",
                left: self.shape(),
                right: dense.shape(),
            });
        }
        let k = dense.cols();
        let mut out = Matrix::zeros(self.cols, k);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let d_row = dense.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                for (o, &d) in out.row_mut(c).iter_mut().zip(d_row) {
                    *o += v * d;
                }
            }
        }
        Ok(out)
    }
}
