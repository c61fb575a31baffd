//! Compressed sparse row matrices for QP assembly and iterative kernels.
//!
//! The solver kernels rely on a fixed, reproducible traversal order: rows are
//! stored contiguously and each row's entries are sorted by column, so the
//! floating-point accumulation order of a matrix-vector product is a pure
//! function of the matrix structure.  The distributed executor re-runs those
//! same row traversals per agent and therefore reproduces centralised results
//! exactly.

use nalgebra::{DMatrix, DVector};

/// Sequential sparse dot product `Σ_k vals[k] · x[idx[k]]` in slice order.
///
/// This is the one accumulation kernel behind every matrix-vector product in
/// the saddle-point solvers.  The centralised iteration calls it through
/// [`CsrMatrix::row_dot`]; the distributed executor calls it on per-agent
/// remapped rows whose value order matches the original rows, which makes the
/// two execution modes bitwise identical.
#[inline]
pub fn sparse_dot(vals: &[f64], idx: &[usize], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (v, &j) in vals.iter().zip(idx) {
        acc += v * x[j];
    }
    acc
}

/// Sparse matrix in compressed sparse row format.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    /// Row start offsets into `indices`/`values`; length `nrows + 1`.
    indptr: Vec<usize>,
    /// Column index of each stored entry, sorted within each row.
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from (row, col, value) triplets.  Duplicate positions
    /// are summed; explicit zeros are kept so that structural nonzeros remain
    /// visible to the locality audit.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        for &(i, j, _) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i},{j}) out of bounds");
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|&(i, j, _)| (i, j));

        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        let mut k = 0;
        for i in 0..nrows {
            while k < sorted.len() && sorted[k].0 == i {
                let j = sorted[k].1;
                let mut v = sorted[k].2;
                k += 1;
                while k < sorted.len() && sorted[k].0 == i && sorted[k].1 == j {
                    v += sorted[k].2;
                    k += 1;
                }
                indices.push(j);
                values.push(v);
            }
            indptr[i + 1] = indices.len();
        }
        CsrMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    /// Builds an identity-like matrix with ones at `(i, i)`.
    pub fn identity(n: usize) -> Self {
        let triplets: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, n, &triplets)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`, sorted by column.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    /// Iterates over all stored entries as `(row, col, value)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    /// `y = self * x`, accumulated row by row in column order.
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = DVector::zeros(self.nrows);
        for i in 0..self.nrows {
            y[i] = self.row_dot(i, x.as_slice());
        }
        y
    }

    /// Dot product of row `i` with a dense vector, in stored (column) order.
    ///
    /// Delegates to [`sparse_dot`], the single accumulation kernel shared by
    /// the centralised and distributed saddle-point updates; identical value
    /// and index sequences therefore produce bitwise-identical sums.
    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (cols, vals) = self.row(i);
        sparse_dot(vals, cols, x)
    }

    /// `y = selfᵀ * x` computed through an explicit transpose-free pass.
    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = DVector::zeros(self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                y[j] += v * x[i];
            }
        }
        y
    }

    /// Returns the transposed matrix in CSR form.
    pub fn transpose(&self) -> CsrMatrix {
        let triplets: Vec<(usize, usize, f64)> = self.iter().map(|(i, j, v)| (j, i, v)).collect();
        CsrMatrix::from_triplets(self.ncols, self.nrows, &triplets)
    }

    /// Densifies the matrix (used by the reference solver and in tests).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.iter() {
            d[(i, j)] += v;
        }
        d
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|` over stored entries; zero
    /// for structurally and numerically symmetric matrices.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, j, v) in self.iter() {
            let vt = self.get(j, i);
            worst = worst.max((v - vt).abs());
        }
        worst
    }

    /// Value at `(i, j)` (zero if not stored).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }
}

/// Convenience builder that accumulates triplets.
#[derive(Debug, Default, Clone)]
pub struct TripletBuilder {
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        self.entries.push((i, j, v));
    }

    pub fn build(&self, nrows: usize, ncols: usize) -> CsrMatrix {
        CsrMatrix::from_triplets(nrows, ncols, &self.entries)
    }
}
