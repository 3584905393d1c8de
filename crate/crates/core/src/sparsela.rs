//! Compressed-column matrices, the reverse Cholesky factorization
//! `rchol(A) = P chol(PAP) P`, triangular solves and small dense kernels.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Default size limit for the dense kernels.
pub const DENSE_CAP: usize = 4096;

/// Relative pivot threshold below which a matrix is declared not positive
/// definite.
pub const PIVOT_TOL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite: pivot {value:e} at index {index}")]
    NotPositiveDefinite { index: usize, value: f64 },
    #[error("triangular matrix is singular at index {0}")]
    Singular(usize),
    #[error("dense size {n} exceeds the cap of {cap}")]
    TooLarge { n: usize, cap: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Compressed sparse column storage with sorted, unique row indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Csc {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl Csc {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Csc {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self, LinalgError> {
        if let Some(&(r, c, _)) = triplets.iter().find(|t| t.0 >= nrows || t.1 >= ncols) {
            return Err(LinalgError::Shape(format!(
                "entry ({r}, {c}) outside {nrows}x{ncols}"
            )));
        }
        triplets.sort_unstable_by_key(|&(r, c, _)| (c, r));
        let mut col_ptr = vec![0; ncols + 1];
        let mut row_idx: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for c in 0..ncols {
            col_ptr[c + 1] += col_ptr[c];
        }
        Ok(Csc {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Raw parts; row indices must be sorted and unique within each column.
    pub fn from_parts(
        nrows: usize,
        ncols: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(col_ptr.len(), ncols + 1);
        debug_assert!((0..ncols).all(|j| row_idx[col_ptr[j]..col_ptr[j + 1]]
            .windows(2)
            .all(|w| w[0] < w[1])));
        Csc {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Entries of `m` with `|value| > threshold`.
    pub fn from_dense(m: &DMatrix<f64>, threshold: f64) -> Self {
        let mut col_ptr = vec![0];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let v = m[(i, j)];
                if v.abs() > threshold {
                    row_idx.push(i);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Csc {
            nrows: m.nrows(),
            ncols: m.ncols(),
            col_ptr,
            row_idx,
            values,
        }
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

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row indices and values of column `j`.
    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.row_idx[r.clone()], &self.values[r])
    }

    pub fn col_nnz(&self, j: usize) -> usize {
        self.col_ptr[j + 1] - self.col_ptr[j]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (rows, vals) = self.col(j);
        rows.binary_search(&i).map(|p| vals[p]).unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            let (rows, vals) = self.col(j);
            for (&i, &v) in rows.iter().zip(vals) {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn transpose(&self) -> Csc {
        let mut count = vec![0usize; self.nrows + 1];
        for &i in &self.row_idx {
            count[i + 1] += 1;
        }
        for i in 0..self.nrows {
            count[i + 1] += count[i];
        }
        let col_ptr = count.clone();
        let mut next = count;
        let mut row_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for j in 0..self.ncols {
            let (rows, vals) = self.col(j);
            for (&i, &v) in rows.iter().zip(vals) {
                let p = next[i];
                next[i] += 1;
                row_idx[p] = j;
                values[p] = v;
            }
        }
        Csc {
            nrows: self.ncols,
            ncols: self.nrows,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// The submatrix formed by `rows` (in the given order) and all columns.
    /// `rows` must be strictly increasing.
    pub fn select_rows(&self, rows: &[usize]) -> Csc {
        let mut map = vec![usize::MAX; self.nrows];
        for (k, &r) in rows.iter().enumerate() {
            map[r] = k;
        }
        let mut col_ptr = vec![0];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for j in 0..self.ncols {
            let (rs, vs) = self.col(j);
            for (&i, &v) in rs.iter().zip(vs) {
                if map[i] != usize::MAX {
                    row_idx.push(map[i]);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Csc {
            nrows: rows.len(),
            ncols: self.ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// `A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for j in 0..self.ncols {
            let (rows, vals) = self.col(j);
            for (&i, &v) in rows.iter().zip(vals) {
                y[i] += v * x[j];
            }
        }
        y
    }

    /// `A' x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.ncols)
            .map(|j| {
                let (rows, vals) = self.col(j);
                rows.iter().zip(vals).map(|(&i, &v)| v * x[i]).sum()
            })
            .collect()
    }

    /// Coordinate-triplet CSV `row,col,value` with 1-based indices.
    pub fn write_triplets_csv<W: Write>(&self, mut out: W) -> Result<(), LinalgError> {
        writeln!(out, "row,col,value")?;
        for j in 0..self.ncols {
            let (rows, vals) = self.col(j);
            for (&i, &v) in rows.iter().zip(vals) {
                writeln!(out, "{},{},{}", i + 1, j + 1, v)?;
            }
        }
        Ok(())
    }
}

/// Square upper-triangular matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseUpper(Csc);

impl SparseUpper {
    pub fn new(m: Csc) -> Result<Self, LinalgError> {
        check_upper(&m)?;
        Ok(SparseUpper(m))
    }

    pub fn csc(&self) -> &Csc {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.ncols
    }

    /// Diagonal entry of column `j`, stored last in the column.
    pub fn diag(&self, j: usize) -> f64 {
        let (rows, vals) = self.0.col(j);
        match rows.last() {
            Some(&r) if r == j => *vals.last().unwrap(),
            _ => 0.0,
        }
    }

    /// Off-diagonal nonzero count of column `j`.
    pub fn offdiag_nnz(&self, j: usize) -> usize {
        let (rows, _) = self.0.col(j);
        rows.iter().filter(|&&r| r != j).count()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.0.to_dense()
    }
}

/// Symmetric matrix with only the upper triangle stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSym(Csc);

impl SparseSym {
    pub fn new(upper: Csc) -> Result<Self, LinalgError> {
        check_upper(&upper)?;
        Ok(SparseSym(upper))
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        SparseSym(Csc::from_dense(&m.upper_triangle(), 0.0))
    }

    pub fn upper(&self) -> &Csc {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.ncols
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let u = self.0.to_dense();
        let mut full = &u + u.transpose();
        for i in 0..full.nrows() {
            full[(i, i)] = u[(i, i)];
        }
        full
    }
}

fn check_upper(m: &Csc) -> Result<(), LinalgError> {
    if m.nrows != m.ncols {
        return Err(LinalgError::Shape(format!(
            "{}x{} is not square",
            m.nrows, m.ncols
        )));
    }
    for j in 0..m.ncols {
        let (rows, _) = m.col(j);
        if rows.iter().any(|&i| i > j) {
            return Err(LinalgError::Shape(format!("column {j} has entries below the diagonal")));
        }
    }
    Ok(())
}

/// `W = U_Y U_Y'` for a row slice `U_Y`, returned as upper storage.
pub fn sparse_outer(u_y: &Csc) -> SparseSym {
    let mut trip = Vec::new();
    for c in 0..u_y.ncols {
        let (rows, vals) = u_y.col(c);
        for a in 0..rows.len() {
            for b in a..rows.len() {
                trip.push((rows[a], rows[b], vals[a] * vals[b]));
            }
        }
    }
    let n = u_y.nrows;
    let mut m = Csc::from_triplets(n, n, trip).expect("indices within bounds");
    ensure_diagonal(&mut m);
    SparseSym(m)
}

/// Inserts explicit zeros on missing diagonal entries.
fn ensure_diagonal(m: &mut Csc) {
    let n = m.ncols;
    if (0..n).all(|j| m.col(j).0.last() == Some(&j)) {
        return;
    }
    let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(m.nnz() + n);
    for j in 0..n {
        let (rows, vals) = m.col(j);
        trip.extend(rows.iter().zip(vals).map(|(&i, &v)| (i, j, v)));
        trip.push((j, j, 0.0));
    }
    *m = Csc::from_triplets(n, n, trip).expect("indices within bounds");
}

/// Upper-triangular `R` with positive diagonal and `A = R R'`, computed as the
/// lower Cholesky factor of the row-and-column reversed matrix, reversed back.
///
/// Symbolic phase: elimination tree and row patterns by tree reach. Numeric
/// phase: up-looking, one row of the reversed factor at a time.
pub fn rchol(a: &SparseSym) -> Result<SparseUpper, LinalgError> {
    let n = a.n();
    let c = reverse_upper(a.upper());
    let l = chol_up_looking(&c).map_err(|e| match e {
        LinalgError::NotPositiveDefinite { index, value } => LinalgError::NotPositiveDefinite {
            index: n - 1 - index,
            value,
        },
        other => other,
    })?;
    Ok(SparseUpper(reverse_lower_to_upper(&l)))
}

/// Upper storage of `PAP` given upper storage of `A`.
fn reverse_upper(a: &Csc) -> Csc {
    let n = a.ncols;
    let at = a.transpose();
    let mut col_ptr = vec![0];
    let mut row_idx = Vec::with_capacity(a.nnz());
    let mut values = Vec::with_capacity(a.nnz());
    for j in 0..n {
        let (rows, vals) = at.col(n - 1 - j);
        for (&r, &v) in rows.iter().zip(vals).rev() {
            row_idx.push(n - 1 - r);
            values.push(v);
        }
        col_ptr.push(row_idx.len());
    }
    Csc {
        nrows: n,
        ncols: n,
        col_ptr,
        row_idx,
        values,
    }
}

/// `P L P` for lower `L`, as upper storage.
fn reverse_lower_to_upper(l: &Csc) -> Csc {
    let n = l.ncols;
    let mut col_ptr = vec![0];
    let mut row_idx = Vec::with_capacity(l.nnz());
    let mut values = Vec::with_capacity(l.nnz());
    for j in 0..n {
        let (rows, vals) = l.col(n - 1 - j);
        for (&r, &v) in rows.iter().zip(vals).rev() {
            row_idx.push(n - 1 - r);
            values.push(v);
        }
        col_ptr.push(row_idx.len());
    }
    Csc {
        nrows: n,
        ncols: n,
        col_ptr,
        row_idx,
        values,
    }
}

const NONE: usize = usize::MAX;

/// Elimination tree of a symmetric matrix given by its upper triangle.
pub fn etree(c: &Csc) -> Vec<usize> {
    let n = c.ncols;
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        let (rows, _) = c.col(k);
        for &r in rows {
            let mut i = r;
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }
    parent
}

/// Pattern of row `k` of the Cholesky factor (excluding the diagonal), in an
/// order where every node precedes its elimination-tree ancestors. Writes to
/// `stack[top..]` and returns `top`.
fn ereach(
    c: &Csc,
    k: usize,
    parent: &[usize],
    mark: &mut [usize],
    stack: &mut [usize],
    path: &mut Vec<usize>,
) -> usize {
    let n = c.ncols;
    let mut top = n;
    mark[k] = k;
    let (rows, _) = c.col(k);
    for &r in rows {
        if r > k {
            continue;
        }
        let mut i = r;
        path.clear();
        while mark[i] != k {
            path.push(i);
            mark[i] = k;
            i = parent[i];
        }
        while let Some(v) = path.pop() {
            top -= 1;
            stack[top] = v;
        }
    }
    top
}

/// Lower Cholesky factor of the symmetric matrix with upper storage `c`.
fn chol_up_looking(c: &Csc) -> Result<Csc, LinalgError> {
    let n = c.ncols;
    let parent = etree(c);
    let mut max_diag: f64 = 0.0;
    for k in 0..n {
        let (rows, vals) = c.col(k);
        if let Ok(p) = rows.binary_search(&k) {
            max_diag = max_diag.max(vals[p]);
        }
    }
    let tol = PIVOT_TOL * max_diag;

    let mut mark = vec![NONE; n];
    let mut stack = vec![0; n];
    let mut path = Vec::new();
    let mut counts = vec![1usize; n];
    for k in 0..n {
        let top = ereach(c, k, &parent, &mut mark, &mut stack, &mut path);
        for &i in &stack[top..] {
            counts[i] += 1;
        }
    }
    let mut col_ptr = vec![0; n + 1];
    for k in 0..n {
        col_ptr[k + 1] = col_ptr[k] + counts[k];
    }
    let nnz = col_ptr[n];
    let mut row_idx = vec![0; nnz];
    let mut values = vec![0.0; nnz];
    let mut next: Vec<usize> = col_ptr[..n].to_vec();
    let mut x = vec![0.0; n];
    mark.fill(NONE);
    for k in 0..n {
        let top = ereach(c, k, &parent, &mut mark, &mut stack, &mut path);
        let (rows, vals) = c.col(k);
        for (&i, &v) in rows.iter().zip(vals) {
            if i <= k {
                x[i] = v;
            }
        }
        let mut d = x[k];
        x[k] = 0.0;
        for &i in &stack[top..] {
            let lki = x[i] / values[col_ptr[i]];
            x[i] = 0.0;
            for p in col_ptr[i] + 1..next[i] {
                x[row_idx[p]] -= values[p] * lki;
            }
            d -= lki * lki;
            let p = next[i];
            next[i] += 1;
            row_idx[p] = k;
            values[p] = lki;
        }
        if !(d > tol) {
            return Err(LinalgError::NotPositiveDefinite { index: k, value: d });
        }
        let p = next[k];
        next[k] += 1;
        row_idx[p] = k;
        values[p] = d.sqrt();
    }
    Ok(Csc {
        nrows: n,
        ncols: n,
        col_ptr,
        row_idx,
        values,
    })
}

/// Which system [`tri_solve`] solves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// `R x = b`
    R,
    /// `R' x = b`
    Rt,
}

pub fn tri_solve(r: &SparseUpper, b: &[f64], side: Side) -> Result<Vec<f64>, LinalgError> {
    let n = r.n();
    if b.len() != n {
        return Err(LinalgError::Shape(format!("rhs length {} for order {n}", b.len())));
    }
    let m = r.csc();
    let mut x = b.to_vec();
    match side {
        Side::R => {
            for j in (0..n).rev() {
                let d = r.diag(j);
                if d == 0.0 {
                    return Err(LinalgError::Singular(j));
                }
                x[j] /= d;
                let xj = x[j];
                let (rows, vals) = m.col(j);
                for (&i, &v) in rows.iter().zip(vals) {
                    if i != j {
                        x[i] -= v * xj;
                    }
                }
            }
        }
        Side::Rt => {
            for j in 0..n {
                let d = r.diag(j);
                if d == 0.0 {
                    return Err(LinalgError::Singular(j));
                }
                let (rows, vals) = m.col(j);
                let mut s = x[j];
                for (&i, &v) in rows.iter().zip(vals) {
                    if i != j {
                        s -= v * x[i];
                    }
                }
                x[j] = s / d;
            }
        }
    }
    Ok(x)
}

/// Lower Cholesky factor, right-looking over columns.
pub fn dense_chol(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    dense_chol_capped(a, DENSE_CAP)
}

pub fn dense_chol_capped(a: &DMatrix<f64>, cap: usize) -> Result<DMatrix<f64>, LinalgError> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(LinalgError::Shape(format!("{}x{} is not square", n, a.ncols())));
    }
    if n > cap {
        return Err(LinalgError::TooLarge { n, cap });
    }
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0, f64::max);
    let tol = PIVOT_TOL * max_diag;
    let mut l = a.lower_triangle();
    let data = l.as_mut_slice();
    for k in 0..n {
        let d = data[k * n + k];
        if !(d > tol) {
            return Err(LinalgError::NotPositiveDefinite { index: k, value: d });
        }
        let piv = d.sqrt();
        data[k * n + k] = piv;
        for v in &mut data[k * n + k + 1..(k + 1) * n] {
            *v /= piv;
        }
        let (head, tail) = data.split_at_mut((k + 1) * n);
        let colk = &head[k * n..];
        for j in k + 1..n {
            let ljk = colk[j];
            if ljk == 0.0 {
                continue;
            }
            let off = (j - k - 1) * n;
            let dst = &mut tail[off + j..off + n];
            for (d, &s) in dst.iter_mut().zip(&colk[j..n]) {
                *d -= ljk * s;
            }
        }
    }
    Ok(l)
}

/// Solves `L x = b` in place for lower `L`.
pub fn forward_solve(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    let data = l.as_slice();
    for j in 0..n {
        b[j] /= data[j * n + j];
        let bj = b[j];
        for (bi, &lij) in b[j + 1..].iter_mut().zip(&data[j * n + j + 1..(j + 1) * n]) {
            *bi -= lij * bj;
        }
    }
}

/// Solves `L' x = b` in place for lower `L`.
pub fn backward_solve(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    let data = l.as_slice();
    for j in (0..n).rev() {
        let s: f64 = data[j * n + j + 1..(j + 1) * n]
            .iter()
            .zip(&b[j + 1..])
            .map(|(a, c)| a * c)
            .sum();
        b[j] = (b[j] - s) / data[j * n + j];
    }
}

/// Solves `A X = B` for SPD `A`.
pub fn dense_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let l = dense_chol(a)?;
    Ok(chol_solve(&l, b))
}

/// Solves `L L' X = B` given the lower factor.
pub fn chol_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    for mut col in x.column_iter_mut() {
        let s = col.as_mut_slice();
        forward_solve(l, s);
        backward_solve(l, s);
    }
    x
}

pub fn dense_logdet(a: &DMatrix<f64>) -> Result<f64, LinalgError> {
    Ok(chol_logdet(&dense_chol(a)?))
}

/// `log |L L'|` from the lower factor.
pub fn chol_logdet(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `P chol(P A P) P` on dense matrices.
pub fn rchol_dense(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = a.nrows();
    let rev = reverse(a);
    let l = dense_chol(&rev).map_err(|e| match e {
        LinalgError::NotPositiveDefinite { index, value } => LinalgError::NotPositiveDefinite {
            index: n - 1 - index,
            value,
        },
        other => other,
    })?;
    Ok(reverse(&l))
}

/// Reverses rows and columns.
pub fn reverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = a.shape();
    DMatrix::from_fn(r, c, |i, j| a[(r - 1 - i, c - 1 - j)])
}

/// Log density of `N(0, A)` at `z`.
pub fn gaussian_logpdf(a: &DMatrix<f64>, z: &[f64]) -> Result<f64, LinalgError> {
    let l = dense_chol(a)?;
    let mut w = z.to_vec();
    forward_solve(&l, &mut w);
    let quad: f64 = w.iter().map(|v| v * v).sum();
    let n = z.len() as f64;
    Ok(-0.5 * (chol_logdet(&l) + quad + n * (2.0 * std::f64::consts::PI).ln()))
}

pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
