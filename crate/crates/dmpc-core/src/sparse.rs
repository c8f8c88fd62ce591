//! Minimal sparse kit backing the QP engine: CSR storage, reverse
//! Cuthill-McKee ordering, and an envelope Cholesky factorization.
//!
//! The subsystem and stacked QPs are stage-structured, so a bandwidth-reducing
//! permutation plus a profile factorization covers everything the solvers
//! need without a general fill-reducing ordering.

use nalgebra::{DMatrix, DVector};

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        let n = d.len();
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: d.to_vec(),
        }
    }

    /// Builds from (row, col, value) triplets, summing duplicates and dropping
    /// entries that cancel to exact zero.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, _, _) in triplets {
            assert!(r < nrows, "triplet row out of range");
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0f64; triplets.len()];
        let mut pos = counts.clone();
        for &(r, c, v) in triplets {
            assert!(c < ncols, "triplet col out of range");
            cols[pos[r]] = c;
            vals[pos[r]] = v;
            pos[r] += 1;
        }
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut row: Vec<(usize, f64)> = Vec::new();
        for r in 0..nrows {
            row.clear();
            row.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            row.sort_unstable_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < row.len() {
                let c = row[i].0;
                let mut v = row[i].1;
                let mut j = i + 1;
                while j < row.len() && row[j].0 == c {
                    v += row[j].1;
                    j += 1;
                }
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
                i = j;
            }
            indptr[r + 1] = indices.len();
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    /// Builds from a dense matrix, keeping only exact nonzeros.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut indptr = vec![0usize; m.nrows() + 1];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr[r + 1] = indices.len();
        }
        Self {
            nrows: m.nrows(),
            ncols: m.ncols(),
            indptr,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                m[(r, self.indices[k])] = self.values[k];
            }
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// True when every stored entry lies on the diagonal.
    pub fn is_diagonal(&self) -> bool {
        (0..self.nrows).all(|r| self.row(r).0.iter().all(|&c| c == r))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.nrows.min(self.ncols);
        let mut d = vec![0.0; n];
        for r in 0..n {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                if *c == r {
                    d[r] += *v;
                }
            }
        }
        d
    }

    /// y = A x
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols, "matvec dimension mismatch");
        let mut y = DVector::zeros(self.nrows);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c];
            }
            y[r] = acc;
        }
        y
    }

    /// y = A' x
    pub fn mul_transpose_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.nrows, "transpose matvec dimension mismatch");
        let mut y = DVector::zeros(self.ncols);
        for r in 0..self.nrows {
            let xr = x[r];
            if xr != 0.0 {
                let (cols, vals) = self.row(r);
                for (c, v) in cols.iter().zip(vals) {
                    y[*c] += v * xr;
                }
            }
        }
        y
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut indptr = vec![0usize; self.ncols + 1];
        for &c in &self.indices {
            indptr[c + 1] += 1;
        }
        for i in 0..self.ncols {
            indptr[i + 1] += indptr[i];
        }
        let mut pos = indptr.clone();
        let mut indices = vec![0usize; self.nnz()];
        let mut values = vec![0f64; self.nnz()];
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k];
                indices[pos[c]] = r;
                values[pos[c]] = self.values[k];
                pos[c] += 1;
            }
        }
        CsrMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            indptr,
            indices,
            values,
        }
    }

    /// Stacks `self` above `other` (matching column counts).
    pub fn vstack(&self, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.ncols, other.ncols, "vstack column mismatch");
        let mut indptr = Vec::with_capacity(self.nrows + other.nrows + 1);
        indptr.extend_from_slice(&self.indptr);
        let base = self.nnz();
        indptr.extend(other.indptr[1..].iter().map(|&p| p + base));
        let mut indices = self.indices.clone();
        indices.extend_from_slice(&other.indices);
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        CsrMatrix {
            nrows: self.nrows + other.nrows,
            ncols: self.ncols,
            indptr,
            indices,
            values,
        }
    }

    /// Scales row r by s[r] in place.
    pub fn scale_rows(&mut self, s: &[f64]) {
        assert_eq!(s.len(), self.nrows);
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                self.values[k] *= s[r];
            }
        }
    }

    /// Scales column c by s[c] in place.
    pub fn scale_cols(&mut self, s: &[f64]) {
        assert_eq!(s.len(), self.ncols);
        for k in 0..self.indices.len() {
            self.values[k] *= s[self.indices[k]];
        }
    }

    pub fn scale_values(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    /// Infinity norm of each column.
    pub fn col_inf_norms(&self) -> Vec<f64> {
        let mut norms = vec![0.0f64; self.ncols];
        for k in 0..self.indices.len() {
            let c = self.indices[k];
            norms[c] = norms[c].max(self.values[k].abs());
        }
        norms
    }

    /// Infinity norm of each row.
    pub fn row_inf_norms(&self) -> Vec<f64> {
        let mut norms = vec![0.0f64; self.nrows];
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                norms[r] = norms[r].max(self.values[k].abs());
            }
        }
        norms
    }

    /// Symmetric product P + sigma*I + A' diag(rho) A with `self` = P (square).
    pub fn normal_matrix(&self, sigma: f64, a: &CsrMatrix, rho: &[f64]) -> CsrMatrix {
        assert_eq!(self.nrows, self.ncols, "P must be square");
        assert_eq!(a.ncols(), self.ncols, "A column mismatch");
        assert_eq!(rho.len(), a.nrows());
        let n = self.ncols;
        let at = a.transpose();
        let mut acc = vec![0.0f64; n];
        let mut mark = vec![usize::MAX; n];
        let mut touched: Vec<usize> = Vec::with_capacity(128);
        let mut indptr = vec![0usize; n + 1];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            touched.clear();
            let mut add = |c: usize, v: f64, acc: &mut [f64], touched: &mut Vec<usize>| {
                if mark[c] != i {
                    mark[c] = i;
                    acc[c] = 0.0;
                    touched.push(c);
                }
                acc[c] += v;
            };
            let (pcols, pvals) = self.row(i);
            for (c, v) in pcols.iter().zip(pvals) {
                add(*c, *v, &mut acc, &mut touched);
            }
            add(i, sigma, &mut acc, &mut touched);
            let (kcols, kvals) = at.row(i);
            for (k, aik) in kcols.iter().zip(kvals) {
                let w = aik * rho[*k];
                let (acols, avals) = a.row(*k);
                for (c, av) in acols.iter().zip(avals) {
                    add(*c, w * av, &mut acc, &mut touched);
                }
            }
            touched.sort_unstable();
            for &c in &touched {
                if acc[c] != 0.0 {
                    indices.push(c);
                    values.push(acc[c]);
                }
            }
            indptr[i + 1] = indices.len();
        }
        CsrMatrix {
            nrows: n,
            ncols: n,
            indptr,
            indices,
            values,
        }
    }

    /// Symmetric product A diag(w) A' + shift*I with `self` = A (m x n).
    ///
    /// The result pairs constraints that share a variable; used by the
    /// Schur-complement equality solves.
    pub fn gram_rows(&self, w: &[f64], shift: f64) -> CsrMatrix {
        assert_eq!(w.len(), self.ncols);
        let m = self.nrows;
        let at = self.transpose();
        let mut acc = vec![0.0f64; m];
        let mut mark = vec![usize::MAX; m];
        let mut touched: Vec<usize> = Vec::with_capacity(128);
        let mut indptr = vec![0usize; m + 1];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..m {
            touched.clear();
            let mut add = |c: usize, v: f64, acc: &mut [f64], touched: &mut Vec<usize>| {
                if mark[c] != i {
                    mark[c] = i;
                    acc[c] = 0.0;
                    touched.push(c);
                }
                acc[c] += v;
            };
            let (vcols, vvals) = self.row(i);
            for (v, aiv) in vcols.iter().zip(vvals) {
                let s = aiv * w[*v];
                let (rcols, rvals) = at.row(*v);
                for (r, arv) in rcols.iter().zip(rvals) {
                    add(*r, s * arv, &mut acc, &mut touched);
                }
            }
            add(i, shift, &mut acc, &mut touched);
            touched.sort_unstable();
            for &c in &touched {
                if acc[c] != 0.0 {
                    indices.push(c);
                    values.push(acc[c]);
                }
            }
            indptr[i + 1] = indices.len();
        }
        CsrMatrix {
            nrows: m,
            ncols: m,
            indptr,
            indices,
            values,
        }
    }
}

/// Reverse Cuthill-McKee ordering of a symmetric sparsity pattern.
///
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(m: &CsrMatrix) -> Vec<usize> {
    assert_eq!(m.nrows(), m.ncols());
    let n = m.nrows();
    let degree: Vec<usize> = (0..n).map(|i| m.row(i).0.len()).collect();
    let mut visited = vec![false; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::new();
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.sort_unstable_by_key(|&i| degree[i]);
    for &start in &nodes {
        if visited[start] {
            continue;
        }
        let root = pseudo_peripheral(m, start);
        visited[root] = true;
        queue.push_back(root);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nbrs: Vec<usize> = m
                .row(u)
                .0
                .iter()
                .copied()
                .filter(|&v| v != u && !visited[v])
                .collect();
            nbrs.sort_unstable_by_key(|&v| degree[v]);
            for v in nbrs {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(m: &CsrMatrix, start: usize) -> usize {
    let n = m.nrows();
    let mut root = start;
    let mut last_ecc = 0usize;
    for _ in 0..4 {
        let (levels, ecc) = bfs_levels(m, root, n);
        if ecc <= last_ecc {
            break;
        }
        last_ecc = ecc;
        let mut best = root;
        let mut best_deg = usize::MAX;
        for v in 0..n {
            if levels[v] == Some(ecc) {
                let d = m.row(v).0.len();
                if d < best_deg {
                    best_deg = d;
                    best = v;
                }
            }
        }
        root = best;
    }
    root
}

fn bfs_levels(m: &CsrMatrix, root: usize, n: usize) -> (Vec<Option<usize>>, usize) {
    let mut levels: Vec<Option<usize>> = vec![None; n];
    let mut queue = std::collections::VecDeque::new();
    levels[root] = Some(0);
    queue.push_back(root);
    let mut ecc = 0;
    while let Some(u) = queue.pop_front() {
        let lu = levels[u].unwrap();
        ecc = ecc.max(lu);
        for &v in m.row(u).0 {
            if v != u && levels[v].is_none() {
                levels[v] = Some(lu + 1);
                queue.push_back(v);
            }
        }
    }
    (levels, ecc)
}

#[derive(Debug, thiserror::Error)]
pub enum FactorError {
    #[error("matrix is not positive definite (pivot {pivot:.3e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
}

/// Envelope (profile) Cholesky factorization of a symmetric positive definite
/// matrix, with an internal reverse Cuthill-McKee permutation.
pub struct EnvelopeChol {
    n: usize,
    perm: Vec<usize>,    // perm[new] = old
    iperm: Vec<usize>,   // iperm[old] = new
    first: Vec<usize>,   // first stored column of each permuted row
    offsets: Vec<usize>, // packed row offsets into `l`
    l: Vec<f64>,         // packed lower-triangular rows, diagonal last
}

impl EnvelopeChol {
    /// Factors `m` (symmetric, both triangles stored) as P M P' = L L'.
    pub fn new(m: &CsrMatrix) -> Result<Self, FactorError> {
        assert_eq!(m.nrows(), m.ncols());
        let n = m.nrows();
        let perm = reverse_cuthill_mckee(m);
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for old_r in 0..n {
            let new_r = iperm[old_r];
            for &old_c in m.row(old_r).0 {
                let new_c = iperm[old_c];
                let (hi, lo) = if new_r >= new_c {
                    (new_r, new_c)
                } else {
                    (new_c, new_r)
                };
                if lo < first[hi] {
                    first[hi] = lo;
                }
            }
        }
        let mut offsets = vec![0usize; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + (i - first[i] + 1);
        }
        let l = vec![0.0f64; offsets[n]];
        let mut chol = Self {
            n,
            perm,
            iperm,
            first,
            offsets,
            l,
        };
        chol.scatter(m);
        chol.factor_in_place()?;
        Ok(chol)
    }

    /// Refactors with new values on a sparsity pattern contained in the
    /// original one.
    pub fn refactor(&mut self, m: &CsrMatrix) -> Result<(), FactorError> {
        assert_eq!(m.nrows(), self.n);
        self.l.iter_mut().for_each(|v| *v = 0.0);
        self.scatter(m);
        self.factor_in_place()
    }

    fn scatter(&mut self, m: &CsrMatrix) {
        for old_r in 0..self.n {
            let (cols, vals) = m.row(old_r);
            let new_r = self.iperm[old_r];
            for (old_c, v) in cols.iter().zip(vals) {
                let new_c = self.iperm[*old_c];
                if new_c <= new_r {
                    debug_assert!(new_c >= self.first[new_r], "entry outside envelope");
                    self.l[self.offsets[new_r] + (new_c - self.first[new_r])] = *v;
                }
            }
        }
    }

    fn factor_in_place(&mut self) -> Result<(), FactorError> {
        let n = self.n;
        for i in 0..n {
            let fi = self.first[i];
            let base_i = self.offsets[i];
            for j in fi..i {
                let fj = self.first[j];
                let base_j = self.offsets[j];
                let lo = fi.max(fj);
                let mut s = self.l[base_i + (j - fi)];
                if lo < j {
                    let len = j - lo;
                    let ri = base_i + (lo - fi);
                    let rj = base_j + (lo - fj);
                    let mut acc = 0.0;
                    for k in 0..len {
                        acc += self.l[ri + k] * self.l[rj + k];
                    }
                    s -= acc;
                }
                self.l[base_i + (j - fi)] = s / self.l[base_j + (j - fj)];
            }
            let mut d = self.l[base_i + (i - fi)];
            for k in fi..i {
                let v = self.l[base_i + (k - fi)];
                d -= v * v;
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(FactorError::NotPositiveDefinite { row: i, pivot: d });
            }
            self.l[base_i + (i - fi)] = d.sqrt();
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Packed factor size; proportional to per-solve cost.
    pub fn profile_nnz(&self) -> usize {
        self.l.len()
    }

    /// Solves M x = b.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, b: &mut DVector<f64>) {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut y = vec![0.0f64; n];
        for i in 0..n {
            y[i] = b[self.perm[i]];
        }
        for i in 0..n {
            let fi = self.first[i];
            let base = self.offsets[i];
            let mut s = y[i];
            for j in fi..i {
                s -= self.l[base + (j - fi)] * y[j];
            }
            y[i] = s / self.l[base + (i - fi)];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let base = self.offsets[i];
            let xi = y[i] / self.l[base + (i - fi)];
            y[i] = xi;
            for j in fi..i {
                y[j] -= self.l[base + (j - fi)] * xi;
            }
        }
        for i in 0..n {
            b[self.perm[i]] = y[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(n, n) * (n as f64)
    }

    #[test]
    fn triplets_merge_and_sort() {
        let t = vec![
            (0, 1, 2.0),
            (0, 0, 1.0),
            (0, 1, 3.0),
            (1, 1, -1.0),
            (1, 0, 0.0),
        ];
        let m = CsrMatrix::from_triplets(2, 2, &t);
        assert_eq!(m.nnz(), 3);
        let d = m.to_dense();
        assert_eq!(d[(0, 0)], 1.0);
        assert_eq!(d[(0, 1)], 5.0);
        assert_eq!(d[(1, 1)], -1.0);
        assert_eq!(d[(1, 0)], 0.0);
    }

    #[test]
    fn transpose_round_trip() {
        let t = vec![(0, 2, 1.0), (1, 0, 2.0), (2, 1, 3.0), (0, 0, 4.0)];
        let m = CsrMatrix::from_triplets(3, 3, &t);
        let mt = m.transpose();
        assert_eq!(mt.to_dense(), m.to_dense().transpose());
        assert_eq!(mt.transpose().to_dense(), m.to_dense());
    }

    #[test]
    fn matvec_agrees_with_dense() {
        let d = random_spd(7, 1);
        let m = CsrMatrix::from_dense(&d);
        let x = DVector::from_fn(7, |i, _| (i as f64) - 3.0);
        assert_relative_eq!(m.mul_vec(&x), &d * &x, epsilon = 1e-12);
        assert_relative_eq!(m.mul_transpose_vec(&x), d.transpose() * &x, epsilon = 1e-12);
    }

    #[test]
    fn normal_matrix_matches_dense_formula() {
        let p = random_spd(6, 2);
        let a_dense = DMatrix::from_fn(4, 6, |r, c| {
            if (r + c) % 3 == 0 {
                (r + c) as f64
            } else {
                0.0
            }
        });
        let p_s = CsrMatrix::from_dense(&p);
        let a_s = CsrMatrix::from_dense(&a_dense);
        let rho = [2.0, 0.5, 1.0, 4.0];
        let n = p_s.normal_matrix(0.1, &a_s, &rho);
        let r = DMatrix::from_diagonal(&DVector::from_row_slice(&rho));
        let want = &p + DMatrix::identity(6, 6) * 0.1 + a_dense.transpose() * r * &a_dense;
        assert_relative_eq!(n.to_dense(), want, epsilon = 1e-12);
    }

    #[test]
    fn gram_rows_matches_dense_formula() {
        let a_dense = DMatrix::from_fn(5, 7, |r, c| {
            if (r * 3 + c) % 4 == 0 {
                1.0 + r as f64
            } else {
                0.0
            }
        });
        let a = CsrMatrix::from_dense(&a_dense);
        let w: Vec<f64> = (0..7).map(|i| 0.5 + i as f64).collect();
        let g = a.gram_rows(&w, 1e-3);
        let wmat = DMatrix::from_diagonal(&DVector::from_row_slice(&w));
        let want = &a_dense * wmat * a_dense.transpose() + DMatrix::identity(5, 5) * 1e-3;
        assert_relative_eq!(g.to_dense(), want, epsilon = 1e-12);
    }

    #[test]
    fn envelope_cholesky_solves_spd_system() {
        for n in [1usize, 2, 5, 12, 40] {
            let d = random_spd(n, n as u64);
            let m = CsrMatrix::from_dense(&d);
            let chol = EnvelopeChol::new(&m).unwrap();
            let b = DVector::from_fn(n, |i, _| (i as f64).sin() + 1.0);
            let x = chol.solve(&b);
            assert_relative_eq!(&d * &x, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn envelope_cholesky_banded_profile_stays_linear() {
        let n = 50;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        let m = CsrMatrix::from_triplets(n, n, &t);
        let chol = EnvelopeChol::new(&m).unwrap();
        assert!(chol.profile_nnz() <= 2 * n);
        let b = DVector::from_element(n, 1.0);
        let x = chol.solve(&b);
        assert_relative_eq!(m.mul_vec(&x), b, epsilon = 1e-9);
    }

    #[test]
    fn refactor_reuses_pattern() {
        let d = random_spd(9, 7);
        let m = CsrMatrix::from_dense(&d);
        let mut chol = EnvelopeChol::new(&m).unwrap();
        let d2 = &d * 2.0;
        let m2 = CsrMatrix::from_dense(&d2);
        chol.refactor(&m2).unwrap();
        let b = DVector::from_element(9, 1.0);
        assert_relative_eq!(&d2 * chol.solve(&b), b, epsilon = 1e-8);
    }

    #[test]
    fn not_pd_is_reported() {
        let mut d = DMatrix::identity(3, 3);
        d[(2, 2)] = -1.0;
        let m = CsrMatrix::from_dense(&d);
        assert!(matches!(
            EnvelopeChol::new(&m),
            Err(FactorError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn rcm_tames_arrow_matrix() {
        // dense first row/col; RCM must push the hub to the end so the
        // profile stays linear instead of quadratic
        let n = 30;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 10.0));
        }
        for i in 1..n {
            t.push((0, i, 1.0));
            t.push((i, 0, 1.0));
        }
        let m = CsrMatrix::from_triplets(n, n, &t);
        let chol = EnvelopeChol::new(&m).unwrap();
        assert!(chol.profile_nnz() < 3 * n);
        let b = DVector::from_element(n, 1.0);
        assert_relative_eq!(m.mul_vec(&chol.solve(&b)), b, epsilon = 1e-9);
    }
}
