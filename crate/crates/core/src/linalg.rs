//! Sparse symmetric storage and symmetric factorizations.
//!
//! Every solve in the toolkit goes through [`SymmetricFactor`]: a dense
//! Cholesky for small matrices and an envelope (skyline) Cholesky under a
//! reverse Cuthill-McKee ordering for larger ones. The choice is a
//! performance knob only; both paths enforce the same relative pivot test.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative pivot tolerance shared by every definiteness test.
pub const PIVOT_TOL: f64 = 1e-12;

/// Matrices with more rows than this are factored in envelope storage.
pub const DENSE_LIMIT: usize = 500;

/// Symmetric matrix in compressed-row form holding both triangles.
///
/// Every row stores its diagonal entry, even when it is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricCsr {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SymmetricCsr {
    /// Builds the matrix from `(i, j, v)` triplets of one triangle. Entries
    /// with `i != j` are mirrored; repeated coordinates are summed.
    pub fn from_triplets<I>(n: usize, triplets: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, 0.0)]).collect();
        for (i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::malformed(format!(
                    "entry ({i}, {j}) outside a {n}x{n} matrix"
                )));
            }
            rows[i].push((j, v));
            if i != j {
                rows[j].push((i, v));
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                match col_idx.last() {
                    Some(&last) if col_idx.len() > row_ptr[row_ptr.len() - 1] && last == c => {
                        *values.last_mut().unwrap() += v;
                    }
                    _ => {
                        col_idx.push(c);
                        values.push(v);
                    }
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension {
                expected: m.nrows(),
                actual: m.ncols(),
                context: "square matrix",
            });
        }
        let n = m.nrows();
        let mut trip = Vec::new();
        for i in 0..n {
            for j in i..n {
                let v = m[(i, j)];
                if i == j || v != 0.0 {
                    trip.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n, trip)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`, sorted by column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(pos) => self.values[r.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Adds `d[i]` to each diagonal entry.
    pub fn add_diagonal(&mut self, d: &[f64]) {
        for (i, &di) in d.iter().enumerate() {
            let r = self.row_ptr[i]..self.row_ptr[i + 1];
            let pos = self.col_idx[r.clone()]
                .binary_search(&i)
                .expect("diagonal is always stored");
            self.values[r.start + pos] += di;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Upper-triangle triplets, diagonal included.
    pub fn upper_triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).filter(move |&(j, _)| j >= i).map(move |(j, v)| (i, j, v)))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn pivot_scale(&self) -> f64 {
        pivot_scale(self.diagonal().iter().copied(), self.max_abs())
    }
}

fn pivot_scale(diag: impl Iterator<Item = f64>, max_abs: f64) -> f64 {
    let d = diag.fold(0.0_f64, |m, v| m.max(v.abs()));
    if d > 0.0 {
        d
    } else if max_abs > 0.0 {
        max_abs
    } else {
        1.0
    }
}

/// Sign classification of a symmetric matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Definiteness {
    Indefinite,
    SemiDefinite,
    PositiveDefinite,
}

impl Definiteness {
    /// True for SPD and SNND.
    pub fn is_conformal(self) -> bool {
        self >= Definiteness::SemiDefinite
    }
}

/// Classifies a symmetric matrix by Cholesky with diagonal pivoting.
///
/// A pivot counts as positive when it exceeds `PIVOT_TOL * max|a_ii|`. When
/// the largest remaining pivot falls below that, the matrix is semidefinite
/// only if the whole trailing Schur complement vanishes to the same tolerance.
pub fn classify_dense(m: &DMatrix<f64>) -> Definiteness {
    let n = m.nrows();
    let max_abs = m.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let tol = PIVOT_TOL * pivot_scale(m.diagonal().iter().copied(), max_abs);
    let mut a = m.clone();
    for k in 0..n {
        let (p, d) = (k..n)
            .map(|i| (i, a[(i, i)]))
            .fold((k, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        if d <= tol {
            if d < -tol {
                return Definiteness::Indefinite;
            }
            for i in k..n {
                for j in k..n {
                    if a[(i, j)].abs() > tol {
                        return Definiteness::Indefinite;
                    }
                }
            }
            return Definiteness::SemiDefinite;
        }
        a.swap_rows(k, p);
        a.swap_columns(k, p);
        let l = d.sqrt();
        for i in k + 1..n {
            a[(i, k)] /= l;
        }
        for j in k + 1..n {
            let ljk = a[(j, k)];
            for i in j..n {
                let v = a[(i, j)] - a[(i, k)] * ljk;
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
    }
    Definiteness::PositiveDefinite
}

/// Classifies a sparse symmetric matrix. Tries an envelope factorization
/// first and falls back to the dense pivoted test when it breaks down.
pub fn classify(m: &SymmetricCsr) -> Definiteness {
    match SymmetricFactor::new(m) {
        Ok(_) => Definiteness::PositiveDefinite,
        Err(_) => classify_dense(&m.to_dense()),
    }
}

/// Dense lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct DenseCholesky {
    l: DMatrix<f64>,
}

impl DenseCholesky {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        let max_abs = m.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let tol = PIVOT_TOL * pivot_scale(m.diagonal().iter().copied(), max_abs);
        let mut l = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = m[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > tol) {
                return Err(Error::NotPositiveDefinite {
                    pivot: j,
                    value: d,
                    context: "dense Cholesky".into(),
                });
            }
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.l.nrows();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }
}

/// Envelope Cholesky factor under a symmetric permutation.
#[derive(Debug, Clone)]
pub struct SkylineCholesky {
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// First stored column of each permuted row.
    first: Vec<usize>,
    start: Vec<usize>,
    values: Vec<f64>,
}

impl SkylineCholesky {
    pub fn new(m: &SymmetricCsr) -> Result<Self> {
        let perm = reverse_cuthill_mckee(m);
        Self::with_ordering(m, perm)
    }

    pub fn with_ordering(m: &SymmetricCsr, perm: Vec<usize>) -> Result<Self> {
        let n = m.dim();
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first = vec![0; n];
        for (i, &old) in perm.iter().enumerate() {
            first[i] = m.row(old).map(|(j, _)| inv[j]).filter(|&j| j <= i).min().unwrap_or(i).min(i);
        }
        let mut start = Vec::with_capacity(n + 1);
        start.push(0);
        for i in 0..n {
            start.push(start[i] + i - first[i] + 1);
        }
        let mut values = vec![0.0; start[n]];
        for (i, &old) in perm.iter().enumerate() {
            for (j, v) in m.row(old) {
                let jn = inv[j];
                if jn <= i {
                    values[start[i] + jn - first[i]] += v;
                }
            }
        }
        let tol = PIVOT_TOL * m.pivot_scale();
        for i in 0..n {
            for j in first[i]..=i {
                let k0 = first[i].max(first[j]);
                let mut s = values[start[i] + j - first[i]];
                for k in k0..j {
                    s -= values[start[i] + k - first[i]] * values[start[j] + k - first[j]];
                }
                if j < i {
                    values[start[i] + j - first[i]] = s / values[start[j] + j - first[j]];
                } else {
                    if !(s > tol) {
                        return Err(Error::NotPositiveDefinite {
                            pivot: perm[i],
                            value: s,
                            context: "envelope Cholesky".into(),
                        });
                    }
                    values[start[i] + i - first[i]] = s.sqrt();
                }
            }
        }
        Ok(Self {
            perm,
            first,
            start,
            values,
        })
    }

    #[inline]
    fn l(&self, i: usize, j: usize) -> f64 {
        self.values[self.start[i] + j - self.first[i]]
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.perm.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let mut s = y[i];
            for k in self.first[i]..i {
                s -= self.l(i, k) * y[k];
            }
            y[i] = s / self.l(i, i);
        }
        for i in (0..n).rev() {
            let xi = y[i] / self.l(i, i);
            y[i] = xi;
            for k in self.first[i]..i {
                y[k] -= self.l(i, k) * xi;
            }
        }
        for (new, &old) in self.perm.iter().enumerate() {
            b[old] = y[new];
        }
    }

    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }
}

/// Symmetric positive definite factorization, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub enum SymmetricFactor {
    Dense(DenseCholesky),
    Skyline(SkylineCholesky),
}

impl SymmetricFactor {
    pub fn new(m: &SymmetricCsr) -> Result<Self> {
        if m.dim() > DENSE_LIMIT {
            SkylineCholesky::new(m).map(SymmetricFactor::Skyline)
        } else {
            DenseCholesky::new(&m.to_dense()).map(SymmetricFactor::Dense)
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SymmetricFactor::Dense(f) => f.l.nrows(),
            SymmetricFactor::Skyline(f) => f.perm.len(),
        }
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        match self {
            SymmetricFactor::Dense(f) => f.solve_in_place(b),
            SymmetricFactor::Skyline(f) => f.solve_in_place(b),
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// `max |(L Lᵀ)_ij - m_ij| / max |m_ij|` over the stored pattern.
    pub fn reconstruction_residual(&self, m: &SymmetricCsr) -> f64 {
        let scale = m.max_abs().max(f64::MIN_POSITIVE);
        match self {
            SymmetricFactor::Dense(f) => {
                let llt = &f.l * f.l.transpose();
                (llt - m.to_dense()).amax() / scale
            }
            SymmetricFactor::Skyline(f) => {
                let n = f.perm.len();
                let mut worst = 0.0_f64;
                for i in 0..n {
                    for j in f.first[i]..=i {
                        let k0 = f.first[i].max(f.first[j]);
                        let s: f64 = (k0..=j).map(|k| f.l(i, k) * f.l(j, k)).sum();
                        worst = worst.max((s - m.get(f.perm[i], f.perm[j])).abs());
                    }
                }
                worst / scale
            }
        }
    }
}

/// Reverse Cuthill-McKee ordering; `result[new] = old`.
///
/// Each connected component starts from a pseudo-peripheral vertex found by
/// repeated breadth-first sweeps.
pub fn reverse_cuthill_mckee(m: &SymmetricCsr) -> Vec<usize> {
    let n = m.dim();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| m.row(i).filter(|&(j, v)| j != i && v != 0.0).map(|(j, _)| j).collect())
        .collect();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_levels = |root: usize, mask: &[bool]| -> (usize, usize) {
        // (last vertex of the deepest level with minimum degree, depth)
        let mut dist = vec![usize::MAX; n];
        dist[root] = 0;
        let mut queue = VecDeque::from([root]);
        let mut last = root;
        while let Some(v) = queue.pop_front() {
            if dist[v] > dist[last] || (dist[v] == dist[last] && degree[v] < degree[last]) {
                last = v;
            }
            for &w in &adj[v] {
                if !mask[w] && dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        (last, dist[last])
    };

    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        let (mut start, _) = bfs_levels(seed, &visited);
        let mut ecc = bfs_levels(start, &visited).1;
        for _ in 0..8 {
            let (cand, _) = bfs_levels(start, &visited);
            let e = bfs_levels(cand, &visited).1;
            if e <= ecc {
                break;
            }
            start = cand;
            ecc = e;
        }
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Dense symmetric positive definite solve, used by block-level routines.
pub fn dense_spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let f = DenseCholesky::new(m)?;
    let mut out = rhs.clone();
    for mut col in out.column_iter_mut() {
        f.solve_in_place(col.as_mut_slice());
    }
    Ok(out)
}
