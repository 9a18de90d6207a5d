//! Convergence certification for twin (level-one) splits.
//!
//! Every line has a senior end (side a) and a junior end (side b). Stacking
//! the senior port potentials over the junior ones gives `û`, and
//! eliminating the inner unknowns of every subdomain gives `S û = β + ω̂`.
//! With `M` the per-end impedance and `J` the exchange of the two halves,
//! the line equations read `û_k + M ω̂_k = J û_{k−1} − M J ω̂_{k−1}`, so
//!
//! ```text
//! û_k = P û_{k−1} + γ
//! P = (I + M S)⁻¹ (J − M J S)
//! γ = (I + M S)⁻¹ (M + M J) β
//! ```
//!
//! When `M` commutes with `J` (equal impedance at both ends of each line)
//! this is `P = (I + M S)⁻¹ J (I − M S)`.

use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::SparseSymmetricSystem;
use crate::linalg::{classify_dense, Definiteness, SymmetricCsr, SymmetricFactor};
use crate::local::ImpedanceAssignment;
use crate::partition::SplitSystem;
use crate::runtime::IterationRecord;

/// Certification needs `ρ(P) < 1 − CERT_MARGIN`.
pub const CERT_MARGIN: f64 = 1e-10;

/// Largest `2m` handled by the dense certification path.
pub const MAX_BOUNDARY_UNKNOWNS: usize = 2000;

/// Solves an SPD system by symmetric factorization.
pub fn direct_solve(sys: &SparseSymmetricSystem) -> Result<Vec<f64>> {
    let factor = SymmetricFactor::new(&sys.to_csr())?;
    Ok(factor.solve(sys.rhs()))
}

/// Child of a boundary vertex on one side, or an inner vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GlobalUnknown {
    Senior(usize),
    Junior(usize),
    Inner(usize),
}

/// The split matrix in senior, junior, inner order.
#[derive(Debug, Clone)]
pub struct GlobalSplitMatrix {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub order: Vec<GlobalUnknown>,
    pub num_lines: usize,
}

fn require_twin_split(s: &SplitSystem) -> Result<()> {
    if s.split_level() > 1 {
        return Err(Error::Unsupported(
            "the global boundary operator covers twin splits only".into(),
        ));
    }
    Ok(())
}

/// Assembles the split matrix straight from the original matrix and the
/// scheme, without going through the subdomain systems.
pub fn split_global_matrix(s: &SplitSystem) -> Result<GlobalSplitMatrix> {
    require_twin_split(s)?;
    let scheme = &s.scheme;
    let m = scheme.boundary.len();
    let inner: Vec<usize> = (0..s.dim()).filter(|&v| scheme.assignment[v].is_some()).collect();
    let mut order: Vec<GlobalUnknown> = scheme.boundary.iter().map(|b| GlobalUnknown::Senior(b.vertex)).collect();
    order.extend(scheme.boundary.iter().map(|b| GlobalUnknown::Junior(b.vertex)));
    order.extend(inner.iter().map(|&v| GlobalUnknown::Inner(v)));
    let mut inner_pos = vec![usize::MAX; s.dim()];
    for (i, &v) in inner.iter().enumerate() {
        inner_pos[v] = 2 * m + i;
    }
    let mut boundary_pos = vec![usize::MAX; s.dim()];
    for (i, b) in scheme.boundary.iter().enumerate() {
        boundary_pos[b.vertex] = i;
    }
    // index of the child of boundary vertex `v` on subdomain `side`
    let child = |v: usize, side: usize| -> usize {
        let b = &scheme.boundary[boundary_pos[v]];
        if b.sides[0] == side {
            boundary_pos[v]
        } else {
            m + boundary_pos[v]
        }
    };

    let dim = 2 * m + inner.len();
    let mut a = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    let mut put = |i: usize, j: usize, v: f64| {
        a[(i, j)] += v;
        if i != j {
            a[(j, i)] += v;
        }
    };
    for b in &scheme.boundary {
        for (k, &side) in b.sides.iter().enumerate() {
            let c = child(b.vertex, side);
            put(c, c, b.weights[k]);
            rhs[c] += b.sources[k];
        }
    }
    for &v in &inner {
        rhs[inner_pos[v]] = s.rhs[v];
    }
    for (i, j, v) in s.global.upper_triplets() {
        match (scheme.assignment[i], scheme.assignment[j]) {
            (Some(_), Some(_)) => put(inner_pos[i], inner_pos[j], v),
            (Some(t), None) => put(inner_pos[i], child(j, t), v),
            (None, Some(t)) => put(child(i, t), inner_pos[j], v),
            (None, None) if i == j => {}
            (None, None) => {
                let es = scheme
                    .edges
                    .iter()
                    .find(|e| e.a == i && e.b == j)
                    .ok_or_else(|| Error::mismatch(format!("boundary edge ({i}, {j}) has no split")))?;
                for (&side, &w) in es.sides.iter().zip(&es.weights) {
                    put(child(i, side), child(j, side), w);
                }
            }
        }
    }
    Ok(GlobalSplitMatrix {
        matrix: a,
        rhs,
        order,
        num_lines: m,
    })
}

/// `max |Ā − Πᵀ blockdiag(Ã_j) Π|` for the recorded ordering, with the
/// same comparison for the right-hand sides.
pub fn reordering_residual(s: &SplitSystem) -> Result<f64> {
    let g = split_global_matrix(s)?;
    let index: std::collections::BTreeMap<GlobalUnknown, usize> =
        g.order.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let mut perm = Vec::new(); // position in Ā of each stacked local unknown
    for sub in &s.subdomains {
        for l in 0..sub.dim() {
            let v = sub.parent_of(l);
            let u = if l < sub.num_ports() {
                let b = s.scheme.boundary_split(v).expect("port parent is on the boundary");
                if b.sides[0] == sub.id {
                    GlobalUnknown::Senior(v)
                } else {
                    GlobalUnknown::Junior(v)
                }
            } else {
                GlobalUnknown::Inner(v)
            };
            perm.push(index[&u]);
        }
    }
    if perm.len() != g.order.len() {
        return Err(Error::mismatch("split unknowns do not cover the reordered system"));
    }
    let mut blocks = DMatrix::zeros(perm.len(), perm.len());
    let mut brhs = DVector::zeros(perm.len());
    let mut offset = 0;
    for sub in &s.subdomains {
        for (i, j, v) in sub.matrix.upper_triplets() {
            blocks[(perm[offset + i], perm[offset + j])] = v;
            blocks[(perm[offset + j], perm[offset + i])] = v;
        }
        for (l, r) in sub.rhs.iter().enumerate() {
            brhs[perm[offset + l]] = *r;
        }
        offset += sub.dim();
    }
    let scale = g.matrix.amax().max(1.0);
    Ok(((&g.matrix - blocks).amax() / scale).max((&g.rhs - brhs).amax() / g.rhs.amax().max(1.0)))
}

/// Boundary operator of a twin split under given impedances.
#[derive(Debug, Clone)]
pub struct GlobalBoundaryOperator {
    /// Schur complement on the stacked (senior, junior) port potentials.
    pub s: DMatrix<f64>,
    /// Impedance seen by each line end.
    pub m: DMatrix<f64>,
    /// Exchange of senior and junior halves.
    pub j: DMatrix<f64>,
    /// Condensed sources `f − E D⁻¹ g`.
    pub beta: DVector<f64>,
    /// Parent vertex of each line.
    pub parents: Vec<usize>,
}

impl GlobalBoundaryOperator {
    pub fn num_lines(&self) -> usize {
        self.parents.len()
    }
}

/// Builds `S`, `M`, `J` and `β` subdomain by subdomain.
pub fn build_global_operator(s: &SplitSystem, z: &ImpedanceAssignment) -> Result<GlobalBoundaryOperator> {
    require_twin_split(s)?;
    let m = s.vtls.len();
    if 2 * m > MAX_BOUNDARY_UNKNOWNS {
        return Err(Error::Unsupported(format!(
            "{} boundary unknowns exceed the dense certification limit of {MAX_BOUNDARY_UNKNOWNS}",
            2 * m
        )));
    }
    let zs = z.matrices(s)?;
    let mut big_s = DMatrix::zeros(2 * m, 2 * m);
    let mut big_m = DMatrix::zeros(2 * m, 2 * m);
    let mut beta = DVector::zeros(2 * m);
    for (sub, zj) in s.subdomains.iter().zip(&zs) {
        let np = sub.num_ports();
        // stacked index of each port (one channel per port in a twin split)
        let idx: Vec<usize> = sub
            .channels
            .iter()
            .map(|c| {
                let l = &s.vtls[c.vtl];
                if l.a.subdomain == sub.id {
                    c.vtl
                } else {
                    m + c.vtl
                }
            })
            .collect();
        let port_idx: Vec<usize> = (0..np)
            .map(|p| idx[sub.ports[p].channels[0]])
            .collect();
        let (sj, bj) = condense(&sub.matrix, &sub.rhs, np)
            .map_err(|e| Error::Singular(format!("inner block of subdomain {}: {e}", sub.id)))?;
        for p in 0..np {
            beta[port_idx[p]] += bj[p];
            for q in 0..np {
                big_s[(port_idx[p], port_idx[q])] += sj[(p, q)];
            }
        }
        let zd = zj.to_dense();
        for c in 0..idx.len() {
            for d in 0..idx.len() {
                big_m[(idx[c], idx[d])] = zd[(c, d)];
            }
        }
    }
    let mut j = DMatrix::zeros(2 * m, 2 * m);
    for l in 0..m {
        j[(l, m + l)] = 1.0;
        j[(m + l, l)] = 1.0;
    }
    Ok(GlobalBoundaryOperator {
        s: big_s,
        m: big_m,
        j,
        beta,
        parents: s.vtls.iter().map(|l| l.parent).collect(),
    })
}

/// Port Schur complement `C − E D⁻¹ F` and condensed sources `f − E D⁻¹ g`
/// of a local matrix ordered ports first.
fn condense(a: &SymmetricCsr, b: &[f64], np: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = a.dim();
    let ni = n - np;
    let mut c = DMatrix::zeros(np, np);
    for p in 0..np {
        for (q, v) in a.row(p) {
            if q < np {
                c[(p, q)] = v;
            }
        }
    }
    let mut f = b[..np].to_vec();
    if ni == 0 {
        return Ok((c, f));
    }
    let d = SymmetricCsr::from_triplets(
        ni,
        a.upper_triplets()
            .filter(|&(i, j, _)| i >= np && j >= np)
            .map(|(i, j, v)| (i - np, j - np, v)),
    )?;
    let factor = SymmetricFactor::new(&d)?;
    let e_dot = |p: usize, y: &[f64]| -> f64 {
        a.row(p).filter(|&(q, _)| q >= np).map(|(q, v)| v * y[q - np]).sum()
    };
    for q in 0..np {
        let mut col = vec![0.0; ni];
        for (i, v) in a.row(q) {
            if i >= np {
                col[i - np] = v;
            }
        }
        factor.solve_in_place(&mut col);
        for p in 0..np {
            c[(p, q)] -= e_dot(p, &col);
        }
    }
    let y = factor.solve(&b[np..]);
    for (p, fp) in f.iter_mut().enumerate() {
        *fp -= e_dot(p, &y);
    }
    // symmetrize away rounding
    let c = (&c + c.transpose()) * 0.5;
    Ok((c, f))
}

/// Iteration matrix `P` and offset `γ`.
#[derive(Debug, Clone)]
pub struct IterationMatrix {
    pub p: DMatrix<f64>,
    pub gamma: DVector<f64>,
}

pub fn iteration_matrix(op: &GlobalBoundaryOperator) -> Result<IterationMatrix> {
    let n = op.s.nrows();
    let ms = &op.m * &op.s;
    let lhs = DMatrix::identity(n, n) + &ms;
    let lu = lhs.lu();
    let rhs = &op.j - &op.m * &op.j * &op.s;
    let p = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("I + M S is singular; the configuration is not conformal".into()))?;
    let g_rhs = (&op.m + &op.m * &op.j) * &op.beta;
    let gamma = lu.solve(&g_rhs).expect("same factorization succeeded above");
    Ok(IterationMatrix { p, gamma })
}

/// Largest eigenvalue modulus, from a real Schur form with a power-iteration
/// fallback.
pub fn spectral_radius(p: &DMatrix<f64>) -> f64 {
    if p.nrows() == 0 {
        return 0.0;
    }
    if let Some(schur) = Schur::try_new(p.clone(), f64::EPSILON, 100 * p.nrows().max(10)) {
        return schur
            .complex_eigenvalues()
            .iter()
            .map(|c: &Complex<f64>| c.norm())
            .fold(0.0, f64::max);
    }
    power_iteration_radius(p, 1e-8, 100_000)
}

/// `lim ‖P^k v‖^{1/k}` estimated from successive norm ratios, averaged over
/// windows of two steps so that a dominant complex pair does not stall it.
pub fn power_iteration_radius(p: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let n = p.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618).fract());
    v /= v.norm();
    let mut prev = f64::INFINITY;
    for _ in 0..max_iter {
        let w = p * &v;
        let w2 = p * &w;
        let n2 = w2.norm();
        if n2 == 0.0 {
            return 0.0;
        }
        let est = n2.sqrt();
        v = w2 / n2;
        if (est - prev).abs() <= tol * est.max(f64::MIN_POSITIVE) {
            return est;
        }
        prev = est;
    }
    prev
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub rho: f64,
    pub certified: bool,
    pub cert_margin: f64,
    pub lines: usize,
    /// `S` passes the positive definite factorization test.
    pub s_positive_definite: bool,
    /// Smallest eigenvalue of `√M S √M`.
    pub min_scaled_eigenvalue: f64,
    /// `max |√M⁻¹ J √M − J|`.
    pub conjugation_residual: f64,
    /// `max |J² − I|`.
    pub exchange_square_residual: f64,
    /// `max |J M − M J|`.
    pub commutator_residual: f64,
}

impl Certificate {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn spd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let q = &eig.eigenvectors;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let inv_root = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    (q * root * q.transpose(), q * inv_root * q.transpose())
}

pub fn certify_convergence(op: &GlobalBoundaryOperator) -> Result<Certificate> {
    let it = iteration_matrix(op)?;
    let rho = spectral_radius(&it.p);
    let n = op.s.nrows();
    let (root, inv_root) = spd_sqrt(&op.m);
    let t = &root * &op.s * &root;
    let t = (&t + t.transpose()) * 0.5;
    let min_scaled_eigenvalue = if n == 0 {
        0.0
    } else {
        SymmetricEigen::new(t).eigenvalues.min()
    };
    let max0 = |m: DMatrix<f64>| if m.is_empty() { 0.0 } else { m.amax() };
    Ok(Certificate {
        rho,
        certified: rho < 1.0 - CERT_MARGIN,
        cert_margin: CERT_MARGIN,
        lines: op.num_lines(),
        s_positive_definite: n == 0 || classify_dense(&op.s) == Definiteness::PositiveDefinite,
        min_scaled_eigenvalue,
        conjugation_residual: max0(&inv_root * &op.j * &root - &op.j),
        exchange_square_residual: max0(&op.j * &op.j - DMatrix::identity(n, n)),
        commutator_residual: max0(&op.j * &op.m - &op.m * &op.j),
    })
}

/// Builds the operator and certifies it.
pub fn certify(s: &SplitSystem, z: &ImpedanceAssignment) -> Result<Certificate> {
    certify_convergence(&build_global_operator(s, z)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPointCheck {
    /// `max |u_se − u_ju|` at the fixed point.
    pub potential_mismatch: f64,
    /// `max |ω_se + ω_ju|` at the fixed point.
    pub current_mismatch: f64,
    /// `max |u_se − x*|` over the boundary vertices.
    pub oracle_mismatch: f64,
}

/// Solves `(I − P) û = γ` and compares the fixed point with `x_star`.
pub fn fixed_point_check(op: &GlobalBoundaryOperator, x_star: &[f64]) -> Result<FixedPointCheck> {
    let m = op.num_lines();
    if m == 0 {
        return Ok(FixedPointCheck {
            potential_mismatch: 0.0,
            current_mismatch: 0.0,
            oracle_mismatch: 0.0,
        });
    }
    let it = iteration_matrix(op)?;
    let a = DMatrix::identity(2 * m, 2 * m) - &it.p;
    let u = a
        .lu()
        .solve(&it.gamma)
        .ok_or_else(|| Error::Singular("I − P is singular, so ρ(P) ≥ 1".into()))?;
    let omega = &op.s * &u - &op.beta;
    let mut out = FixedPointCheck {
        potential_mismatch: 0.0,
        current_mismatch: 0.0,
        oracle_mismatch: 0.0,
    };
    for l in 0..m {
        out.potential_mismatch = out.potential_mismatch.max((u[l] - u[m + l]).abs());
        out.current_mismatch = out.current_mismatch.max((omega[l] + omega[m + l]).abs());
        out.oracle_mismatch = out.oracle_mismatch.max((u[l] - x_star[op.parents[l]]).abs());
    }
    Ok(out)
}

/// Per-round contraction of the boundary change over the last stretch of
/// rounds before it reaches `floor`; `None` when fewer than three usable
/// rounds exist.
pub fn empirical_contraction(records: &[IterationRecord], floor: f64) -> Option<f64> {
    let usable = records
        .iter()
        .position(|r| !(r.max_boundary_delta > floor))
        .unwrap_or(records.len());
    if usable < 3 {
        return None;
    }
    let span = (usable / 2).clamp(2, 20);
    let end = usable - 1;
    let start = end - span;
    let (d0, d1) = (records[start].max_boundary_delta, records[end].max_boundary_delta);
    Some((d1 / d0).powf(1.0 / span as f64))
}
