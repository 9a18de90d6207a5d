//! Symmetric linear systems and their electric-graph form.
//!
//! A vertex carries the diagonal weight `a_ii` and the current source `b_i`;
//! an edge carries the off-diagonal weight `a_ij`. The two representations
//! are one-to-one and convert without touching any value.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{classify, Definiteness, SymmetricCsr};

/// Sparse symmetric system `A x = b`, upper triangle stored.
///
/// Entries are kept sorted by `(row, col)`; every diagonal entry is present
/// (zero when absent from the input) and zero off-diagonal entries are
/// dropped, so the stored form is canonical.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetricSystem {
    dim: usize,
    entries: Vec<(usize, usize, f64)>,
    rhs: Vec<f64>,
}

impl SparseSymmetricSystem {
    /// Entries may be given in either triangle; `(i, j)` and `(j, i)` name the
    /// same coefficient and may only appear once.
    pub fn new(dim: usize, entries: Vec<(usize, usize, f64)>, rhs: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::malformed("system dimension must be at least 1"));
        }
        if rhs.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                actual: rhs.len(),
                context: "right-hand side length",
            });
        }
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, v) in entries {
            if i >= dim || j >= dim {
                return Err(Error::malformed(format!(
                    "entry ({i}, {j}) outside a {dim}x{dim} system"
                )));
            }
            if !v.is_finite() {
                return Err(Error::malformed(format!("entry ({i}, {j}) is not finite")));
            }
            let key = (i.min(j), i.max(j));
            if map.insert(key, v).is_some() {
                return Err(Error::malformed(format!(
                    "duplicate entry for ({}, {})",
                    key.0, key.1
                )));
            }
        }
        for i in 0..dim {
            map.entry((i, i)).or_insert(0.0);
        }
        let entries = map
            .into_iter()
            .filter(|&((i, j), v)| i == j || v != 0.0)
            .map(|((i, j), v)| (i, j, v))
            .collect();
        Ok(Self { dim, entries, rhs })
    }

    pub fn from_dense(a: &DMatrix<f64>, b: &[f64]) -> Result<Self> {
        let n = a.nrows();
        let mut entries = Vec::new();
        for i in 0..n {
            for j in i..a.ncols() {
                if (a[(i, j)] - a[(j, i)]).abs() > 0.0 {
                    return Err(Error::malformed(format!("matrix not symmetric at ({i}, {j})")));
                }
                if i == j || a[(i, j)] != 0.0 {
                    entries.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::new(n, entries, b.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Upper-triangle entries `(i, j, a_ij)` with `i <= j`.
    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn to_csr(&self) -> SymmetricCsr {
        SymmetricCsr::from_triplets(self.dim, self.entries.iter().copied())
            .expect("entries validated on construction")
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.to_csr().to_dense()
    }

    pub fn rhs_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.rhs)
    }

    /// `‖A x − b‖∞`
    pub fn residual_inf(&self, x: &[f64]) -> f64 {
        residual_inf(&self.to_csr(), &self.rhs, x)
    }
}

pub(crate) fn residual_inf(a: &SymmetricCsr, b: &[f64], x: &[f64]) -> f64 {
    a.matvec(x)
        .iter()
        .zip(b)
        .fold(0.0_f64, |m, (ax, bi)| m.max((ax - bi).abs()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vertex {
    /// Diagonal coefficient `a_ii`.
    pub weight: f64,
    /// Inflow current source `b_i`.
    pub source: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Weighted graph with per-vertex current sources. Vertex ids are the
/// indices `0..n`; edges are stored with `a < b`, sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectricGraph {
    vertices: Vec<Vertex>,
    edges: Vec<Edge>,
}

impl ElectricGraph {
    pub fn new(vertices: Vec<Vertex>, edges: Vec<Edge>) -> Result<Self> {
        let n = vertices.len();
        if n == 0 {
            return Err(Error::malformed("graph has no vertices"));
        }
        let mut seen = BTreeMap::new();
        for e in &edges {
            if e.a == e.b {
                return Err(Error::malformed(format!("self loop on vertex {}", e.a)));
            }
            if e.a >= n || e.b >= n {
                return Err(Error::malformed(format!(
                    "edge ({}, {}) references a missing vertex",
                    e.a, e.b
                )));
            }
            let key = (e.a.min(e.b), e.a.max(e.b));
            if seen.insert(key, e.weight).is_some() {
                return Err(Error::malformed(format!(
                    "duplicate edge ({}, {})",
                    key.0, key.1
                )));
            }
        }
        let edges = seen
            .into_iter()
            .map(|((a, b), weight)| Edge { a, b, weight })
            .collect();
        Ok(Self { vertices, edges })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn vertex(&self, id: usize) -> Vertex {
        self.vertices[id]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Neighbour lists `(vertex, edge weight)`, sorted by neighbour id.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for e in &self.edges {
            adj[e.a].push((e.b, e.weight));
            adj[e.b].push((e.a, e.weight));
        }
        for row in &mut adj {
            row.sort_by_key(|&(v, _)| v);
        }
        adj
    }

    pub fn edge_weight(&self, a: usize, b: usize) -> Option<f64> {
        let key = (a.min(b), a.max(b));
        self.edges
            .binary_search_by(|e| (e.a, e.b).cmp(&key))
            .ok()
            .map(|pos| self.edges[pos].weight)
    }

    pub fn sources(&self) -> Vec<f64> {
        self.vertices.iter().map(|v| v.source).collect()
    }
}

pub fn system_to_graph(sys: &SparseSymmetricSystem) -> ElectricGraph {
    let mut vertices: Vec<Vertex> = sys
        .rhs
        .iter()
        .map(|&source| Vertex {
            weight: 0.0,
            source,
        })
        .collect();
    let mut edges = Vec::new();
    for &(i, j, v) in &sys.entries {
        if i == j {
            vertices[i].weight = v;
        } else {
            edges.push(Edge { a: i, b: j, weight: v });
        }
    }
    ElectricGraph { vertices, edges }
}

pub fn graph_to_system(g: &ElectricGraph) -> SparseSymmetricSystem {
    let mut entries: Vec<(usize, usize, f64)> = g
        .vertices
        .iter()
        .enumerate()
        .map(|(i, v)| (i, i, v.weight))
        .collect();
    entries.extend(g.edges.iter().filter(|e| e.weight != 0.0).map(|e| (e.a, e.b, e.weight)));
    entries.sort_by_key(|&(i, j, _)| (i, j));
    SparseSymmetricSystem {
        dim: g.vertices.len(),
        entries,
        rhs: g.sources(),
    }
}

/// True iff a Cholesky factorization with pivots above
/// `PIVOT_TOL * max|a_ii|` exists.
pub fn is_spd(sys: &SparseSymmetricSystem) -> bool {
    classify(&sys.to_csr()) == Definiteness::PositiveDefinite
}

/// The six-unknown running example: a 6x6 SPD system with `b = (1, .., 6)`.
pub fn example_system() -> SparseSymmetricSystem {
    let entries = vec![
        (0, 0, 6.0),
        (1, 1, 7.0),
        (2, 2, 8.0),
        (3, 3, 9.0),
        (4, 4, 10.0),
        (5, 5, 11.0),
        (0, 1, -1.0),
        (0, 2, -2.0),
        (1, 3, -1.0),
        (2, 3, -2.0),
        (2, 4, -1.0),
        (3, 5, -3.0),
        (4, 5, -5.0),
    ];
    SparseSymmetricSystem::new(6, entries, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        .expect("static example is valid")
}
