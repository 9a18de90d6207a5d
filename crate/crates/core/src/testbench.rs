//! Shifted 5-point grid Laplacians with regular strip and block partitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Edge, ElectricGraph, Vertex};
use crate::partition::{
    default_conformal_scheme, split, BoundarySplit, EdgeSplit, PartitionScheme, SplitSystem, SubdomainId,
};

/// Grid sides giving n = 289, 1089, 2401, 4225, 9409, 14641.
pub const NATIVE_SIDES: [usize; 6] = [17, 33, 49, 65, 97, 121];

pub const DEFAULT_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Whole,
    /// Vertical strips separated by single boundary columns.
    Strips(usize),
    /// Blocks separated by boundary rows and columns; cross points are split
    /// four ways.
    Blocks { rows: usize, cols: usize },
}

impl Layout {
    pub fn parts(&self) -> usize {
        match *self {
            Layout::Whole => 1,
            Layout::Strips(p) => p,
            Layout::Blocks { rows, cols } => rows * cols,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhsKind {
    Ones,
    /// Uniform on [-1, 1) from a seeded generator.
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub m: usize,
    pub sigma: f64,
    pub layout: Layout,
    pub rhs: RhsKind,
}

impl GridSpec {
    pub fn new(m: usize, layout: Layout) -> Self {
        Self {
            m,
            sigma: DEFAULT_SIGMA,
            layout,
            rhs: RhsKind::Ones,
        }
    }

    /// Grid whose vertex count is closest to `n`.
    pub fn with_size(n: usize, layout: Layout) -> Self {
        Self::new((n as f64).sqrt().round() as usize, layout)
    }

    pub fn n(&self) -> usize {
        self.m * self.m
    }
}

/// Vertex `r * m + c`; edges of weight −1 between 4-neighbours; vertex
/// weight `degree + σ`.
pub fn grid_system(spec: &GridSpec) -> Result<ElectricGraph> {
    let m = spec.m;
    if m < 2 {
        return Err(Error::malformed("grid side must be at least 2"));
    }
    if !(spec.sigma >= 0.0) {
        return Err(Error::malformed("grid shift must be non-negative"));
    }
    let mut edges = Vec::with_capacity(2 * m * (m - 1));
    let mut degree = vec![0usize; m * m];
    for r in 0..m {
        for c in 0..m {
            let v = r * m + c;
            if c + 1 < m {
                edges.push(Edge { a: v, b: v + 1, weight: -1.0 });
                degree[v] += 1;
                degree[v + 1] += 1;
            }
            if r + 1 < m {
                edges.push(Edge { a: v, b: v + m, weight: -1.0 });
                degree[v] += 1;
                degree[v + m] += 1;
            }
        }
    }
    let sources: Vec<f64> = match spec.rhs {
        RhsKind::Ones => vec![1.0; m * m],
        RhsKind::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect()
        }
    };
    let vertices = degree
        .iter()
        .zip(sources)
        .map(|(&d, source)| Vertex {
            weight: d as f64 + spec.sigma,
            source,
        })
        .collect();
    ElectricGraph::new(vertices, edges)
}

/// Splits `m` lines into `parts` bands separated by single cut lines; wider
/// bands come first. Returns `Some(band)` or `None` for a cut line.
fn bands(m: usize, parts: usize) -> Result<Vec<Option<usize>>> {
    if parts == 0 {
        return Err(Error::malformed("partition needs at least one part"));
    }
    if 2 * parts - 1 > m {
        return Err(Error::malformed(format!(
            "{parts} bands need at least {} grid lines, grid has {m}",
            2 * parts - 1
        )));
    }
    let free = m - (parts - 1);
    let (base, extra) = (free / parts, free % parts);
    let mut out = Vec::with_capacity(m);
    for b in 0..parts {
        let width = base + usize::from(b < extra);
        out.extend(std::iter::repeat_n(Some(b), width));
        if b + 1 < parts {
            out.push(None);
        }
    }
    Ok(out)
}

/// Inner vertices per block; `None` on cut lines.
pub fn grid_assignment(spec: &GridSpec) -> Result<Vec<Option<SubdomainId>>> {
    let m = spec.m;
    let (rows, cols) = match spec.layout {
        Layout::Whole => (1, 1),
        Layout::Strips(p) => (1, p),
        Layout::Blocks { rows, cols } => (rows, cols),
    };
    let rb = bands(m, rows)?;
    let cb = bands(m, cols)?;
    let mut out = Vec::with_capacity(m * m);
    for r in 0..m {
        for c in 0..m {
            out.push(match (rb[r], cb[c]) {
                (Some(i), Some(j)) => Some(i * cols + j),
                _ => None,
            });
        }
    }
    Ok(out)
}

pub fn grid_partition(spec: &GridSpec, g: &ElectricGraph) -> Result<(Vec<Option<SubdomainId>>, PartitionScheme)> {
    let assignment = grid_assignment(spec)?;
    let scheme = default_conformal_scheme(g, &assignment)?;
    Ok((assignment, scheme))
}

/// Graph and split system for a grid case.
pub fn grid_case(spec: &GridSpec) -> Result<(ElectricGraph, SplitSystem)> {
    let g = grid_system(spec)?;
    let (_, scheme) = grid_partition(spec, &g)?;
    let s = split(&g, &scheme)?;
    Ok((g, s))
}

/// A small random twin split: graph, scheme and one impedance per line.
#[derive(Debug, Clone)]
pub struct RandomCase {
    pub graph: ElectricGraph,
    pub scheme: PartitionScheme,
    pub impedances: Vec<f64>,
}

/// Strictly diagonally dominant symmetric system of dimension `3..=max_dim`
/// with off-diagonal entries of either sign, torn into two subdomains.
/// Every boundary vertex is split between both sides with random shares
/// that keep each child strictly dominant, so every subgraph is SPD.
pub fn random_case(seed: u64, max_dim: usize) -> Result<RandomCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=max_dim.max(3));
    // 0 and 1 label inner vertices, 2 marks the boundary
    let mut label: Vec<u8> = (0..n)
        .map(|_| if rng.random_bool(0.3) { 2 } else { rng.random_range(0..2) })
        .collect();
    label[rng.random_range(0..n)] = 2;
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(0.4) {
                let w: f64 = rng.random_range(0.1..2.0);
                let sign = if rng.random_bool(0.7) { -1.0 } else { 1.0 };
                edges.push(Edge { a, b, weight: sign * w });
            }
        }
    }
    for e in &edges {
        if label[e.a] < 2 && label[e.b] < 2 && label[e.a] != label[e.b] {
            label[e.b] = 2;
        }
    }
    let mut abs_sum = vec![0.0; n];
    for e in &edges {
        abs_sum[e.a] += e.weight.abs();
        abs_sum[e.b] += e.weight.abs();
    }
    let vertices: Vec<Vertex> = abs_sum
        .iter()
        .map(|&s| Vertex {
            weight: s + rng.random_range(0.05..2.0),
            source: rng.random_range(-1.0..1.0),
        })
        .collect();
    let graph = ElectricGraph::new(vertices, edges)?;

    let boundary_vertex = |v: usize| label[v] == 2;
    let mut inherited = vec![[0.0_f64; 2]; n];
    let mut edge_splits = Vec::new();
    for e in graph.edges() {
        match (boundary_vertex(e.a), boundary_vertex(e.b)) {
            (true, true) => {
                let t = rng.random_range(0.0..=1.0);
                let w0 = t * e.weight;
                let w1 = e.weight - w0;
                for v in [e.a, e.b] {
                    inherited[v][0] += w0.abs();
                    inherited[v][1] += w1.abs();
                }
                edge_splits.push(EdgeSplit { a: e.a, b: e.b, sides: vec![0, 1], weights: vec![w0, w1] });
            }
            (true, false) => inherited[e.a][label[e.b] as usize] += e.weight.abs(),
            (false, true) => inherited[e.b][label[e.a] as usize] += e.weight.abs(),
            (false, false) => {}
        }
    }
    let mut boundary = Vec::new();
    for v in (0..n).filter(|&v| boundary_vertex(v)) {
        let vx = graph.vertex(v);
        let surplus = vx.weight - inherited[v][0] - inherited[v][1];
        let f = rng.random_range(0.1..0.9);
        let w0 = inherited[v][0] + f * surplus;
        let t = rng.random_range(0.0..=1.0);
        let s0 = t * vx.source;
        boundary.push(BoundarySplit {
            vertex: v,
            sides: vec![0, 1],
            weights: vec![w0, vx.weight - w0],
            sources: vec![s0, vx.source - s0],
        });
    }
    let scheme = PartitionScheme {
        num_subdomains: 2,
        assignment: label.iter().map(|&l| (l < 2).then_some(l as usize)).collect(),
        boundary,
        edges: edge_splits,
    };
    let impedances = (0..scheme.boundary.len()).map(|_| 10f64.powf(rng.random_range(-1.0..1.0))).collect();
    Ok(RandomCase {
        graph,
        scheme,
        impedances,
    })
}
