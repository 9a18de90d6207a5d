//! Electric vertex splitting.
//!
//! Boundary vertices are torn into children, one per adjacent subdomain.
//! Each child receives a share of the parent's weight and current source,
//! edges running along the boundary are shared between the sides they
//! touch, and every child becomes a port with an unknown inflow current.
//! Twin children are joined by virtual transmission lines: one line for a
//! two-way split, a ring of four for a four-way split at a cross point.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ElectricGraph, SparseSymmetricSystem};
use crate::io::{write_matrix_market, write_vector};
use crate::linalg::{classify, Definiteness, SymmetricCsr};

pub type SubdomainId = usize;

/// Relative tolerance on share sums (weights, sources, edge weights).
pub const CONSERVATION_TOL: f64 = 1e-12;

/// How one boundary vertex is torn: one child per entry of `sides`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySplit {
    pub vertex: usize,
    /// Subdomains receiving a child. Two sides give a twin split; four sides
    /// give a four-way split whose lines run around the ring in this order.
    pub sides: Vec<SubdomainId>,
    /// Share of `a_ii` per side.
    pub weights: Vec<f64>,
    /// Share of `b_i` per side.
    pub sources: Vec<f64>,
}

impl BoundarySplit {
    pub fn level(&self) -> usize {
        match self.sides.len() {
            2 => 1,
            4 => 2,
            _ => 0,
        }
    }
}

/// Shares of an edge whose endpoints are both boundary vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSplit {
    pub a: usize,
    pub b: usize,
    pub sides: Vec<SubdomainId>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionScheme {
    pub num_subdomains: usize,
    /// Owning subdomain of each inner vertex; `None` marks a boundary vertex.
    pub assignment: Vec<Option<SubdomainId>>,
    /// Sorted by vertex.
    pub boundary: Vec<BoundarySplit>,
    /// Sorted by `(a, b)` with `a < b`.
    pub edges: Vec<EdgeSplit>,
}

impl PartitionScheme {
    /// Single subdomain, nothing split.
    pub fn trivial(n: usize) -> Self {
        Self {
            num_subdomains: 1,
            assignment: vec![Some(0); n],
            boundary: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// 1 for twin splits only, 2 when any vertex is split four ways, 0 when
    /// nothing is split.
    pub fn split_level(&self) -> usize {
        self.boundary.iter().map(BoundarySplit::level).max().unwrap_or(0)
    }

    pub fn boundary_split(&self, vertex: usize) -> Option<&BoundarySplit> {
        self.boundary
            .binary_search_by_key(&vertex, |b| b.vertex)
            .ok()
            .map(|i| &self.boundary[i])
    }

    fn edge_split(&self, a: usize, b: usize) -> Option<&EdgeSplit> {
        let key = (a.min(b), a.max(b));
        self.edges
            .binary_search_by(|e| (e.a, e.b).cmp(&key))
            .ok()
            .map(|i| &self.edges[i])
    }

    fn normalize(&mut self) {
        self.boundary.sort_by_key(|b| b.vertex);
        for e in &mut self.edges {
            if e.a > e.b {
                std::mem::swap(&mut e.a, &mut e.b);
            }
        }
        self.edges.sort_by_key(|e| (e.a, e.b));
    }

    /// Checks the scheme against `g`: shares conserve weights, sources and
    /// edge weights, and every edge is representable after the split.
    pub fn validate(&self, g: &ElectricGraph) -> Result<()> {
        let n = g.num_vertices();
        if self.assignment.len() != n {
            return Err(Error::mismatch(format!(
                "assignment covers {} vertices, graph has {n}",
                self.assignment.len()
            )));
        }
        if self.num_subdomains == 0 {
            return Err(Error::mismatch("scheme has no subdomains"));
        }
        for (v, a) in self.assignment.iter().enumerate() {
            if let Some(s) = a {
                if *s >= self.num_subdomains {
                    return Err(Error::mismatch(format!(
                        "vertex {v} assigned to subdomain {s} of {}",
                        self.num_subdomains
                    )));
                }
            }
        }
        let mut listed = BTreeSet::new();
        for b in &self.boundary {
            if b.vertex >= n {
                return Err(Error::mismatch(format!("boundary vertex {} out of range", b.vertex)));
            }
            if !listed.insert(b.vertex) {
                return Err(Error::mismatch(format!("boundary vertex {} listed twice", b.vertex)));
            }
            if self.assignment[b.vertex].is_some() {
                return Err(Error::mismatch(format!(
                    "vertex {} is both assigned and on the boundary",
                    b.vertex
                )));
            }
            if b.level() == 0 {
                return Err(Error::mismatch(format!(
                    "boundary vertex {} has {} sides; only 2 or 4 are supported",
                    b.vertex,
                    b.sides.len()
                )));
            }
            let distinct: BTreeSet<_> = b.sides.iter().collect();
            if distinct.len() != b.sides.len() || b.sides.iter().any(|&s| s >= self.num_subdomains) {
                return Err(Error::mismatch(format!("boundary vertex {} has invalid sides", b.vertex)));
            }
            if b.weights.len() != b.sides.len() || b.sources.len() != b.sides.len() {
                return Err(Error::mismatch(format!(
                    "boundary vertex {} share lists do not match its sides",
                    b.vertex
                )));
            }
            let vx = g.vertex(b.vertex);
            check_sum(&b.weights, vx.weight, || format!("weight shares of vertex {}", b.vertex))?;
            check_sum(&b.sources, vx.source, || format!("source shares of vertex {}", b.vertex))?;
        }
        for (v, a) in self.assignment.iter().enumerate() {
            if a.is_none() && !listed.contains(&v) {
                return Err(Error::mismatch(format!("unassigned vertex {v} has no boundary split")));
            }
        }
        for e in g.edges() {
            match (self.assignment[e.a], self.assignment[e.b]) {
                (Some(sa), Some(sb)) if sa != sb => {
                    return Err(Error::mismatch(format!(
                        "edge ({}, {}) crosses subdomains {sa} and {sb} without a boundary endpoint",
                        e.a, e.b
                    )));
                }
                (Some(_), Some(_)) => {}
                (Some(s), None) | (None, Some(s)) => {
                    let bv = if self.assignment[e.a].is_none() { e.a } else { e.b };
                    let split = self.boundary_split(bv).expect("checked above");
                    if !split.sides.contains(&s) {
                        return Err(Error::mismatch(format!(
                            "edge ({}, {}) reaches subdomain {s}, which has no child of boundary vertex {bv}",
                            e.a, e.b
                        )));
                    }
                }
                (None, None) => {
                    let es = self.edge_split(e.a, e.b).ok_or_else(|| {
                        Error::mismatch(format!("boundary edge ({}, {}) has no split", e.a, e.b))
                    })?;
                    let sa = &self.boundary_split(e.a).unwrap().sides;
                    let sb = &self.boundary_split(e.b).unwrap().sides;
                    if es.sides.len() != es.weights.len()
                        || es.sides.iter().any(|s| !sa.contains(s) || !sb.contains(s))
                    {
                        return Err(Error::mismatch(format!(
                            "boundary edge ({}, {}) shares must go to common sides",
                            e.a, e.b
                        )));
                    }
                    check_sum(&es.weights, e.weight, || format!("edge ({}, {}) shares", e.a, e.b))?;
                }
            }
        }
        for es in &self.edges {
            let both_boundary =
                self.assignment.get(es.a).is_some_and(Option::is_none) && self.assignment.get(es.b).is_some_and(Option::is_none);
            if !both_boundary || g.edge_weight(es.a, es.b).is_none() {
                return Err(Error::mismatch(format!(
                    "edge split ({}, {}) does not name a boundary edge",
                    es.a, es.b
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        let doc = SchemeDoc {
            num_subdomains: self.num_subdomains,
            assignment: self
                .assignment
                .iter()
                .map(|a| a.map_or(-1, |s| s as i64))
                .collect(),
            boundary: self
                .boundary
                .iter()
                .map(|b| BoundaryDoc {
                    vertex: b.vertex,
                    sides: b.sides.clone(),
                    weights: b.weights.clone(),
                    sources: b.sources.clone(),
                })
                .collect(),
            edge: self
                .edges
                .iter()
                .map(|e| EdgeDoc {
                    a: e.a,
                    b: e.b,
                    sides: e.sides.clone(),
                    weights: e.weights.clone(),
                })
                .collect(),
        };
        Ok(toml::to_string(&doc)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: SchemeDoc = toml::from_str(text)?;
        let assignment = doc
            .assignment
            .iter()
            .map(|&a| match a {
                -1 => Ok(None),
                a if a >= 0 => Ok(Some(a as usize)),
                a => Err(Error::malformed(format!("invalid subdomain id {a}"))),
            })
            .collect::<Result<_>>()?;
        let mut scheme = Self {
            num_subdomains: doc.num_subdomains,
            assignment,
            boundary: doc
                .boundary
                .into_iter()
                .map(|b| BoundarySplit {
                    vertex: b.vertex,
                    sides: b.sides,
                    weights: b.weights,
                    sources: b.sources,
                })
                .collect(),
            edges: doc
                .edge
                .into_iter()
                .map(|e| EdgeSplit {
                    a: e.a,
                    b: e.b,
                    sides: e.sides,
                    weights: e.weights,
                })
                .collect(),
        };
        scheme.normalize();
        Ok(scheme)
    }
}

fn check_sum(shares: &[f64], total: f64, what: impl Fn() -> String) -> Result<()> {
    let sum: f64 = shares.iter().sum();
    let scale = shares.iter().fold(total.abs(), |m, s| m.max(s.abs())).max(f64::MIN_POSITIVE);
    if (sum - total).abs() > CONSERVATION_TOL * scale {
        return Err(Error::mismatch(format!("{} sum to {sum}, expected {total}", what())));
    }
    Ok(())
}

/// File form of a [`PartitionScheme`]; `-1` in `assignment` marks a
/// boundary vertex.
#[derive(Debug, Serialize, Deserialize)]
struct SchemeDoc {
    num_subdomains: usize,
    assignment: Vec<i64>,
    #[serde(default)]
    boundary: Vec<BoundaryDoc>,
    #[serde(default)]
    edge: Vec<EdgeDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoundaryDoc {
    vertex: usize,
    sides: Vec<usize>,
    weights: Vec<f64>,
    sources: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeDoc {
    a: usize,
    b: usize,
    sides: Vec<usize>,
    weights: Vec<f64>,
}

/// A remote port: `(subdomain, port index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwinRef {
    pub subdomain: SubdomainId,
    pub port: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Port {
    /// Vertex of the original graph this child was split from.
    pub parent: usize,
    pub twins: Vec<TwinRef>,
    /// Indices into [`Subdomain::channels`] of the lines attached here.
    pub channels: Vec<usize>,
}

/// One end of a transmission line as seen by its subdomain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channel {
    pub port: usize,
    pub vtl: usize,
    pub remote_subdomain: SubdomainId,
    pub remote_channel: usize,
}

/// One subgraph after splitting. Local unknowns are ordered ports first,
/// then inner vertices.
#[derive(Debug, Clone)]
pub struct Subdomain {
    pub id: SubdomainId,
    pub ports: Vec<Port>,
    /// Original ids of the inner vertices, ascending.
    pub inner: Vec<usize>,
    /// Line endpoints, ordered by `(port, vtl)`.
    pub channels: Vec<Channel>,
    pub matrix: SymmetricCsr,
    pub rhs: Vec<f64>,
}

impl Subdomain {
    pub fn dim(&self) -> usize {
        self.ports.len() + self.inner.len()
    }

    pub fn num_ports(&self) -> usize {
        self.ports.len()
    }

    /// Original vertex behind local unknown `local`.
    pub fn parent_of(&self, local: usize) -> usize {
        if local < self.ports.len() {
            self.ports[local].parent
        } else {
            self.inner[local - self.ports.len()]
        }
    }

    pub fn system(&self) -> SparseSymmetricSystem {
        SparseSymmetricSystem::new(self.dim(), self.matrix.upper_triplets().collect(), self.rhs.clone())
            .expect("local system is well formed")
    }

    /// Neighbouring subdomains, ascending.
    pub fn neighbors(&self) -> Vec<SubdomainId> {
        let set: BTreeSet<_> = self.channels.iter().map(|c| c.remote_subdomain).collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoint {
    pub subdomain: SubdomainId,
    pub port: usize,
    pub channel: usize,
}

/// Coupling between two children of the same parent vertex. Endpoint `a`
/// is the senior side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VirtualTransmissionLine {
    pub id: usize,
    pub parent: usize,
    pub a: Endpoint,
    pub b: Endpoint,
}

impl VirtualTransmissionLine {
    pub fn endpoint(&self, subdomain: SubdomainId) -> Option<Endpoint> {
        if self.a.subdomain == subdomain {
            Some(self.a)
        } else if self.b.subdomain == subdomain {
            Some(self.b)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitSystem {
    pub subdomains: Vec<Subdomain>,
    pub vtls: Vec<VirtualTransmissionLine>,
    pub scheme: PartitionScheme,
    /// Original matrix and right-hand side.
    pub global: SymmetricCsr,
    pub rhs: Vec<f64>,
}

impl SplitSystem {
    pub fn dim(&self) -> usize {
        self.global.dim()
    }

    pub fn split_level(&self) -> usize {
        self.scheme.split_level()
    }

    pub fn total_local_dim(&self) -> usize {
        self.subdomains.iter().map(Subdomain::dim).sum()
    }

    /// Sums every child back into its parent: the system obtained by setting
    /// twin potentials equal and letting twin inflow currents cancel.
    pub fn reassemble(&self) -> (SymmetricCsr, Vec<f64>) {
        let n = self.dim();
        let mut trip = Vec::new();
        let mut b = vec![0.0; n];
        for sub in &self.subdomains {
            for (p, q, v) in sub.matrix.upper_triplets() {
                let (i, j) = (sub.parent_of(p), sub.parent_of(q));
                trip.push((i.min(j), i.max(j), v));
            }
            for (l, r) in sub.rhs.iter().enumerate() {
                b[sub.parent_of(l)] += r;
            }
        }
        let a = SymmetricCsr::from_triplets(n, trip).expect("parents are in range");
        (a, b)
    }

    /// Per-subdomain definiteness of the split matrices.
    pub fn verify_conformal(&self) -> ConformalReport {
        ConformalReport {
            per_subdomain: self.subdomains.iter().map(|s| classify(&s.matrix)).collect(),
        }
    }

    /// Dumps each subdomain as `subdomain_J.mtx`, `subdomain_J.rhs` and a
    /// port table `subdomain_J.ports`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for sub in &self.subdomains {
            let sys = sub.system();
            let mut m = Vec::new();
            write_matrix_market(&mut m, sys.dim(), sys.entries())?;
            fs::write(dir.join(format!("subdomain_{}.mtx", sub.id)), m)?;
            let mut r = Vec::new();
            write_vector(&mut r, &sub.rhs)?;
            fs::write(dir.join(format!("subdomain_{}.rhs", sub.id)), r)?;
            let mut table = String::from("# port parent vtl remote_subdomain remote_port\n");
            for ch in &sub.channels {
                let remote = &self.subdomains[ch.remote_subdomain].channels[ch.remote_channel];
                table.push_str(&format!(
                    "{} {} {} {} {}\n",
                    ch.port, sub.ports[ch.port].parent, ch.vtl, ch.remote_subdomain, remote.port
                ));
            }
            fs::write(dir.join(format!("subdomain_{}.ports", sub.id)), table)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalReport {
    pub per_subdomain: Vec<Definiteness>,
}

impl ConformalReport {
    /// Every subgraph is SPD or SNND.
    pub fn is_conformal(&self) -> bool {
        self.per_subdomain.iter().all(|d| d.is_conformal())
    }

    pub fn all_spd(&self) -> bool {
        self.per_subdomain.iter().all(|&d| d == Definiteness::PositiveDefinite)
    }
}

/// Applies `scheme` to `g`.
pub fn split(g: &ElectricGraph, scheme: &PartitionScheme) -> Result<SplitSystem> {
    let mut scheme = scheme.clone();
    scheme.normalize();
    scheme.validate(g)?;
    let nsub = scheme.num_subdomains;

    // local numbering: ports (by parent id) then inner vertices (by id)
    let mut port_parents: Vec<Vec<usize>> = vec![Vec::new(); nsub];
    for b in &scheme.boundary {
        for &s in &b.sides {
            port_parents[s].push(b.vertex);
        }
    }
    let mut inner: Vec<Vec<usize>> = vec![Vec::new(); nsub];
    for (v, a) in scheme.assignment.iter().enumerate() {
        if let Some(s) = a {
            inner[*s].push(v);
        }
    }
    let local_of: Vec<BTreeMap<usize, usize>> = (0..nsub)
        .map(|s| {
            port_parents[s]
                .iter()
                .chain(&inner[s])
                .enumerate()
                .map(|(l, &v)| (v, l))
                .collect()
        })
        .collect();

    let mut trip: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); nsub];
    let mut rhs: Vec<Vec<f64>> = (0..nsub).map(|s| vec![0.0; local_of[s].len()]).collect();
    for (v, a) in scheme.assignment.iter().enumerate() {
        if let Some(s) = *a {
            let l = local_of[s][&v];
            trip[s].push((l, l, g.vertex(v).weight));
            rhs[s][l] = g.vertex(v).source;
        }
    }
    for b in &scheme.boundary {
        for (k, &s) in b.sides.iter().enumerate() {
            let l = local_of[s][&b.vertex];
            trip[s].push((l, l, b.weights[k]));
            rhs[s][l] = b.sources[k];
        }
    }
    for e in g.edges() {
        match (scheme.assignment[e.a], scheme.assignment[e.b]) {
            (Some(s), _) | (None, Some(s)) if scheme.assignment[e.a].is_some() || scheme.assignment[e.b].is_some() => {
                trip[s].push((local_of[s][&e.a], local_of[s][&e.b], e.weight));
            }
            _ => {
                let es = scheme.edge_split(e.a, e.b).expect("validated");
                for (&s, &w) in es.sides.iter().zip(&es.weights) {
                    trip[s].push((local_of[s][&e.a], local_of[s][&e.b], w));
                }
            }
        }
    }

    // transmission lines
    let mut vtls = Vec::new();
    for b in &scheme.boundary {
        let pairs: Vec<(usize, usize)> = match b.sides.len() {
            2 => vec![(b.sides[0], b.sides[1])],
            _ => (0..4).map(|k| (b.sides[k], b.sides[(k + 1) % 4])).collect(),
        };
        for (sa, sb) in pairs {
            let id = vtls.len();
            let ep = |s: usize| Endpoint {
                subdomain: s,
                port: local_of[s][&b.vertex],
                channel: usize::MAX,
            };
            vtls.push(VirtualTransmissionLine {
                id,
                parent: b.vertex,
                a: ep(sa),
                b: ep(sb),
            });
        }
    }
    let mut ends: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nsub]; // (port, vtl)
    for l in &vtls {
        ends[l.a.subdomain].push((l.a.port, l.id));
        ends[l.b.subdomain].push((l.b.port, l.id));
    }
    for e in &mut ends {
        e.sort();
    }
    for (s, list) in ends.iter().enumerate() {
        for (c, &(_, vid)) in list.iter().enumerate() {
            let l = &mut vtls[vid];
            if l.a.subdomain == s {
                l.a.channel = c;
            } else {
                l.b.channel = c;
            }
        }
    }

    let mut subdomains = Vec::with_capacity(nsub);
    for s in 0..nsub {
        let channels: Vec<Channel> = ends[s]
            .iter()
            .map(|&(port, vid)| {
                let l = &vtls[vid];
                let remote = if l.a.subdomain == s { l.b } else { l.a };
                Channel {
                    port,
                    vtl: vid,
                    remote_subdomain: remote.subdomain,
                    remote_channel: remote.channel,
                }
            })
            .collect();
        let ports = port_parents[s]
            .iter()
            .enumerate()
            .map(|(p, &parent)| {
                let chans: Vec<usize> = channels
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.port == p)
                    .map(|(i, _)| i)
                    .collect();
                Port {
                    parent,
                    twins: chans
                        .iter()
                        .map(|&c| {
                            let ch = channels[c];
                            let l = &vtls[ch.vtl];
                            let remote = if l.a.subdomain == s { l.b } else { l.a };
                            TwinRef {
                                subdomain: remote.subdomain,
                                port: remote.port,
                            }
                        })
                        .collect(),
                    channels: chans,
                }
            })
            .collect();
        let dim = local_of[s].len();
        subdomains.push(Subdomain {
            id: s,
            ports,
            inner: inner[s].clone(),
            channels,
            matrix: SymmetricCsr::from_triplets(dim, trip[s].drain(..))?,
            rhs: std::mem::take(&mut rhs[s]),
        });
    }

    let sys = crate::graph::graph_to_system(g);
    Ok(SplitSystem {
        subdomains,
        vtls,
        scheme,
        global: sys.to_csr(),
        rhs: sys.rhs().to_vec(),
    })
}

/// Diagonal-dominance scheme for a caller-provided assignment.
///
/// Vertices mapped to `None` are boundary vertices. A boundary vertex is
/// split towards the subdomains of its inner neighbours; a vertex with fewer
/// than two such subdomains also takes the sides of its boundary
/// neighbours (cross points of block partitions get four sides this way).
/// Each side's weight is the absolute weight of the edges it inherits plus
/// an equal part of the diagonal surplus `a_ii - Σ|a_ij|`, which keeps every
/// subgraph weakly diagonally dominant. Boundary edges and sources are split
/// evenly.
pub fn default_conformal_scheme(
    g: &ElectricGraph,
    assignment: &[Option<SubdomainId>],
) -> Result<PartitionScheme> {
    let n = g.num_vertices();
    if assignment.len() != n {
        return Err(Error::mismatch(format!(
            "assignment covers {} vertices, graph has {n}",
            assignment.len()
        )));
    }
    let num_subdomains = assignment.iter().flatten().max().map_or(1, |m| m + 1);
    let adj = g.adjacency();

    let inner_sides = |v: usize| -> BTreeSet<SubdomainId> {
        adj[v].iter().filter_map(|&(w, _)| assignment[w]).collect()
    };
    let mut sides: BTreeMap<usize, BTreeSet<SubdomainId>> = BTreeMap::new();
    for v in (0..n).filter(|&v| assignment[v].is_none()) {
        let mut s = inner_sides(v);
        if s.len() < 2 {
            for &(w, _) in &adj[v] {
                if assignment[w].is_none() {
                    s.extend(inner_sides(w));
                }
            }
        }
        if s.len() != 2 && s.len() != 4 {
            return Err(Error::mismatch(format!(
                "boundary vertex {v} touches {} subdomains; a default split needs 2 or 4",
                s.len()
            )));
        }
        sides.insert(v, s);
    }

    // subdomains joined by some twin split, used to order four-way rings
    let mut adjacent: BTreeSet<(SubdomainId, SubdomainId)> = BTreeSet::new();
    for s in sides.values().filter(|s| s.len() == 2) {
        let v: Vec<_> = s.iter().copied().collect();
        adjacent.insert((v[0], v[1]));
    }
    let ordered = |s: &BTreeSet<SubdomainId>| -> Vec<SubdomainId> {
        let v: Vec<_> = s.iter().copied().collect();
        if v.len() != 4 {
            return v;
        }
        let linked = |a: usize, b: usize| adjacent.contains(&(a.min(b), a.max(b)));
        for perm in [[1, 2, 3], [1, 3, 2], [2, 1, 3]] {
            let ring = [v[0], v[perm[0]], v[perm[1]], v[perm[2]]];
            if (0..4).all(|k| linked(ring[k], ring[(k + 1) % 4])) {
                return ring.to_vec();
            }
        }
        v
    };

    let mut edges = Vec::new();
    let mut inherited: BTreeMap<(usize, SubdomainId), f64> = BTreeMap::new();
    for e in g.edges() {
        match (assignment[e.a], assignment[e.b]) {
            (Some(_), Some(_)) => {}
            (Some(s), None) | (None, Some(s)) => {
                let bv = if assignment[e.a].is_none() { e.a } else { e.b };
                *inherited.entry((bv, s)).or_default() += e.weight.abs();
            }
            (None, None) => {
                let common: Vec<SubdomainId> = sides[&e.a].intersection(&sides[&e.b]).copied().collect();
                if common.is_empty() {
                    return Err(Error::mismatch(format!(
                        "boundary edge ({}, {}) joins vertices with no common side",
                        e.a, e.b
                    )));
                }
                let weights = even_shares(e.weight, common.len());
                for (&s, w) in common.iter().zip(&weights) {
                    *inherited.entry((e.a, s)).or_default() += w.abs();
                    *inherited.entry((e.b, s)).or_default() += w.abs();
                }
                edges.push(EdgeSplit {
                    a: e.a,
                    b: e.b,
                    sides: common,
                    weights,
                });
            }
        }
    }

    let mut boundary = Vec::new();
    for (&v, s) in &sides {
        let vx = g.vertex(v);
        let abs_sum: f64 = adj[v].iter().map(|&(_, w)| w.abs()).sum();
        let surplus = vx.weight - abs_sum;
        if surplus < -CONSERVATION_TOL * vx.weight.abs().max(abs_sum) {
            return Err(Error::NotDiagonallyDominant { vertex: v, surplus });
        }
        let ring = ordered(s);
        let k = ring.len();
        let mut weights: Vec<f64> = ring
            .iter()
            .map(|&side| inherited.get(&(v, side)).copied().unwrap_or(0.0) + surplus / k as f64)
            .collect();
        let head: f64 = weights[..k - 1].iter().sum();
        weights[k - 1] = vx.weight - head;
        boundary.push(BoundarySplit {
            vertex: v,
            sides: ring,
            weights,
            sources: even_shares(vx.source, k),
        });
    }

    let mut scheme = PartitionScheme {
        num_subdomains,
        assignment: assignment.to_vec(),
        boundary,
        edges,
    };
    scheme.normalize();
    scheme.validate(g)?;
    Ok(scheme)
}

/// `k` equal parts of `total`; the last part absorbs rounding.
fn even_shares(total: f64, k: usize) -> Vec<f64> {
    let mut out = vec![total / k as f64; k];
    let head: f64 = out[..k - 1].iter().sum();
    out[k - 1] = total - head;
    out
}

/// Result of collapsing local solutions back onto the original unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct Merged {
    pub x: Vec<f64>,
    /// Largest spread between children of one parent.
    pub max_twin_disagreement: f64,
}

/// Inner potentials are copied; a boundary vertex takes the mean of its
/// children.
pub fn merge(s: &SplitSystem, local_solutions: &[Vec<f64>]) -> Result<Merged> {
    if local_solutions.len() != s.subdomains.len() {
        return Err(Error::Dimension {
            expected: s.subdomains.len(),
            actual: local_solutions.len(),
            context: "local solution count",
        });
    }
    let n = s.dim();
    let mut x = vec![0.0; n];
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    let mut count = vec![0usize; n];
    for (sub, sol) in s.subdomains.iter().zip(local_solutions) {
        if sol.len() != sub.dim() {
            return Err(Error::Dimension {
                expected: sub.dim(),
                actual: sol.len(),
                context: "local solution length",
            });
        }
        for (l, &v) in sol.iter().enumerate() {
            let p = sub.parent_of(l);
            x[p] += v;
            lo[p] = lo[p].min(v);
            hi[p] = hi[p].max(v);
            count[p] += 1;
        }
    }
    let mut worst = 0.0_f64;
    for i in 0..n {
        if count[i] > 1 {
            x[i] /= count[i] as f64;
            worst = worst.max(hi[i] - lo[i]);
        }
    }
    Ok(Merged {
        x,
        max_twin_disagreement: worst,
    })
}

/// Local potentials obtained by copying a global vector onto every child.
pub fn scatter(s: &SplitSystem, x: &[f64]) -> Vec<Vec<f64>> {
    s.subdomains
        .iter()
        .map(|sub| (0..sub.dim()).map(|l| x[sub.parent_of(l)]).collect())
        .collect()
}
