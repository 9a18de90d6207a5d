//! Per-subdomain work: the line-preconditioned local system, one update of
//! the boundary variables, and port input impedances.
//!
//! A subdomain with ports `u`, inner vertices `y` and channel currents `ω`
//! satisfies `Ã x = b̃ + B ω`, where `B` maps each channel onto its port.
//! Every channel also obeys the line equation
//! `u + Z ω = u_twin − Z ω_twin` with the twin values from the previous
//! round. Eliminating `ω` gives the system that is factored once:
//!
//! ```text
//! (Ã + B Z⁻¹ Bᵀ) x = b̃ + B Z⁻¹ (u_twin − Z ω_twin)
//! ω = Z⁻¹ (u_twin − Z ω_twin − Bᵀ x)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::linalg::{DenseCholesky, SymmetricCsr, SymmetricFactor};
use crate::partition::{SplitSystem, Subdomain};

/// Local matrix `Ã_j` and sources `b̃_j` under the (ports, inner) ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSystem {
    matrix: SymmetricCsr,
    rhs: Vec<f64>,
    num_ports: usize,
    /// Port of each channel.
    channel_port: Vec<usize>,
}

impl LocalSystem {
    pub fn new(matrix: SymmetricCsr, rhs: Vec<f64>, num_ports: usize, channel_port: Vec<usize>) -> Result<Self> {
        if rhs.len() != matrix.dim() {
            return Err(Error::Dimension {
                expected: matrix.dim(),
                actual: rhs.len(),
                context: "local right-hand side",
            });
        }
        if num_ports > matrix.dim() || channel_port.iter().any(|&p| p >= num_ports) {
            return Err(Error::malformed("channel refers to a missing port"));
        }
        Ok(Self {
            matrix,
            rhs,
            num_ports,
            channel_port,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn num_ports(&self) -> usize {
        self.num_ports
    }

    pub fn num_channels(&self) -> usize {
        self.channel_port.len()
    }

    pub fn channel_port(&self) -> &[usize] {
        &self.channel_port
    }

    pub fn matrix(&self) -> &SymmetricCsr {
        &self.matrix
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    fn block(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rows.len(), cols.len());
        for i in rows.clone() {
            for (j, v) in self.matrix.row(i) {
                if cols.contains(&j) {
                    out[(i - rows.start, j - cols.start)] = v;
                }
            }
        }
        out
    }

    /// Port-port block.
    pub fn c(&self) -> DMatrix<f64> {
        self.block(0..self.num_ports, 0..self.num_ports)
    }

    /// Port-inner block.
    pub fn e(&self) -> DMatrix<f64> {
        self.block(0..self.num_ports, self.num_ports..self.dim())
    }

    /// Inner-port block.
    pub fn f_block(&self) -> DMatrix<f64> {
        self.block(self.num_ports..self.dim(), 0..self.num_ports)
    }

    /// Inner-inner block.
    pub fn d(&self) -> DMatrix<f64> {
        self.block(self.num_ports..self.dim(), self.num_ports..self.dim())
    }

    /// Port sources.
    pub fn f(&self) -> &[f64] {
        &self.rhs[..self.num_ports]
    }

    /// Inner sources.
    pub fn g(&self) -> &[f64] {
        &self.rhs[self.num_ports..]
    }

    /// `‖Ã x − b̃ − B ω‖∞` relative to `max(‖b̃‖∞, ‖B ω‖∞, 1)`.
    pub fn balance_residual(&self, x: &[f64], omega: &[f64]) -> f64 {
        let mut r = self.matrix.matvec(x);
        let mut inflow = vec![0.0; self.dim()];
        for (c, &p) in self.channel_port.iter().enumerate() {
            inflow[p] += omega[c];
        }
        let mut scale = 1.0_f64;
        for i in 0..self.dim() {
            r[i] -= self.rhs[i] + inflow[i];
            scale = scale.max(self.rhs[i].abs()).max(inflow[i].abs());
        }
        r.iter().fold(0.0_f64, |m, v| m.max(v.abs())) / scale
    }
}

pub fn assemble(sub: &Subdomain) -> LocalSystem {
    LocalSystem {
        matrix: sub.matrix.clone(),
        rhs: sub.rhs.clone(),
        num_ports: sub.num_ports(),
        channel_port: sub.channels.iter().map(|c| c.port).collect(),
    }
}

/// Characteristic impedance matrix of one subdomain, indexed by channel.
#[derive(Debug, Clone)]
pub enum ImpedanceMatrix {
    Diagonal(Vec<f64>),
    Coupled { z: DMatrix<f64>, factor: DenseCholesky },
}

impl ImpedanceMatrix {
    pub fn diagonal(z: Vec<f64>) -> Result<Self> {
        if let Some(bad) = z.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidImpedance(format!("line impedance {bad} is not positive")));
        }
        Ok(Self::Diagonal(z))
    }

    pub fn coupled(z: DMatrix<f64>) -> Result<Self> {
        if z.nrows() != z.ncols() {
            return Err(Error::InvalidImpedance("coupled impedance must be square".into()));
        }
        let scale = z.amax().max(f64::MIN_POSITIVE);
        if (&z - z.transpose()).amax() > 1e-14 * scale {
            return Err(Error::InvalidImpedance("coupled impedance must be symmetric".into()));
        }
        let factor = DenseCholesky::new(&z)
            .map_err(|e| Error::InvalidImpedance(format!("coupled impedance is not positive definite: {e}")))?;
        Ok(Self::Coupled { z, factor })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Diagonal(z) => z.len(),
            Self::Coupled { z, .. } => z.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Self::Diagonal(z) => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(z)),
            Self::Coupled { z, .. } => z.clone(),
        }
    }

    /// `Z v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Self::Diagonal(z) => z.iter().zip(v).map(|(z, v)| z * v).collect(),
            Self::Coupled { z, .. } => (z * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec(),
        }
    }

    /// `Z⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Self::Diagonal(z) => z.iter().zip(v).map(|(z, v)| v / z).collect(),
            Self::Coupled { factor, .. } => {
                let mut out = v.to_vec();
                factor.solve_in_place(&mut out);
                out
            }
        }
    }

    /// `Z⁻¹` as a dense matrix, built column by column from the factor.
    pub fn inverse_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            out.set_column(j, &nalgebra::DVector::from_vec(self.solve(&e)));
        }
        out
    }
}

/// Impedances for a whole split system.
#[derive(Debug, Clone, PartialEq)]
pub enum ImpedanceAssignment {
    /// One `z` per line, indexed by line id; both ends see the same value.
    PerLine(Vec<f64>),
    /// One symmetric positive definite matrix per subdomain over its channels.
    Coupled(Vec<DMatrix<f64>>),
}

impl ImpedanceAssignment {
    pub fn constant(s: &SplitSystem, z: f64) -> Self {
        Self::PerLine(vec![z; s.vtls.len()])
    }

    pub fn scaled(&self, t: f64) -> Self {
        match self {
            Self::PerLine(z) => Self::PerLine(z.iter().map(|v| v * t).collect()),
            Self::Coupled(z) => Self::Coupled(z.iter().map(|m| m * t).collect()),
        }
    }

    /// Per-subdomain impedance matrices in channel order.
    pub fn matrices(&self, s: &SplitSystem) -> Result<Vec<ImpedanceMatrix>> {
        match self {
            Self::PerLine(z) => {
                if z.len() != s.vtls.len() {
                    return Err(Error::InvalidImpedance(format!(
                        "{} line impedances for {} lines",
                        z.len(),
                        s.vtls.len()
                    )));
                }
                s.subdomains
                    .iter()
                    .map(|sub| ImpedanceMatrix::diagonal(sub.channels.iter().map(|c| z[c.vtl]).collect()))
                    .collect()
            }
            Self::Coupled(z) => {
                if z.len() != s.subdomains.len() {
                    return Err(Error::InvalidImpedance(format!(
                        "{} coupled matrices for {} subdomains",
                        z.len(),
                        s.subdomains.len()
                    )));
                }
                s.subdomains
                    .iter()
                    .zip(z)
                    .map(|(sub, m)| {
                        if m.nrows() != sub.channels.len() {
                            return Err(Error::InvalidImpedance(format!(
                                "subdomain {} has {} channels, coupled matrix is {}x{}",
                                sub.id,
                                sub.channels.len(),
                                m.nrows(),
                                m.ncols()
                            )));
                        }
                        ImpedanceMatrix::coupled(m.clone())
                    })
                    .collect()
            }
        }
    }

    /// Key-value text: `[impedance]` maps line id to `z`; `[coupled]` maps
    /// subdomain id to a row list.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        match self {
            Self::PerLine(z) => {
                out.push_str("[impedance]\n");
                for (id, v) in z.iter().enumerate() {
                    let _ = writeln!(out, "{id} = {}", fmt_f64(*v));
                }
            }
            Self::Coupled(z) => {
                out.push_str("[coupled]\n");
                for (id, m) in z.iter().enumerate() {
                    let rows: Vec<String> = m
                        .row_iter()
                        .map(|r| {
                            let cells: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
                            format!("[{}]", cells.join(", "))
                        })
                        .collect();
                    let _ = writeln!(out, "{id} = [{}]", rows.join(", "));
                }
            }
        }
        out
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        #[derive(Deserialize, Serialize)]
        struct Doc {
            impedance: Option<BTreeMap<String, f64>>,
            coupled: Option<BTreeMap<String, Vec<Vec<f64>>>>,
        }
        let doc: Doc = toml::from_str(text)?;
        let ids = |keys: Vec<&String>| -> Result<Vec<usize>> {
            let mut ids: Vec<usize> = keys
                .into_iter()
                .map(|k| k.parse().map_err(|_| Error::malformed(format!("impedance key '{k}' is not an id"))))
                .collect::<Result<_>>()?;
            ids.sort_unstable();
            if ids.iter().enumerate().any(|(i, &id)| i != id) {
                return Err(Error::malformed("impedance ids must be 0..N without gaps"));
            }
            Ok(ids)
        };
        match (doc.impedance, doc.coupled) {
            (Some(map), None) => {
                let ids = ids(map.keys().collect())?;
                Ok(Self::PerLine(ids.iter().map(|id| map[&id.to_string()]).collect()))
            }
            (None, Some(map)) => {
                let ids = ids(map.keys().collect())?;
                let mut out = Vec::new();
                for id in ids {
                    let rows = &map[&id.to_string()];
                    let n = rows.len();
                    if rows.iter().any(|r| r.len() != n) {
                        return Err(Error::malformed(format!("coupled matrix {id} is not square")));
                    }
                    out.push(DMatrix::from_fn(n, n, |i, j| rows[i][j]));
                }
                Ok(Self::Coupled(out))
            }
            _ => Err(Error::malformed("expected exactly one of [impedance] or [coupled]")),
        }
    }
}

/// A local system with its line-preconditioned factorization.
#[derive(Debug, Clone)]
pub struct FactoredLocal {
    sys: LocalSystem,
    z: ImpedanceMatrix,
    factor: SymmetricFactor,
    preconditioned: SymmetricCsr,
}

/// Factors `Ã + B Z⁻¹ Bᵀ`.
pub fn precondition(sys: &LocalSystem, z: ImpedanceMatrix) -> Result<FactoredLocal> {
    if z.dim() != sys.num_channels() {
        return Err(Error::Dimension {
            expected: sys.num_channels(),
            actual: z.dim(),
            context: "impedance matrix size",
        });
    }
    let mut trip: Vec<(usize, usize, f64)> = sys.matrix.upper_triplets().collect();
    let cp = &sys.channel_port;
    match &z {
        ImpedanceMatrix::Diagonal(zs) => {
            for (c, &p) in cp.iter().enumerate() {
                trip.push((p, p, 1.0 / zs[c]));
            }
        }
        ImpedanceMatrix::Coupled { .. } => {
            let inv = z.inverse_dense();
            for c in 0..cp.len() {
                trip.push((cp[c], cp[c], inv[(c, c)]));
                for d in c + 1..cp.len() {
                    let v = 0.5 * (inv[(c, d)] + inv[(d, c)]);
                    if cp[c] == cp[d] {
                        trip.push((cp[c], cp[c], 2.0 * v));
                    } else {
                        trip.push((cp[c].min(cp[d]), cp[c].max(cp[d]), v));
                    }
                }
            }
        }
    }
    let preconditioned = SymmetricCsr::from_triplets(sys.dim(), trip)?;
    let factor = SymmetricFactor::new(&preconditioned).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot, value, .. } => Error::NotPositiveDefinite {
            pivot,
            value,
            context: "line-preconditioned local system; the split is not conformal or Z is invalid".into(),
        },
        other => other,
    })?;
    Ok(FactoredLocal {
        sys: sys.clone(),
        z,
        factor,
        preconditioned,
    })
}

/// Result of one local update.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// Local potentials, ports first.
    pub x: Vec<f64>,
    /// Inflow current per channel.
    pub omega: Vec<f64>,
}

impl LocalUpdate {
    pub fn port_potentials(&self, num_ports: usize) -> &[f64] {
        &self.x[..num_ports]
    }
}

impl FactoredLocal {
    pub fn system(&self) -> &LocalSystem {
        &self.sys
    }

    pub fn impedance(&self) -> &ImpedanceMatrix {
        &self.z
    }

    pub fn factor(&self) -> &SymmetricFactor {
        &self.factor
    }

    pub fn preconditioned_matrix(&self) -> &SymmetricCsr {
        &self.preconditioned
    }

    /// Right-hand side of the line equation, `u_twin − Z ω_twin`, per channel.
    pub fn incoming(&self, u_twin: &[f64], omega_twin: &[f64]) -> Vec<f64> {
        let zw = self.z.apply(omega_twin);
        u_twin.iter().zip(zw).map(|(u, zw)| u - zw).collect()
    }

    /// One update from the twins' previous potentials and currents, given
    /// per channel.
    pub fn iterate(&self, u_twin: &[f64], omega_twin: &[f64]) -> Result<LocalUpdate> {
        let nc = self.sys.num_channels();
        for (len, context) in [(u_twin.len(), "twin potentials"), (omega_twin.len(), "twin currents")] {
            if len != nc {
                return Err(Error::Dimension {
                    expected: nc,
                    actual: len,
                    context,
                });
            }
        }
        let incoming = self.incoming(u_twin, omega_twin);
        let drive = self.z.solve(&incoming);
        let mut x = self.sys.rhs.clone();
        for (c, &p) in self.sys.channel_port.iter().enumerate() {
            x[p] += drive[c];
        }
        self.factor.solve_in_place(&mut x);
        let gap: Vec<f64> = incoming
            .iter()
            .zip(&self.sys.channel_port)
            .map(|(inc, &p)| inc - x[p])
            .collect();
        let omega = self.z.solve(&gap);
        Ok(LocalUpdate { x, omega })
    }
}

/// `Ã⁻¹` applied to unit inflow at every port, with the sources zeroed; the
/// result is the port potential, one value per port.
pub fn input_impedances(sys: &LocalSystem) -> Result<Vec<f64>> {
    let factor = SymmetricFactor::new(&sys.matrix).map_err(|e| {
        Error::Singular(format!("input impedance needs a nonsingular local matrix: {e}"))
    })?;
    Ok((0..sys.num_ports)
        .map(|p| {
            let mut e = vec![0.0; sys.dim()];
            e[p] = 1.0;
            factor.solve_in_place(&mut e);
            e[p]
        })
        .collect())
}

pub fn input_impedance(sys: &LocalSystem, port: usize) -> Result<f64> {
    if port >= sys.num_ports {
        return Err(Error::Dimension {
            expected: sys.num_ports,
            actual: port,
            context: "port index",
        });
    }
    Ok(input_impedances(sys)?[port])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchPolicy {
    SideA,
    SideB,
    #[default]
    Mean,
}

impl std::str::FromStr for MatchPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "side_a" => Ok(Self::SideA),
            "side_b" => Ok(Self::SideB),
            "mean" => Ok(Self::Mean),
            other => Err(Error::malformed(format!("unknown match policy '{other}'"))),
        }
    }
}

/// Sets each line's `z` from the input impedances of its two ports.
pub fn match_impedances(s: &SplitSystem, policy: MatchPolicy) -> Result<ImpedanceAssignment> {
    let r: Vec<Vec<f64>> = s
        .subdomains
        .iter()
        .map(|sub| input_impedances(&assemble(sub)))
        .collect::<Result<_>>()?;
    Ok(ImpedanceAssignment::PerLine(
        s.vtls
            .iter()
            .map(|l| {
                let ra = r[l.a.subdomain][l.a.port];
                let rb = r[l.b.subdomain][l.b.port];
                match policy {
                    MatchPolicy::SideA => ra,
                    MatchPolicy::SideB => rb,
                    MatchPolicy::Mean => 0.5 * (ra + rb),
                }
            })
            .collect(),
    ))
}
