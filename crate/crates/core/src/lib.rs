//! Virtual transmission method for sparse symmetric positive definite
//! systems.
//!
//! A system `Ax = b` is read as an electric graph, torn into subgraphs by
//! vertex splitting, and solved by independent local factorizations that
//! exchange boundary potentials and currents over virtual transmission
//! lines until the twins agree.

pub mod analysis;
pub mod demo;
pub mod error;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod local;
pub mod partition;
pub mod perf;
pub mod runtime;
pub mod testbench;

pub use error::{Error, Result};
pub use graph::{ElectricGraph, SparseSymmetricSystem};
pub use local::{ImpedanceAssignment, ImpedanceMatrix, MatchPolicy};

pub use partition::{PartitionScheme, SplitSystem};
pub use runtime::{IterationReport, RunConfig};
