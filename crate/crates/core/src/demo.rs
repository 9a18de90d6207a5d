//! The six-unknown demonstration problem with its hand-made two-way split.

use crate::partition::{BoundarySplit, EdgeSplit, PartitionScheme};

pub use crate::graph::example_system;

/// Vertices 1, 2 go to subdomain 0, vertices 5, 6 to subdomain 1, and
/// vertices 3, 4 are torn in two.
pub fn example_scheme() -> PartitionScheme {
    PartitionScheme {
        num_subdomains: 2,
        assignment: vec![Some(0), Some(0), None, None, Some(1), Some(1)],
        boundary: vec![
            BoundarySplit {
                vertex: 2,
                sides: vec![0, 1],
                weights: vec![4.8, 3.2],
                sources: vec![1.6, 1.4],
            },
            BoundarySplit {
                vertex: 3,
                sides: vec![0, 1],
                weights: vec![3.5, 5.5],
                sources: vec![1.8, 2.2],
            },
        ],
        edges: vec![EdgeSplit {
            a: 2,
            b: 3,
            sides: vec![0, 1],
            weights: vec![-0.9, -1.1],
        }],
    }
}

/// Line impedances for the two lines of [`example_scheme`], by line id.
pub fn example_impedances() -> Vec<f64> {
    vec![1.0, 0.5]
}
