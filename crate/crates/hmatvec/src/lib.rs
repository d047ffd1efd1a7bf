//! Distributed-memory hierarchical-matrix vector multiplication, run on a
//! deterministic in-process message-passing simulator.
//!
//! The crate builds H-matrices with keyed random entries over ideal
//! d-dimensional domains, shards them across P logical ranks following a
//! process tree, executes the five-step distributed matvec (source-local
//! compute, tree-reduction, leader transfer, tree-broadcast, target-local
//! compute), and verifies the result against the sequential oracle while
//! counting messages and transferred scalars per rank and step.

pub mod admissibility;
pub mod cli;
pub mod dist_matvec;
pub mod distribution;
pub mod domain_tree;
pub mod error;
pub mod hmatrix;
pub mod keyed;
pub mod mat;
pub mod metrics;
pub(crate) mod parallel;
pub mod process_tree;
pub mod simnet;
pub mod structure;

pub use admissibility::AdmissibilityRule;
pub use domain_tree::{build_domain_tree, DomainConfig, DomainTree};
pub use error::{Error, Result};
pub use hmatrix::{build_hmatrix, HMatrix, HMatrixConfig};
pub use process_tree::{assign_processes, ProcessAssignment, ProcessGroup};
