//! Refinement of visual place recognition similarity matrices.
//!
//! A place recognition run compares `M` database images against `N` query
//! images and produces a pairwise similarity matrix. This crate treats every
//! cell of that matrix as a variable of a factor graph and re-estimates all
//! of them jointly, using three extra sources of structure:
//!
//! * similarities *within* the database set (from poses or descriptors),
//! * similarities *within* the query set (from descriptors),
//! * local sequence consistency along the matrix diagonals.
//!
//! Intra-set similarity turns into pairs of competing factors: a *loop*
//! factor pulls the matrix rows (or columns) of two similar images together,
//! an *exclusion* factor pushes matches of two dissimilar images apart. A
//! sequence factor ties each cell to the mean of the best constant-velocity
//! segment through it. The resulting bound-constrained sparse nonlinear
//! least-squares problem is solved with a projected Levenberg-Marquardt
//! method; large inputs are split into independent patches first.
//!
//! Entry points: [`pipeline`] builds similarity inputs from descriptors and
//! poses, [`graph::build_graph`] assembles a factor graph,
//! [`graph::optimize_patched`] runs the full refinement, and [`eval`] scores
//! results against ground truth and generates synthetic benchmark scenarios.

pub mod error;
pub mod eval;
pub mod exec;
pub mod factors;
pub mod graph;
pub mod io;
pub mod pipeline;
pub mod solver;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    ExclusionVariant, FactorWeights, IntraKind, IntraSetSimilarities, ProblemSpec,
    SequenceConfig, SimilarityMatrix,
};
