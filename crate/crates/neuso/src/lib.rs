//! A subgraph-query engine with a learned optimizer.
//!
//! The pipeline: a candidate filter produces per-vertex statistics for a
//! query graph, a triangle-aware attention encoder turns the query into
//! vertex embeddings, three MLP heads predict subquery cardinality,
//! single-join cost, and minimum plan cost, and a top-down greedy
//! enumerator walks the lattice of connected subqueries to emit a vertex
//! matching order. A backtracking executor then runs that order and
//! meters its work in deterministic probe counts.

pub mod ccg;
pub mod datagen;
pub mod encoder;
pub mod estimator;
pub mod graph;
pub mod matcher;
pub mod numerics;
pub mod parallel;
pub mod planner;
pub mod report;
pub mod testkit;

pub use graph::{LabeledGraph, MatchingOrder, VertexSet};
pub use matcher::{CandidateContext, ExecutionBudget, ExecutionStats};
