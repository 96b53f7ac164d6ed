//! Near-storage GNN inference stack.
//!
//! The crate is organized around a simulated page-granular SSD
//! ([`blockdev`]), a graph archival layer that maps vertices onto flash
//! pages ([`graphstore`]), batch preprocessing ([`batchprep`]), compute
//! kernels with swappable backends ([`kernels`]), a dataflow-graph model
//! ([`dfg`]) and its execution engine ([`runner`]), plus prebuilt GNN
//! model graphs and a dense reference evaluator ([`models`]).

pub mod batchprep;
pub mod blockdev;
pub mod dfg;
pub mod graphstore;
pub mod kernels;
pub mod models;
pub mod runner;
pub mod telemetry;
pub mod tensor;
