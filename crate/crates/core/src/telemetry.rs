//! End-to-end latency breakdown record: where a served inference spends
//! its time (graph preprocessing, batch preprocessing, pure inference)
//! and how many pages the batch phase touched.

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Breakdown {
    pub graph_prep_ns: u64,
    pub batch_prep_ns: u64,
    pub batch_io_pages: u64,
    pub infer_ns: u64,
}
