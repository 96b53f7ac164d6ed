//! Batch preprocessing: layered uniform neighbor sampling against the
//! store, dense reindexing in discovery order, per-layer CSR subgraphs
//! and embedding gathering.
//!
//! Sampling is seeded and fully deterministic: one ChaCha8 stream keyed
//! by the request seed, consumed hop by hop with frontier nodes visited
//! in new-id order, drawing neighbors by partial Fisher-Yates with the
//! self node pinned first.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graphstore::{GraphStore, GraphStoreError, Vid, TAG_BATCH_GET};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum BatchPrepError {
    #[error("batch has no targets")]
    EmptyTargets,
    #[error("no layers requested")]
    NoLayers,
    #[error("fanout must be at least 1 (layer {0})")]
    ZeroFanout(usize),
    #[error("duplicate target vid {0}")]
    DuplicateTarget(Vid),
    #[error(transparent)]
    Store(#[from] GraphStoreError),
}

pub type Result<T> = std::result::Result<T, BatchPrepError>;

/// One inference batch request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRequest {
    pub targets: Vec<Vid>,
    /// Per-hop sample sizes, outermost hop (the targets' neighbors) first.
    pub fanouts: Vec<u32>,
    pub seed: u64,
    /// When set, the pinned self node counts against the fanout, as in
    /// the sampling-size-2 reading where the sample {self, one neighbor}
    /// satisfies size 2. Default draws `fanout` real neighbors.
    pub self_in_fanout: bool,
}

impl BatchRequest {
    pub fn new(targets: Vec<Vid>, fanouts: Vec<u32>, seed: u64) -> Self {
        Self {
            targets,
            fanouts,
            seed,
            self_in_fanout: false,
        }
    }
}

/// One hop's subgraph in CSR form over dense new ids.
///
/// Row `i` collects the sampled in-edges of destination id `i`; the
/// destinations of layer `l` (executed `l`-th) are exactly the ids
/// discovered up to hop `k-l`, which form the prefix `0..row_ptr.len()-1`
/// of the id space. `deg` holds full-graph degrees (self-loop included)
/// for every id up to the layer's source universe, so both destination
/// and source normalization terms can be read from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerGraph {
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub deg: Vec<u32>,
}

impl LayerGraph {
    pub fn n_dst(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn edges(&self) -> impl Iterator<Item = (u32, usize)> + '_ {
        (0..self.n_dst()).flat_map(move |i| {
            self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
                .iter()
                .map(move |&j| (j, i))
        })
    }
}

/// The reindexed sampling result: targets own ids `0..targets.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    /// Original vid of each new id, in discovery order.
    pub vids: Vec<Vid>,
    /// Inverse of `vids`.
    pub new_ids: HashMap<Vid, u32>,
    /// Layers in execution order: `layers[0]` aggregates the outermost
    /// hop, the last layer lands on the targets.
    pub layers: Vec<LayerGraph>,
    /// `n_sampled x F`, row i = embedding of `vids[i]`.
    pub embeddings: Tensor,
}

impl SampledBatch {
    pub fn n_sampled(&self) -> usize {
        self.vids.len()
    }

    /// Drops the first (already consumed) layer; used by kernels that
    /// thread the batch value through a chain of aggregation stages.
    pub fn advance(&self) -> SampledBatch {
        SampledBatch {
            vids: self.vids.clone(),
            new_ids: self.new_ids.clone(),
            layers: self.layers[1..].to_vec(),
            embeddings: self.embeddings.clone(),
        }
    }
}

/// Runs steps B-1..B-4: sample k hops outwards from the targets, assign
/// dense ids in discovery order, build per-layer CSR subgraphs, gather
/// embeddings.
pub fn sample_batch(store: &GraphStore, req: &BatchRequest) -> Result<SampledBatch> {
    if req.targets.is_empty() {
        return Err(BatchPrepError::EmptyTargets);
    }
    if req.fanouts.is_empty() {
        return Err(BatchPrepError::NoLayers);
    }
    for (i, &f) in req.fanouts.iter().enumerate() {
        if f == 0 {
            return Err(BatchPrepError::ZeroFanout(i));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut vids: Vec<Vid> = Vec::new();
    let mut new_ids: HashMap<Vid, u32> = HashMap::new();
    let assign = |v: Vid, vids: &mut Vec<Vid>, new_ids: &mut HashMap<Vid, u32>| -> u32 {
        *new_ids.entry(v).or_insert_with(|| {
            vids.push(v);
            (vids.len() - 1) as u32
        })
    };

    for &t in &req.targets {
        if !store.is_live(t) {
            return Err(GraphStoreError::NotFound(t).into());
        }
        if new_ids.contains_key(&t) {
            return Err(BatchPrepError::DuplicateTarget(t));
        }
        assign(t, &mut vids, &mut new_ids);
    }

    // Cached adjacency of every node that has been sampled from, so
    // degrees and repeat visits do not reread pages.
    let mut adj: HashMap<Vid, Vec<Vid>> = HashMap::new();
    let k = req.fanouts.len();
    // frontier_sizes[h] = number of ids discovered within hop h.
    let mut frontier_sizes: Vec<usize> = vec![vids.len()];
    // Sampled edge lists per hop: (dst new id, src new ids).
    let mut hop_edges: Vec<Vec<(u32, Vec<u32>)>> = Vec::with_capacity(k);

    for hop in 0..k {
        let fanout = req.fanouts[hop] as usize;
        let frontier_end = frontier_sizes[hop];
        let mut edges = Vec::with_capacity(frontier_end);
        for id in 0..frontier_end {
            let v = vids[id];
            if !adj.contains_key(&v) {
                let n = store.get_neighbors_with_tag(v, TAG_BATCH_GET)?;
                adj.insert(v, n);
            }
            let neighbors = &adj[&v];
            let mut others: Vec<Vid> = neighbors.iter().copied().filter(|&u| u != v).collect();
            let draw_target = if req.self_in_fanout {
                fanout.saturating_sub(1)
            } else {
                fanout
            };
            let draws = draw_target.min(others.len());
            // Partial Fisher-Yates: the first `draws` slots end up as a
            // uniform without-replacement sample, in draw order.
            for i in 0..draws {
                let j = rng.random_range(i..others.len());
                others.swap(i, j);
            }
            others.truncate(draws);

            // Self first, then the drawn neighbors in draw order.
            let mut srcs = Vec::with_capacity(draws + 1);
            srcs.push(assign(v, &mut vids, &mut new_ids));
            for u in others {
                srcs.push(assign(u, &mut vids, &mut new_ids));
            }
            edges.push((id as u32, srcs));
        }
        frontier_sizes.push(vids.len());
        hop_edges.push(edges);
    }

    // Full-graph degrees for every sampled node; leaves need one extra
    // neighbor fetch since they were never sampled from.
    let mut degrees = Vec::with_capacity(vids.len());
    for &v in &vids {
        let d = match adj.get(&v) {
            Some(n) => n.len(),
            None => store.get_neighbors_with_tag(v, TAG_BATCH_GET)?.len(),
        };
        degrees.push(d as u32);
    }

    // Execution layer l consumes the sample drawn at hop k-1-l: layer 0
    // aggregates the deepest hop, the last layer aggregates the first
    // hop and lands on the targets.
    let mut layers = Vec::with_capacity(k);
    for layer in 0..k {
        let hop = k - 1 - layer;
        let edges = &hop_edges[hop];
        let n_dst = frontier_sizes[hop];
        let src_universe = frontier_sizes[hop + 1];
        let mut row_ptr = Vec::with_capacity(n_dst + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for (dst, srcs) in edges {
            debug_assert_eq!(*dst as usize, row_ptr.len() - 1);
            col_idx.extend_from_slice(srcs);
            row_ptr.push(col_idx.len());
        }
        layers.push(LayerGraph {
            row_ptr,
            col_idx,
            deg: degrees[..src_universe].to_vec(),
        });
    }

    let feature_len = store.feature_len() as usize;
    let mut data = Vec::with_capacity(vids.len() * feature_len);
    for &v in &vids {
        data.extend(store.get_embed_with_tag(v, TAG_BATCH_GET)?);
    }
    let embeddings = Tensor::matrix(vids.len(), feature_len, data).expect("gather shape");

    Ok(SampledBatch {
        vids,
        new_ids,
        layers,
        embeddings,
    })
}

/// Expands a layer to a dense n x n adjacency matrix, A[i][j] = 1 iff
/// the layer has an edge j -> i. Bridge to the dense reference oracle.
pub fn layer_to_dense(layer: &LayerGraph, n: usize) -> Result<Vec<Vec<f32>>> {
    let mut a = vec![vec![0f32; n]; n];
    for (j, i) in layer.edges() {
        if j as usize >= n || i >= n {
            return Err(BatchPrepError::Store(GraphStoreError::Corrupt(format!(
                "edge ({j} -> {i}) exceeds dense size {n}"
            ))));
        }
        a[i][j as usize] = 1.0;
    }
    Ok(a)
}
