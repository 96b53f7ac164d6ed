//! Graph-centric archival layer over the simulated SSD.
//!
//! The embedding table lives at the top of the LPN space and is
//! addressed linearly by VID, so it needs no page-level mapping. The
//! adjacency data lives at the bottom (after a reserved metadata
//! extent) and is mapped per VID: high-degree vertices own chains of
//! H-type pages, low-degree vertices share L-type pages found by a
//! range search over the largest VID stored in each page.
//!
//! Interval invariant: ordered by `max_vid`, the L-type pages hold
//! disjoint, increasing VID intervals. Every page rewrite keeps in-page
//! offsets ascending by VID, so the "largest offset" eviction policy
//! always moves the largest VID of a page into the fresh page, which
//! preserves the interval invariant and keeps the single-probe range
//! search exact.

pub mod mapping;
pub mod page;
pub mod text;

use std::sync::{Arc, Barrier};
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::blockdev::{BlockdevError, SimSsd};
use mapping::{GraphMapping, LtableEntry, MappingError, StoreLayout};
use page::{
    h_page_capacity, l_max_degree, l_set_bytes, HtypePage, LtypePage, LtypeSet, PageCodecError,
    L_META_ENTRY,
};
use text::TextError;

/// Vertex identifier. The top value is reserved as a sentinel.
pub type Vid = u32;

pub const TAG_BULK_EMBED: &str = "bulk_embed";
pub const TAG_BULK_GRAPH: &str = "bulk_graph";
pub const TAG_META: &str = "meta";
pub const TAG_GET_NEIGHBORS: &str = "get_neighbors";
pub const TAG_GET_EMBED: &str = "get_embed";
pub const TAG_BATCH_GET: &str = "batch_get";
pub const TAG_ADD_VERTEX: &str = "unit_add_vertex";
pub const TAG_DELETE_VERTEX: &str = "unit_delete_vertex";
pub const TAG_ADD_EDGE: &str = "unit_add_edge";
pub const TAG_DELETE_EDGE: &str = "unit_delete_edge";
pub const TAG_UPDATE_EMBED: &str = "unit_update_embed";

#[derive(Debug, Error)]
pub enum GraphStoreError {
    #[error("vertex {0} not found")]
    NotFound(Vid),
    #[error("vertex {0} is already live")]
    AlreadyLive(Vid),
    #[error("capacity exceeded: {0}")]
    CapacityExceeded(String),
    #[error("vid space exhausted")]
    VidSpaceExhausted,
    #[error("embedding length {got} does not match feature length {expected}")]
    WrongEmbedLength { expected: usize, got: usize },
    #[error("edge endpoints must differ for edge deletion")]
    SelfLoopDelete,
    #[error("edge references vid {vid} outside the embedding table ({rows} rows)")]
    EdgeVidOutOfRange { vid: Vid, rows: u64 },
    #[error("store is not initialized on this device")]
    NotInitialized,
    #[error("store metadata is inconsistent: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Codec(#[from] PageCodecError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Blockdev(#[from] BlockdevError),
}

pub type Result<T> = std::result::Result<T, GraphStoreError>;

/// What a bulk ingest did and when. Timestamps are nanosecond offsets
/// from the start of the call, so interval containment can be checked
/// without a shared clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestReport {
    pub vertex_count: u64,
    /// Distinct undirected edges (self-loops excluded) after
    /// symmetrization and deduplication.
    pub edge_count: u64,
    pub prep_start_ns: u64,
    pub prep_end_ns: u64,
    pub embed_write_start_ns: u64,
    pub embed_write_end_ns: u64,
}

impl IngestReport {
    /// True when the graph-conversion interval is fully contained in the
    /// embedding-write interval.
    pub fn prep_overlapped(&self) -> bool {
        self.embed_write_start_ns <= self.prep_start_ns
            && self.prep_end_ns <= self.embed_write_end_ns
    }
}

/// Counters over mutable unit operations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MutationStats {
    pub update_requests: u64,
    pub l_evictions: u64,
    pub promotions: u64,
}

impl MutationStats {
    pub fn eviction_fraction(&self) -> f64 {
        if self.update_requests == 0 {
            0.0
        } else {
            self.l_evictions as f64 / self.update_requests as f64
        }
    }
}

struct StoreState {
    layout: StoreLayout,
    mapping: GraphMapping,
    /// Bump allocator for neighbor-space data pages.
    next_data_lpn: u64,
    dirty: bool,
}

/// A live store bound to one device.
pub struct GraphStore {
    dev: Arc<SimSsd>,
    state: RwLock<StoreState>,
    stats: Mutex<MutationStats>,
}

impl GraphStore {
    /// Opens a store previously initialized on this device.
    pub fn open(dev: Arc<SimSsd>) -> Result<Self> {
        let header = dev.read_page(0, TAG_META)?;
        let (layout, next_data_lpn, table_bytes) =
            StoreLayout::parse_header(&header).map_err(|e| match e {
                MappingError::BadMagic => GraphStoreError::NotInitialized,
                other => other.into(),
            })?;
        let mut blob = Vec::with_capacity(table_bytes as usize);
        let mut lpn = 1;
        while (blob.len() as u64) < table_bytes {
            blob.extend_from_slice(&dev.read_page(lpn, TAG_META)?);
            lpn += 1;
        }
        blob.truncate(table_bytes as usize);
        let mapping = GraphMapping::from_blob(&blob)?;
        Ok(Self {
            dev,
            state: RwLock::new(StoreState {
                layout,
                mapping,
                next_data_lpn,
                dirty: false,
            }),
            stats: Mutex::new(MutationStats::default()),
        })
    }

    /// Initializes an empty store with the given feature length and
    /// vertex capacity. Everything the device held before is ignored.
    pub fn create_empty(dev: Arc<SimSsd>, feature_len: u32, capacity: u64) -> Result<Self> {
        let layout = Self::compute_layout(&dev, feature_len, capacity)?;
        let store = Self {
            state: RwLock::new(StoreState {
                layout,
                mapping: GraphMapping::default(),
                next_data_lpn: layout.neighbor_start,
                dirty: true,
            }),
            dev,
            stats: Mutex::new(MutationStats::default()),
        };
        {
            let mut state = store.state.write();
            store.persist_mapping(&mut state)?;
        }
        Ok(store)
    }

    fn compute_layout(dev: &SimSsd, feature_len: u32, capacity: u64) -> Result<StoreLayout> {
        let ps = dev.page_size() as u64;
        if dev.page_size() as usize > u16::MAX as usize + 1 {
            return Err(GraphStoreError::CapacityExceeded(format!(
                "page size {ps} exceeds the L-type offset encoding"
            )));
        }
        if feature_len == 0 {
            return Err(GraphStoreError::CapacityExceeded(
                "feature length must be positive".into(),
            ));
        }
        let record_size = feature_len as u64 * 4;
        let region_pages = (capacity * record_size).div_ceil(ps);
        let meta_bytes = ps + 2 * capacity.div_ceil(8) + 36 * capacity + 65_536;
        let meta_pages = meta_bytes.div_ceil(ps);
        let embed_first_lpn = dev
            .page_count()
            .checked_sub(region_pages)
            .ok_or_else(|| GraphStoreError::CapacityExceeded("embedding region".into()))?;
        if meta_pages + 1 >= embed_first_lpn {
            return Err(GraphStoreError::CapacityExceeded(format!(
                "device too small: {meta_pages} metadata pages, embeddings start at {embed_first_lpn}"
            )));
        }
        Ok(StoreLayout {
            feature_len,
            capacity,
            embed_first_lpn,
            meta_pages,
            neighbor_start: meta_pages,
        })
    }

    pub fn device(&self) -> &Arc<SimSsd> {
        &self.dev
    }

    pub fn feature_len(&self) -> u32 {
        self.state.read().layout.feature_len
    }

    pub fn capacity(&self) -> u64 {
        self.state.read().layout.capacity
    }

    pub fn next_vid(&self) -> Vid {
        self.state.read().mapping.next_vid
    }

    pub fn is_live(&self, v: Vid) -> bool {
        self.state.read().mapping.is_live(v)
    }

    pub fn mutation_stats(&self) -> MutationStats {
        *self.stats.lock()
    }

    pub fn live_vids(&self) -> Vec<Vid> {
        let state = self.state.read();
        (0..state.mapping.next_vid)
            .filter(|&v| state.mapping.is_live(v))
            .collect()
    }

    // ------------------------------------------------------------------
    // Bulk operation
    // ------------------------------------------------------------------

    /// Replaces the whole store from a raw edge array and an embedding
    /// table. The adjacency conversion runs concurrently with the
    /// embedding writes; conversion starts only once the embedding burst
    /// has begun, and converted graph pages are flushed after it ends.
    pub fn update_graph(&self, edge_text: &str, embed_text: &str) -> Result<IngestReport> {
        let mut state = self.state.write();
        let (feature_len, rows) = text::scan_embeddings(embed_text)?;
        let capacity = ((rows as u64) * 5).div_ceil(4).max(1);
        let layout = Self::compute_layout(&self.dev, feature_len as u32, capacity)?;
        let ps = self.dev.page_size() as usize;

        let epoch = Instant::now();
        let start_gate = Barrier::new(2);
        let (embed_res, conv_res) = std::thread::scope(|scope| {
            let embed = scope.spawn(|| -> Result<(u64, u64)> {
                let start = epoch.elapsed().as_nanos() as u64;
                start_gate.wait();
                let mut writer = EmbedWriter::new(&self.dev, layout.embed_first_lpn, ps);
                text::stream_embeddings(embed_text, feature_len, |_, row| {
                    writer.push_row(row);
                })?;
                writer.finish()?;
                Ok((start, epoch.elapsed().as_nanos() as u64))
            });

            start_gate.wait();
            let prep_start = epoch.elapsed().as_nanos() as u64;
            let conv = convert_graph(edge_text, rows as u64, &layout, ps);
            let prep_end = epoch.elapsed().as_nanos() as u64;
            (
                embed.join().expect("embedding writer panicked"),
                conv.map(|c| (c, prep_start, prep_end)),
            )
        });

        let (embed_start, embed_end) = embed_res?;
        let (staged, prep_start, prep_end) = conv_res?;

        for (lpn, bytes) in &staged.pages {
            self.dev.write_page(*lpn, bytes, TAG_BULK_GRAPH)?;
        }
        state.layout = layout;
        state.mapping = staged.mapping;
        state.next_data_lpn = staged.next_data_lpn;
        state.dirty = true;
        self.persist_mapping(&mut state)?;

        Ok(IngestReport {
            vertex_count: rows as u64,
            edge_count: staged.edge_count,
            prep_start_ns: prep_start,
            prep_end_ns: prep_end,
            embed_write_start_ns: embed_start,
            embed_write_end_ns: embed_end,
        })
    }

    // ------------------------------------------------------------------
    // Queries
    // ------------------------------------------------------------------

    pub fn get_neighbors(&self, v: Vid) -> Result<Vec<Vid>> {
        self.get_neighbors_with_tag(v, TAG_GET_NEIGHBORS)
    }

    pub fn get_neighbors_with_tag(&self, v: Vid, tag: &str) -> Result<Vec<Vid>> {
        let state = self.state.read();
        self.read_neighbors(&state, v, tag)
    }

    pub fn get_embed(&self, v: Vid) -> Result<Vec<f32>> {
        self.get_embed_with_tag(v, TAG_GET_EMBED)
    }

    pub fn get_embed_with_tag(&self, v: Vid, tag: &str) -> Result<Vec<f32>> {
        let state = self.state.read();
        if !state.mapping.is_live(v) {
            return Err(GraphStoreError::NotFound(v));
        }
        let bytes = self.read_embed_bytes(&state, v, tag)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    // ------------------------------------------------------------------
    // Unit operations
    // ------------------------------------------------------------------

    /// Pops the most recently deleted VID, or advances the watermark.
    pub fn alloc_vid(&self) -> Result<Vid> {
        let mut state = self.state.write();
        let vid = if let Some(v) = state.mapping.free_vids.pop() {
            v
        } else {
            if state.mapping.next_vid as u64 >= state.layout.capacity {
                return Err(GraphStoreError::VidSpaceExhausted);
            }
            let v = state.mapping.next_vid;
            state.mapping.next_vid += 1;
            v
        };
        state.dirty = true;
        self.persist_mapping(&mut state)?;
        Ok(vid)
    }

    /// Adds a fresh vertex with only its self-loop edge. New vertices
    /// always start L-type.
    pub fn add_vertex(&self, v: Vid, embed: &[f32]) -> Result<()> {
        let mut state = self.state.write();
        self.stats.lock().update_requests += 1;
        if state.mapping.is_live(v) {
            return Err(GraphStoreError::AlreadyLive(v));
        }
        if (v as u64) >= state.layout.capacity {
            return Err(GraphStoreError::CapacityExceeded(format!(
                "vid {} >= embedding capacity {}",
                v, state.layout.capacity
            )));
        }
        if embed.len() != state.layout.feature_len as usize {
            return Err(GraphStoreError::WrongEmbedLength {
                expected: state.layout.feature_len as usize,
                got: embed.len(),
            });
        }

        self.l_place_new_set(&mut state, v, vec![v], TAG_ADD_VERTEX)?;

        self.write_embed_bytes(&state, v, embed, TAG_ADD_VERTEX)?;
        state.mapping.live.set(v, true);
        state.mapping.gmap.set(v, false);
        state.mapping.free_vids.retain(|&x| x != v);
        if v >= state.mapping.next_vid {
            state.mapping.next_vid = v + 1;
        }
        state.dirty = true;
        self.persist_mapping(&mut state)
    }

    /// Removes a vertex, all edges touching it, and its neighbor pages.
    /// The VID goes on the free stack; the embedding record is orphaned.
    pub fn delete_vertex(&self, v: Vid) -> Result<()> {
        let mut state = self.state.write();
        self.stats.lock().update_requests += 1;
        if !state.mapping.is_live(v) {
            return Err(GraphStoreError::NotFound(v));
        }
        let neighbors = self.read_neighbors(&state, v, TAG_DELETE_VERTEX)?;
        for u in neighbors {
            if u != v {
                self.remove_from_side(&mut state, u, v, TAG_DELETE_VERTEX)?;
            }
        }

        if state.mapping.is_h_type(v) {
            let chain = state
                .mapping
                .h_table
                .remove(&v)
                .ok_or_else(|| GraphStoreError::Corrupt(format!("h-type vid {v} has no chain")))?;
            for lpn in chain {
                self.dev.trim(lpn, TAG_DELETE_VERTEX)?;
            }
        } else {
            let idx = state
                .mapping
                .l_search(v)
                .ok_or_else(|| GraphStoreError::Corrupt(format!("l-type vid {v} unmapped")))?;
            let lpn = state.mapping.l_table[idx].lpn;
            let mut lpage = self.read_l_page(lpn, TAG_DELETE_VERTEX)?;
            lpage.remove(v);
            if lpage.sets.is_empty() {
                // Emptied page stays allocated; only the table entry goes.
                state.mapping.l_table.remove(idx);
            } else {
                state.mapping.l_table[idx].max_vid = lpage.max_vid().unwrap();
            }
            self.write_l_page(lpn, &lpage, TAG_DELETE_VERTEX, true)?;
        }

        state.mapping.live.set(v, false);
        state.mapping.gmap.set(v, false);
        state.mapping.free_vids.push(v);
        state.dirty = true;
        self.persist_mapping(&mut state)
    }

    /// Inserts the undirected edge dst <-> src. Present edges are
    /// tolerated (idempotent insert).
    pub fn add_edge(&self, dst: Vid, src: Vid) -> Result<()> {
        let mut state = self.state.write();
        self.stats.lock().update_requests += 1;
        if !state.mapping.is_live(dst) {
            return Err(GraphStoreError::NotFound(dst));
        }
        if !state.mapping.is_live(src) {
            return Err(GraphStoreError::NotFound(src));
        }
        if dst == src {
            return Ok(());
        }
        self.insert_into_side(&mut state, dst, src, TAG_ADD_EDGE)?;
        self.insert_into_side(&mut state, src, dst, TAG_ADD_EDGE)?;
        self.persist_mapping(&mut state)
    }

    /// Removes the undirected edge from both directions. Absent edges
    /// are a no-op; self-loops are never deleted this way.
    pub fn delete_edge(&self, dst: Vid, src: Vid) -> Result<()> {
        let mut state = self.state.write();
        self.stats.lock().update_requests += 1;
        if !state.mapping.is_live(dst) {
            return Err(GraphStoreError::NotFound(dst));
        }
        if !state.mapping.is_live(src) {
            return Err(GraphStoreError::NotFound(src));
        }
        if dst == src {
            return Err(GraphStoreError::SelfLoopDelete);
        }
        self.remove_from_side(&mut state, dst, src, TAG_DELETE_EDGE)?;
        self.remove_from_side(&mut state, src, dst, TAG_DELETE_EDGE)?;
        self.persist_mapping(&mut state)
    }

    /// Overwrites a vertex's embedding record in place.
    pub fn update_embed(&self, v: Vid, embed: &[f32]) -> Result<()> {
        let state = self.state.write();
        self.stats.lock().update_requests += 1;
        if !state.mapping.is_live(v) {
            return Err(GraphStoreError::NotFound(v));
        }
        if embed.len() != state.layout.feature_len as usize {
            return Err(GraphStoreError::WrongEmbedLength {
                expected: state.layout.feature_len as usize,
                got: embed.len(),
            });
        }
        self.write_embed_bytes(&state, v, embed, TAG_UPDATE_EMBED)
    }

    // ------------------------------------------------------------------
    // Internals: neighbor space
    // ------------------------------------------------------------------

    fn read_l_page(&self, lpn: u64, tag: &str) -> Result<LtypePage> {
        let ps = self.dev.page_size() as usize;
        let bytes = self.dev.read_page(lpn, tag)?;
        Ok(LtypePage::decode(&bytes, ps)?)
    }

    fn write_l_page(&self, lpn: u64, page: &LtypePage, tag: &str, rmw: bool) -> Result<()> {
        let ps = self.dev.page_size() as usize;
        self.dev.write_page(lpn, &page.encode(ps)?, tag)?;
        if rmw {
            self.dev.record_rmw(tag);
        }
        Ok(())
    }

    fn read_h_page(&self, lpn: u64, tag: &str) -> Result<HtypePage> {
        let ps = self.dev.page_size() as usize;
        let bytes = self.dev.read_page(lpn, tag)?;
        Ok(HtypePage::decode(&bytes, ps)?)
    }

    fn write_h_page(&self, lpn: u64, page: &HtypePage, tag: &str, rmw: bool) -> Result<()> {
        let ps = self.dev.page_size() as usize;
        self.dev.write_page(lpn, &page.encode(ps)?, tag)?;
        if rmw {
            self.dev.record_rmw(tag);
        }
        Ok(())
    }

    fn alloc_data_page(&self, state: &mut StoreState) -> Result<u64> {
        if state.next_data_lpn >= state.layout.embed_first_lpn {
            return Err(GraphStoreError::CapacityExceeded(
                "neighbor space ran into the embedding region".into(),
            ));
        }
        let lpn = state.next_data_lpn;
        state.next_data_lpn += 1;
        state.dirty = true;
        Ok(lpn)
    }

    fn read_neighbors(&self, state: &StoreState, v: Vid, tag: &str) -> Result<Vec<Vid>> {
        if !state.mapping.is_live(v) {
            return Err(GraphStoreError::NotFound(v));
        }
        if state.mapping.is_h_type(v) {
            let chain = state
                .mapping
                .h_table
                .get(&v)
                .ok_or_else(|| GraphStoreError::Corrupt(format!("h-type vid {v} has no chain")))?;
            let mut out = Vec::new();
            for &lpn in chain {
                out.extend(self.read_h_page(lpn, tag)?.neighbors);
            }
            // Pages are each sorted but later appends land in the tail
            // page, so the concatenation needs one final sort.
            out.sort_unstable();
            Ok(out)
        } else {
            let idx = state
                .mapping
                .l_search(v)
                .ok_or_else(|| GraphStoreError::Corrupt(format!("l-type vid {v} unmapped")))?;
            let lpn = state.mapping.l_table[idx].lpn;
            let lpage = self.read_l_page(lpn, tag)?;
            let set = lpage.find(v).ok_or_else(|| {
                GraphStoreError::Corrupt(format!("vid {v} missing from page {lpn}"))
            })?;
            Ok(set.neighbors.clone())
        }
    }

    /// Places a brand-new neighbor set for `v`. Reused VIDs land in the
    /// page whose interval covers them; watermark VIDs extend the last
    /// page or open a fresh one.
    fn l_place_new_set(
        &self,
        state: &mut StoreState,
        v: Vid,
        neighbors: Vec<Vid>,
        tag: &str,
    ) -> Result<()> {
        let ps = self.dev.page_size() as usize;
        if let Some(idx) = state.mapping.l_search(v) {
            self.l_upsert(state, idx, v, neighbors, tag)
        } else if let Some(last_idx) = state.mapping.l_table.len().checked_sub(1) {
            let lpn = state.mapping.l_table[last_idx].lpn;
            let mut lpage = self.read_l_page(lpn, tag)?;
            if lpage.packed_bytes() + l_set_bytes(neighbors.len()) + L_META_ENTRY <= ps {
                lpage.upsert(v, neighbors);
                state.mapping.l_table[last_idx].max_vid = v;
                state.dirty = true;
                self.write_l_page(lpn, &lpage, tag, true)
            } else {
                self.l_open_fresh_page(state, v, neighbors, tag)
            }
        } else {
            self.l_open_fresh_page(state, v, neighbors, tag)
        }
    }

    fn l_open_fresh_page(
        &self,
        state: &mut StoreState,
        v: Vid,
        neighbors: Vec<Vid>,
        tag: &str,
    ) -> Result<()> {
        let lpn = self.alloc_data_page(state)?;
        let mut lpage = LtypePage::default();
        lpage.upsert(v, neighbors);
        self.write_l_page(lpn, &lpage, tag, false)?;
        state.mapping.l_insert(LtableEntry { max_vid: v, lpn });
        state.dirty = true;
        Ok(())
    }

    /// Rewrites `v`'s set inside the page owned by l_table entry `idx`.
    /// While the page overflows, the set with the largest offset (always
    /// the largest VID in the page) is evicted to a fresh page. The
    /// resident entry's key is lowered before the evicted keys are
    /// inserted, so table order stays strict.
    fn l_upsert(
        &self,
        state: &mut StoreState,
        idx: usize,
        v: Vid,
        neighbors: Vec<Vid>,
        tag: &str,
    ) -> Result<()> {
        let ps = self.dev.page_size() as usize;
        let lpn = state.mapping.l_table[idx].lpn;
        let old_max = state.mapping.l_table[idx].max_vid;
        let mut lpage = self.read_l_page(lpn, tag)?;
        lpage.upsert(v, neighbors);
        let mut evicted: Vec<LtypeSet> = Vec::new();
        while lpage.packed_bytes() > ps {
            let victim = lpage
                .largest_offset_set()
                .map(|s| s.src_vid)
                .expect("overflowing page cannot be empty");
            evicted.push(lpage.remove(victim).unwrap());
            lpage.repack();
        }

        match lpage.max_vid() {
            None => {
                state.mapping.l_table.remove(idx);
                state.dirty = true;
            }
            Some(max) => {
                if max != old_max {
                    state.mapping.l_table[idx].max_vid = max;
                    state.dirty = true;
                }
            }
        }
        self.write_l_page(lpn, &lpage, tag, true)?;

        for set in evicted {
            self.l_evict_to_fresh_page(state, set, tag)?;
        }
        Ok(())
    }

    fn l_evict_to_fresh_page(
        &self,
        state: &mut StoreState,
        set: LtypeSet,
        tag: &str,
    ) -> Result<()> {
        self.stats.lock().l_evictions += 1;
        let lpn = self.alloc_data_page(state)?;
        let mut fresh = LtypePage::default();
        fresh.upsert(set.src_vid, set.neighbors);
        self.write_l_page(lpn, &fresh, tag, false)?;
        state.mapping.l_insert(LtableEntry {
            max_vid: set.src_vid,
            lpn,
        });
        state.dirty = true;
        Ok(())
    }

    /// Moves `v` out of the L world into a fresh H-type chain: flip the
    /// gmap bit, write the set as H pages, drop it from its L page.
    fn l_promote(
        &self,
        state: &mut StoreState,
        idx: usize,
        v: Vid,
        neighbors: Vec<Vid>,
        tag: &str,
    ) -> Result<()> {
        let ps = self.dev.page_size() as usize;
        self.stats.lock().promotions += 1;

        let lpn = state.mapping.l_table[idx].lpn;
        let mut lpage = self.read_l_page(lpn, tag)?;
        if lpage.remove(v).is_some() {
            if lpage.sets.is_empty() {
                state.mapping.l_table.remove(idx);
            } else {
                state.mapping.l_table[idx].max_vid = lpage.max_vid().unwrap();
            }
            self.write_l_page(lpn, &lpage, tag, true)?;
        }

        let mut chain = Vec::new();
        for chunk in neighbors.chunks(h_page_capacity(ps)) {
            let page_lpn = self.alloc_data_page(state)?;
            self.write_h_page(
                page_lpn,
                &HtypePage {
                    neighbors: chunk.to_vec(),
                },
                tag,
                false,
            )?;
            chain.push(page_lpn);
        }
        state.mapping.h_table.insert(v, chain);
        state.mapping.gmap.set(v, true);
        state.dirty = true;
        Ok(())
    }

    /// Adds `b` into N(a); no-op if already present.
    fn insert_into_side(&self, state: &mut StoreState, a: Vid, b: Vid, tag: &str) -> Result<()> {
        let ps = self.dev.page_size() as usize;
        if state.mapping.is_h_type(a) {
            let chain = state
                .mapping
                .h_table
                .get(&a)
                .ok_or_else(|| GraphStoreError::Corrupt(format!("h-type vid {a} has no chain")))?
                .clone();
            let mut last_page = None;
            for &lpn in &chain {
                let page = self.read_h_page(lpn, tag)?;
                if page.neighbors.binary_search(&b).is_ok() {
                    return Ok(());
                }
                last_page = Some(page);
            }
            let last_lpn = *chain.last().expect("h chain is never empty");
            let mut last = last_page.expect("h chain is never empty");
            if last.neighbors.len() < h_page_capacity(ps) {
                let pos = last.neighbors.binary_search(&b).unwrap_err();
                last.neighbors.insert(pos, b);
                self.write_h_page(last_lpn, &last, tag, true)?;
            } else {
                let lpn = self.alloc_data_page(state)?;
                self.write_h_page(lpn, &HtypePage { neighbors: vec![b] }, tag, false)?;
                state.mapping.h_table.get_mut(&a).unwrap().push(lpn);
                state.dirty = true;
            }
            Ok(())
        } else {
            let idx = state
                .mapping
                .l_search(a)
                .ok_or_else(|| GraphStoreError::Corrupt(format!("l-type vid {a} unmapped")))?;
            let lpn = state.mapping.l_table[idx].lpn;
            let lpage = self.read_l_page(lpn, tag)?;
            let set = lpage.find(a).ok_or_else(|| {
                GraphStoreError::Corrupt(format!("vid {a} missing from page {lpn}"))
            })?;
            match set.neighbors.binary_search(&b) {
                Ok(_) => Ok(()),
                Err(pos) => {
                    let mut neighbors = set.neighbors.clone();
                    neighbors.insert(pos, b);
                    if neighbors.len() > l_max_degree(ps) {
                        self.l_promote(state, idx, a, neighbors, tag)
                    } else {
                        self.l_upsert(state, idx, a, neighbors, tag)
                    }
                }
            }
        }
    }

    /// Removes `b` from N(a); no-op if absent.
    fn remove_from_side(&self, state: &mut StoreState, a: Vid, b: Vid, tag: &str) -> Result<()> {
        if state.mapping.is_h_type(a) {
            let chain = state
                .mapping
                .h_table
                .get(&a)
                .ok_or_else(|| GraphStoreError::Corrupt(format!("h-type vid {a} has no chain")))?
                .clone();
            for &lpn in &chain {
                let mut page = self.read_h_page(lpn, tag)?;
                if let Ok(pos) = page.neighbors.binary_search(&b) {
                    page.neighbors.remove(pos);
                    // Pages emptied to count 0 stay linked; there is no
                    // chain compaction.
                    self.write_h_page(lpn, &page, tag, true)?;
                    return Ok(());
                }
            }
            Ok(())
        } else {
            let idx = state
                .mapping
                .l_search(a)
                .ok_or_else(|| GraphStoreError::Corrupt(format!("l-type vid {a} unmapped")))?;
            let lpn = state.mapping.l_table[idx].lpn;
            let mut lpage = self.read_l_page(lpn, tag)?;
            let set_idx = lpage
                .sets
                .binary_search_by_key(&a, |s| s.src_vid)
                .map_err(|_| {
                    GraphStoreError::Corrupt(format!("vid {a} missing from page {lpn}"))
                })?;
            match lpage.sets[set_idx].neighbors.binary_search(&b) {
                Err(_) => Ok(()),
                Ok(pos) => {
                    // Erase in place: the set shrinks at its offset, no
                    // repacking of the other sets.
                    lpage.sets[set_idx].neighbors.remove(pos);
                    self.write_l_page(lpn, &lpage, tag, true)?;
                    Ok(())
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // Internals: embedding space
    // ------------------------------------------------------------------

    fn read_embed_bytes(&self, state: &StoreState, v: Vid, tag: &str) -> Result<Vec<u8>> {
        let ps = self.dev.page_size() as u64;
        let record = state.layout.record_size();
        let addr = state.layout.embed_byte_addr(v, ps);
        let mut out = Vec::with_capacity(record as usize);
        let mut at = addr;
        while at < addr + record {
            let lpn = at / ps;
            let off = (at % ps) as usize;
            let take = ((addr + record - at) as usize).min(ps as usize - off);
            let page = self.dev.read_page(lpn, tag)?;
            out.extend_from_slice(&page[off..off + take]);
            at += take as u64;
        }
        Ok(out)
    }

    /// Read-modify-writes every page the record spans.
    fn write_embed_bytes(
        &self,
        state: &StoreState,
        v: Vid,
        embed: &[f32],
        tag: &str,
    ) -> Result<()> {
        let ps = self.dev.page_size() as u64;
        let record = state.layout.record_size();
        let addr = state.layout.embed_byte_addr(v, ps);
        let mut bytes = Vec::with_capacity(record as usize);
        for f in embed {
            bytes.extend_from_slice(&f.to_le_bytes());
        }
        let mut at = addr;
        let mut consumed = 0usize;
        while at < addr + record {
            let lpn = at / ps;
            let off = (at % ps) as usize;
            let take = ((addr + record - at) as usize).min(ps as usize - off);
            let mut page = self.dev.read_page(lpn, tag)?;
            page[off..off + take].copy_from_slice(&bytes[consumed..consumed + take]);
            self.dev.write_page(lpn, &page, tag)?;
            self.dev.record_rmw(tag);
            at += take as u64;
            consumed += take;
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Internals: metadata persistence
    // ------------------------------------------------------------------

    fn persist_mapping(&self, state: &mut StoreState) -> Result<()> {
        if !state.dirty {
            return Ok(());
        }
        let ps = self.dev.page_size() as usize;
        let blob = state.mapping.to_blob(state.layout.capacity);
        let pages_needed = blob.len().div_ceil(ps) as u64;
        if 1 + pages_needed > state.layout.meta_pages {
            return Err(MappingError::MetaRegionFull {
                need: blob.len(),
                reserved: ((state.layout.meta_pages - 1) as usize) * ps,
            }
            .into());
        }
        for (i, chunk) in blob.chunks(ps).enumerate() {
            let mut page = vec![0u8; ps];
            page[..chunk.len()].copy_from_slice(chunk);
            self.dev.write_page(1 + i as u64, &page, TAG_META)?;
        }
        let mut header = state
            .layout
            .header_bytes(state.next_data_lpn, blob.len() as u64);
        header.resize(ps, 0);
        self.dev.write_page(0, &header, TAG_META)?;
        state.dirty = false;
        Ok(())
    }

    // ------------------------------------------------------------------
    // Test support
    // ------------------------------------------------------------------

    /// Scans every L-table page for a set owned by `v`. Tests use this to
    /// assert the range search resolves through exactly one entry.
    pub fn debug_l_pages_containing(&self, v: Vid) -> Result<Vec<u64>> {
        let state = self.state.read();
        let mut out = Vec::new();
        for e in &state.mapping.l_table {
            let lpage = self.read_l_page(e.lpn, TAG_META)?;
            if lpage.find(v).is_some() {
                out.push(e.lpn);
            }
        }
        Ok(out)
    }

    /// Checks the structural invariants of the mapping tables and page
    /// contents; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<()> {
        let state = self.state.read();
        let m = &state.mapping;
        let mut prev: Option<Vid> = None;
        for e in &m.l_table {
            if let Some(p) = prev {
                if e.max_vid <= p {
                    return Err(GraphStoreError::Corrupt(
                        "l_table not strictly increasing".into(),
                    ));
                }
            }
            let lpage = self.read_l_page(e.lpn, TAG_META)?;
            match lpage.max_vid() {
                Some(mv) if mv == e.max_vid => {}
                other => {
                    return Err(GraphStoreError::Corrupt(format!(
                        "entry max {} != page max {:?}",
                        e.max_vid, other
                    )))
                }
            }
            if let Some(p) = prev {
                if let Some(first) = lpage.sets.first() {
                    if first.src_vid <= p {
                        return Err(GraphStoreError::Corrupt(
                            "l pages do not hold disjoint vid intervals".into(),
                        ));
                    }
                }
            }
            for set in &lpage.sets {
                if !m.is_live(set.src_vid) || m.is_h_type(set.src_vid) {
                    return Err(GraphStoreError::Corrupt(format!(
                        "page {} stores vid {} which is not live l-type",
                        e.lpn, set.src_vid
                    )));
                }
            }
            prev = Some(e.max_vid);
        }
        for (&v, chain) in &m.h_table {
            if !m.is_live(v) || !m.is_h_type(v) {
                return Err(GraphStoreError::Corrupt(format!(
                    "h_table holds vid {v} which is not live h-type"
                )));
            }
            if chain.is_empty() {
                return Err(GraphStoreError::Corrupt(format!("empty chain for vid {v}")));
            }
            let mut seen = std::collections::BTreeSet::new();
            for &lpn in chain {
                if !seen.insert(lpn) {
                    return Err(GraphStoreError::Corrupt(format!(
                        "duplicate lpn {lpn} in chain of vid {v}"
                    )));
                }
            }
        }
        for v in 0..m.next_vid {
            if m.is_live(v) && m.free_vids.contains(&v) {
                return Err(GraphStoreError::Corrupt(format!(
                    "vid {v} both live and on the free stack"
                )));
            }
            if m.is_live(v) {
                let in_h = m.h_table.contains_key(&v);
                let in_l = m
                    .l_search(v)
                    .map(|i| {
                        self.read_l_page(m.l_table[i].lpn, TAG_META)
                            .map(|p| p.find(v).is_some())
                            .unwrap_or(false)
                    })
                    .unwrap_or(false);
                let expected_h = m.is_h_type(v);
                if expected_h != in_h || expected_h == in_l {
                    return Err(GraphStoreError::Corrupt(format!(
                        "vid {v} not resolvable through exactly one table \
                         (gmap h={expected_h}, h={in_h}, l={in_l})"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ----------------------------------------------------------------------
// Bulk ingest helpers
// ----------------------------------------------------------------------

struct StagedGraph {
    mapping: GraphMapping,
    pages: Vec<(u64, Vec<u8>)>,
    next_data_lpn: u64,
    edge_count: u64,
}

/// Converts a raw edge array into staged H/L pages and mapping tables:
/// symmetrize, merge, sort, inject self-loops, then pack ascending VIDs
/// into pages.
fn convert_graph(
    edge_text: &str,
    rows: u64,
    layout: &StoreLayout,
    page_size: usize,
) -> Result<StagedGraph> {
    let edges = text::parse_edge_array(edge_text)?;
    let mut adj: Vec<Vec<Vid>> = vec![Vec::new(); rows as usize];
    for (s, d) in edges {
        if s as u64 >= rows {
            return Err(GraphStoreError::EdgeVidOutOfRange { vid: s, rows });
        }
        if d as u64 >= rows {
            return Err(GraphStoreError::EdgeVidOutOfRange { vid: d, rows });
        }
        if s == d {
            continue;
        }
        adj[s as usize].push(d);
        adj[d as usize].push(s);
    }
    let mut edge_count = 0u64;
    for (v, list) in adj.iter_mut().enumerate() {
        list.push(v as Vid);
        list.sort_unstable();
        list.dedup();
        edge_count += (list.len() - 1) as u64;
    }
    edge_count /= 2;

    let mut mapping = GraphMapping::default();
    mapping.next_vid = rows as Vid;
    let mut pages: Vec<(u64, Vec<u8>)> = Vec::new();
    let mut next_lpn = layout.neighbor_start;
    let mut open_l: Option<(u64, LtypePage)> = None;

    fn alloc(next_lpn: &mut u64, limit: u64) -> Result<u64> {
        if *next_lpn >= limit {
            return Err(GraphStoreError::CapacityExceeded(
                "neighbor space ran into the embedding region".into(),
            ));
        }
        let lpn = *next_lpn;
        *next_lpn += 1;
        Ok(lpn)
    }

    for (v, list) in adj.iter().enumerate() {
        let v = v as Vid;
        mapping.live.set(v, true);
        if list.len() > l_max_degree(page_size) {
            mapping.gmap.set(v, true);
            let mut chain = Vec::new();
            for chunk in list.chunks(h_page_capacity(page_size)) {
                let lpn = alloc(&mut next_lpn, layout.embed_first_lpn)?;
                pages.push((
                    lpn,
                    HtypePage {
                        neighbors: chunk.to_vec(),
                    }
                    .encode(page_size)?,
                ));
                chain.push(lpn);
            }
            mapping.h_table.insert(v, chain);
        } else {
            let need = l_set_bytes(list.len()) + L_META_ENTRY;
            let (lpn, mut lpage) = match open_l.take() {
                Some((lpn, lpage)) if lpage.packed_bytes() + need <= page_size => (lpn, lpage),
                Some((lpn, lpage)) => {
                    mapping.l_insert(LtableEntry {
                        max_vid: lpage.max_vid().unwrap(),
                        lpn,
                    });
                    pages.push((lpn, lpage.encode(page_size)?));
                    (
                        alloc(&mut next_lpn, layout.embed_first_lpn)?,
                        LtypePage::default(),
                    )
                }
                None => (
                    alloc(&mut next_lpn, layout.embed_first_lpn)?,
                    LtypePage::default(),
                ),
            };
            lpage.upsert(v, list.clone());
            open_l = Some((lpn, lpage));
        }
    }
    if let Some((lpn, lpage)) = open_l {
        mapping.l_insert(LtableEntry {
            max_vid: lpage.max_vid().unwrap(),
            lpn,
        });
        pages.push((lpn, lpage.encode(page_size)?));
    }

    Ok(StagedGraph {
        mapping,
        pages,
        next_data_lpn: next_lpn,
        edge_count,
    })
}

/// Buffers sequential record bytes and flushes whole pages into the
/// embedding region.
struct EmbedWriter<'a> {
    dev: &'a SimSsd,
    lpn: u64,
    buf: Vec<u8>,
    fill: usize,
    result: std::result::Result<(), BlockdevError>,
}

impl<'a> EmbedWriter<'a> {
    fn new(dev: &'a SimSsd, first_lpn: u64, page_size: usize) -> Self {
        Self {
            dev,
            lpn: first_lpn,
            buf: vec![0u8; page_size],
            fill: 0,
            result: Ok(()),
        }
    }

    fn push_row(&mut self, row: &[f32]) {
        if self.result.is_err() {
            return;
        }
        for f in row {
            let bytes = f.to_le_bytes();
            let mut at = 0;
            while at < 4 {
                let take = (4 - at).min(self.buf.len() - self.fill);
                self.buf[self.fill..self.fill + take].copy_from_slice(&bytes[at..at + take]);
                self.fill += take;
                at += take;
                if self.fill == self.buf.len() {
                    if let Err(e) = self.flush_page() {
                        self.result = Err(e);
                        return;
                    }
                }
            }
        }
    }

    fn flush_page(&mut self) -> std::result::Result<(), BlockdevError> {
        self.dev.write_page(self.lpn, &self.buf, TAG_BULK_EMBED)?;
        self.lpn += 1;
        self.fill = 0;
        self.buf.fill(0);
        Ok(())
    }

    fn finish(&mut self) -> std::result::Result<(), BlockdevError> {
        if self.result.is_ok() && self.fill > 0 {
            self.result = self.flush_page();
        }
        std::mem::replace(&mut self.result, Ok(()))
    }
}
