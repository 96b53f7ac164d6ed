//! VID-to-LPN mapping tables: the per-vid type bitmap (gmap), the
//! H-type linked-page table, the range-searched L-type table, the
//! deleted-vid free stack, and their on-device serialization.

use std::collections::BTreeMap;

use thiserror::Error;

use super::Vid;

pub const MAP_MAGIC: &[u8; 8] = b"HGNNMAP\0";
pub const MAP_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum MappingError {
    #[error("not a graphstore image: bad mapping magic")]
    BadMagic,
    #[error("unsupported mapping version {0}")]
    BadVersion(u32),
    #[error("truncated mapping tables")]
    Truncated,
    #[error("metadata region full: need {need} bytes, reserved {reserved}")]
    MetaRegionFull { need: usize, reserved: usize },
}

/// Simple growable bitmap indexed by vid. Equality ignores trailing
/// zero bytes, so a capacity-padded round trip compares equal.
#[derive(Debug, Clone, Default)]
pub struct Bitmap {
    bits: Vec<u8>,
}

impl PartialEq for Bitmap {
    fn eq(&self, other: &Self) -> bool {
        let n = self.bits.len().max(other.bits.len());
        (0..n).all(|i| {
            self.bits.get(i).copied().unwrap_or(0) == other.bits.get(i).copied().unwrap_or(0)
        })
    }
}

impl Eq for Bitmap {}

impl Bitmap {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            bits: vec![0; n.div_ceil(8)],
        }
    }

    pub fn get(&self, i: Vid) -> bool {
        let (byte, bit) = ((i / 8) as usize, i % 8);
        byte < self.bits.len() && self.bits[byte] & (1 << bit) != 0
    }

    pub fn set(&mut self, i: Vid, value: bool) {
        let (byte, bit) = ((i / 8) as usize, i % 8);
        if byte >= self.bits.len() {
            self.bits.resize(byte + 1, 0);
        }
        if value {
            self.bits[byte] |= 1 << bit;
        } else {
            self.bits[byte] &= !(1 << bit);
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bits: bytes }
    }
}

/// One L-type table entry: the page and the largest source VID whose
/// neighbor set is stored in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LtableEntry {
    pub max_vid: Vid,
    pub lpn: u64,
}

/// All mutable mapping state for a store.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GraphMapping {
    /// 1 = H-type, 0 = L-type, meaningful only for live vids.
    pub gmap: Bitmap,
    /// 1 = allocated (live) vid.
    pub live: Bitmap,
    /// H-type vid -> ordered chain of pages holding its neighbor list.
    pub h_table: BTreeMap<Vid, Vec<u64>>,
    /// Sorted by max_vid, strictly increasing.
    pub l_table: Vec<LtableEntry>,
    /// Deleted vids, reused LIFO.
    pub free_vids: Vec<Vid>,
    /// Allocation watermark: smallest never-allocated vid.
    pub next_vid: Vid,
}

impl GraphMapping {
    pub fn is_live(&self, v: Vid) -> bool {
        self.live.get(v)
    }

    pub fn is_h_type(&self, v: Vid) -> bool {
        self.gmap.get(v)
    }

    /// Index of the unique L-table entry with the least `max_vid >= v`.
    pub fn l_search(&self, v: Vid) -> Option<usize> {
        let idx = self.l_table.partition_point(|e| e.max_vid < v);
        (idx < self.l_table.len()).then_some(idx)
    }

    pub fn l_entry_for_lpn(&self, lpn: u64) -> Option<usize> {
        self.l_table.iter().position(|e| e.lpn == lpn)
    }

    /// Inserts or replaces the entry keyed by `max_vid`, keeping order.
    pub fn l_insert(&mut self, entry: LtableEntry) {
        match self
            .l_table
            .binary_search_by_key(&entry.max_vid, |e| e.max_vid)
        {
            Ok(i) => self.l_table[i] = entry,
            Err(i) => self.l_table.insert(i, entry),
        }
    }

    pub fn l_remove_by_lpn(&mut self, lpn: u64) {
        self.l_table.retain(|e| e.lpn != lpn);
    }

    /// Serializes every table into one little-endian blob.
    pub fn to_blob(&self, capacity: u64) -> Vec<u8> {
        let bitmap_len = (capacity as usize).div_ceil(8);
        let mut gmap = self.gmap.as_bytes().to_vec();
        gmap.resize(bitmap_len, 0);
        let mut live = self.live.as_bytes().to_vec();
        live.resize(bitmap_len, 0);

        let mut blob = Vec::new();
        blob.extend_from_slice(&(bitmap_len as u64).to_le_bytes());
        blob.extend_from_slice(&gmap);
        blob.extend_from_slice(&live);

        blob.extend_from_slice(&(self.h_table.len() as u64).to_le_bytes());
        for (vid, lpns) in &self.h_table {
            blob.extend_from_slice(&vid.to_le_bytes());
            blob.extend_from_slice(&(lpns.len() as u32).to_le_bytes());
            for lpn in lpns {
                blob.extend_from_slice(&lpn.to_le_bytes());
            }
        }

        blob.extend_from_slice(&(self.l_table.len() as u64).to_le_bytes());
        for e in &self.l_table {
            blob.extend_from_slice(&e.max_vid.to_le_bytes());
            blob.extend_from_slice(&0u32.to_le_bytes());
            blob.extend_from_slice(&e.lpn.to_le_bytes());
        }

        blob.extend_from_slice(&(self.free_vids.len() as u64).to_le_bytes());
        for v in &self.free_vids {
            blob.extend_from_slice(&v.to_le_bytes());
        }

        blob.extend_from_slice(&self.next_vid.to_le_bytes());
        blob
    }

    pub fn from_blob(blob: &[u8]) -> Result<Self, MappingError> {
        let mut r = Reader::new(blob);
        let bitmap_len = r.u64()? as usize;
        let gmap = Bitmap::from_bytes(r.bytes(bitmap_len)?.to_vec());
        let live = Bitmap::from_bytes(r.bytes(bitmap_len)?.to_vec());

        let h_count = r.u64()? as usize;
        let mut h_table = BTreeMap::new();
        for _ in 0..h_count {
            let vid = r.u32()?;
            let n = r.u32()? as usize;
            let mut lpns = Vec::with_capacity(n);
            for _ in 0..n {
                lpns.push(r.u64()?);
            }
            h_table.insert(vid, lpns);
        }

        let l_count = r.u64()? as usize;
        let mut l_table = Vec::with_capacity(l_count);
        for _ in 0..l_count {
            let max_vid = r.u32()?;
            let _pad = r.u32()?;
            let lpn = r.u64()?;
            l_table.push(LtableEntry { max_vid, lpn });
        }

        let free_count = r.u64()? as usize;
        let mut free_vids = Vec::with_capacity(free_count);
        for _ in 0..free_count {
            free_vids.push(r.u32()?);
        }
        let next_vid = r.u32()?;

        Ok(Self {
            gmap,
            live,
            h_table,
            l_table,
            free_vids,
            next_vid,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, at: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], MappingError> {
        if self.at + n > self.buf.len() {
            return Err(MappingError::Truncated);
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, MappingError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, MappingError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

/// Fixed store geometry decided at initialization and persisted in the
/// header page.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreLayout {
    pub feature_len: u32,
    /// Max vertices the embedding region can hold.
    pub capacity: u64,
    /// First page of the embedding region; it runs to the last page.
    pub embed_first_lpn: u64,
    /// Pages reserved for the header and mapping tables.
    pub meta_pages: u64,
    /// First page available for neighbor data (== meta_pages).
    pub neighbor_start: u64,
}

impl StoreLayout {
    pub fn record_size(&self) -> u64 {
        self.feature_len as u64 * 4
    }

    /// Absolute byte address of vid's embedding record inside the device
    /// page space (header-relative, not file-relative).
    pub fn embed_byte_addr(&self, v: Vid, page_size: u64) -> u64 {
        self.embed_first_lpn * page_size + v as u64 * self.record_size()
    }

    pub fn header_bytes(&self, next_data_lpn: u64, table_bytes: u64) -> Vec<u8> {
        let mut h = Vec::with_capacity(72);
        h.extend_from_slice(MAP_MAGIC);
        h.extend_from_slice(&MAP_VERSION.to_le_bytes());
        h.extend_from_slice(&self.feature_len.to_le_bytes());
        h.extend_from_slice(&self.capacity.to_le_bytes());
        h.extend_from_slice(&self.embed_first_lpn.to_le_bytes());
        h.extend_from_slice(&self.meta_pages.to_le_bytes());
        h.extend_from_slice(&self.neighbor_start.to_le_bytes());
        h.extend_from_slice(&next_data_lpn.to_le_bytes());
        h.extend_from_slice(&table_bytes.to_le_bytes());
        h
    }

    /// Parses the header page; returns the layout, the neighbor-space
    /// allocation watermark and the mapping blob length.
    pub fn parse_header(page: &[u8]) -> Result<(Self, u64, u64), MappingError> {
        if page.len() < 64 || &page[0..8] != MAP_MAGIC {
            return Err(MappingError::BadMagic);
        }
        let version = u32::from_le_bytes(page[8..12].try_into().unwrap());
        if version != MAP_VERSION {
            return Err(MappingError::BadVersion(version));
        }
        let feature_len = u32::from_le_bytes(page[12..16].try_into().unwrap());
        let capacity = u64::from_le_bytes(page[16..24].try_into().unwrap());
        let embed_first_lpn = u64::from_le_bytes(page[24..32].try_into().unwrap());
        let meta_pages = u64::from_le_bytes(page[32..40].try_into().unwrap());
        let neighbor_start = u64::from_le_bytes(page[40..48].try_into().unwrap());
        let next_data_lpn = u64::from_le_bytes(page[48..56].try_into().unwrap());
        let table_bytes = u64::from_le_bytes(page[56..64].try_into().unwrap());
        Ok((
            Self {
                feature_len,
                capacity,
                embed_first_lpn,
                meta_pages,
                neighbor_start,
            },
            next_data_lpn,
            table_bytes,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitmap_set_get() {
        let mut b = Bitmap::with_capacity(10);
        assert!(!b.get(9));
        b.set(9, true);
        assert!(b.get(9));
        b.set(9, false);
        assert!(!b.get(9));
        b.set(1000, true);
        assert!(b.get(1000));
    }

    #[test]
    fn blob_round_trip() {
        let mut m = GraphMapping::default();
        m.live.set(0, true);
        m.live.set(3, true);
        m.gmap.set(3, true);
        m.h_table.insert(3, vec![7, 9, 12]);
        m.l_insert(LtableEntry { max_vid: 0, lpn: 5 });
        m.l_insert(LtableEntry { max_vid: 8, lpn: 6 });
        m.free_vids = vec![2, 1];
        m.next_vid = 9;
        let blob = m.to_blob(64);
        let back = GraphMapping::from_blob(&blob).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn l_search_finds_least_upper_entry() {
        let mut m = GraphMapping::default();
        m.l_insert(LtableEntry { max_vid: 4, lpn: 1 });
        m.l_insert(LtableEntry { max_vid: 6, lpn: 2 });
        m.l_insert(LtableEntry { max_vid: 20, lpn: 3 });
        assert_eq!(m.l_search(5), Some(1));
        assert_eq!(m.l_search(6), Some(1));
        assert_eq!(m.l_search(7), Some(2));
        assert_eq!(m.l_search(4), Some(0));
        assert_eq!(m.l_search(0), Some(0));
        assert_eq!(m.l_search(21), None);
    }

    #[test]
    fn header_round_trip() {
        let layout = StoreLayout {
            feature_len: 16,
            capacity: 100,
            embed_first_lpn: 900,
            meta_pages: 8,
            neighbor_start: 8,
        };
        let mut page = layout.header_bytes(42, 1234);
        page.resize(4096, 0);
        let (back, next, bytes) = StoreLayout::parse_header(&page).unwrap();
        assert_eq!(back, layout);
        assert_eq!(next, 42);
        assert_eq!(bytes, 1234);
    }
}
