//! On-page codecs for the two neighbor-list page layouts.
//!
//! H-type pages hold one slice of a single high-degree vertex's neighbor
//! list: a `u32` count followed by that many ascending `u32` VIDs, zero
//! padded to the page size.
//!
//! L-type pages pack the whole neighbor sets of several low-degree
//! vertices. Sets grow upward from byte 0, each as a `u32` degree header
//! followed by `degree` ascending `u32` VIDs. Metadata grows downward
//! from the page tail: the last four bytes hold the set count, preceded
//! by one 8-byte entry per set `{src_vid: u32, offset: u16, reserved:
//! u16}`, stored in ascending `src_vid` order. Offsets are strictly
//! increasing in that same order, so the set with the numerically
//! largest offset is always the one owned by the largest VID in the
//! page. Encoding is canonical: every byte not covered by a set or the
//! metadata region is zero.

use thiserror::Error;

use super::Vid;

/// Degree header bytes per L-type set.
pub const L_SET_HEADER: usize = 4;
/// Bytes per L-type meta entry.
pub const L_META_ENTRY: usize = 8;
/// Bytes for the trailing set count.
pub const L_COUNT_FIELD: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum PageCodecError {
    #[error("page length {0} is not the configured page size {1}")]
    WrongPageLen(usize, usize),
    #[error("neighbor count {count} exceeds page capacity {cap}")]
    CountOverflow { count: usize, cap: usize },
    #[error("neighbors not sorted ascending")]
    Unsorted,
    #[error("meta entries not ascending by src vid")]
    MetaUnsorted,
    #[error("set offsets not strictly increasing")]
    OffsetsNotIncreasing,
    #[error("set at offset {0} overlaps the next set or the meta region")]
    SetOverlap(u16),
    #[error("set for vid {0} does not fit in the page")]
    SetTooLarge(Vid),
    #[error("page size {0} too large for 16-bit offsets")]
    PageTooLarge(usize),
}

pub type Result<T> = std::result::Result<T, PageCodecError>;

/// Neighbors a single H-type page can hold.
pub fn h_page_capacity(page_size: usize) -> usize {
    (page_size - 4) / 4
}

/// Encoded size of one L-type set, degree header included.
pub fn l_set_bytes(degree: usize) -> usize {
    L_SET_HEADER + 4 * degree
}

/// Largest degree an L-type set may have and still be storable in one
/// page together with its meta entry and the count field.
pub fn l_max_degree(page_size: usize) -> usize {
    (page_size - L_SET_HEADER - L_META_ENTRY - L_COUNT_FIELD) / 4
}

/// One slice of a high-degree vertex's neighbor list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HtypePage {
    pub neighbors: Vec<Vid>,
}

impl HtypePage {
    pub fn encode(&self, page_size: usize) -> Result<Vec<u8>> {
        if self.neighbors.len() > h_page_capacity(page_size) {
            return Err(PageCodecError::CountOverflow {
                count: self.neighbors.len(),
                cap: h_page_capacity(page_size),
            });
        }
        if !self.neighbors.windows(2).all(|w| w[0] < w[1]) {
            return Err(PageCodecError::Unsorted);
        }
        let mut buf = vec![0u8; page_size];
        buf[0..4].copy_from_slice(&(self.neighbors.len() as u32).to_le_bytes());
        for (i, v) in self.neighbors.iter().enumerate() {
            buf[4 + 4 * i..8 + 4 * i].copy_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn decode(page: &[u8], page_size: usize) -> Result<Self> {
        if page.len() != page_size {
            return Err(PageCodecError::WrongPageLen(page.len(), page_size));
        }
        let count = u32::from_le_bytes(page[0..4].try_into().unwrap()) as usize;
        if count > h_page_capacity(page_size) {
            return Err(PageCodecError::CountOverflow {
                count,
                cap: h_page_capacity(page_size),
            });
        }
        let mut neighbors = Vec::with_capacity(count);
        for i in 0..count {
            neighbors.push(u32::from_le_bytes(
                page[4 + 4 * i..8 + 4 * i].try_into().unwrap(),
            ));
        }
        if !neighbors.windows(2).all(|w| w[0] < w[1]) {
            return Err(PageCodecError::Unsorted);
        }
        Ok(Self { neighbors })
    }
}

/// One packed neighbor set inside an L-type page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LtypeSet {
    pub src_vid: Vid,
    pub offset: u16,
    pub neighbors: Vec<Vid>,
}

impl LtypeSet {
    pub fn end(&self) -> usize {
        self.offset as usize + l_set_bytes(self.neighbors.len())
    }
}

/// A whole L-type page: sets in ascending `src_vid` order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LtypePage {
    pub sets: Vec<LtypeSet>,
}

impl LtypePage {
    pub fn meta_start(page_size: usize, set_count: usize) -> usize {
        page_size - L_COUNT_FIELD - L_META_ENTRY * set_count
    }

    fn validate(&self, page_size: usize) -> Result<()> {
        if page_size > u16::MAX as usize + 1 {
            return Err(PageCodecError::PageTooLarge(page_size));
        }
        let meta_start = Self::meta_start(page_size, self.sets.len());
        let mut prev_vid: Option<Vid> = None;
        let mut prev_offset: Option<u16> = None;
        let mut prev_end = 0usize;
        for set in &self.sets {
            if let Some(p) = prev_vid {
                if set.src_vid <= p {
                    return Err(PageCodecError::MetaUnsorted);
                }
            }
            if let Some(p) = prev_offset {
                if set.offset <= p {
                    return Err(PageCodecError::OffsetsNotIncreasing);
                }
            }
            if (set.offset as usize) < prev_end {
                return Err(PageCodecError::SetOverlap(set.offset));
            }
            if !set.neighbors.windows(2).all(|w| w[0] < w[1]) {
                return Err(PageCodecError::Unsorted);
            }
            if set.end() > meta_start {
                return Err(PageCodecError::SetTooLarge(set.src_vid));
            }
            prev_vid = Some(set.src_vid);
            prev_offset = Some(set.offset);
            prev_end = set.end();
        }
        Ok(())
    }

    pub fn encode(&self, page_size: usize) -> Result<Vec<u8>> {
        self.validate(page_size)?;
        let mut buf = vec![0u8; page_size];
        for set in &self.sets {
            let o = set.offset as usize;
            buf[o..o + 4].copy_from_slice(&(set.neighbors.len() as u32).to_le_bytes());
            for (i, v) in set.neighbors.iter().enumerate() {
                buf[o + 4 + 4 * i..o + 8 + 4 * i].copy_from_slice(&v.to_le_bytes());
            }
        }
        let count_at = page_size - L_COUNT_FIELD;
        buf[count_at..].copy_from_slice(&(self.sets.len() as u32).to_le_bytes());
        let meta_start = Self::meta_start(page_size, self.sets.len());
        for (i, set) in self.sets.iter().enumerate() {
            let e = meta_start + L_META_ENTRY * i;
            buf[e..e + 4].copy_from_slice(&set.src_vid.to_le_bytes());
            buf[e + 4..e + 6].copy_from_slice(&set.offset.to_le_bytes());
            // reserved bytes stay zero
        }
        Ok(buf)
    }

    pub fn decode(page: &[u8], page_size: usize) -> Result<Self> {
        if page.len() != page_size {
            return Err(PageCodecError::WrongPageLen(page.len(), page_size));
        }
        let count =
            u32::from_le_bytes(page[page_size - L_COUNT_FIELD..].try_into().unwrap()) as usize;
        let max_sets = (page_size - L_COUNT_FIELD) / L_META_ENTRY;
        if count > max_sets {
            return Err(PageCodecError::CountOverflow {
                count,
                cap: max_sets,
            });
        }
        let meta_start = Self::meta_start(page_size, count);
        let mut sets = Vec::with_capacity(count);
        for i in 0..count {
            let e = meta_start + L_META_ENTRY * i;
            let src_vid = u32::from_le_bytes(page[e..e + 4].try_into().unwrap());
            let offset = u16::from_le_bytes(page[e + 4..e + 6].try_into().unwrap());
            let o = offset as usize;
            if o + L_SET_HEADER > meta_start {
                return Err(PageCodecError::SetTooLarge(src_vid));
            }
            let degree = u32::from_le_bytes(page[o..o + 4].try_into().unwrap()) as usize;
            if o + l_set_bytes(degree) > meta_start {
                return Err(PageCodecError::SetTooLarge(src_vid));
            }
            let mut neighbors = Vec::with_capacity(degree);
            for j in 0..degree {
                neighbors.push(u32::from_le_bytes(
                    page[o + 4 + 4 * j..o + 8 + 4 * j].try_into().unwrap(),
                ));
            }
            sets.push(LtypeSet {
                src_vid,
                offset,
                neighbors,
            });
        }
        let decoded = Self { sets };
        decoded.validate(page_size)?;
        Ok(decoded)
    }

    pub fn find(&self, vid: Vid) -> Option<&LtypeSet> {
        self.sets
            .binary_search_by_key(&vid, |s| s.src_vid)
            .ok()
            .map(|i| &self.sets[i])
    }

    /// Bytes a canonical repack of these sets would occupy, metadata
    /// included. Used for fit checks before rewriting a page.
    pub fn packed_bytes(&self) -> usize {
        let data: usize = self.sets.iter().map(|s| l_set_bytes(s.neighbors.len())).sum();
        data + L_META_ENTRY * self.sets.len() + L_COUNT_FIELD
    }

    /// Reassigns offsets so sets sit back to back from byte 0 in
    /// ascending vid order.
    pub fn repack(&mut self) {
        let mut o = 0usize;
        for set in &mut self.sets {
            set.offset = o as u16;
            o += l_set_bytes(set.neighbors.len());
        }
    }

    /// Inserts or replaces the set for `vid`, then repacks.
    pub fn upsert(&mut self, vid: Vid, neighbors: Vec<Vid>) {
        match self.sets.binary_search_by_key(&vid, |s| s.src_vid) {
            Ok(i) => self.sets[i].neighbors = neighbors,
            Err(i) => self.sets.insert(
                i,
                LtypeSet {
                    src_vid: vid,
                    offset: 0,
                    neighbors,
                },
            ),
        }
        self.repack();
    }

    pub fn remove(&mut self, vid: Vid) -> Option<LtypeSet> {
        match self.sets.binary_search_by_key(&vid, |s| s.src_vid) {
            Ok(i) => Some(self.sets.remove(i)),
            Err(_) => None,
        }
    }

    pub fn max_vid(&self) -> Option<Vid> {
        self.sets.last().map(|s| s.src_vid)
    }

    /// The set with the numerically largest offset. By the layout
    /// invariant this is also the set of the largest VID in the page,
    /// which keeps the mapping table's range search sound when the set
    /// is evicted to a fresh page.
    pub fn largest_offset_set(&self) -> Option<&LtypeSet> {
        self.sets.iter().max_by_key(|s| s.offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PS: usize = 4096;

    #[test]
    fn h_round_trip() {
        let page = HtypePage {
            neighbors: vec![1, 5, 9, 1000],
        };
        let bytes = page.encode(PS).unwrap();
        assert_eq!(bytes.len(), PS);
        let back = HtypePage::decode(&bytes, PS).unwrap();
        assert_eq!(back, page);
        assert_eq!(HtypePage::decode(&back.encode(PS).unwrap(), PS).unwrap(), page);
    }

    #[test]
    fn h_rejects_unsorted_and_overflow() {
        let page = HtypePage {
            neighbors: vec![5, 1],
        };
        assert_eq!(page.encode(PS), Err(PageCodecError::Unsorted));
        let page = HtypePage {
            neighbors: (0..=h_page_capacity(PS) as u32).collect(),
        };
        assert!(matches!(
            page.encode(PS),
            Err(PageCodecError::CountOverflow { .. })
        ));
    }

    #[test]
    fn l_round_trip_with_gaps() {
        let mut page = LtypePage::default();
        page.upsert(3, vec![1, 3]);
        page.upsert(7, vec![2, 7, 9]);
        page.upsert(11, vec![11]);
        // Open a gap: drop the middle set without repacking.
        page.remove(7);
        let bytes = page.encode(PS).unwrap();
        let back = LtypePage::decode(&bytes, PS).unwrap();
        assert_eq!(back, page);
        assert_eq!(back.encode(PS).unwrap(), bytes);
    }

    #[test]
    fn l_largest_offset_is_largest_vid() {
        let mut page = LtypePage::default();
        page.upsert(10, vec![10]);
        page.upsert(2, vec![2, 5]);
        page.upsert(6, vec![6]);
        assert_eq!(page.largest_offset_set().unwrap().src_vid, 10);
    }

    #[test]
    fn l_rejects_overlap_and_disorder() {
        let page = LtypePage {
            sets: vec![
                LtypeSet {
                    src_vid: 4,
                    offset: 0,
                    neighbors: vec![4],
                },
                LtypeSet {
                    src_vid: 9,
                    offset: 4,
                    neighbors: vec![9],
                },
            ],
        };
        assert!(matches!(page.encode(PS), Err(PageCodecError::SetOverlap(_))));

        let page = LtypePage {
            sets: vec![
                LtypeSet {
                    src_vid: 9,
                    offset: 0,
                    neighbors: vec![9],
                },
                LtypeSet {
                    src_vid: 4,
                    offset: 8,
                    neighbors: vec![4],
                },
            ],
        };
        assert_eq!(page.encode(PS), Err(PageCodecError::MetaUnsorted));
    }

    #[test]
    fn l_set_must_fit_with_meta() {
        let deg = l_max_degree(PS);
        let mut page = LtypePage::default();
        page.upsert(0, (0..deg as u32).collect());
        assert!(page.encode(PS).is_ok());
        let mut page = LtypePage::default();
        page.upsert(0, (0..deg as u32 + 1).collect());
        assert!(matches!(page.encode(PS), Err(PageCodecError::SetTooLarge(0))));
    }
}
