//! Simulated SSD: a file-backed array of fixed-size pages with
//! page-granular read/write/trim and cumulative I/O accounting.
//!
//! There is no FTL, wear or latency model. The I/O counters are the
//! evaluation surface: every page operation increments exactly one
//! global counter and one per-tag counter.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use thiserror::Error;

/// Image file header magic, first bytes of every device image.
pub const IMAGE_MAGIC: &[u8; 8] = b"HGNNSSD\0";
/// Image format version.
pub const IMAGE_VERSION: u32 = 1;
/// Fixed image header size; page 0 starts at this byte offset.
pub const IMAGE_HEADER_LEN: u64 = 64;

#[derive(Debug, Error)]
pub enum BlockdevError {
    #[error("invalid device geometry: {0}")]
    InvalidGeometry(String),
    #[error("page {lpn} out of range (device has {page_count} pages)")]
    OutOfRange { lpn: u64, page_count: u64 },
    #[error("page data length {got} does not match page size {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("not a device image: bad magic")]
    BadMagic,
    #[error("unsupported image version {0}")]
    BadVersion(u32),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, BlockdevError>;

/// Static shape of a simulated device.
#[derive(Debug, Clone)]
pub struct DeviceGeometry {
    pub page_size: u32,
    pub page_count: u64,
    pub image_path: PathBuf,
}

impl DeviceGeometry {
    pub fn new(page_size: u32, page_count: u64, image_path: impl Into<PathBuf>) -> Self {
        Self {
            page_size,
            page_count,
            image_path: image_path.into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.page_size < 512 || !self.page_size.is_power_of_two() {
            return Err(BlockdevError::InvalidGeometry(format!(
                "page_size {} must be >= 512 and a power of two",
                self.page_size
            )));
        }
        if self.page_count < 16 {
            return Err(BlockdevError::InvalidGeometry(format!(
                "page_count {} must be >= 16",
                self.page_count
            )));
        }
        Ok(())
    }
}

/// One bundle of I/O counts; used both globally and per tag.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSet {
    pub pages_read: u64,
    pub pages_written: u64,
    pub pages_trimmed: u64,
    pub rmw_count: u64,
}

impl CounterSet {
    pub fn is_zero(&self) -> bool {
        *self == CounterSet::default()
    }
}

/// Snapshot of device accounting: global counters plus a per-tag breakdown.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IoCounters {
    pub global: CounterSet,
    pub by_tag: BTreeMap<String, CounterSet>,
}

impl IoCounters {
    pub fn tag(&self, tag: &str) -> CounterSet {
        self.by_tag.get(tag).copied().unwrap_or_default()
    }
}

#[derive(Default)]
struct CounterState {
    global: CounterSet,
    by_tag: BTreeMap<String, CounterSet>,
}

impl CounterState {
    fn bump(&mut self, tag: &str, f: impl Fn(&mut CounterSet)) {
        f(&mut self.global);
        f(self.by_tag.entry(tag.to_string()).or_default());
    }
}

/// A live device handle. Reads may run concurrently; writes are serialized
/// through an internal lock, and counter updates happen under the same
/// critical section as the I/O they account.
pub struct SimSsd {
    file: File,
    page_size: u32,
    page_count: u64,
    image_path: PathBuf,
    write_lock: Mutex<()>,
    counters: Mutex<CounterState>,
}

impl SimSsd {
    /// Creates a fresh zero-filled device image.
    pub fn create(geometry: DeviceGeometry) -> Result<Self> {
        geometry.validate()?;
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&geometry.image_path)?;

        let mut header = [0u8; IMAGE_HEADER_LEN as usize];
        header[0..8].copy_from_slice(IMAGE_MAGIC);
        header[8..12].copy_from_slice(&IMAGE_VERSION.to_le_bytes());
        header[12..16].copy_from_slice(&geometry.page_size.to_le_bytes());
        header[16..24].copy_from_slice(&geometry.page_count.to_le_bytes());
        file.write_all_at(&header, 0)?;
        // Zero fill via set_len: unwritten extents read back as zeros.
        file.set_len(IMAGE_HEADER_LEN + geometry.page_count * geometry.page_size as u64)?;
        file.sync_all()?;

        Ok(Self {
            file,
            page_size: geometry.page_size,
            page_count: geometry.page_count,
            image_path: geometry.image_path,
            write_lock: Mutex::new(()),
            counters: Mutex::new(CounterState::default()),
        })
    }

    /// Opens an existing image, reading geometry from its header.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().read(true).write(true).open(&path)?;
        let mut header = [0u8; IMAGE_HEADER_LEN as usize];
        file.read_exact_at(&mut header, 0)?;
        if &header[0..8] != IMAGE_MAGIC {
            return Err(BlockdevError::BadMagic);
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != IMAGE_VERSION {
            return Err(BlockdevError::BadVersion(version));
        }
        let page_size = u32::from_le_bytes(header[12..16].try_into().unwrap());
        let page_count = u64::from_le_bytes(header[16..24].try_into().unwrap());
        let geometry = DeviceGeometry::new(page_size, page_count, &path);
        geometry.validate()?;

        Ok(Self {
            file,
            page_size,
            page_count,
            image_path: path,
            write_lock: Mutex::new(()),
            counters: Mutex::new(CounterState::default()),
        })
    }

    pub fn page_size(&self) -> u32 {
        self.page_size
    }

    pub fn page_count(&self) -> u64 {
        self.page_count
    }

    pub fn image_path(&self) -> &Path {
        &self.image_path
    }

    fn check_lpn(&self, lpn: u64) -> Result<()> {
        if lpn >= self.page_count {
            return Err(BlockdevError::OutOfRange {
                lpn,
                page_count: self.page_count,
            });
        }
        Ok(())
    }

    fn byte_offset(&self, lpn: u64) -> u64 {
        IMAGE_HEADER_LEN + lpn * self.page_size as u64
    }

    pub fn read_page(&self, lpn: u64, tag: &str) -> Result<Vec<u8>> {
        self.check_lpn(lpn)?;
        let mut buf = vec![0u8; self.page_size as usize];
        self.file.read_exact_at(&mut buf, self.byte_offset(lpn))?;
        self.counters.lock().bump(tag, |c| c.pages_read += 1);
        Ok(buf)
    }

    pub fn write_page(&self, lpn: u64, data: &[u8], tag: &str) -> Result<()> {
        self.check_lpn(lpn)?;
        if data.len() != self.page_size as usize {
            return Err(BlockdevError::WrongLength {
                expected: self.page_size as usize,
                got: data.len(),
            });
        }
        let _write = self.write_lock.lock();
        self.file.write_all_at(data, self.byte_offset(lpn))?;
        self.counters.lock().bump(tag, |c| c.pages_written += 1);
        Ok(())
    }

    /// Discards a page; it reads back as zeros afterwards.
    pub fn trim(&self, lpn: u64, tag: &str) -> Result<()> {
        self.check_lpn(lpn)?;
        let zeros = vec![0u8; self.page_size as usize];
        let _write = self.write_lock.lock();
        self.file.write_all_at(&zeros, self.byte_offset(lpn))?;
        self.counters.lock().bump(tag, |c| c.pages_trimmed += 1);
        Ok(())
    }

    /// Callers declare one read-modify-write cycle on the neighbor or
    /// embedding space; the device itself never issues partial writes.
    pub fn record_rmw(&self, tag: &str) {
        self.counters.lock().bump(tag, |c| c.rmw_count += 1);
    }

    pub fn snapshot_counters(&self) -> IoCounters {
        let state = self.counters.lock();
        IoCounters {
            global: state.global,
            by_tag: state.by_tag.clone(),
        }
    }

    pub fn reset_counters(&self) {
        *self.counters.lock() = CounterState::default();
    }

    pub fn sync(&self) -> Result<()> {
        self.file.sync_all()?;
        Ok(())
    }
}

impl std::fmt::Debug for SimSsd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimSsd")
            .field("page_size", &self.page_size)
            .field("page_count", &self.page_count)
            .field("image_path", &self.image_path)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_device(page_size: u32, page_count: u64) -> (tempfile::TempDir, SimSsd) {
        let dir = tempfile::tempdir().unwrap();
        let dev = SimSsd::create(DeviceGeometry::new(
            page_size,
            page_count,
            dir.path().join("dev.img"),
        ))
        .unwrap();
        (dir, dev)
    }

    #[test]
    fn create_zero_fills_and_zeroes_counters() {
        let (_dir, dev) = temp_device(4096, 1024);
        assert_eq!(dev.page_count(), 1024);
        assert!(dev.snapshot_counters().global.is_zero());
        let page = dev.read_page(3, "t").unwrap();
        assert_eq!(page, vec![0u8; 4096]);
    }

    #[test]
    fn create_rejects_small_page_count() {
        let dir = tempfile::tempdir().unwrap();
        let err = SimSsd::create(DeviceGeometry::new(4096, 8, dir.path().join("x.img")));
        assert!(matches!(err, Err(BlockdevError::InvalidGeometry(_))));
    }

    #[test]
    fn create_rejects_non_power_of_two_page_size() {
        let dir = tempfile::tempdir().unwrap();
        let err = SimSsd::create(DeviceGeometry::new(4000, 64, dir.path().join("x.img")));
        assert!(matches!(err, Err(BlockdevError::InvalidGeometry(_))));
        let err = SimSsd::create(DeviceGeometry::new(256, 64, dir.path().join("y.img")));
        assert!(matches!(err, Err(BlockdevError::InvalidGeometry(_))));
    }

    #[test]
    fn min_geometry_reads_zeros() {
        let (_dir, dev) = temp_device(512, 16);
        assert_eq!(dev.read_page(0, "t").unwrap(), vec![0u8; 512]);
    }

    #[test]
    fn write_read_round_trip() {
        let (_dir, dev) = temp_device(512, 16);
        let data: Vec<u8> = (0..512).map(|i| (i % 251) as u8).collect();
        dev.write_page(7, &data, "t").unwrap();
        assert_eq!(dev.read_page(7, "t").unwrap(), data);
    }

    #[test]
    fn write_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev.img");
        let data: Vec<u8> = (0..4096).map(|i| (i % 13) as u8).collect();
        {
            let dev = SimSsd::create(DeviceGeometry::new(4096, 32, &path)).unwrap();
            dev.write_page(9, &data, "t").unwrap();
        }
        let dev = SimSsd::open(&path).unwrap();
        assert_eq!(dev.page_size(), 4096);
        assert_eq!(dev.page_count(), 32);
        assert_eq!(dev.read_page(9, "t").unwrap(), data);
    }

    #[test]
    fn wrong_length_write_rejected() {
        let (_dir, dev) = temp_device(4096, 16);
        let err = dev.write_page(0, &vec![0u8; 4095], "t");
        assert!(matches!(err, Err(BlockdevError::WrongLength { .. })));
    }

    #[test]
    fn out_of_range_ops_rejected() {
        let (_dir, dev) = temp_device(512, 16);
        assert!(matches!(
            dev.read_page(16, "t"),
            Err(BlockdevError::OutOfRange { .. })
        ));
        assert!(matches!(
            dev.trim(16, "t"),
            Err(BlockdevError::OutOfRange { .. })
        ));
    }

    #[test]
    fn trim_zeroes_page_and_counts() {
        let (_dir, dev) = temp_device(512, 16);
        let data = vec![0xabu8; 512];
        dev.write_page(9, &data, "t").unwrap();
        dev.trim(9, "t").unwrap();
        dev.trim(9, "t").unwrap();
        assert_eq!(dev.read_page(9, "t").unwrap(), vec![0u8; 512]);
        assert_eq!(dev.snapshot_counters().global.pages_trimmed, 2);
    }

    #[test]
    fn isolation_between_pages() {
        let (_dir, dev) = temp_device(512, 16);
        let a = vec![1u8; 512];
        let b = vec![2u8; 512];
        dev.write_page(3, &a, "t").unwrap();
        dev.write_page(4, &b, "t").unwrap();
        dev.write_page(3, &vec![9u8; 512], "t").unwrap();
        assert_eq!(dev.read_page(4, "t").unwrap(), b);
    }

    #[test]
    fn counters_track_reads_writes_per_tag() {
        let (_dir, dev) = temp_device(512, 16);
        dev.read_page(5, "a").unwrap();
        dev.read_page(5, "a").unwrap();
        dev.read_page(1, "b").unwrap();
        dev.write_page(2, &vec![0u8; 512], "b").unwrap();
        dev.write_page(2, &vec![0u8; 512], "b").unwrap();
        dev.record_rmw("b");
        let snap = dev.snapshot_counters();
        assert_eq!(snap.global.pages_read, 3);
        assert_eq!(snap.global.pages_written, 2);
        assert_eq!(snap.global.rmw_count, 1);
        assert_eq!(snap.tag("a").pages_read, 2);
        assert_eq!(snap.tag("b").pages_read, 1);
        assert_eq!(snap.tag("b").pages_written, 2);

        dev.reset_counters();
        assert!(dev.snapshot_counters().global.is_zero());
        assert!(dev.snapshot_counters().by_tag.is_empty());
    }

    #[test]
    fn per_tag_counters_sum_to_global() {
        let (_dir, dev) = temp_device(512, 32);
        let tags = ["x", "y", "z"];
        for i in 0..60u64 {
            let tag = tags[(i % 3) as usize];
            match i % 4 {
                0 => {
                    dev.read_page(i % 32, tag).unwrap();
                }
                1 => {
                    dev.write_page(i % 32, &vec![i as u8; 512], tag).unwrap();
                }
                2 => {
                    dev.trim(i % 32, tag).unwrap();
                }
                _ => dev.record_rmw(tag),
            }
        }
        let snap = dev.snapshot_counters();
        let mut sum = CounterSet::default();
        for c in snap.by_tag.values() {
            sum.pages_read += c.pages_read;
            sum.pages_written += c.pages_written;
            sum.pages_trimmed += c.pages_trimmed;
            sum.rmw_count += c.rmw_count;
        }
        assert_eq!(sum, snap.global);
    }
}
