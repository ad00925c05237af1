//! The `KFS1` feature store: one flat file holding a feature matrix and its
//! labels, written in batches.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "KFS1" | version u32 | rowCount u64 | featureDim u32
//! | labelCount u32 | { nameLen u16 | UTF-8 name } × labelCount
//! | label u32 × rowCount
//! | feature f32 × rowCount × featureDim      (row-major)
//! ```
//!
//! While a store is being written its `rowCount` holds `u64::MAX`, so a file
//! left behind by an interrupted run is recognisable. Feature rows are spilled
//! to a sibling `.partial` file as they arrive and copied behind the label
//! array on [`StoreWriter::finalize`], keeping writer memory bounded by the
//! buffer size rather than the dataset size.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::backend::FeatureMatrix;
use crate::binio::*;
use crate::error::{Error, Result};

pub const STORE_MAGIC: [u8; 4] = *b"KFS1";
pub const STORE_VERSION: u32 = 1;
/// `rowCount` of a store that was never finalized.
pub const UNFINALIZED_ROWS: u64 = u64::MAX;

const ROW_COUNT_OFFSET: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u32,
    pub row_count: u64,
    pub feature_dim: u32,
    pub label_names: Vec<String>,
}

impl StoreHeader {
    pub fn byte_len(&self) -> u64 {
        (4 + 4 + 8 + 4 + labels_byte_len(&self.label_names)) as u64
    }

    pub fn labels_offset(&self) -> u64 {
        self.byte_len()
    }

    pub fn features_offset(&self) -> u64 {
        self.labels_offset() + 4 * self.row_count
    }

    /// Total file size of a finalized store with this header.
    pub fn file_len(&self) -> u64 {
        self.features_offset() + 4 * self.row_count * self.feature_dim as u64
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&STORE_MAGIC)?;
        write_u32(w, self.version)?;
        write_u64(w, self.row_count)?;
        write_u32(w, self.feature_dim)?;
        write_labels(w, &self.label_names)
    }

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let magic: [u8; 4] = read_array(r, "magic")?;
        if magic != STORE_MAGIC {
            return Err(Error::Format(format!(
                "not a feature store (magic {:?})",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = read_u32(r, "version")?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!(
                "unsupported store version {version}"
            )));
        }
        let row_count = read_u64(r, "row count")?;
        let feature_dim = read_u32(r, "feature dim")?;
        let label_names = read_labels(r)?;
        Ok(Self {
            version,
            row_count,
            feature_dim,
            label_names,
        })
    }
}

/// Streaming writer for a `KFS1` file.
pub struct StoreWriter {
    path: PathBuf,
    spill_path: PathBuf,
    file: File,
    spill: Option<BufWriter<File>>,
    header: StoreHeader,
    labels: Vec<u32>,
    finalized: bool,
}

impl StoreWriter {
    /// `buffer_rows` feature rows are held in memory before being flushed.
    pub fn create(
        path: impl AsRef<Path>,
        feature_dim: usize,
        label_names: &[String],
        buffer_rows: usize,
    ) -> Result<Self> {
        if feature_dim == 0 || feature_dim > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "invalid feature dim {feature_dim}"
            )));
        }
        if buffer_rows == 0 {
            return Err(Error::InvalidArgument(
                "buffer must hold at least one row".into(),
            ));
        }
        check_labels(label_names)?;
        let path = path.as_ref().to_path_buf();
        let mut spill_name = path.file_name().unwrap_or_default().to_os_string();
        spill_name.push(".partial");
        let spill_path = path.with_file_name(spill_name);

        let header = StoreHeader {
            version: STORE_VERSION,
            row_count: UNFINALIZED_ROWS,
            feature_dim: feature_dim as u32,
            label_names: label_names.to_vec(),
        };
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&path)?;
        header.write_to(&mut file)?;
        let spill =
            BufWriter::with_capacity(buffer_rows * feature_dim * 4, File::create(&spill_path)?);
        Ok(Self {
            path,
            spill_path,
            file,
            spill: Some(spill),
            header,
            labels: Vec::new(),
            finalized: false,
        })
    }

    pub fn rows_written(&self) -> u64 {
        self.labels.len() as u64
    }

    pub fn append(&mut self, features: &FeatureMatrix, labels: &[u32]) -> Result<()> {
        let Some(spill) = self.spill.as_mut() else {
            return Err(Error::State("store already finalized".into()));
        };
        if features.dim() != self.header.feature_dim as usize && !features.is_empty() {
            return Err(Error::Append(format!(
                "batch has feature dim {}, store expects {}",
                features.dim(),
                self.header.feature_dim
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::Append(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let n_labels = self.header.label_names.len() as u32;
        if let Some(bad) = labels.iter().find(|&&l| l >= n_labels) {
            return Err(Error::Append(format!(
                "label index {bad} out of range for {n_labels} labels"
            )));
        }
        for v in features.as_slice() {
            spill.write_all(&v.to_le_bytes())?;
        }
        self.labels.extend_from_slice(labels);
        Ok(())
    }

    pub fn finalize(&mut self) -> Result<StoreHeader> {
        let Some(spill) = self.spill.take() else {
            return Err(Error::State("store already finalized".into()));
        };
        let mut spill = spill.into_inner().map_err(|e| e.into_error())?;
        spill.flush()?;
        drop(spill);

        let mut out = BufWriter::new(&mut self.file);
        out.seek(SeekFrom::Start(self.header.labels_offset()))?;
        for l in &self.labels {
            write_u32(&mut out, *l)?;
        }
        let mut spilled = File::open(&self.spill_path)?;
        std::io::copy(&mut spilled, &mut out)?;
        out.seek(SeekFrom::Start(ROW_COUNT_OFFSET))?;
        write_u64(&mut out, self.labels.len() as u64)?;
        out.flush()?;
        drop(out);
        self.file.sync_all()?;
        fs::remove_file(&self.spill_path)?;
        self.finalized = true;

        self.header.row_count = self.labels.len() as u64;
        Ok(self.header.clone())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for StoreWriter {
    fn drop(&mut self) {
        if !self.finalized {
            self.spill.take();
            let _ = fs::remove_file(&self.spill_path);
        }
    }
}

/// Writes a complete store from a stream of `(features, labels)` batches.
pub fn write_store<I>(
    path: impl AsRef<Path>,
    feature_dim: usize,
    label_names: &[String],
    batches: I,
    buffer_rows: usize,
) -> Result<StoreHeader>
where
    I: IntoIterator<Item = (FeatureMatrix, Vec<u32>)>,
{
    let mut writer = StoreWriter::create(path, feature_dim, label_names, buffer_rows)?;
    for (features, labels) in batches {
        writer.append(&features, &labels)?;
    }
    writer.finalize()
}

/// A finalized store opened for reading. Labels are loaded eagerly; feature
/// rows are read on demand.
#[derive(Debug)]
pub struct FeatureStore {
    header: StoreHeader,
    labels: Vec<u32>,
    file: Mutex<File>,
}

impl FeatureStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = File::open(path.as_ref())?;
        let len = file.metadata()?.len();
        let mut r = BufReader::new(&mut file);
        let header = StoreHeader::read_from(&mut r)?;
        if header.row_count == UNFINALIZED_ROWS {
            return Err(Error::State("store was never finalized".into()));
        }
        if header.feature_dim == 0 {
            return Err(Error::Format("feature dim is zero".into()));
        }
        check_labels(&header.label_names).map_err(|e| Error::Format(e.to_string()))?;
        let expected = header
            .row_count
            .checked_mul(4 * (header.feature_dim as u64 + 1))
            .and_then(|b| b.checked_add(header.byte_len()))
            .ok_or_else(|| Error::Corrupt("row count overflows".into()))?;
        if len < expected {
            return Err(Error::Corrupt(format!(
                "store is truncated: {len} bytes, header implies {expected}"
            )));
        }
        if len > expected {
            return Err(Error::Corrupt(format!(
                "store has {} trailing bytes",
                len - expected
            )));
        }
        let n = header.row_count as usize;
        let mut labels = Vec::with_capacity(n);
        let n_labels = header.label_names.len() as u32;
        for i in 0..n {
            let l = read_u32(&mut r, "labels")?;
            if l >= n_labels {
                return Err(Error::Corrupt(format!("row {i} has label index {l}")));
            }
            labels.push(l);
        }
        drop(r);
        Ok(Self {
            header,
            labels,
            file: Mutex::new(file),
        })
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn rows(&self) -> usize {
        self.header.row_count as usize
    }

    pub fn feature_dim(&self) -> usize {
        self.header.feature_dim as usize
    }

    pub fn label_names(&self) -> &[String] {
        &self.header.label_names
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Rows `[range.start, range.end)` in stored order.
    pub fn read_rows(&self, range: Range<usize>) -> Result<FeatureMatrix> {
        if range.start > range.end || range.end > self.rows() {
            return Err(Error::InvalidArgument(format!(
                "row range {range:?} outside 0..{}",
                self.rows()
            )));
        }
        let dim = self.feature_dim();
        let mut values = vec![0f32; (range.end - range.start) * dim];
        let offset = self.header.features_offset() + (range.start * dim * 4) as u64;
        let mut file = self.file.lock().expect("store file lock poisoned");
        file.seek(SeekFrom::Start(offset))?;
        read_f32_into(&mut BufReader::new(&mut *file), &mut values, "features")?;
        FeatureMatrix::new(dim, values)
    }

    pub fn read_all(&self) -> Result<FeatureMatrix> {
        self.read_rows(0..self.rows())
    }
}

pub fn read_store(path: impl AsRef<Path>) -> Result<FeatureStore> {
    FeatureStore::open(path)
}

/// First row of the evaluation slice: `floor(row_count * split_ratio)`.
pub fn split_index(row_count: usize, split_ratio: f64) -> Result<usize> {
    if row_count == 0 {
        return Err(Error::EmptyStore);
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must lie in (0, 1), got {split_ratio}"
        )));
    }
    Ok((row_count as f64 * split_ratio).floor() as usize)
}
