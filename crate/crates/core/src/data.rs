//! Byte corpus loading, contiguous splits and stream batching.

use std::path::Path;

use crate::error::{DctError, Result};

/// Contiguous train/validation/test slices of a byte corpus, in file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplits {
    pub train: Vec<u8>,
    pub valid: Vec<u8>,
    pub test: Vec<u8>,
}

impl CorpusSplits {
    /// Splits at `floor(len * train)` and `floor(len * valid)`; the test split
    /// takes the remainder.
    pub fn from_bytes(bytes: &[u8], train: f64, valid: f64) -> Result<Self> {
        if bytes.is_empty() {
            return Err(DctError::Data("corpus is empty".into()));
        }
        if !(train > 0.0 && valid >= 0.0 && train + valid <= 1.0) {
            return Err(DctError::Config(format!(
                "invalid split proportions {train}/{valid}"
            )));
        }
        let n = bytes.len();
        let n_train = ((n as f64) * train).floor() as usize;
        let n_valid = (((n as f64) * valid).floor() as usize).min(n - n_train);
        Ok(Self {
            train: bytes[..n_train].to_vec(),
            valid: bytes[n_train..n_train + n_valid].to_vec(),
            test: bytes[n_train + n_valid..].to_vec(),
        })
    }
}

/// Reads a raw byte corpus, optionally truncated to `prefix` bytes (0 keeps it all).
pub fn load_corpus(path: &Path, prefix: usize, train: f64, valid: f64) -> Result<CorpusSplits> {
    let mut bytes = std::fs::read(path)
        .map_err(|e| DctError::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    if prefix > 0 {
        bytes.truncate(prefix);
    }
    CorpusSplits::from_bytes(&bytes, train, valid)
}

/// `B` parallel contiguous shards of one split, cut into `n_s`-token segments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    streams: Vec<Vec<u32>>,
    seg_len: usize,
    segments: usize,
}

impl BatchPlan {
    pub fn streams(&self) -> usize {
        self.streams.len()
    }

    pub fn seg_len(&self) -> usize {
        self.seg_len
    }

    /// Segments available in every stream.
    pub fn segments_per_stream(&self) -> usize {
        self.segments
    }

    /// Bytes of the split never used as an input or a target.
    pub fn dropped(&self, split_len: usize) -> usize {
        split_len - self.streams.len() * (self.segments * self.seg_len + 1)
    }

    /// Inputs and next-byte targets of segment `index` in `stream`.
    pub fn segment(&self, stream: usize, index: usize) -> (&[u32], &[u32]) {
        assert!(
            index < self.segments,
            "segment {index} out of range ({})",
            self.segments
        );
        let s = &self.streams[stream];
        let start = index * self.seg_len;
        (
            &s[start..start + self.seg_len],
            &s[start + 1..start + self.seg_len + 1],
        )
    }
}

/// Shards `split` into `batch` equal contiguous streams; each stream keeps
/// `floor((S - 1) / n_s)` segments plus one trailing target byte.
pub fn make_batches(split: &[u8], batch: usize, seg_len: usize) -> Result<BatchPlan> {
    if batch == 0 || seg_len == 0 {
        return Err(DctError::Config(
            "batch size and segment length must be positive".into(),
        ));
    }
    if split.len() < batch * (seg_len + 1) {
        return Err(DctError::Data(format!(
            "split of {} bytes is too small for {batch} streams of {} bytes",
            split.len(),
            seg_len + 1
        )));
    }
    let shard = split.len() / batch;
    let segments = (shard - 1) / seg_len;
    let used = segments * seg_len + 1;
    let streams = (0..batch)
        .map(|b| {
            split[b * shard..b * shard + used]
                .iter()
                .map(|&v| u32::from(v))
                .collect()
        })
        .collect();
    Ok(BatchPlan {
        streams,
        seg_len,
        segments,
    })
}
