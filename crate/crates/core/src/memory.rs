//! Two-tier FIFO memory (granular + compressed) with exact token-span accounting.
//!
//! Every stored row knows which absolute stream tokens it represents, so the
//! oldest token still visible to attention (and therefore the reading distance)
//! is always computable without replaying history.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{DctError, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Matrix, View, ViewMut};

/// Half-open range of absolute token indices within one stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: u64,
    pub end: u64,
}

impl Span {
    pub fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Contiguous run of per-position hidden vectors and the tokens they cover.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenBlock<T> {
    activations: Matrix<T>,
    span: Span,
    compressed: bool,
    ratio: usize,
    // Pre-compression rows of a freshly compressed block. Present until the
    // block has been attended to once; the task-loss gradient reaches the
    // compression weights through it.
    source: Option<Matrix<T>>,
}

impl<T: Scalar> HiddenBlock<T> {
    /// Uncompressed block: one row per token.
    pub fn granular(activations: Matrix<T>, span: Span) -> Result<Self> {
        Self::with_ratio(activations, span, 1, false)
    }

    fn with_ratio(
        activations: Matrix<T>,
        span: Span,
        ratio: usize,
        compressed: bool,
    ) -> Result<Self> {
        if ratio == 0 {
            return Err(DctError::Contract("block ratio must be positive".into()));
        }
        if span.end < span.start || span.len() != (activations.rows() * ratio) as u64 {
            return Err(DctError::Contract(format!(
                "span {}..{} does not cover {} rows at ratio {}",
                span.start,
                span.end,
                activations.rows(),
                ratio
            )));
        }
        Ok(Self {
            activations,
            span,
            compressed,
            ratio,
            source: None,
        })
    }

    /// Compressed block as stored by a checkpoint restore.
    pub fn compressed_from_parts(
        activations: Matrix<T>,
        span: Span,
        ratio: usize,
        source: Option<Matrix<T>>,
    ) -> Result<Self> {
        let mut b = Self::with_ratio(activations, span, ratio, true)?;
        if let Some(src) = &source {
            if src.rows() != b.positions() * ratio || src.cols() != b.activations.cols() {
                return Err(DctError::Contract(
                    "compression source shape mismatch".into(),
                ));
            }
        }
        b.source = source;
        Ok(b)
    }

    fn empty(cols: usize, at: u64, ratio: usize, compressed: bool) -> Self {
        Self {
            activations: Matrix::empty(cols),
            span: Span::new(at, at),
            compressed,
            ratio,
            source: None,
        }
    }

    pub fn activations(&self) -> &Matrix<T> {
        &self.activations
    }

    pub fn span(&self) -> Span {
        self.span
    }

    pub fn is_compressed(&self) -> bool {
        self.compressed
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    /// Stored rows.
    pub fn positions(&self) -> usize {
        self.activations.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.rows() == 0
    }

    pub fn source(&self) -> Option<&Matrix<T>> {
        self.source.as_ref()
    }

    /// Newest token summarised by row `r`.
    fn newest_token(&self, r: usize) -> u64 {
        self.span.start + ((r + 1) * self.ratio) as u64 - 1
    }

    /// Detaches the oldest `rows` rows into a new block.
    fn split_front(&mut self, rows: usize) -> HiddenBlock<T> {
        debug_assert!(rows <= self.positions());
        let head = self.activations.split_off_front(rows);
        let mid = self.span.start + (rows * self.ratio) as u64;
        let head_span = Span::new(self.span.start, mid);
        self.span.start = mid;
        let source = self
            .source
            .as_mut()
            .map(|s| s.split_off_front(rows * self.ratio));
        HiddenBlock {
            activations: head,
            span: head_span,
            compressed: self.compressed,
            ratio: self.ratio,
            source,
        }
    }

    /// Appends a block that continues this one.
    fn extend(&mut self, next: HiddenBlock<T>) {
        debug_assert_eq!(self.span.end, next.span.start);
        debug_assert_eq!(self.ratio, next.ratio);
        self.activations.push_rows(&next.activations);
        self.span.end = next.span.end;
    }
}

/// Borrowed weights of the per-layer compression convolution.
///
/// The kernel has window and stride `ratio`; `weight` is laid out as
/// `[ratio * d, d]` so that `ratio` consecutive input rows, read as one
/// flattened row, map to one output row.
#[derive(Clone, Copy, Debug)]
pub struct CompressionParams<'a, T> {
    pub weight: &'a [T],
    pub bias: &'a [T],
    pub ratio: usize,
    pub d_model: usize,
}

impl<'a, T: Scalar> CompressionParams<'a, T> {
    pub fn new(weight: &'a [T], bias: &'a [T], ratio: usize, d_model: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(DctError::Config("compression ratio must be >= 1".into()));
        }
        if weight.len() != ratio * d_model * d_model || bias.len() != d_model {
            return Err(DctError::Shape(format!(
                "compression params expect {}+{} values, got {}+{}",
                ratio * d_model * d_model,
                d_model,
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            weight,
            bias,
            ratio,
            d_model,
        })
    }

    /// Number of output rows for an `n`-row input.
    pub fn output_rows(&self, n: usize) -> usize {
        n / self.ratio
    }
}

/// Compresses an evicted granular block into `floor(n / c)` rows.
///
/// Trailing tokens that do not fill a full window are dropped from the span.
/// Inputs shorter than one window produce an empty block.
pub fn compress<T: Scalar>(
    evicted: &HiddenBlock<T>,
    params: CompressionParams<'_, T>,
) -> Result<HiddenBlock<T>> {
    if evicted.ratio != 1 || evicted.compressed {
        return Err(DctError::Contract(
            "compress expects a granular block".into(),
        ));
    }
    let d = params.d_model;
    if evicted.activations.cols() != d {
        return Err(DctError::Shape(format!(
            "evicted rows have width {}, compression expects {}",
            evicted.activations.cols(),
            d
        )));
    }
    let c = params.ratio;
    let n = evicted.positions();
    let rows = params.output_rows(n);
    if rows == 0 {
        log::warn!("degenerate eviction: {n} rows is shorter than compression window {c}");
        return Ok(HiddenBlock::empty(d, evicted.span.start, c, true));
    }
    let used = rows * c;
    let source = evicted.activations.slice_rows(0, used);
    let mut out = Matrix::zeros(rows, d);
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(params.bias);
    }
    gemm(
        T::one(),
        View::new(source.as_slice(), rows, c * d),
        View::new(params.weight, c * d, d),
        T::one(),
        &mut out.view_mut(),
    );
    let span = Span::new(evicted.span.start, evicted.span.start + used as u64);
    let mut block = HiddenBlock::with_ratio(out, span, c, true)?;
    block.source = Some(source);
    Ok(block)
}

/// Accumulates weight and bias gradients of [`compress`] given the gradient
/// of its output rows.
pub fn compress_backward<T: Scalar>(
    source: &Matrix<T>,
    grad_out: &Matrix<T>,
    ratio: usize,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) {
    let d = grad_out.cols();
    let rows = grad_out.rows();
    assert_eq!(
        source.rows(),
        rows * ratio,
        "compression source/gradient mismatch"
    );
    gemm(
        T::one(),
        View::new(source.as_slice(), rows, ratio * d).t(),
        grad_out.view(),
        T::one(),
        &mut ViewMut::new(grad_weight, ratio * d, d),
    );
    for r in 0..rows {
        for (g, v) in grad_bias.iter_mut().zip(grad_out.row(r)) {
            *g += *v;
        }
    }
}

/// Drops an evicted block. Its tokens leave the memory system for good.
pub fn discard_evicted<T>(evicted: HiddenBlock<T>) {
    drop(evicted);
}

/// Attention span assembled from one layer's stores.
#[derive(Clone, Debug)]
pub struct AttentionContext<T> {
    /// Compressed rows first, then memory rows, both oldest first.
    pub rows: Matrix<T>,
    /// Distance in tokens from the next segment's first token back to the
    /// newest token each row summarises (always >= 1).
    pub ages: Vec<usize>,
}

impl<T: Scalar> AttentionContext<T> {
    pub fn empty(d_model: usize) -> Self {
        Self {
            rows: Matrix::empty(d_model),
            ages: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }
}

/// Bounded granular + compressed FIFO stores of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMemoryState<T> {
    memory: VecDeque<HiddenBlock<T>>,
    compressed: VecDeque<HiddenBlock<T>>,
    mem_capacity: usize,
    cmem_capacity: usize,
    ratio: usize,
    d_model: usize,
    occupied_m: usize,
    occupied_cm: usize,
    cursor: Option<u64>,
}

impl<T: Scalar> LayerMemoryState<T> {
    pub fn new(d_model: usize, mem_capacity: usize, cmem_capacity: usize, ratio: usize) -> Self {
        Self {
            memory: VecDeque::new(),
            compressed: VecDeque::new(),
            mem_capacity,
            cmem_capacity,
            ratio,
            d_model,
            occupied_m: 0,
            occupied_cm: 0,
            cursor: None,
        }
    }

    pub fn occupied_memory(&self) -> usize {
        self.occupied_m
    }

    pub fn occupied_compressed(&self) -> usize {
        self.occupied_cm
    }

    pub fn mem_capacity(&self) -> usize {
        self.mem_capacity
    }

    pub fn cmem_capacity(&self) -> usize {
        self.cmem_capacity
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// End of the newest appended span, i.e. where the next segment starts.
    pub fn cursor(&self) -> Option<u64> {
        self.cursor
    }

    /// Both stores at capacity.
    pub fn is_full(&self) -> bool {
        self.occupied_m == self.mem_capacity && self.occupied_cm == self.cmem_capacity
    }

    pub fn memory_blocks(&self) -> impl Iterator<Item = &HiddenBlock<T>> {
        self.memory.iter()
    }

    pub fn compressed_blocks(&self) -> impl Iterator<Item = &HiddenBlock<T>> {
        self.compressed.iter()
    }

    /// Oldest token still represented in either store.
    pub fn oldest_token(&self) -> Option<u64> {
        let c = self.compressed.front().map(|b| b.span.start);
        let m = self.memory.front().map(|b| b.span.start);
        match (c, m) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Appends a granular segment; returns the evicted overflow (possibly empty).
    pub fn append(&mut self, hidden: Matrix<T>, span: Span) -> Result<HiddenBlock<T>> {
        if hidden.cols() != self.d_model {
            return Err(DctError::Shape(format!(
                "segment width {} does not match memory width {}",
                hidden.cols(),
                self.d_model
            )));
        }
        if let Some(cursor) = self.cursor {
            if span.start != cursor {
                return Err(DctError::Contract(format!(
                    "segment span starts at {} but memory continues at {}",
                    span.start, cursor
                )));
            }
        }
        let block = HiddenBlock::granular(hidden, span)?;
        self.cursor = Some(span.end);
        if block.is_empty() {
            return Ok(HiddenBlock::empty(self.d_model, span.start, 1, false));
        }
        self.occupied_m += block.positions();
        self.memory.push_back(block);

        let mut overflow = self.occupied_m.saturating_sub(self.mem_capacity);
        let oldest = self
            .memory
            .front()
            .map(|b| b.span.start)
            .unwrap_or(span.start);
        let mut evicted = HiddenBlock::empty(self.d_model, oldest, 1, false);
        while overflow > 0 {
            let front = self
                .memory
                .front_mut()
                .expect("overflow implies stored rows");
            let take = overflow.min(front.positions());
            let part = if take == front.positions() {
                self.memory.pop_front().expect("front exists")
            } else {
                front.split_front(take)
            };
            evicted.extend(part);
            self.occupied_m -= take;
            overflow -= take;
        }
        Ok(evicted)
    }

    /// Pushes a compressed block; returns the number of compressed positions
    /// dropped from the front to stay within capacity.
    pub fn commit_compressed(&mut self, block: HiddenBlock<T>) -> Result<usize> {
        if !block.compressed || block.ratio != self.ratio {
            return Err(DctError::Contract(format!(
                "commit expects a compressed block with ratio {}, got ratio {} (compressed: {})",
                self.ratio, block.ratio, block.compressed
            )));
        }
        if block.activations.cols() != self.d_model {
            return Err(DctError::Shape("compressed block width mismatch".into()));
        }
        if let Some(last) = self.compressed.back() {
            if block.span.start < last.span.end && !block.is_empty() {
                return Err(DctError::Contract(
                    "compressed spans must be strictly increasing".into(),
                ));
            }
        }
        if block.is_empty() {
            return Ok(0);
        }
        self.occupied_cm += block.positions();
        self.compressed.push_back(block);
        let mut overflow = self.occupied_cm.saturating_sub(self.cmem_capacity);
        let dropped = overflow;
        while overflow > 0 {
            let front = self
                .compressed
                .front_mut()
                .expect("overflow implies stored rows");
            let take = overflow.min(front.positions());
            if take == front.positions() {
                self.compressed.pop_front();
            } else {
                front.split_front(take);
            }
            self.occupied_cm -= take;
            overflow -= take;
        }
        Ok(dropped)
    }

    /// Rows and relative ages visible to attention for the next segment.
    pub fn attention_context(&self) -> AttentionContext<T> {
        let total = self.occupied_cm + self.occupied_m;
        let mut rows = Matrix::empty(self.d_model);
        let mut ages = Vec::with_capacity(total);
        let Some(cursor) = self.cursor else {
            return AttentionContext { rows, ages };
        };
        for block in self.compressed.iter().chain(self.memory.iter()) {
            rows.push_rows(&block.activations);
            for r in 0..block.positions() {
                ages.push((cursor - block.newest_token(r)) as usize);
            }
        }
        AttentionContext { rows, ages }
    }

    /// Compressed blocks still carrying their compression input, with the row
    /// offset of each inside [`attention_context`](Self::attention_context).
    pub fn fresh_compressed(&self) -> Vec<(usize, &HiddenBlock<T>)> {
        let mut offset = 0;
        let mut out = Vec::new();
        for b in &self.compressed {
            if b.source.is_some() {
                out.push((offset, b));
            }
            offset += b.positions();
        }
        out
    }

    /// Severs the gradient path of all compressed blocks.
    pub fn clear_fresh(&mut self) {
        for b in self.compressed.iter_mut() {
            b.source = None;
        }
    }

    pub(crate) fn restore(
        &mut self,
        memory: Vec<HiddenBlock<T>>,
        compressed: Vec<HiddenBlock<T>>,
        cursor: Option<u64>,
    ) -> Result<()> {
        let occupied_m: usize = memory.iter().map(|b| b.positions()).sum();
        let occupied_cm: usize = compressed.iter().map(|b| b.positions()).sum();
        if occupied_m > self.mem_capacity || occupied_cm > self.cmem_capacity {
            return Err(DctError::Checkpoint(
                "restored memory exceeds capacity".into(),
            ));
        }
        self.memory = memory.into();
        self.compressed = compressed.into();
        self.occupied_m = occupied_m;
        self.occupied_cm = occupied_cm;
        self.cursor = cursor;
        Ok(())
    }
}

/// Memory of one stream across all layers; all layers move in lockstep.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamMemory<T> {
    layers: Vec<LayerMemoryState<T>>,
    seg_len: usize,
}

impl<T: Scalar> StreamMemory<T> {
    pub fn new(
        layers: usize,
        d_model: usize,
        seg_len: usize,
        mem_capacity: usize,
        cmem_capacity: usize,
        ratio: usize,
    ) -> Self {
        Self {
            layers: (0..layers)
                .map(|_| LayerMemoryState::new(d_model, mem_capacity, cmem_capacity, ratio))
                .collect(),
            seg_len,
        }
    }

    pub fn layers(&self) -> &[LayerMemoryState<T>] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerMemoryState<T> {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerMemoryState<T> {
        &mut self.layers[l]
    }

    pub fn seg_len(&self) -> usize {
        self.seg_len
    }

    pub fn is_full(&self) -> bool {
        self.layers.iter().all(|l| l.is_full())
    }

    /// Span the next segment must cover.
    pub fn next_span(&self) -> Span {
        let start = self.layers.first().and_then(|l| l.cursor()).unwrap_or(0);
        Span::new(start, start + self.seg_len as u64)
    }

    /// Appends one segment's per-layer hidden states; returns per-layer evictions.
    pub fn append_segment(
        &mut self,
        hidden: Vec<Matrix<T>>,
        span: Span,
    ) -> Result<Vec<HiddenBlock<T>>> {
        if hidden.len() != self.layers.len() {
            return Err(DctError::Shape(format!(
                "expected hidden states for {} layers, got {}",
                self.layers.len(),
                hidden.len()
            )));
        }
        if let Some(bad) = hidden.iter().find(|h| h.rows() != self.seg_len) {
            return Err(DctError::Shape(format!(
                "segment has {} rows, expected {}",
                bad.rows(),
                self.seg_len
            )));
        }
        if span.len() != self.seg_len as u64 {
            return Err(DctError::Contract(format!(
                "segment span length {} differs from segment length {}",
                span.len(),
                self.seg_len
            )));
        }
        if let Some(cursor) = self.layers.first().and_then(|l| l.cursor()) {
            if cursor != span.start {
                return Err(DctError::Contract(format!(
                    "non-contiguous segment: memory ends at {cursor}, segment starts at {}",
                    span.start
                )));
            }
        }
        self.layers
            .iter_mut()
            .zip(hidden)
            .map(|(layer, h)| layer.append(h, span))
            .collect()
    }

    /// Tokens from the oldest represented token to the end of the current segment.
    pub fn reading_distance(&self, current: Span) -> u64 {
        let oldest = self
            .layers
            .iter()
            .filter_map(|l| l.oldest_token())
            .min()
            .map_or(current.start, |t| t.min(current.start));
        current.end - oldest
    }

    pub fn clear_fresh(&mut self) {
        self.layers.iter_mut().for_each(|l| l.clear_fresh());
    }

    pub fn reset(&mut self) {
        for l in self.layers.iter_mut() {
            *l = LayerMemoryState::new(l.d_model, l.mem_capacity, l.cmem_capacity, l.ratio);
        }
    }
}
