//! Naive list model of one layer's two FIFO stores, and a driver that checks
//! the real implementation against it.

use std::collections::VecDeque;

use dct_core::memory::{compress, discard_evicted, CompressionParams, LayerMemoryState, Span};
use dct_core::tensor::Matrix;
use rand::Rng;

/// One token per memory row; one `[start, end)` token range per compressed row.
#[derive(Clone, Debug, Default)]
pub struct NaiveMemory {
    pub n_m: usize,
    pub n_cm: usize,
    pub c: usize,
    pub memory: VecDeque<u64>,
    pub compressed: VecDeque<(u64, u64)>,
    pub next: u64,
}

impl NaiveMemory {
    pub fn new(n_m: usize, n_cm: usize, c: usize) -> Self {
        Self {
            n_m,
            n_cm,
            c,
            ..Default::default()
        }
    }

    /// Appends `len` tokens; returns the evicted tokens, oldest first.
    pub fn append(&mut self, len: usize) -> Vec<u64> {
        for _ in 0..len {
            self.memory.push_back(self.next);
            self.next += 1;
        }
        let mut evicted = Vec::new();
        while self.memory.len() > self.n_m {
            evicted.push(self.memory.pop_front().unwrap());
        }
        evicted
    }

    /// Commits windows of `c` evicted tokens; returns compressed rows dropped.
    pub fn commit(&mut self, evicted: &[u64]) -> usize {
        for w in evicted.chunks_exact(self.c) {
            self.compressed.push_back((w[0], w[self.c - 1] + 1));
        }
        let mut dropped = 0;
        while self.compressed.len() > self.n_cm {
            self.compressed.pop_front();
            dropped += 1;
        }
        dropped
    }

    pub fn oldest(&self) -> Option<u64> {
        self.compressed
            .front()
            .map(|r| r.0)
            .or_else(|| self.memory.front().copied())
    }
}

/// Memory rows of the real store, expanded to one token per row.
pub fn real_memory_tokens(state: &LayerMemoryState<f64>) -> Vec<u64> {
    state
        .memory_blocks()
        .flat_map(|b| b.span().start..b.span().end)
        .collect()
}

/// Compressed rows of the real store as token ranges.
pub fn real_compressed_rows(state: &LayerMemoryState<f64>) -> Vec<(u64, u64)> {
    state
        .compressed_blocks()
        .flat_map(|b| {
            let (s, c) = (b.span().start, b.ratio() as u64);
            (0..b.positions() as u64).map(move |r| (s + r * c, s + (r + 1) * c))
        })
        .collect()
}

/// Runs `ops` random append/commit/discard operations on both models and
/// returns the first disagreement, if any.
pub fn run_sequence<R: Rng>(rng: &mut R, ops: usize) -> Result<(), String> {
    let d = 2;
    let c = rng.random_range(1..=4);
    let n_m = rng.random_range(1..=12);
    let n_cm = rng.random_range(1..=8);
    let weight = vec![1.0 / c as f64; c * d * d];
    let bias = vec![0.0; d];
    let mut real = LayerMemoryState::<f64>::new(d, n_m, n_cm, c);
    let mut naive = NaiveMemory::new(n_m, n_cm, c);
    for op in 0..ops {
        let len = rng.random_range(1..=8);
        let start = naive.next;
        // row values encode their token so moved rows can be checked too
        let hidden = Matrix::from_fn(len, d, |r, j| (start + r as u64) as f64 + j as f64 * 0.5);
        let evicted = real
            .append(hidden, Span::new(start, start + len as u64))
            .map_err(|e| e.to_string())?;
        let expect = naive.append(len);
        let got: Vec<u64> = (evicted.span().start..evicted.span().end).collect();
        if evicted.is_empty() != expect.is_empty() || (!expect.is_empty() && got != expect) {
            return Err(format!("op {op}: evicted {got:?}, oracle {expect:?}"));
        }
        for (r, &t) in expect.iter().enumerate() {
            if evicted.activations().get(r, 0) != t as f64 {
                return Err(format!(
                    "op {op}: evicted row {r} holds the wrong activations"
                ));
            }
        }
        if !evicted.is_empty() {
            if rng.random_bool(0.5) {
                let params =
                    CompressionParams::new(&weight, &bias, c, d).map_err(|e| e.to_string())?;
                let block = compress(&evicted, params).map_err(|e| e.to_string())?;
                let dropped = real.commit_compressed(block).map_err(|e| e.to_string())?;
                let want = naive.commit(&expect);
                if dropped != want {
                    return Err(format!("op {op}: dropped {dropped}, oracle {want}"));
                }
            } else {
                discard_evicted(evicted);
            }
        }
        if real_memory_tokens(&real) != naive.memory.iter().copied().collect::<Vec<_>>() {
            return Err(format!("op {op}: memory spans diverge"));
        }
        if real_compressed_rows(&real) != naive.compressed.iter().copied().collect::<Vec<_>>() {
            return Err(format!("op {op}: compressed spans diverge"));
        }
        if real.occupied_memory() != naive.memory.len()
            || real.occupied_compressed() != naive.compressed.len()
        {
            return Err(format!("op {op}: occupancy diverges"));
        }
        if real.occupied_memory() > n_m || real.occupied_compressed() > n_cm {
            return Err(format!("op {op}: capacity exceeded"));
        }
        if real.oldest_token() != naive.oldest() {
            return Err(format!(
                "op {op}: oldest token {:?} vs {:?}",
                real.oldest_token(),
                naive.oldest()
            ));
        }
    }
    Ok(())
}
