//! Newline-delimited JSON records and an asynchronous writer for them.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc::{channel, Sender};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::error::{DctError, Result};

/// Per-step training metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: String,
    pub loss: f64,
    pub ppl: f64,
    pub bpc: f64,
    pub trajectory_len: usize,
    /// Fraction of judged decisions that kept the evicted block; `None` when nothing was judged.
    pub keep_fraction: Option<f64>,
    /// Largest reading distance over the step's streams.
    pub reading_distance: u64,
    pub reward_mean: Option<f64>,
    pub baseline: Option<f64>,
}

/// One judged decision, as logged for offline analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub t: usize,
    pub action: String,
    pub r_t: f64,
    pub ppl: f64,
    pub b: f64,
    pub entropy: f64,
    pub advantage: f64,
}

/// Reading distance of one mini-batch at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub step: u64,
    pub group: usize,
    pub distance: u64,
    /// `keep`, `discard`, or `unjudged` when memories were still filling.
    pub action: String,
}

/// Parses every non-empty line of an NDJSON document.
pub fn read_records<R: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<R>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DctError::Data(format!("record {}: {e}", i + 1)))
        })
        .collect()
}

/// Serialises records on the caller's thread and writes them on a background one.
///
/// Records are written in emission order and none are lost: [`RecordSink::finish`]
/// waits for the writer and reports any I/O failure.
pub struct RecordSink {
    tx: Option<Sender<String>>,
    writer: Option<JoinHandle<std::io::Result<()>>>,
}

impl RecordSink {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::from_writer(BufWriter::new(File::create(path)?)))
    }

    pub fn from_writer<W: Write + Send + 'static>(mut out: W) -> Self {
        let (tx, rx) = channel::<String>();
        let writer = std::thread::spawn(move || {
            for line in rx {
                out.write_all(line.as_bytes())?;
                out.write_all(b"\n")?;
            }
            out.flush()
        });
        Self {
            tx: Some(tx),
            writer: Some(writer),
        }
    }

    pub fn emit<R: Serialize>(&self, record: &R) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| DctError::Data(e.to_string()))?;
        self.tx
            .as_ref()
            .expect("sink is open until finish")
            .send(line)
            .map_err(|_| DctError::Io(std::io::Error::other("record writer stopped")))
    }

    pub fn finish(mut self) -> Result<()> {
        self.close()
    }

    fn close(&mut self) -> Result<()> {
        drop(self.tx.take());
        match self.writer.take() {
            Some(handle) => handle
                .join()
                .map_err(|_| DctError::Io(std::io::Error::other("record writer panicked")))?
                .map_err(DctError::Io),
            None => Ok(()),
        }
    }
}

impl Drop for RecordSink {
    fn drop(&mut self) {
        if let Err(e) = self.close() {
            log::error!("record sink: {e}");
        }
    }
}
