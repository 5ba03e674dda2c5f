//! Checkpoint files.
//!
//! A checkpoint is a UTF-8 header followed by a little-endian `f32` payload:
//!
//! ```text
//! DCTCKPT
//! version 1
//! kind model|training
//! config <key> = <value>        one line per RunConfig key
//! state <name> <value>          training checkpoints only
//! section <name> <count>        payload sections, in payload order
//! block <stream> <layer> <m|c> <start> <end> <rows> <ratio> <source rows>
//! cursor <stream> <layer> <token|none>
//! end
//! ```
//!
//! Sections are written back to back; memory blocks follow them in listing
//! order, each as its activations and then its compression source (if any).
//! Parameters are ordered as in [`crate::model::ModelLayout`] and
//! [`crate::judger::ActorLayout`].

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::make_batches;
use crate::error::{DctError, Result};
use crate::judger::{Actor, SnapshotEvaluator};
use crate::memory::{HiddenBlock, Span};
use crate::model::optim::Optimizer;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::train::{fresh_memories, sampler, Phase, Trainer};

pub const MAGIC: &str = "DCTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Model,
    Training,
}

impl CheckpointKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Model => "model",
            Self::Training => "training",
        }
    }
}

/// One stored memory block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockEntry {
    pub stream: usize,
    pub layer: usize,
    pub compressed: bool,
    pub span: Span,
    pub rows: usize,
    pub ratio: usize,
    pub source_rows: usize,
}

/// Parsed header of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub state: BTreeMap<String, String>,
    pub sections: Vec<(String, usize)>,
    pub blocks: Vec<BlockEntry>,
    pub cursors: Vec<(usize, usize, Option<u64>)>,
}

impl CheckpointHeader {
    pub fn section(&self, name: &str) -> Option<usize> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| *c)
    }

    /// Total payload values the header promises.
    pub fn payload_len(&self) -> usize {
        let sections: usize = self.sections.iter().map(|(_, c)| c).sum();
        let d = self.config.d_model;
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| (b.rows + b.source_rows) * d)
            .sum();
        sections + blocks
    }

    fn state<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.state
            .get(key)
            .ok_or_else(|| DctError::Checkpoint(format!("missing state `{key}`")))?
            .parse()
            .map_err(|_| DctError::Checkpoint(format!("malformed state `{key}`")))
    }
}

struct Writer {
    header: String,
    payload: Vec<u8>,
}

impl Writer {
    fn new(kind: CheckpointKind, config: &RunConfig) -> Self {
        let mut header = format!("{MAGIC}\nversion {VERSION}\nkind {}\n", kind.as_str());
        for line in config.to_text().lines() {
            header.push_str("config ");
            header.push_str(line);
            header.push('\n');
        }
        Self {
            header,
            payload: Vec::new(),
        }
    }

    fn state(&mut self, key: &str, value: impl std::fmt::Display) {
        self.header.push_str(&format!("state {key} {value}\n"));
    }

    fn section<T: Scalar>(&mut self, name: &str, values: &[T]) {
        self.header
            .push_str(&format!("section {name} {}\n", values.len()));
        self.values(values);
    }

    fn values<T: Scalar>(&mut self, values: &[T]) {
        self.payload.reserve(values.len() * 4);
        for v in values {
            self.payload.extend_from_slice(&v.to_le_f32_bytes());
        }
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.header.push_str("end\n");
        let mut file = fs::File::create(path)?;
        file.write_all(self.header.as_bytes())?;
        file.write_all(&self.payload)?;
        file.sync_all()?;
        Ok(())
    }
}

/// Writes a model-only checkpoint.
pub fn save_model<T: Scalar>(path: &Path, config: &RunConfig, model: &Model<T>) -> Result<()> {
    let mut w = Writer::new(CheckpointKind::Model, config);
    w.section("model", model.params());
    w.finish(path)
}

/// Writes the full training state. Call between steps.
pub fn save_training<T: Scalar>(path: &Path, trainer: &Trainer<T>) -> Result<()> {
    let mut w = Writer::new(CheckpointKind::Training, &trainer.config);
    w.state("step", trainer.step);
    w.state("phase", trainer.phase.as_str());
    w.state("segment", trainer.segment);
    w.state("rng_word_pos", trainer.rng.get_word_pos());
    w.state("optimizer_steps", trainer.optimizer.steps);
    w.section("model", trainer.model.params());
    w.section("optimizer.first", &trainer.optimizer.first);
    w.section("optimizer.second", &trainer.optimizer.second);
    w.section("actor", trainer.actor.params());
    if let Some(ev) = &trainer.evaluator {
        w.section("evaluator", ev.model().params());
    }
    let mut cursors = String::new();
    for (s, mem) in trainer.memories.iter().enumerate() {
        for (l, layer) in mem.layers().iter().enumerate() {
            let stores = layer
                .memory_blocks()
                .map(|b| ('m', b))
                .chain(layer.compressed_blocks().map(|b| ('c', b)));
            for (store, b) in stores {
                let span = b.span();
                let src_rows = b.source().map_or(0, |m| m.rows());
                w.header.push_str(&format!(
                    "block {s} {l} {store} {} {} {} {} {src_rows}\n",
                    span.start,
                    span.end,
                    b.positions(),
                    b.ratio()
                ));
                w.values(b.activations().as_slice());
                if let Some(src) = b.source() {
                    w.values(src.as_slice());
                }
            }
            let cursor = layer
                .cursor()
                .map_or_else(|| "none".to_string(), |c| c.to_string());
            cursors.push_str(&format!("cursor {s} {l} {cursor}\n"));
        }
    }
    w.header.push_str(&cursors);
    w.finish(path)
}

fn split_header(bytes: &[u8]) -> Result<(&str, &[u8])> {
    if !bytes.starts_with(MAGIC.as_bytes()) || bytes.get(MAGIC.len()) != Some(&b'\n') {
        return Err(DctError::Checkpoint(
            "bad magic: not a checkpoint file".into(),
        ));
    }
    let marker = b"\nend\n";
    let pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| DctError::Checkpoint("truncated header".into()))?;
    let header = std::str::from_utf8(&bytes[..pos + 1])
        .map_err(|_| DctError::Checkpoint("header is not UTF-8".into()))?;
    Ok((header, &bytes[pos + marker.len()..]))
}

fn parse_header(text: &str) -> Result<CheckpointHeader> {
    let bad = |line: &str| DctError::Checkpoint(format!("malformed header line `{line}`"));
    let mut version = None;
    let mut kind = None;
    let mut config_text = String::new();
    let mut state = BTreeMap::new();
    let mut sections = Vec::new();
    let mut blocks = Vec::new();
    let mut cursors = Vec::new();
    for line in text.lines().skip(1) {
        let (tag, rest) = line.split_once(' ').ok_or_else(|| bad(line))?;
        let fields: Vec<&str> = rest.split_whitespace().collect();
        let num = |i: usize| -> Result<u64> {
            fields
                .get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(line))
        };
        match tag {
            "version" => version = Some(num(0)? as u32),
            "kind" => {
                kind = Some(match rest {
                    "model" => CheckpointKind::Model,
                    "training" => CheckpointKind::Training,
                    _ => return Err(bad(line)),
                })
            }
            "config" => {
                config_text.push_str(rest);
                config_text.push('\n');
            }
            "state" => {
                let (k, v) = rest.split_once(' ').ok_or_else(|| bad(line))?;
                state.insert(k.to_string(), v.to_string());
            }
            "section" => sections.push((
                fields.first().ok_or_else(|| bad(line))?.to_string(),
                num(1)? as usize,
            )),
            "block" => {
                let compressed = match fields.get(2) {
                    Some(&"m") => false,
                    Some(&"c") => true,
                    _ => return Err(bad(line)),
                };
                blocks.push(BlockEntry {
                    stream: num(0)? as usize,
                    layer: num(1)? as usize,
                    compressed,
                    span: Span::new(num(3)?, num(4)?),
                    rows: num(5)? as usize,
                    ratio: num(6)? as usize,
                    source_rows: num(7)? as usize,
                });
            }
            "cursor" => {
                let c = match fields.get(2) {
                    Some(&"none") => None,
                    Some(_) => Some(num(2)?),
                    None => return Err(bad(line)),
                };
                cursors.push((num(0)? as usize, num(1)? as usize, c));
            }
            _ => return Err(bad(line)),
        }
    }
    let version = version.ok_or_else(|| DctError::Checkpoint("missing version".into()))?;
    if version != VERSION {
        return Err(DctError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    Ok(CheckpointHeader {
        version,
        kind: kind.ok_or_else(|| DctError::Checkpoint("missing kind".into()))?,
        config: RunConfig::parse(&config_text)
            .map_err(|e| DctError::Checkpoint(format!("config echo: {e}")))?,
        state,
        sections,
        blocks,
        cursors,
    })
}

fn read(path: &Path) -> Result<(CheckpointHeader, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let (text, payload) = split_header(&bytes)?;
    let header = parse_header(text)?;
    let expected = header.payload_len() * 4;
    if payload.len() != expected {
        return Err(DctError::Checkpoint(format!(
            "truncated payload: {} bytes, header promises {expected}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, values))
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path)?;
    parse_header(split_header(&bytes)?.0)
}

struct Payload<'a> {
    values: &'a [f32],
    pos: usize,
}

impl Payload<'_> {
    fn take<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        let out = self.values[self.pos..self.pos + n]
            .iter()
            .map(|v| T::from_le_f32_bytes(v.to_le_bytes()))
            .collect();
        self.pos += n;
        out
    }

    /// Values of `name`, which the header listed at this point of the payload.
    fn section<T: Scalar>(&mut self, header: &CheckpointHeader, name: &str) -> Result<Vec<T>> {
        let n = header
            .section(name)
            .ok_or_else(|| DctError::Checkpoint(format!("missing section `{name}`")))?;
        Ok(self.take(n))
    }
}

/// Loads the model (and its config) from either checkpoint kind.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(RunConfig, Model<T>)> {
    let (header, values) = read(path)?;
    let first = header.sections.first().map(|s| s.0.as_str());
    if first != Some("model") {
        return Err(DctError::Checkpoint("model section must come first".into()));
    }
    let mut p = Payload {
        values: &values,
        pos: 0,
    };
    let params = p.section(&header, "model")?;
    let model = Model::from_params(header.config.model()?, params)?;
    Ok((header.config, model))
}

/// Loads a learned actor, if the checkpoint holds one.
pub fn load_actor<T: Scalar>(path: &Path) -> Result<Option<Actor<T>>> {
    let (header, values) = read(path)?;
    let mut p = Payload {
        values: &values,
        pos: 0,
    };
    for (name, count) in &header.sections {
        if name == "actor" {
            return Ok(Some(Actor::from_params(
                header.config.actor(),
                p.take(*count),
            )?));
        }
        p.take::<f32>(*count);
    }
    Ok(None)
}

/// Restores a trainer saved by [`save_training`]. `train` must be the same
/// training split the run was started with.
pub fn load_training<T: Scalar>(path: &Path, train: &[u8]) -> Result<Trainer<T>> {
    let (header, values) = read(path)?;
    if header.kind != CheckpointKind::Training {
        return Err(DctError::Checkpoint("not a training checkpoint".into()));
    }
    let cfg = header.config.clone();
    let mut p = Payload {
        values: &values,
        pos: 0,
    };
    let model = Model::from_params(cfg.model()?, p.section(&header, "model")?)?;
    let mut optimizer = Optimizer::new(
        cfg.optimizer,
        (cfg.clip_norm > 0.0).then_some(cfg.clip_norm),
    );
    optimizer.first = p.section(&header, "optimizer.first")?;
    optimizer.second = p.section(&header, "optimizer.second")?;
    optimizer.steps = header.state("optimizer_steps")?;
    let actor = Actor::from_params(cfg.actor(), p.section(&header, "actor")?)?;
    let evaluator = match header.section("evaluator") {
        Some(_) => Some(SnapshotEvaluator::new(Model::from_params(
            cfg.model()?,
            p.section(&header, "evaluator")?,
        )?)),
        None => None,
    };

    // per stream, per layer: (memory blocks, compressed blocks)
    type Stores<T> = Vec<Vec<(Vec<HiddenBlock<T>>, Vec<HiddenBlock<T>>)>>;
    let mut stores: Stores<T> = vec![vec![(Vec::new(), Vec::new()); cfg.layers]; cfg.batch_size];
    for b in &header.blocks {
        if b.stream >= cfg.batch_size || b.layer >= cfg.layers {
            return Err(DctError::Checkpoint(format!(
                "block for stream {} layer {} out of range",
                b.stream, b.layer
            )));
        }
        let acts = Matrix::from_vec(b.rows, cfg.d_model, p.take(b.rows * cfg.d_model));
        let slot = &mut stores[b.stream][b.layer];
        if b.compressed {
            let source = (b.source_rows > 0).then(|| {
                Matrix::from_vec(
                    b.source_rows,
                    cfg.d_model,
                    p.take(b.source_rows * cfg.d_model),
                )
            });
            slot.1.push(HiddenBlock::compressed_from_parts(
                acts, b.span, b.ratio, source,
            )?);
        } else {
            slot.0.push(HiddenBlock::granular(acts, b.span)?);
        }
    }
    let mut memories = fresh_memories::<T>(&cfg, cfg.batch_size);
    let mut cursor_of = BTreeMap::new();
    for &(s, l, c) in &header.cursors {
        cursor_of.insert((s, l), c);
    }
    for (s, layers) in stores.into_iter().enumerate() {
        for (l, (memory, compressed)) in layers.into_iter().enumerate() {
            let cursor = *cursor_of.get(&(s, l)).ok_or_else(|| {
                DctError::Checkpoint(format!("missing cursor for stream {s} layer {l}"))
            })?;
            memories[s]
                .layer_mut(l)
                .restore(memory, compressed, cursor)?;
        }
    }

    let plan = make_batches(train, cfg.batch_size, cfg.seg_len)?;
    let segment: usize = header.state("segment")?;
    if segment >= plan.segments_per_stream() {
        return Err(DctError::Checkpoint(
            "checkpoint does not match the training split".into(),
        ));
    }
    let mut rng = sampler(cfg.seed);
    rng.set_word_pos(header.state("rng_word_pos")?);
    let phase: Phase = header.state::<String>("phase")?.parse()?;
    Ok(Trainer {
        model,
        optimizer,
        actor,
        evaluator,
        plan,
        memories,
        phase,
        step: header.state("step")?,
        segment,
        rng,
        config: cfg,
    })
}
