use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use dct_core::checkpoint::{
    load_actor, load_model, load_training, read_header, save_training, CheckpointHeader,
};
use dct_core::data::{load_corpus, CorpusSplits};
use dct_core::records::RecordSink;
use dct_core::{evaluate, JudgeMode, Phase, RunConfig, StepReport, Trainer32};
use serde_json::json;

use crate::Global;

pub const CONFIG_ECHO: &str = "config.txt";
pub const METRICS: &str = "metrics.ndjson";
pub const TRAJECTORY: &str = "trajectory.ndjson";
pub const DISTANCES: &str = "distances.ndjson";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const EVAL: &str = "eval.ndjson";

/// Defaults, overlaid by `--config`, then `--seed`.
pub fn run_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            RunConfig::parse(&text).with_context(|| format!("invalid config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn corpus(g: &Global, cfg: &RunConfig) -> Result<CorpusSplits> {
    let path = g.corpus.as_ref().context("--corpus is required")?;
    Ok(load_corpus(
        path,
        cfg.corpus_prefix,
        cfg.train_fraction,
        cfg.valid_fraction,
    )?)
}

/// Creates the output directory and writes the config echo into it.
pub fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_text())?;
    Ok(())
}

/// NDJSON sink whose first line echoes the run configuration.
pub fn sink(out: &Path, name: &str, cfg: &RunConfig) -> Result<RecordSink> {
    let sink = RecordSink::create(&out.join(name))?;
    sink.emit(&json!({ "config": cfg }))?;
    Ok(sink)
}

struct Sinks {
    metrics: RecordSink,
    trajectory: RecordSink,
    distances: RecordSink,
}

impl Sinks {
    fn open(out: &Path, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            metrics: sink(out, METRICS, cfg)?,
            trajectory: sink(out, TRAJECTORY, cfg)?,
            distances: sink(out, DISTANCES, cfg)?,
        })
    }

    fn record(&self, r: &StepReport) -> dct_core::Result<()> {
        self.metrics.emit(&r.metrics)?;
        r.trajectory
            .iter()
            .try_for_each(|t| self.trajectory.emit(t))?;
        r.distances
            .iter()
            .try_for_each(|d| self.distances.emit(d))?;
        if r.metrics.step.is_multiple_of(50) {
            log::info!(
                "step {} {} loss {:.4} bpc {:.3} decisions {}",
                r.metrics.step,
                r.metrics.phase,
                r.metrics.loss,
                r.metrics.bpc,
                r.metrics.trajectory_len
            );
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        self.metrics.finish()?;
        self.trajectory.finish()?;
        self.distances.finish()?;
        Ok(())
    }
}

fn run_steps(t: &mut Trainer32, sinks: &Sinks, n: u64) -> Result<()> {
    for _ in 0..n {
        let report = t.train_step()?;
        sinks.record(&report)?;
    }
    Ok(())
}

fn pretrain_remaining(t: &Trainer32) -> u64 {
    match t.phase() {
        Phase::Pretrain => t.pretrain_steps() - t.global_step(),
        Phase::Cotrain => 0,
    }
}

fn finish_run(out: &Path, t: &Trainer32, sinks: Sinks) -> Result<()> {
    sinks.finish()?;
    let path = out.join(CHECKPOINT);
    save_training(&path, t)?;
    log::info!(
        "step {} ({}), checkpoint {}",
        t.global_step(),
        t.phase().as_str(),
        path.display()
    );
    Ok(())
}

pub fn pretrain(g: &Global) -> Result<()> {
    let cfg = run_config(g)?;
    let splits = corpus(g, &cfg)?;
    let mut t = Trainer32::new(cfg.clone(), &splits.train)?;
    let out = g.out_dir();
    prepare_out(&out, &cfg)?;
    let sinks = Sinks::open(&out, &cfg)?;
    let n = pretrain_remaining(&t).min(g.steps.unwrap_or(u64::MAX));
    run_steps(&mut t, &sinks, n)?;
    finish_run(&out, &t, sinks)
}

pub fn cotrain(g: &Global, checkpoint: Option<&Path>) -> Result<()> {
    let (cfg, splits, mut t) = match checkpoint {
        Some(path) => {
            if g.config.is_some() || g.seed.is_some() {
                log::warn!("resuming: --config and --seed are taken from the checkpoint");
            }
            let cfg = read_header(path)
                .with_context(|| format!("reading {}", path.display()))?
                .config;
            let splits = corpus(g, &cfg)?;
            let t = load_training::<f32>(path, &splits.train)?;
            (cfg, splits, t)
        }
        None => {
            let cfg = run_config(g)?;
            let splits = corpus(g, &cfg)?;
            let t = Trainer32::new(cfg.clone(), &splits.train)?;
            (cfg, splits, t)
        }
    };
    drop(splits);
    let out = g.out_dir();
    prepare_out(&out, &cfg)?;
    let sinks = Sinks::open(&out, &cfg)?;
    let mut budget = g.steps.unwrap_or(u64::MAX);
    let pre = pretrain_remaining(&t).min(budget);
    run_steps(&mut t, &sinks, pre)?;
    budget -= pre;
    if t.phase() == Phase::Cotrain {
        let left = (cfg.cotrain_steps as u64)
            .saturating_sub(t.cotrain_steps_done())
            .min(budget);
        run_steps(&mut t, &sinks, left)?;
    }
    finish_run(&out, &t, sinks)
}

pub fn eval(g: &Global, checkpoint: &Path, split: &str, judge: Option<JudgeMode>) -> Result<()> {
    let (cfg, model) = load_model::<f32>(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let actor = load_actor::<f32>(checkpoint)?;
    let judge = judge.unwrap_or(cfg.judge);
    if judge == JudgeMode::Learned && actor.is_none() {
        log::warn!("checkpoint holds no actor; learned judging falls back to keep");
    }
    let splits = corpus(g, &cfg)?;
    let data = if split == "test" {
        &splits.test
    } else {
        &splits.valid
    };
    let report = evaluate(&model, actor.as_ref(), judge, &cfg, data)?;
    let out = g.out_dir();
    prepare_out(&out, &cfg)?;
    let records = sink(&out, EVAL, &cfg)?;
    records.emit(&json!({ "split": split, "judge": judge, "report": report }))?;
    records.finish()?;
    println!(
        "{split}: loss {:.6} ppl {:.4} bpc {:.4} over {} tokens in {} streams",
        report.loss, report.ppl, report.bpc, report.tokens, report.streams
    );
    Ok(())
}

pub fn header_json(h: &CheckpointHeader) -> serde_json::Value {
    let compressed = h.blocks.iter().filter(|b| b.compressed).count();
    json!({
        "version": h.version,
        "kind": format!("{:?}", h.kind).to_lowercase(),
        "config": h.config,
        "state": h.state,
        "sections": h.sections.iter().map(|(n, c)| json!({ "name": n, "values": c })).collect::<Vec<_>>(),
        "memory_blocks": h.blocks.len() - compressed,
        "compressed_blocks": compressed,
        "payload_values": h.payload_len(),
    })
}

pub fn inspect(g: &Global, checkpoint: &Path) -> Result<()> {
    let header =
        read_header(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let text = serde_json::to_string_pretty(&header_json(&header))?;
    println!("{text}");
    if let Some(out) = &g.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("inspect.json"), format!("{text}\n"))?;
    }
    Ok(())
}
