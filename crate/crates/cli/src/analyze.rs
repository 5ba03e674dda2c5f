//! Reading-distance and keep-fraction series from a finished run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dct_core::records::{DistanceRecord, MetricsRecord};
use dct_core::RunConfig;
use serde::Serialize;
use serde_json::{json, Value};

use crate::commands::{prepare_out, sink, DISTANCES, METRICS};
use crate::Global;

pub const SERIES: &str = "series.ndjson";
pub const SUMMARY: &str = "summary.json";

#[derive(Debug, Serialize)]
struct SeriesPoint {
    step: u64,
    phase: String,
    distance_mean: f64,
    distance_min: u64,
    distance_max: u64,
    keep: usize,
    discard: usize,
    keep_fraction: Option<f64>,
    /// Mean keep fraction over the trailing window of judged steps.
    keep_fraction_trailing: Option<f64>,
}

/// Splits an artifact into its config echo and its records.
fn read_artifact<R: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<(Value, Vec<R>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head: Value = serde_json::from_str(lines.next().unwrap_or("null"))?;
    let Some(config) = head.get("config").cloned() else {
        bail!("{} does not start with a config echo", path.display());
    };
    let records = lines
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{} record {}", path.display(), i + 1))
        })
        .collect::<Result<_>>()?;
    Ok((config, records))
}

fn series(
    metrics: &[MetricsRecord],
    distances: &[DistanceRecord],
    window: usize,
) -> Vec<SeriesPoint> {
    let mut by_step: BTreeMap<u64, Vec<&DistanceRecord>> = BTreeMap::new();
    for d in distances {
        by_step.entry(d.step).or_default().push(d);
    }
    let mut recent: Vec<f64> = Vec::new();
    metrics
        .iter()
        .map(|m| {
            let ds = by_step.get(&m.step).map(Vec::as_slice).unwrap_or(&[]);
            let count = |a: &str| ds.iter().filter(|d| d.action == a).count();
            let (keep, discard) = (count("keep"), count("discard"));
            let keep_fraction = (keep + discard > 0).then(|| keep as f64 / (keep + discard) as f64);
            if let Some(k) = keep_fraction {
                recent.push(k);
                if recent.len() > window {
                    recent.remove(0);
                }
            }
            SeriesPoint {
                step: m.step,
                phase: m.phase.clone(),
                distance_mean: ds.iter().map(|d| d.distance as f64).sum::<f64>()
                    / ds.len().max(1) as f64,
                distance_min: ds.iter().map(|d| d.distance).min().unwrap_or(0),
                distance_max: ds.iter().map(|d| d.distance).max().unwrap_or(0),
                keep,
                discard,
                keep_fraction,
                keep_fraction_trailing: (!recent.is_empty())
                    .then(|| recent.iter().sum::<f64>() / recent.len() as f64),
            }
        })
        .collect()
}

fn summary(points: &[SeriesPoint]) -> Value {
    // steady state: the last quarter of the run
    let tail = &points[points.len() - points.len().div_ceil(4)..];
    let constant = tail
        .iter()
        .all(|p| p.distance_min == p.distance_max && p.distance_min == tail[0].distance_min);
    let (keep, discard) = points
        .iter()
        .fold((0, 0), |(k, d), p| (k + p.keep, d + p.discard));
    json!({
        "steps": points.len(),
        "cotrain_steps": points.iter().filter(|p| p.phase == "cotrain").count(),
        "steady_state_distance": constant.then_some(tail[0].distance_min),
        "tail_distance_mean": tail.iter().map(|p| p.distance_mean).sum::<f64>() / tail.len() as f64,
        "keep_decisions": keep,
        "discard_decisions": discard,
        "keep_fraction": (keep + discard > 0).then(|| keep as f64 / (keep + discard) as f64),
        "keep_fraction_trailing": points.iter().rev().find_map(|p| p.keep_fraction_trailing),
    })
}

pub fn run(g: &Global, run_dir: &Path, window: usize) -> Result<()> {
    if window == 0 {
        bail!("--window must be positive");
    }
    let (config, metrics) = read_artifact::<MetricsRecord>(&run_dir.join(METRICS))?;
    let (_, distances) = read_artifact::<DistanceRecord>(&run_dir.join(DISTANCES))?;
    if metrics.is_empty() {
        bail!("{} holds no steps", run_dir.display());
    }
    let cfg: RunConfig = RunConfig::parse(&config_text(&config)?)?;
    let points = series(&metrics, &distances, window);
    let out = g.out_dir();
    prepare_out(&out, &cfg)?;
    let records = sink(&out, SERIES, &cfg)?;
    points.iter().try_for_each(|p| records.emit(p))?;
    records.finish()?;
    let summary = summary(&points);
    fs::write(
        out.join(SUMMARY),
        format!(
            "{}\n",
            serde_json::to_string_pretty(&json!({ "config": cfg, "summary": summary }))?
        ),
    )?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

/// Rebuilds `key = value` text from a JSON config echo.
fn config_text(config: &Value) -> Result<String> {
    let Value::Object(map) = config else {
        bail!("config echo is not an object")
    };
    Ok(map
        .iter()
        .map(|(k, v)| match v {
            Value::String(s) => format!("{k} = {s}\n"),
            other => format!("{k} = {other}\n"),
        })
        .collect())
}
