//! Pretraining, co-training of model and judger, and streaming evaluation.
//!
//! A step processes one segment of every stream. The `B` streams are split into
//! `K` mini-batches (row groups). Each group runs forward, updates the model,
//! is optionally judged, and then appends its segment to memory. Once every
//! group has run, the judger takes one REINFORCE step over the decisions made
//! during the step.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BaselineMode, JudgeMode, RunConfig};
use crate::data::{make_batches, BatchPlan};
use crate::error::{DctError, Result};
use crate::judger::{
    self, advantage, build_state, evaluator_baseline, policy_forward, reinforce_update,
    sample_action, Action, Actor, PolicyState, SnapshotEvaluator, StateShape, Trajectory,
    TrajectoryEntry,
};
use crate::memory::{compress, compress_backward, discard_evicted, AttentionContext, StreamMemory};
use crate::model::metrics::bits_per_character;
use crate::model::optim::Optimizer;
use crate::model::{Model, SegmentInput};
use crate::records::{DistanceRecord, MetricsRecord, TrajectoryRecord};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// ChaCha stream id of the judger's action sampler.
const SAMPLER_STREAM: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Cotrain,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Cotrain => "cotrain",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = DctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "cotrain" => Ok(Phase::Cotrain),
            other => Err(DctError::Checkpoint(format!("unknown phase `{other}`"))),
        }
    }
}

/// Everything a step emits.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub metrics: MetricsRecord,
    pub trajectory: Vec<TrajectoryRecord>,
    pub distances: Vec<DistanceRecord>,
}

/// What happens to a group's evicted blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Decision {
    /// Memories still filling (or pretraining): compress and commit.
    Default,
    Pinned(Action),
    Sampled(Action),
}

impl Decision {
    fn action(self) -> Action {
        match self {
            Decision::Default => Action::Keep,
            Decision::Pinned(a) | Decision::Sampled(a) => a,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Decision::Default => "unjudged",
            Decision::Pinned(Action::Keep) | Decision::Sampled(Action::Keep) => "keep",
            Decision::Pinned(Action::Discard) | Decision::Sampled(Action::Discard) => "discard",
        }
    }
}

struct GroupOutcome<T> {
    loss: f64,
    distance: u64,
    decision: Decision,
    entry: Option<TrajectoryEntry<T>>,
    ppl: f64,
}

/// Training state across both phases.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub(crate) config: RunConfig,
    pub(crate) model: Model<T>,
    pub(crate) optimizer: Optimizer<T>,
    pub(crate) actor: Actor<T>,
    pub(crate) evaluator: Option<SnapshotEvaluator<T>>,
    pub(crate) plan: BatchPlan,
    pub(crate) memories: Vec<StreamMemory<T>>,
    pub(crate) phase: Phase,
    pub(crate) step: u64,
    /// Segment index every stream reads next.
    pub(crate) segment: usize,
    pub(crate) rng: ChaCha8Rng,
}

pub(crate) fn fresh_memories<T: Scalar>(cfg: &RunConfig, streams: usize) -> Vec<StreamMemory<T>> {
    (0..streams)
        .map(|_| {
            StreamMemory::new(
                cfg.layers,
                cfg.d_model,
                cfg.seg_len,
                cfg.mem_len,
                cfg.cmem_len,
                cfg.ratio,
            )
        })
        .collect()
}

pub(crate) fn sampler(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLER_STREAM);
    rng
}

/// Judger observation from the last layer's pre-append context of each row.
fn policy_state<T: Scalar>(
    config: &RunConfig,
    contexts: &[Vec<AttentionContext<T>>],
    sequence: &[&Matrix<T>],
) -> Result<PolicyState<T>> {
    let (cm, m) = (config.cmem_len, config.mem_len);
    let parts: Vec<(Matrix<T>, Matrix<T>)> = contexts
        .iter()
        .map(|c| {
            let last = &c[config.layers - 1].rows;
            (last.slice_rows(0, cm), last.slice_rows(cm, cm + m))
        })
        .collect();
    build_state(
        &parts.iter().map(|p| &p.0).collect::<Vec<_>>(),
        &parts.iter().map(|p| &p.1).collect::<Vec<_>>(),
        sequence,
        StateShape {
            cmem_len: cm,
            mem_len: m,
            seq_len: config.seg_len,
        },
    )
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model and actor initialised from `config.seed`.
    pub fn new(config: RunConfig, train: &[u8]) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model()?, config.seed)?;
        Self::with_model(config, model, train)
    }

    /// Starts from an existing model (the actor is freshly initialised).
    pub fn with_model(config: RunConfig, model: Model<T>, train: &[u8]) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model()? {
            return Err(DctError::Config(
                "model does not match the run configuration".into(),
            ));
        }
        let plan = make_batches(train, config.batch_size, config.seg_len)?;
        let actor = Actor::new(config.actor(), config.seed.wrapping_add(1))?;
        let clip = (config.clip_norm > 0.0).then_some(config.clip_norm);
        let mut trainer = Self {
            optimizer: Optimizer::new(config.optimizer, clip),
            memories: fresh_memories(&config, config.batch_size),
            rng: sampler(config.seed),
            config,
            model,
            actor,
            evaluator: None,
            plan,
            phase: Phase::Pretrain,
            step: 0,
            segment: 0,
        };
        if trainer.pretrain_steps() == 0 {
            trainer.begin_cotrain();
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn actor(&self) -> &Actor<T> {
        &self.actor
    }

    pub fn actor_mut(&mut self) -> &mut Actor<T> {
        &mut self.actor
    }

    pub fn evaluator(&self) -> Option<&SnapshotEvaluator<T>> {
        self.evaluator.as_ref()
    }

    pub fn optimizer(&self) -> &Optimizer<T> {
        &self.optimizer
    }

    pub fn memories(&self) -> &[StreamMemory<T>] {
        &self.memories
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Steps taken so far, across both phases.
    pub fn global_step(&self) -> u64 {
        self.step
    }

    /// Length of the pretraining phase in steps.
    pub fn pretrain_steps(&self) -> u64 {
        (self.config.pretrain_epochs * self.plan.segments_per_stream() as f64).floor() as u64
    }

    pub fn cotrain_steps_done(&self) -> u64 {
        self.step.saturating_sub(self.pretrain_steps())
    }

    /// Switches to co-training, freezing a snapshot of the model as evaluator.
    pub fn begin_cotrain(&mut self) {
        self.evaluator = Some(SnapshotEvaluator::new(self.model.clone()));
        self.phase = Phase::Cotrain;
    }

    /// Runs the remaining pretraining steps.
    pub fn pretrain_epoch(
        &mut self,
        mut on_step: impl FnMut(&StepReport) -> Result<()>,
    ) -> Result<()> {
        while self.phase == Phase::Pretrain {
            let report = self.train_step()?;
            on_step(&report)?;
        }
        Ok(())
    }

    /// Runs co-training steps until `cotrain_steps` have been taken in total.
    pub fn cotrain(&mut self, mut on_step: impl FnMut(&StepReport) -> Result<()>) -> Result<()> {
        if self.phase == Phase::Pretrain {
            return Err(DctError::Contract(
                "co-training requested before pretraining finished".into(),
            ));
        }
        while self.cotrain_steps_done() < self.config.cotrain_steps as u64 {
            let report = self.train_step()?;
            on_step(&report)?;
        }
        Ok(())
    }

    /// One step of the current phase. Pretraining flips to co-training after its
    /// last step.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let phase = self.phase;
        let lr = match phase {
            Phase::Pretrain => self.config.pretrain_lr,
            Phase::Cotrain => self.config.cotrain_lr,
        };
        let mb = self.config.minibatch_size();
        let mut trajectory = Trajectory::new();
        let mut judged_groups = Vec::new();
        let mut outcomes = Vec::with_capacity(self.config.minibatches);
        for g in 0..self.config.minibatches {
            let mut out = self.run_group(g * mb..(g + 1) * mb, lr, phase)?;
            if let Some(entry) = out.entry.take() {
                trajectory.push(entry)?;
                judged_groups.push(g);
            }
            outcomes.push(out);
        }

        let step = self.step;
        let mut baseline = None;
        let mut traj_records = Vec::new();
        if !trajectory.is_empty() {
            let b = self.baseline(&judged_groups)?;
            reinforce_update(
                &mut self.actor,
                &trajectory,
                b,
                self.config.entropy_coef,
                self.config.judger_lr,
                self.config.entropy_mode,
            )?;
            for (t, (e, &g)) in trajectory.entries().iter().zip(&judged_groups).enumerate() {
                traj_records.push(TrajectoryRecord {
                    step,
                    t,
                    action: Decision::Sampled(e.action).label().to_string(),
                    r_t: e.reward,
                    ppl: outcomes[g].ppl,
                    b,
                    entropy: e.entropy,
                    advantage: advantage(e.reward, b, self.config.entropy_coef, e.entropy),
                });
            }
            baseline = Some(b);
        }

        let loss = outcomes.iter().map(|o| o.loss).sum::<f64>() / outcomes.len() as f64;
        let decided: Vec<Action> = outcomes
            .iter()
            .filter(|o| o.decision != Decision::Default)
            .map(|o| o.decision.action())
            .collect();
        let keep_fraction = (!decided.is_empty()).then(|| {
            decided.iter().filter(|&&a| a == Action::Keep).count() as f64 / decided.len() as f64
        });
        let rewards = trajectory.rewards();
        let metrics = MetricsRecord {
            step,
            phase: phase.as_str().to_string(),
            loss,
            ppl: loss.exp(),
            bpc: bits_per_character(loss),
            trajectory_len: trajectory.len(),
            keep_fraction,
            reading_distance: outcomes.iter().map(|o| o.distance).max().unwrap_or(0),
            reward_mean: (!rewards.is_empty())
                .then(|| judger::trajectory_return(&rewards))
                .transpose()?,
            baseline,
        };
        let distances = outcomes
            .iter()
            .enumerate()
            .map(|(group, o)| DistanceRecord {
                step,
                group,
                distance: o.distance,
                action: o.decision.label().to_string(),
            })
            .collect();

        self.advance();
        if phase == Phase::Pretrain && self.step >= self.pretrain_steps() {
            self.begin_cotrain();
        }
        Ok(StepReport {
            metrics,
            trajectory: traj_records,
            distances,
        })
    }

    fn advance(&mut self) {
        self.step += 1;
        self.segment += 1;
        if self.segment == self.plan.segments_per_stream() {
            self.segment = 0;
            self.memories.iter_mut().for_each(|m| m.reset());
        }
    }

    fn baseline(&self, groups: &[usize]) -> Result<f64> {
        let evaluator = self
            .evaluator
            .as_ref()
            .ok_or_else(|| DctError::Contract("co-training without an evaluator".into()))?;
        let mb = self.config.minibatch_size();
        let batches: Vec<Vec<(&[u32], &[u32])>> = groups
            .iter()
            .map(|&g| {
                (g * mb..(g + 1) * mb)
                    .map(|r| self.plan.segment(r, self.segment))
                    .collect()
            })
            .collect();
        let reward = self.config.reward()?;
        let transform = match self.config.baseline {
            BaselineMode::Transformed => Some(&reward),
            BaselineMode::Raw => None,
        };
        evaluator_baseline(evaluator, &batches, transform)
    }

    fn run_group(&mut self, rows: Range<usize>, lr: f64, phase: Phase) -> Result<GroupOutcome<T>> {
        let layers = self.config.layers;
        let span = self.memories[rows.start].next_span();
        let contexts: Vec<Vec<AttentionContext<T>>> = rows
            .clone()
            .map(|r| {
                (0..layers)
                    .map(|l| self.memories[r].layer(l).attention_context())
                    .collect()
            })
            .collect();
        let inputs: Vec<SegmentInput<'_, T>> = rows
            .clone()
            .zip(&contexts)
            .map(|(r, ctx)| {
                let (tokens, targets) = self.plan.segment(r, self.segment);
                SegmentInput {
                    tokens,
                    targets,
                    contexts: ctx,
                }
            })
            .collect();
        let (out, cache) = self.model.forward(&inputs)?;
        let loss = out.loss.as_f64();
        if !loss.is_finite() {
            return Err(DctError::NonFinite(format!(
                "loss {loss} at step {}",
                self.step
            )));
        }

        // Task-loss gradients, including the path into freshly compressed blocks.
        let fresh = rows.clone().any(|r| {
            self.memories[r]
                .layers()
                .iter()
                .any(|l| !l.fresh_compressed().is_empty())
        });
        let mut grads = self.model.zero_grads();
        let ctx_grads = self.model.backward(&cache, &mut grads, fresh);
        if fresh {
            for (i, r) in rows.clone().enumerate() {
                for l in 0..layers {
                    let (w, b) = self.model.compression_grad_slots(l);
                    let (head, tail) = grads.split_at_mut(b.offset);
                    let (gw, gb) = (&mut head[w.range()], &mut tail[..b.len()]);
                    for (offset, block) in self.memories[r].layer(l).fresh_compressed() {
                        let g = ctx_grads[i][l].slice_rows(offset, offset + block.positions());
                        let source = block.source().expect("fresh blocks keep their source");
                        compress_backward(source, &g, block.ratio(), gw, gb);
                    }
                }
            }
        }
        for r in rows.clone() {
            self.memories[r].clear_fresh();
        }
        self.model
            .apply_gradients(&mut self.optimizer, &grads, lr)?;

        let distance = rows
            .clone()
            .map(|r| self.memories[r].reading_distance(span))
            .max()
            .unwrap_or(0);
        let ppl = loss.exp();
        let mut entry = None;
        let decision = match (phase, self.config.judge) {
            (Phase::Pretrain, _) => Decision::Default,
            (Phase::Cotrain, JudgeMode::Keep) => Decision::Pinned(Action::Keep),
            (Phase::Cotrain, JudgeMode::Discard) => Decision::Pinned(Action::Discard),
            (Phase::Cotrain, JudgeMode::Learned) => {
                if rows.clone().all(|r| self.memories[r].is_full()) {
                    let state = policy_state(&self.config, &contexts, &out.last_hidden())?;
                    let policy = policy_forward(&self.actor, &state)?;
                    let (action, log_prob) = sample_action(&policy, &mut self.rng);
                    let reward = self.config.reward()?.apply(ppl);
                    entry = Some(TrajectoryEntry {
                        state,
                        action,
                        reward,
                        log_prob,
                        entropy: policy.entropy,
                    });
                    Decision::Sampled(action)
                } else {
                    Decision::Default
                }
            }
        };

        for (hidden, r) in out.hidden.into_iter().zip(rows) {
            let evicted = self.memories[r].append_segment(hidden, span)?;
            for (l, block) in evicted.into_iter().enumerate() {
                if block.is_empty() {
                    continue;
                }
                match decision.action() {
                    Action::Keep => {
                        let compressed = compress(&block, self.model.compression(l))?;
                        if !compressed.is_empty() {
                            self.memories[r]
                                .layer_mut(l)
                                .commit_compressed(compressed)?;
                        }
                    }
                    Action::Discard => discard_evicted(block),
                }
            }
        }
        Ok(GroupOutcome {
            loss,
            distance,
            decision,
            entry,
            ppl,
        })
    }
}

/// Evaluation result over one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub ppl: f64,
    pub bpc: f64,
    pub tokens: usize,
    pub streams: usize,
}

/// Streaming evaluation with memories carried across segments.
///
/// Evicted blocks are handled by `judge`: pinned modes act as named, the
/// learned mode takes the actor's most likely action once memories are full
/// (and commits while they fill, or always when no actor is given).
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    actor: Option<&Actor<T>>,
    judge: JudgeMode,
    config: &RunConfig,
    split: &[u8],
) -> Result<EvalReport> {
    let streams = config
        .eval_batch_size
        .min(split.len() / (config.seg_len + 1));
    if streams == 0 {
        return Err(DctError::Data(format!(
            "evaluation split of {} bytes is shorter than one segment",
            split.len()
        )));
    }
    let plan = make_batches(split, streams, config.seg_len)?;
    let mut memories = fresh_memories::<T>(config, streams);
    let layers = config.layers;
    let mut total = 0.0;
    let mut count = 0usize;
    for seg in 0..plan.segments_per_stream() {
        let span = memories[0].next_span();
        let contexts: Vec<Vec<AttentionContext<T>>> = memories
            .iter()
            .map(|m| {
                (0..layers)
                    .map(|l| m.layer(l).attention_context())
                    .collect()
            })
            .collect();
        let inputs: Vec<SegmentInput<'_, T>> = contexts
            .iter()
            .enumerate()
            .map(|(r, ctx)| {
                let (tokens, targets) = plan.segment(r, seg);
                SegmentInput {
                    tokens,
                    targets,
                    contexts: ctx,
                }
            })
            .collect();
        let (out, _) = model.forward(&inputs)?;
        for row in &out.token_log_probs {
            for lp in row {
                total -= lp.as_f64();
                count += 1;
            }
        }
        let action = match (judge, actor) {
            (JudgeMode::Keep, _) | (JudgeMode::Learned, None) => Action::Keep,
            (JudgeMode::Discard, _) => Action::Discard,
            (JudgeMode::Learned, Some(actor)) => {
                if memories.iter().all(|m| m.is_full()) {
                    let state = policy_state(config, &contexts, &out.last_hidden())?;
                    policy_forward(actor, &state)?.argmax()
                } else {
                    Action::Keep
                }
            }
        };
        for (hidden, mem) in out.hidden.into_iter().zip(memories.iter_mut()) {
            for (l, block) in mem.append_segment(hidden, span)?.into_iter().enumerate() {
                if block.is_empty() {
                    continue;
                }
                if action == Action::Keep {
                    let compressed = compress(&block, model.compression(l))?;
                    if !compressed.is_empty() {
                        mem.layer_mut(l).commit_compressed(compressed)?;
                    }
                } else {
                    discard_evicted(block);
                }
            }
            mem.clear_fresh();
        }
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(DctError::NonFinite(format!("evaluation loss {loss}")));
    }
    Ok(EvalReport {
        loss,
        ppl: loss.exp(),
        bpc: bits_per_character(loss),
        tokens: count,
        streams,
    })
}
