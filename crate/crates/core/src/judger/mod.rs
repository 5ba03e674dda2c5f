//! Keep/discard judger for evicted memories, trained with REINFORCE.
//!
//! The actor reads a [`PolicyState`] (last-layer compressed memory, memory and
//! current segment, averaged over the mini-batch) and emits a distribution over
//! [`Action`]s. Rewards are transformed perplexities `m * a^ppl`; a frozen
//! evaluator supplies the baseline.

mod actor;
mod evaluator;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use actor::{Actor, ActorCache, ActorConfig, ActorLayout};
pub use evaluator::{
    check_evaluator, evaluator_baseline, evaluator_score, Evaluator, EvaluatorScore,
    ExternalEvaluator, SnapshotEvaluator,
};

use crate::error::{DctError, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Discard = 0,
    Keep = 1,
}

impl Action {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Action::Discard
        } else {
            Action::Keep
        }
    }
}

/// Judger observation: `[n_cm + n_m + n_s, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState<T>(Matrix<T>);

impl<T: Scalar> PolicyState<T> {
    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.0
    }

    pub fn from_matrix(m: Matrix<T>) -> Self {
        Self(m)
    }
}

/// Store capacities that fix the state shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateShape {
    pub cmem_len: usize,
    pub mem_len: usize,
    pub seq_len: usize,
}

fn batch_mean<T: Scalar>(parts: &[&Matrix<T>], rows: usize, d: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(rows, d);
    for p in parts {
        crate::tensor::add_assign(out.as_mut_slice(), p.as_slice());
    }
    let inv = T::one() / T::from_usize_lossy(parts.len());
    out.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
    out
}

/// Averages each source over the batch and stacks `[compressed; memory; sequence]`.
///
/// Fails with [`DctError::TrajectoryNotStarted`] unless both stores are full.
pub fn build_state<T: Scalar>(
    compressed: &[&Matrix<T>],
    memory: &[&Matrix<T>],
    sequence: &[&Matrix<T>],
    shape: StateShape,
) -> Result<PolicyState<T>> {
    let batch = sequence.len();
    if batch == 0 || compressed.len() != batch || memory.len() != batch {
        return Err(DctError::Shape(format!(
            "state sources disagree on batch size: {} / {} / {}",
            compressed.len(),
            memory.len(),
            batch
        )));
    }
    let d = sequence[0].cols();
    let all = compressed.iter().chain(memory).chain(sequence);
    if let Some(bad) = all.clone().find(|m| m.cols() != d) {
        return Err(DctError::Shape(format!(
            "state source width {} differs from {d}",
            bad.cols()
        )));
    }
    if compressed.iter().any(|m| m.rows() != shape.cmem_len)
        || memory.iter().any(|m| m.rows() != shape.mem_len)
    {
        return Err(DctError::TrajectoryNotStarted(format!(
            "memory system not full (compressed {}/{}, memory {}/{})",
            compressed[0].rows(),
            shape.cmem_len,
            memory[0].rows(),
            shape.mem_len
        )));
    }
    if sequence.iter().any(|m| m.rows() != shape.seq_len) {
        return Err(DctError::Shape(format!(
            "sequence rows differ from {}",
            shape.seq_len
        )));
    }
    let mut state = batch_mean(compressed, shape.cmem_len, d);
    state.push_rows(&batch_mean(memory, shape.mem_len, d));
    state.push_rows(&batch_mean(sequence, shape.seq_len, d));
    Ok(PolicyState(state))
}

/// Action distribution at one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyOutput {
    /// `[P(discard), P(keep)]`
    pub probs: [f64; 2],
    pub entropy: f64,
}

impl PolicyOutput {
    pub fn from_logits(logits: [f64; 2]) -> Result<Self> {
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(DctError::NonFinite(format!("actor logits {logits:?}")));
        }
        let max = logits[0].max(logits[1]);
        let e0 = (logits[0] - max).exp();
        let e1 = (logits[1] - max).exp();
        let probs = [e0 / (e0 + e1), e1 / (e0 + e1)];
        Ok(Self {
            probs,
            entropy: entropy(probs),
        })
    }

    pub fn p_keep(&self) -> f64 {
        self.probs[1]
    }

    pub fn argmax(&self) -> Action {
        if self.probs[1] >= self.probs[0] {
            Action::Keep
        } else {
            Action::Discard
        }
    }
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy(probs: [f64; 2]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Evaluates the actor at a state.
pub fn policy_forward<T: Scalar>(actor: &Actor<T>, state: &PolicyState<T>) -> Result<PolicyOutput> {
    let (logits, _) = actor.logits(&state.0)?;
    PolicyOutput::from_logits([logits[0].as_f64(), logits[1].as_f64()])
}

/// Samples Keep with probability `P(keep)`; returns the action and its log-probability.
pub fn sample_action<R: Rng + ?Sized>(policy: &PolicyOutput, rng: &mut R) -> (Action, f64) {
    let u: f64 = rng.random();
    let action = if u < policy.probs[1] {
        Action::Keep
    } else {
        Action::Discard
    };
    (action, policy.probs[action.index()].ln())
}

/// `f(ppl) = m * a^ppl` with `m > 0` and `0 < a < 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTransform {
    slope: f64,
    base: f64,
}

impl RewardTransform {
    pub fn new(slope: f64, base: f64) -> Result<Self> {
        if !(slope > 0.0 && slope.is_finite()) {
            return Err(DctError::Config(format!(
                "reward slope must be positive, got {slope}"
            )));
        }
        if !(base > 0.0 && base < 1.0) {
            return Err(DctError::Config(format!(
                "reward base must lie in (0, 1), got {base}"
            )));
        }
        Ok(Self { slope, base })
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn apply(&self, ppl: f64) -> f64 {
        reward_transform(ppl, self)
    }
}

/// Maps a perplexity to a reward; higher perplexity, lower reward.
pub fn reward_transform(ppl: f64, transform: &RewardTransform) -> f64 {
    let r = transform.slope * transform.base.powf(ppl);
    if r.is_finite() {
        r
    } else {
        0.0
    }
}

/// Mean reward of a trajectory.
pub fn trajectory_return(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(DctError::Contract(
            "trajectory return of an empty trajectory".into(),
        ));
    }
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// One judged decision.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEntry<T> {
    pub state: PolicyState<T>,
    pub action: Action,
    pub reward: f64,
    pub log_prob: f64,
    pub entropy: f64,
}

/// Decisions collected across the mini-batches of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    entries: Vec<TrajectoryEntry<T>>,
}

impl<T> Default for Trajectory<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
        }
    }
}

impl<T: Scalar> Trajectory<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: TrajectoryEntry<T>) -> Result<()> {
        if !entry.reward.is_finite() {
            return Err(DctError::NonFinite(format!("reward {}", entry.reward)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TrajectoryEntry<T>] {
        &self.entries
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.reward).collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// How the entropy bonus enters the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyMode {
    /// Ascend `(r - b) log p(a|s) + alpha * S[p(.|s)]`: the bonus contributes its
    /// exact gradient.
    Gradient,
    /// Fold `alpha * S` into the advantage that weights `grad log p(a|s)`.
    Advantage,
}

impl std::str::FromStr for EntropyMode {
    type Err = DctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(Self::Gradient),
            "advantage" => Ok(Self::Advantage),
            other => Err(DctError::Config(format!("unknown entropy mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for EntropyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gradient => "gradient",
            Self::Advantage => "advantage",
        })
    }
}

/// Advantage as logged: `r_t - b + alpha * S_t`.
pub fn advantage(reward: f64, baseline: f64, entropy_coef: f64, entropy: f64) -> f64 {
    reward - baseline + entropy_coef * entropy
}

/// Per-trajectory mean of the surrogate objective
/// `(r_t - b) log p(a_t|s_t) + alpha * S[p(.|s_t)]`.
pub fn surrogate_objective<T: Scalar>(
    actor: &Actor<T>,
    trajectory: &Trajectory<T>,
    baseline: f64,
    entropy_coef: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for e in trajectory.entries() {
        let out = policy_forward(actor, &e.state)?;
        total +=
            (e.reward - baseline) * out.probs[e.action.index()].ln() + entropy_coef * out.entropy;
    }
    Ok(total / trajectory.len().max(1) as f64)
}

/// Gradient (w.r.t. actor params) of the policy-gradient estimate.
pub fn policy_gradient<T: Scalar>(
    actor: &Actor<T>,
    trajectory: &Trajectory<T>,
    baseline: f64,
    entropy_coef: f64,
    mode: EntropyMode,
) -> Result<Vec<T>> {
    let mut grads = vec![T::zero(); actor.params().len()];
    let n = trajectory.len().max(1) as f64;
    for e in trajectory.entries() {
        let (logits, cache) = actor.logits(e.state.matrix())?;
        let out = PolicyOutput::from_logits([logits[0].as_f64(), logits[1].as_f64()])?;
        let weight = match mode {
            EntropyMode::Gradient => e.reward - baseline,
            EntropyMode::Advantage => advantage(e.reward, baseline, entropy_coef, out.entropy),
        };
        if !weight.is_finite() {
            return Err(DctError::NonFinite(format!("advantage {weight}")));
        }
        let a = e.action.index();
        let mut dlogits = [0.0f64; 2];
        for (k, dl) in dlogits.iter_mut().enumerate() {
            let onehot = if k == a { 1.0 } else { 0.0 };
            *dl = weight * (onehot - out.probs[k]);
            if mode == EntropyMode::Gradient && out.probs[k] > 0.0 {
                *dl += entropy_coef * (-out.probs[k] * (out.probs[k].ln() + out.entropy));
            }
            *dl /= n;
        }
        actor.backward(
            &cache,
            [T::from_f64_lossy(dlogits[0]), T::from_f64_lossy(dlogits[1])],
            &mut grads,
        );
    }
    Ok(grads)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied {
        entries: usize,
    },
    /// Empty trajectory: nothing to learn from.
    Skipped,
}

/// REINFORCE step: `theta += lr * grad`, gradient from [`policy_gradient`].
pub fn reinforce_update<T: Scalar>(
    actor: &mut Actor<T>,
    trajectory: &Trajectory<T>,
    baseline: f64,
    entropy_coef: f64,
    lr: f64,
    mode: EntropyMode,
) -> Result<UpdateOutcome> {
    if trajectory.is_empty() {
        log::warn!("reinforce update requested on an empty trajectory; skipping");
        return Ok(UpdateOutcome::Skipped);
    }
    if !baseline.is_finite() {
        return Err(DctError::NonFinite(format!("baseline {baseline}")));
    }
    let grads = policy_gradient(actor, trajectory, baseline, entropy_coef, mode)?;
    if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
        return Err(DctError::NonFinite(format!("actor gradient {bad}")));
    }
    actor.ascend(&grads, lr);
    Ok(UpdateOutcome::Applied {
        entries: trajectory.len(),
    })
}
