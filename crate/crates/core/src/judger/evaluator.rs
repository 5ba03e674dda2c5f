//! Frozen evaluators that provide the policy-gradient baseline.

use crate::error::{DctError, Result};
use crate::model::Model;
use crate::scalar::Scalar;

use super::RewardTransform;

/// Scores a token segment without memory: returns `ln p(target_i | tokens_..=i)`.
pub trait Evaluator {
    fn vocab(&self) -> usize;
    fn log_probs(&self, tokens: &[u32], targets: &[u32]) -> Result<Vec<f64>>;
}

/// A frozen copy of a model, queried without memory context.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotEvaluator<T> {
    model: Model<T>,
}

impl<T: Scalar> SnapshotEvaluator<T> {
    pub fn new(model: Model<T>) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }
}

impl<T: Scalar> Evaluator for SnapshotEvaluator<T> {
    fn vocab(&self) -> usize {
        self.model.config().vocab
    }

    fn log_probs(&self, tokens: &[u32], targets: &[u32]) -> Result<Vec<f64>> {
        Ok(self
            .model
            .score(tokens, targets)?
            .into_iter()
            .map(|v| v.as_f64())
            .collect())
    }
}

/// Adapter for an evaluator living outside this crate.
pub struct ExternalEvaluator<F> {
    vocab: usize,
    score: F,
}

impl<F> ExternalEvaluator<F>
where
    F: Fn(&[u32], &[u32]) -> Result<Vec<f64>>,
{
    pub fn new(vocab: usize, score: F) -> Self {
        Self { vocab, score }
    }
}

impl<F> Evaluator for ExternalEvaluator<F>
where
    F: Fn(&[u32], &[u32]) -> Result<Vec<f64>>,
{
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn log_probs(&self, tokens: &[u32], targets: &[u32]) -> Result<Vec<f64>> {
        let out = (self.score)(tokens, targets)?;
        if out.len() != targets.len() {
            return Err(DctError::Shape(format!(
                "external evaluator returned {} scores for {} targets",
                out.len(),
                targets.len()
            )));
        }
        Ok(out)
    }
}

/// Rejects an evaluator whose vocabulary differs from the model's.
pub fn check_evaluator(evaluator: &dyn Evaluator, model_vocab: usize) -> Result<()> {
    if evaluator.vocab() != model_vocab {
        return Err(DctError::Config(format!(
            "evaluator vocabulary {} does not match model vocabulary {model_vocab}",
            evaluator.vocab()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvaluatorScore {
    /// Mean cross-entropy in nats.
    pub loss: f64,
    pub ppl: f64,
}

/// Pooled score of one mini-batch of `(tokens, targets)` segments.
pub fn evaluator_score(
    evaluator: &dyn Evaluator,
    segments: &[(&[u32], &[u32])],
) -> Result<EvaluatorScore> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (tokens, targets) in segments {
        for lp in evaluator.log_probs(tokens, targets)? {
            if !lp.is_finite() {
                return Err(DctError::NonFinite(format!(
                    "evaluator log-probability {lp}"
                )));
            }
            total -= lp;
            count += 1;
        }
    }
    if count == 0 {
        return Err(DctError::Input("evaluator scored no tokens".into()));
    }
    let loss = total / count as f64;
    Ok(EvaluatorScore {
        loss,
        ppl: loss.exp(),
    })
}

/// Baseline over a trajectory's mini-batches: mean of `f(ppl)` when a transform
/// is given, otherwise mean raw cross-entropy.
pub fn evaluator_baseline(
    evaluator: &dyn Evaluator,
    batches: &[Vec<(&[u32], &[u32])>],
    transform: Option<&RewardTransform>,
) -> Result<f64> {
    if batches.is_empty() {
        return Err(DctError::Contract("baseline over no mini-batches".into()));
    }
    let mut acc = 0.0;
    for batch in batches {
        let s = evaluator_score(evaluator, batch)?;
        acc += match transform {
            Some(t) => t.apply(s.ppl),
            None => s.loss,
        };
    }
    Ok(acc / batches.len() as f64)
}
