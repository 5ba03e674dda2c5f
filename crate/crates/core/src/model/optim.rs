//! First-order optimizers over flat parameter buffers.

use serde::{Deserialize, Serialize};

use crate::error::{DctError, Result};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = DctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(DctError::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Descent optimizer; Adam moments are allocated lazily.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    clip_norm: Option<f64>,
    pub(crate) first: Vec<T>,
    pub(crate) second: Vec<T>,
    pub(crate) steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, clip_norm: Option<f64>) -> Self {
        Self {
            kind,
            clip_norm,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one descent step `params -= lr * update(grads)`.
    ///
    /// Non-finite gradients abort the step and leave params untouched.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(DctError::Shape(format!(
                "{} params but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        let mut norm_sq = 0.0f64;
        for (i, g) in grads.iter().enumerate() {
            let v = g.as_f64();
            if !v.is_finite() {
                return Err(DctError::NonFinite(format!("gradient entry {i} is {v}")));
            }
            norm_sq += v * v;
        }
        let scale = match self.clip_norm {
            Some(max) if max > 0.0 && norm_sq.sqrt() > max => max / norm_sq.sqrt(),
            _ => 1.0,
        };
        let scale = lit::<T>(scale);
        let lr_t = lit::<T>(lr);
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr_t * scale * *g;
                }
            }
            OptimizerKind::Adam => {
                if self.first.len() != params.len() {
                    self.first = vec![T::zero(); params.len()];
                    self.second = vec![T::zero(); params.len()];
                }
                let b1 = lit::<T>(BETA1);
                let b2 = lit::<T>(BETA2);
                let one = T::one();
                let t = self.steps as i32;
                let c1 = one - b1.powi(t);
                let c2 = one - b2.powi(t);
                let eps = lit::<T>(ADAM_EPS);
                for i in 0..params.len() {
                    let g = grads[i] * scale;
                    self.first[i] = b1 * self.first[i] + (one - b1) * g;
                    self.second[i] = b2 * self.second[i] + (one - b2) * g * g;
                    let mhat = self.first[i] / c1;
                    let vhat = self.second[i] / c2;
                    params[i] -= lr_t * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
