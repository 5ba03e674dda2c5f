//! Run configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{DctError, Result};
use crate::judger::{ActorConfig, EntropyMode, RewardTransform};
use crate::model::optim::OptimizerKind;
use crate::model::ModelConfig;

/// Which policy decides Keep/Discard for evicted blocks during co-training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeMode {
    Learned,
    Keep,
    Discard,
}

impl FromStr for JudgeMode {
    type Err = DctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "keep" => Ok(Self::Keep),
            "discard" => Ok(Self::Discard),
            other => Err(DctError::Config(format!("unknown judge mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for JudgeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Learned => "learned",
            Self::Keep => "keep",
            Self::Discard => "discard",
        })
    }
}

/// How the policy-gradient baseline is computed from the evaluator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    /// Mean of `f(ppl)` over the step's mini-batches.
    Transformed,
    /// Mean evaluator cross-entropy, untransformed.
    Raw,
}

impl FromStr for BaselineMode {
    type Err = DctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformed" => Ok(Self::Transformed),
            "raw" => Ok(Self::Raw),
            other => Err(DctError::Config(format!("unknown baseline mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Transformed => "transformed",
            Self::Raw => "raw",
        })
    }
}

/// Every hyperparameter of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seg_len: usize,
    pub mem_len: usize,
    pub cmem_len: usize,
    pub ratio: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub actor_hidden: usize,
    pub batch_size: usize,
    pub minibatches: usize,
    pub eval_batch_size: usize,
    pub pretrain_lr: f64,
    pub cotrain_lr: f64,
    pub judger_lr: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    pub pretrain_epochs: f64,
    pub cotrain_steps: usize,
    pub reward_slope: f64,
    pub reward_base: f64,
    pub entropy_coef: f64,
    pub entropy_mode: EntropyMode,
    pub baseline: BaselineMode,
    pub judge: JudgeMode,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub corpus_prefix: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seg_len: 128,
            mem_len: 128,
            cmem_len: 64,
            ratio: 4,
            layers: 2,
            d_model: 128,
            heads: 4,
            d_ff: 512,
            vocab: 256,
            actor_hidden: 64,
            batch_size: 32,
            minibatches: 4,
            eval_batch_size: 8,
            pretrain_lr: 1e-4,
            cotrain_lr: 1e-5,
            judger_lr: 1e-4,
            optimizer: OptimizerKind::Sgd,
            clip_norm: 0.0,
            pretrain_epochs: 1.0,
            cotrain_steps: 2000,
            reward_slope: 1.0,
            reward_base: 0.99,
            entropy_coef: 0.01,
            entropy_mode: EntropyMode::Gradient,
            baseline: BaselineMode::Transformed,
            judge: JudgeMode::Learned,
            train_fraction: 0.9,
            valid_fraction: 0.05,
            corpus_prefix: 0,
            seed: 0,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident),* $(,)?) => {
        /// Keys accepted in a config file, in echo order.
        pub const KEYS: &[&str] = &[$(stringify!($key)),*];

        fn set_field(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $(stringify!($key) => {
                    cfg.$key = value.parse().map_err(|e| {
                        DctError::Config(format!("invalid value `{value}` for `{key}`: {e}"))
                    })?;
                })*
                other => return Err(DctError::Config(format!("unknown config key `{other}`"))),
            }
            Ok(())
        }

        fn write_fields(cfg: &RunConfig, out: &mut String) {
            $(let _ = writeln!(out, "{} = {}", stringify!($key), cfg.$key);)*
        }
    };
}

config_keys!(
    seg_len,
    mem_len,
    cmem_len,
    ratio,
    layers,
    d_model,
    heads,
    d_ff,
    vocab,
    actor_hidden,
    batch_size,
    minibatches,
    eval_batch_size,
    pretrain_lr,
    cotrain_lr,
    judger_lr,
    optimizer,
    clip_norm,
    pretrain_epochs,
    cotrain_steps,
    reward_slope,
    reward_base,
    entropy_coef,
    entropy_mode,
    baseline,
    judge,
    train_fraction,
    valid_fraction,
    corpus_prefix,
    seed,
);

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DctError::Config(format!("line {}: expected `key = value`", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        set_field(self, key, value)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_fields(self, &mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DctError::Config(msg));
        if self.seg_len == 0 || self.mem_len == 0 {
            return bad("seg_len and mem_len must be positive".into());
        }
        if self.ratio == 0 {
            return bad("ratio must be at least 1".into());
        }
        if self.minibatches == 0
            || self.batch_size == 0
            || !self.batch_size.is_multiple_of(self.minibatches)
        {
            return bad(format!(
                "batch_size {} must be a positive multiple of minibatches {}",
                self.batch_size, self.minibatches
            ));
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size must be positive".into());
        }
        if self.actor_hidden == 0 {
            return bad("actor_hidden must be positive".into());
        }
        for (name, lr) in [
            ("pretrain_lr", self.pretrain_lr),
            ("cotrain_lr", self.cotrain_lr),
            ("judger_lr", self.judger_lr),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("{name} must be a non-negative number"));
            }
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative (0 disables clipping)".into());
        }
        if !(self.pretrain_epochs.is_finite() && self.pretrain_epochs >= 0.0) {
            return bad("pretrain_epochs must be non-negative".into());
        }
        if !(self.entropy_coef.is_finite() && self.entropy_coef >= 0.0) {
            return bad("entropy_coef must be non-negative".into());
        }
        let (tf, vf) = (self.train_fraction, self.valid_fraction);
        if !(tf > 0.0 && vf >= 0.0 && tf + vf <= 1.0) {
            return bad(format!(
                "split fractions {tf}/{vf} must be positive and sum to at most 1"
            ));
        }
        self.reward()?;
        self.model()?;
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab: self.vocab,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            layers: self.layers,
            ratio: self.ratio,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn actor(&self) -> ActorConfig {
        ActorConfig {
            input_dim: self.d_model,
            hidden: self.actor_hidden,
        }
    }

    pub fn reward(&self) -> Result<RewardTransform> {
        RewardTransform::new(self.reward_slope, self.reward_base)
    }

    pub fn minibatch_size(&self) -> usize {
        self.batch_size / self.minibatches
    }

    /// Rows in a judger state: `n_cm + n_m + n_s`.
    pub fn state_rows(&self) -> usize {
        self.cmem_len + self.mem_len + self.seg_len
    }
}
