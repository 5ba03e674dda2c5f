//! Central finite-difference oracle shared by the gradient tests.

use dct_core::memory::{compress, compress_backward, StreamMemory};
use dct_core::model::{Model, ModelConfig, SegmentInput};
use dct_core::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so that vanishing gradients do not
/// divide by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / denom
}

/// Central differences of `f` at every coordinate of `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Tiny model fixture: one stream with a memory holding one granular
/// segment and one freshly compressed block, then a scored segment.
pub struct ModelFixture {
    pub config: ModelConfig,
    pub seg_len: usize,
    pub segments: Vec<Vec<u32>>,
    pub hidden_seed: u64,
}

impl ModelFixture {
    pub fn new(config: ModelConfig, seg_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let segments = (0..4)
            .map(|_| {
                (0..=seg_len)
                    .map(|_| rng.random_range(0..config.vocab as u32))
                    .collect()
            })
            .collect();
        Self {
            config,
            seg_len,
            segments,
            hidden_seed: seed ^ 0x5eed,
        }
    }

    /// Builds memory (fresh compressed + granular) from fixed pseudo hidden
    /// states, so only compression weights carry a gradient into it.
    fn memory(&self, model: &Model<f64>) -> StreamMemory<f64> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(self.hidden_seed);
        let mut mem = StreamMemory::new(
            cfg.layers,
            cfg.d_model,
            self.seg_len,
            self.seg_len,
            2 * self.seg_len,
            cfg.ratio,
        );
        for _ in 0..2 {
            let span = mem.next_span();
            let hidden: Vec<Matrix<f64>> = (0..cfg.layers)
                .map(|_| {
                    Matrix::from_fn(self.seg_len, cfg.d_model, |_, _| {
                        rng.random_range(-1.0..1.0)
                    })
                })
                .collect();
            let evicted = mem.append_segment(hidden, span).unwrap();
            for (l, ev) in evicted.into_iter().enumerate() {
                if !ev.is_empty() {
                    let block = compress(&ev, model.compression(l)).unwrap();
                    mem.layer_mut(l).commit_compressed(block).unwrap();
                }
            }
        }
        mem
    }

    pub fn loss(&self, params: &[f64]) -> f64 {
        let model = Model::from_params(self.config, params.to_vec()).unwrap();
        let mem = self.memory(&model);
        let ctx: Vec<_> = mem.layers().iter().map(|l| l.attention_context()).collect();
        let seg = &self.segments[0];
        let (out, _) = model
            .forward(&[SegmentInput {
                tokens: &seg[..self.seg_len],
                targets: &seg[1..],
                contexts: &ctx,
            }])
            .unwrap();
        out.loss
    }

    pub fn analytic(&self, params: &[f64]) -> Vec<f64> {
        let model = Model::from_params(self.config, params.to_vec()).unwrap();
        let mem = self.memory(&model);
        let ctx: Vec<_> = mem.layers().iter().map(|l| l.attention_context()).collect();
        let seg = &self.segments[0];
        let (_, cache) = model
            .forward(&[SegmentInput {
                tokens: &seg[..self.seg_len],
                targets: &seg[1..],
                contexts: &ctx,
            }])
            .unwrap();
        let mut grads = model.zero_grads();
        let ctx_grads = model.backward(&cache, &mut grads, true);
        for (l, layer) in mem.layers().iter().enumerate() {
            let (ws, bs) = model.compression_grad_slots(l);
            for (offset, block) in layer.fresh_compressed() {
                let g = ctx_grads[0][l].slice_rows(offset, offset + block.positions());
                let (head, tail) = grads.split_at_mut(bs.offset);
                compress_backward(
                    block.source().unwrap(),
                    &g,
                    block.ratio(),
                    &mut head[ws.range()],
                    &mut tail[..bs.len()],
                );
            }
        }
        grads
    }
}

/// Largest relative error over all coordinates and the coordinate it occurs at.
pub fn worst(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0.0, 0), |acc, (i, e)| if e > acc.0 { (e, i) } else { acc })
}

/// Surrogate-objective gradient of a small actor against central differences.
/// Returns the worst relative error and the parameter it occurs at.
pub fn actor_check(input_dim: usize, hidden: usize, seed: u64) -> (f64, String) {
    use dct_core::judger::{
        policy_gradient, surrogate_objective, Action, Actor, ActorConfig, EntropyMode, PolicyState,
        Trajectory, TrajectoryEntry,
    };
    let cfg = ActorConfig { input_dim, hidden };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actor = Actor::<f64>::new(cfg, seed).unwrap();
    // larger head weights than the default init so the softmax is not flat
    let mut params = actor.params().to_vec();
    for p in &mut params {
        *p += rng.random_range(-0.3..0.3);
    }
    let mut traj = Trajectory::new();
    for t in 0..3 {
        let rows = 3 + t;
        traj.push(TrajectoryEntry {
            state: PolicyState::from_matrix(Matrix::from_fn(rows, input_dim, |_, _| {
                rng.random_range(-1.0..1.0)
            })),
            action: if t % 2 == 0 {
                Action::Keep
            } else {
                Action::Discard
            },
            reward: rng.random_range(0.0..1.0),
            log_prob: 0.0,
            entropy: 0.0,
        })
        .unwrap();
    }
    let (b, alpha) = (0.4, 0.05);
    let at = Actor::from_params(cfg, params.clone()).unwrap();
    let analytic = policy_gradient(&at, &traj, b, alpha, EntropyMode::Gradient).unwrap();
    let numeric = numeric_gradient(&params, |p| {
        surrogate_objective(
            &Actor::from_params(cfg, p.to_vec()).unwrap(),
            &traj,
            b,
            alpha,
        )
        .unwrap()
    });
    let (err, i) = worst(&analytic, &numeric);
    (
        err,
        at.layout().layout.name_of(i).unwrap_or("?").to_string(),
    )
}
