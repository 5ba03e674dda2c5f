//! Fixed-state two-armed bandit driven through the real REINFORCE update.

use dct_core::judger::{
    policy_forward, reinforce_update, sample_action, Action, Actor, ActorConfig, EntropyMode,
    PolicyState, Trajectory, TrajectoryEntry,
};
use dct_core::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Bandit {
    pub reward_keep: f64,
    pub reward_discard: f64,
    pub baseline: f64,
    pub alpha: f64,
    pub lr: f64,
}

/// `(P(keep), entropy)` before each of `updates` single-decision updates.
pub fn run(b: &Bandit, seed: u64, updates: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ActorConfig {
        input_dim: 4,
        hidden: 8,
    };
    let mut actor = Actor::<f64>::new(cfg, seed).unwrap();
    let state = PolicyState::from_matrix(Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0)));
    let mut history = Vec::with_capacity(updates + 1);
    for _ in 0..updates {
        let policy = policy_forward(&actor, &state).unwrap();
        history.push((policy.p_keep(), policy.entropy));
        let (action, log_prob) = sample_action(&policy, &mut rng);
        let reward = if action == Action::Keep {
            b.reward_keep
        } else {
            b.reward_discard
        };
        let mut traj = Trajectory::new();
        traj.push(TrajectoryEntry {
            state: state.clone(),
            action,
            reward,
            log_prob,
            entropy: policy.entropy,
        })
        .unwrap();
        reinforce_update(
            &mut actor,
            &traj,
            b.baseline,
            b.alpha,
            b.lr,
            EntropyMode::Gradient,
        )
        .unwrap();
    }
    let policy = policy_forward(&actor, &state).unwrap();
    history.push((policy.p_keep(), policy.entropy));
    history
}
