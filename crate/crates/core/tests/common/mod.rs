#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serl_core::envs::generate_tasks;
use serl_core::policy::PolicyParams;
use serl_core::trainer::collect_rollouts;
use serl_core::{Env, EnvKind, RolloutGroup, Step, Token, TrainConfig, Trajectory};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn keydoor() -> Env {
    Env::new(EnvKind::KeyDoor, 3).unwrap()
}

/// Smaller than the defaults so that training-loop tests stay fast.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        feature_dim: 256,
        warmup_steps: 20,
        group_size: 4,
        ..TrainConfig::default()
    }
}

/// Random non-marker token in `10..v`.
pub fn word(rng: &mut ChaCha8Rng, v: usize) -> Token {
    Token(rng.gen_range(10..v as u32))
}

/// One `THINK w ACT_BEGIN w w ACT_END` response with random old log-probs.
pub fn synthetic_step(rng: &mut ChaCha8Rng, v: usize, key: String) -> Step {
    let obs: Vec<Token> = (0..rng.gen_range(1..5)).map(|_| word(rng, v)).collect();
    let mut act = Vec::new();
    if rng.gen_bool(0.5) {
        act.push(Token::THINK);
        act.push(word(rng, v));
    }
    act.push(Token::ACT_BEGIN);
    for _ in 0..rng.gen_range(1..4) {
        act.push(word(rng, v));
    }
    act.push(Token::ACT_END);
    let logp: Vec<f64> = act.iter().map(|_| -rng.gen_range(0.5..4.0)).collect();
    let fb: Vec<Token> = (0..rng.gen_range(0..4)).map(|_| word(rng, v)).collect();
    Step::new(obs, act, fb, logp, key).unwrap()
}

/// A group in which every `state_key` is distinct.
pub fn synthetic_group(rng: &mut ChaCha8Rng, v: usize, n: usize, task: &str) -> RolloutGroup {
    let trajectories = (0..n)
        .map(|i| {
            let steps = (0..rng.gen_range(1..4))
                .map(|t| synthetic_step(rng, v, format!("{task}/{i}/{t}")))
                .collect();
            let success = rng.gen_bool(0.4);
            Trajectory {
                task_id: task.into(),
                steps,
                outcome_reward: if success { 1.0 } else { rng.gen_range(0.0..0.9) },
                success,
            }
        })
        .collect();
    RolloutGroup::new(trajectories).unwrap()
}

/// Real KeyDoor rollouts from `params`; members of a group share their
/// initial state.
pub fn env_groups(params: &PolicyParams, config: &TrainConfig, tasks: usize, seed: u64) -> Vec<RolloutGroup> {
    let env = keydoor();
    let tasks = generate_tasks(EnvKind::KeyDoor, tasks, seed, 3, EnvKind::KeyDoor.default_max_turns()).unwrap();
    collect_rollouts(params, &tasks, &env, config, 0).unwrap()
}

pub fn perturbed(params: &PolicyParams, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut p = params.clone();
    for i in 0..p.num_params() {
        p.set_flat(i, p.get_flat(i) + rng.gen_range(-scale..scale));
    }
    p
}
