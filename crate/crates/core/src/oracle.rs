//! Reference implementations for cross-checking the main code paths.
//!
//! Nothing here reuses the numeric routines of [`crate::policy`] or
//! [`crate::objective`]: hashing, featurization, softmax and the GRPO
//! gradient are re-derived from their definitions in the most direct way.

use std::collections::{HashSet, VecDeque};

use crate::config::TrainConfig;
use crate::envs::{admissible_commands, env_step, reset, EnvState, TaskSpec};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::trajectory::RolloutGroup;
use crate::vocab::Token;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDiffSpec {
    pub h: f64,
    pub samples: usize,
    pub tolerance: f64,
}

impl Default for FiniteDiffSpec {
    fn default() -> Self {
        FiniteDiffSpec {
            h: 1e-5,
            samples: 100,
            tolerance: 1e-5,
        }
    }
}

/// Central differences of `loss` at `x` along each coordinate in `coords`.
pub fn finite_diff_grad<F>(mut loss: F, x: &[f64], coords: &[usize], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::config("h", "finite-difference step must be positive"));
    }
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = loss(&probe);
            probe[i] = orig - h;
            let down = loss(&probe);
            probe[i] = orig;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::NonFiniteLoss);
            }
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// [`finite_diff_grad`] over the flat `(W, b)` coordinates of a policy.
pub fn finite_diff_params<F>(
    mut loss: F,
    params: &PolicyParams,
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&PolicyParams) -> f64,
{
    let mut probe = params.clone();
    let x: Vec<f64> = (0..params.num_params()).map(|i| params.get_flat(i)).collect();
    finite_diff_grad(
        |v| {
            for &i in coords {
                probe.set_flat(i, v[i]);
            }
            loss(&probe)
        },
        &x,
        coords,
        h,
    )
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// FNV-1a, 64-bit, written out from its definition.
pub fn reference_fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 14695981039346656037;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(1099511628211);
    }
    hash
}

/// Dense 0/1 feature vector built from n-gram strings.
pub fn reference_features(context: &[Token], dim: usize) -> Vec<f64> {
    // split off the last hindsight block, if any
    let mut main: Vec<Token> = context.to_vec();
    let mut block: Vec<Token> = Vec::new();
    if let Some(open) = (0..context.len()).rev().find(|&i| context[i] == Token::HIND_BEGIN) {
        let mut close = context.len();
        for (i, t) in context.iter().enumerate().skip(open + 1) {
            if *t == Token::HIND_END {
                close = i;
                break;
            }
        }
        block = context[open + 1..close].to_vec();
        main = context[..open].to_vec();
        if close < context.len() {
            main.extend_from_slice(&context[close + 1..]);
        }
    }
    let mut f = vec![0.0; dim];
    let start = main.len().saturating_sub(8);
    set_ngrams(&mut f, &main[start..], "");
    set_ngrams(&mut f, &block, "h|");
    f[dim - 1] = 1.0;
    f
}

fn set_ngrams(f: &mut [f64], tokens: &[Token], prefix: &str) {
    let buckets = f.len() as u64 - 1;
    for n in 1..=3 {
        if n > tokens.len() {
            break;
        }
        for s in 0..=tokens.len() - n {
            let ids: Vec<String> = tokens[s..s + n].iter().map(|t| t.0.to_string()).collect();
            let key = format!("{prefix}{}|{}", n, ids.join(","));
            f[(reference_fnv1a64(key.as_bytes()) % buckets) as usize] = 1.0;
        }
    }
}

fn dense_probs(params: &PolicyParams, f: &[f64]) -> Vec<f64> {
    let v = params.vocab_size();
    let z: Vec<f64> = (0..v)
        .map(|y| {
            let mut s = params.bias()[y];
            for (j, fj) in f.iter().enumerate() {
                if *fj != 0.0 {
                    s += params.w(y, j) * fj;
                }
            }
            s
        })
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Plain clipped-surrogate GRPO loss and its flat gradient
/// (`W` row-major, then `b`), token-mean normalized.
pub fn reference_grpo(
    groups: &[RolloutGroup],
    params: &PolicyParams,
    config: &TrainConfig,
) -> (f64, Vec<f64>) {
    let (v, d) = (params.vocab_size(), params.dim());
    let mut grad = vec![0.0; v * d + v];
    let mut loss = 0.0;
    let mut count = 0usize;
    for group in groups {
        let r: Vec<f64> = group.trajectories.iter().map(|t| t.outcome_reward).collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r.len() as f64).sqrt();
        for (traj, reward) in group.trajectories.iter().zip(&r) {
            let adv = (reward - mean) / (std + config.adv_eps);
            let mut history: Vec<Token> = Vec::new();
            for step in &traj.steps {
                history.push(Token::OBS_BEGIN);
                history.extend(&step.observation_tokens);
                history.push(Token::OBS_END);
                for (i, &y) in step.action_tokens.iter().enumerate() {
                    let ctx = &history[history.len().saturating_sub(config.context_cap)..];
                    let f = reference_features(ctx, d);
                    let p = dense_probs(params, &f);
                    let ratio = (p[y.index()].ln() - step.sampled_logprobs[i]).exp();
                    let lo = 1.0 - config.clip_eps;
                    let hi = 1.0 + config.clip_eps;
                    let unclipped = ratio * adv;
                    let clipped = ratio.max(lo).min(hi) * adv;
                    loss -= unclipped.min(clipped);
                    // d(-ℓ)/dz_u = -ρA (1[u = y] - p_u) while unclipped is active
                    let coef = if unclipped <= clipped { ratio * adv } else { 0.0 };
                    for u in 0..v {
                        let dz = -coef * (if u == y.index() { 1.0 } else { 0.0 } - p[u]);
                        grad[v * d + u] += dz;
                        for (j, fj) in f.iter().enumerate() {
                            if *fj != 0.0 {
                                grad[u * d + j] += dz * fj;
                            }
                        }
                    }
                    count += 1;
                    history.push(y);
                }
                history.push(Token::FB_BEGIN);
                history.extend(&step.feedback_tokens);
                history.push(Token::FB_END);
            }
        }
    }
    let scale = 1.0 / count.max(1) as f64;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    (loss * scale, grad)
}

/// Breadth-first search over admissible commands (tried in lexicographic
/// order), deduplicating visited states. Returns the best reward reachable
/// within `max_depth` commands and the lexicographically first of the
/// shortest command sequences achieving it.
pub fn brute_force_best(task: &TaskSpec, max_depth: usize) -> Result<(f64, Vec<String>)> {
    let (start, _) = reset(task)?;
    search_from(start, max_depth)
}

/// [`brute_force_best`] starting from an arbitrary non-terminal state.
pub fn search_from(start: EnvState, max_depth: usize) -> Result<(f64, Vec<String>)> {
    if max_depth == 0 {
        return Err(Error::InvalidDepth);
    }
    struct Node {
        state: EnvState,
        parent: usize,
        command: String,
        depth: usize,
    }
    let mut seen: HashSet<String> = HashSet::from([start.state_key()]);
    let mut nodes = vec![Node {
        state: start,
        parent: usize::MAX,
        command: String::new(),
        depth: 0,
    }];
    let mut queue = VecDeque::from([0usize]);
    let mut best: (f64, Option<usize>) = (0.0, None);
    while let Some(id) = queue.pop_front() {
        if nodes[id].depth == max_depth {
            continue;
        }
        let mut commands = admissible_commands(&nodes[id].state);
        commands.sort();
        for cmd in commands {
            let (next, out) = env_step(&nodes[id].state, &cmd)?;
            if !seen.insert(next.state_key()) {
                continue;
            }
            let depth = nodes[id].depth + 1;
            nodes.push(Node {
                state: next,
                parent: id,
                command: cmd,
                depth,
            });
            let child = nodes.len() - 1;
            if out.done {
                if out.reward > best.0 {
                    best = (out.reward, Some(child));
                }
            } else {
                queue.push_back(child);
            }
        }
        if best.0 >= 1.0 {
            break;
        }
    }
    let mut plan = Vec::new();
    let mut cur = best.1;
    while let Some(id) = cur.filter(|&i| i != 0) {
        plan.push(nodes[id].command.clone());
        cur = Some(nodes[id].parent);
    }
    plan.reverse();
    Ok((best.0, plan))
}

/// Replays the search plan of each task; returns `(success_rate, mean_reward)`.
pub fn oracle_replay(tasks: &[TaskSpec], max_turns: usize) -> Result<(f64, f64)> {
    if tasks.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut successes = 0usize;
    let mut total = 0.0;
    for task in tasks {
        let (_, plan) = brute_force_best(task, max_turns)?;
        let (mut state, _) = reset(task)?;
        let mut reward = 0.0;
        for cmd in plan {
            let (next, out) = env_step(&state, &cmd)?;
            state = next;
            if out.done {
                reward = out.reward;
                break;
            }
        }
        total += reward;
        if reward >= 1.0 {
            successes += 1;
        }
    }
    let n = tasks.len() as f64;
    Ok((successes as f64 / n, total / n))
}
