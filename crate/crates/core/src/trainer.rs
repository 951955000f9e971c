//! Rollouts, teacher synchronization, the update step and evaluation.
//!
//! Every random stream is derived from the run seed and its logical address
//! (`tasks/k`, `rollout/k/task/n`, ...), so results do not depend on thread
//! scheduling and a run resumed from a checkpoint continues bit-for-bit.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::config::Schedule;
use crate::config::TrainConfig;
use crate::envs::{admissible_commands, generate_tasks, Env, TaskSpec};
use crate::error::{Error, Result};
use crate::feedback::place;
use crate::hash::derive_seed;
use crate::history::{truncate_recent, HistoryStream};
use crate::objective::serl_batch_loss_and_grad;
use crate::oracle::search_from;
use crate::policy::{
    featurize, generate_action_with, softmax, snapshot, Decoding, FeatureVector, Gradient,
    PolicyParams, TeacherSnapshot,
};
use crate::trajectory::{command_tokens, RolloutGroup, Step, Trajectory};
use crate::vocab::Token;

pub fn schedule_value(s: &Schedule, k: usize) -> f64 {
    s.value(k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub params: PolicyParams,
    pub teacher: TeacherSnapshot,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub l_rw: f64,
    pub l_act: f64,
    pub l_total: f64,
    pub kl_mean: f64,
    pub delta_mean_abs: f64,
    pub frac_w_clipped: f64,
    pub grad_norm: f64,
    pub entropy_mean: f64,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.mean_reward,
            self.success_rate,
            self.alpha,
            self.lambda,
            self.l_rw,
            self.l_act,
            self.l_total,
            self.kl_mean,
            self.delta_mean_abs,
            self.frac_w_clipped,
            self.grad_norm,
            self.entropy_mean,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub success_rate: f64,
    pub mean_reward: f64,
    pub episodes: usize,
}

/// Plays one episode. The policy sees the stream truncated to the context
/// cap; the returned trajectory records temperature-1 log-probabilities.
pub fn run_episode<R: Rng + ?Sized>(
    params: &PolicyParams,
    env: &Env,
    task: &TaskSpec,
    max_turns: usize,
    context_cap: usize,
    decoding: Decoding,
    rng: &mut R,
) -> Result<Trajectory> {
    let vocab = env.vocab();
    let (mut state, mut obs_text) = env.reset(task)?;
    let mut stream = HistoryStream::new();
    let mut steps = Vec::new();
    let mut reward = 0.0;
    for _ in 0..max_turns {
        let obs = vocab.tokenize(&obs_text);
        stream.push_observation(&obs);
        let action = generate_action_with(
            params,
            truncate_recent(stream.tokens(), context_cap),
            decoding,
            rng,
        );
        let command = vocab.detokenize(&command_tokens(&action.tokens))?;
        let state_key = state.state_key();
        let (next, out) = env.step(&state, &command)?;
        let feedback = vocab.tokenize(&out.feedback_text);
        stream.push_action(&action.tokens);
        stream.push_feedback(&feedback);
        steps.push(Step {
            observation_tokens: obs,
            action_tokens: action.tokens,
            feedback_tokens: feedback,
            sampled_logprobs: action.logprobs,
            action_mask: action.mask,
            state_key,
        });
        state = next;
        if out.done {
            reward = out.reward;
            break;
        }
        obs_text = out.next_observation_text;
    }
    Ok(Trajectory {
        task_id: task.task_id.clone(),
        steps,
        outcome_reward: reward,
        success: reward >= 1.0,
    })
}

fn rollout_rng(seed: u64, k: usize, task_id: &str, n: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &["rollout", &k.to_string(), task_id, &n.to_string()],
    ))
}

/// `group_size` sampled episodes per task, merged in (task, rollout) order.
pub fn collect_rollouts(
    params: &PolicyParams,
    tasks: &[TaskSpec],
    env: &Env,
    config: &TrainConfig,
    k: usize,
) -> Result<Vec<RolloutGroup>> {
    if tasks.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = config.group_size;
    let max_turns = config.max_turns_for(env.kind());
    let decoding = Decoding::Sample {
        temperature: config.rollout_temperature,
    };
    let episodes = (0..tasks.len() * n)
        .into_par_iter()
        .map(|idx| {
            let task = &tasks[idx / n];
            let mut rng = rollout_rng(config.seed, k, &task.task_id, idx % n);
            run_episode(params, env, task, max_turns, config.context_cap, decoding, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut episodes = episodes.into_iter();
    tasks
        .iter()
        .map(|_| RolloutGroup::new(episodes.by_ref().take(n).collect()))
        .collect()
}

/// Training tasks of step `k`.
pub fn step_tasks(env: &Env, config: &TrainConfig, k: usize, count: usize) -> Result<Vec<TaskSpec>> {
    generate_tasks(
        env.kind(),
        count,
        derive_seed(config.seed, &["tasks", &k.to_string()]),
        env.size(),
        config.max_turns_for(env.kind()),
    )
}

/// Held-out tasks, disjoint in seed space from the training stream.
pub fn eval_tasks(env: &Env, config: &TrainConfig, count: usize) -> Result<Vec<TaskSpec>> {
    generate_tasks(
        env.kind(),
        count,
        derive_seed(config.seed, &["eval"]),
        env.size(),
        config.max_turns_for(env.kind()),
    )
}

pub fn maybe_sync_teacher(state: &mut TrainState, config: &TrainConfig) {
    if state.step % config.teacher_sync_interval == 0 {
        state.teacher = snapshot(&state.params, state.step);
    }
}

/// Initial parameters: zeros followed by the format warm start.
pub fn init_state(env: &Env, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let mut params = PolicyParams::zeros(env.vocab().len(), config.feature_dim);
    format_warmup(&mut params, env, config)?;
    Ok(TrainState {
        step: 0,
        teacher: snapshot(&params, 0),
        params,
        seed: config.seed,
    })
}

const WARMUP_TASKS: usize = 64;
const WARMUP_WALK: usize = 30;
/// Probability that a warm-start walk follows a shortest-plan step instead of
/// a random admissible command, so that late task phases appear as contexts.
const WARMUP_GUIDE_RATE: f64 = 0.5;
const WARMUP_THINK_RATE: f64 = 0.02;
const WARMUP_MOMENTUM: f64 = 0.9;

/// One supervised position of the warm start: features of the context and a
/// sparse target distribution over the next token.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupExample {
    pub features: FeatureVector,
    pub target: Vec<(Token, f64)>,
}

/// `p^τ` renormalized: the distribution whose samples at temperature `τ`
/// follow `p`.
fn temper(counts: &BTreeMap<Token, f64>, tau: f64) -> Vec<(Token, f64)> {
    let total: f64 = counts.values().sum();
    let raised: Vec<(Token, f64)> = counts.iter().map(|(t, c)| (*t, (c / total).powf(tau))).collect();
    let z: f64 = raised.iter().map(|(_, x)| x).sum();
    raised.into_iter().map(|(t, x)| (t, x / z)).collect()
}

/// Next-token distribution of `[<think>] <act> command </act>` responses
/// given the emitted prefix, with the command uniform over `commands`.
fn response_distribution(commands: &[Vec<Token>], prefix: &[Token]) -> BTreeMap<Token, f64> {
    let mut counts = BTreeMap::new();
    match prefix {
        [] => {
            counts.insert(Token::THINK, WARMUP_THINK_RATE);
            counts.insert(Token::ACT_BEGIN, 1.0 - WARMUP_THINK_RATE);
        }
        [Token::THINK] => {
            counts.insert(Token::ACT_BEGIN, 1.0);
        }
        _ => {
            let open = prefix.iter().position(|t| *t == Token::ACT_BEGIN).expect("prefix opened");
            let words = &prefix[open + 1..];
            for cmd in commands.iter().filter(|c| c.starts_with(words)) {
                let next = cmd.get(words.len()).copied().unwrap_or(Token::ACT_END);
                *counts.entry(next).or_insert(0.0) += 1.0;
            }
        }
    }
    counts
}

/// Warm-start data. Walks mixing random admissible commands with
/// shortest-plan steps provide contexts;
/// at every response position the target is the prefix-conditional of a
/// uniform choice among the admissible commands, tempered so that sampling
/// at the rollout temperature reproduces that choice.
pub fn warmup_examples(env: &Env, config: &TrainConfig) -> Result<Vec<WarmupExample>> {
    let max_turns = config.max_turns_for(env.kind()).min(WARMUP_WALK);
    let tasks = generate_tasks(
        env.kind(),
        WARMUP_TASKS,
        derive_seed(config.seed, &["warmup"]),
        env.size(),
        config.max_turns_for(env.kind()),
    )?;
    let vocab = env.vocab();
    let tau = config.rollout_temperature;
    let mut out = Vec::new();
    for task in &tasks {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["warmup", &task.task_id]));
        let (mut state, mut obs_text) = env.reset(task)?;
        let mut stream = HistoryStream::new();
        for _ in 0..max_turns {
            stream.push_observation(&vocab.tokenize(&obs_text));
            let commands = admissible_commands(&state);
            let guided = if rng.gen_bool(WARMUP_GUIDE_RATE) {
                search_from(state.clone(), max_turns)?.1.into_iter().next()
            } else {
                None
            };
            let Some(cmd) = guided.or_else(|| commands.choose(&mut rng).cloned()) else { break };
            let tokenized: Vec<Vec<Token>> = commands.iter().map(|c| vocab.tokenize(c)).collect();
            let mut response = Vec::new();
            if rng.gen_bool(WARMUP_THINK_RATE) {
                response.push(Token::THINK);
            }
            response.push(Token::ACT_BEGIN);
            response.extend(vocab.tokenize(&cmd));
            response.push(Token::ACT_END);
            let (next, o) = env.step(&state, &cmd)?;
            let mut ctx = truncate_recent(stream.tokens(), config.context_cap).to_vec();
            for (i, &y) in response.iter().enumerate() {
                let dist = response_distribution(&tokenized, &response[..i]);
                let in_command = response[..i].contains(&Token::ACT_BEGIN);
                out.push(WarmupExample {
                    features: featurize(&ctx, config.feature_dim),
                    // Only the command choice is tempered; the format is not.
                    target: temper(&dist, if in_command { tau } else { 1.0 }),
                });
                ctx.push(y);
            }
            stream.push_action(&response);
            stream.push_feedback(&vocab.tokenize(&o.feedback_text));
            if o.done {
                break;
            }
            state = next;
            obs_text = o.next_observation_text;
        }
    }
    Ok(out)
}

/// Mean cross-entropy of the targets under the policy, and its gradient.
pub fn cross_entropy_loss_and_grad(params: &PolicyParams, examples: &[WarmupExample]) -> (f64, Gradient) {
    const CHUNK: usize = 512;
    let inv = 1.0 / examples.len().max(1) as f64;
    let parts: Vec<(f64, Gradient)> = examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Gradient::like(params);
            let mut loss = 0.0;
            for ex in chunk {
                let mut dz = softmax(&params.logits(&ex.features), 1.0);
                for &(y, q) in &ex.target {
                    loss -= q * dz[y.index()].ln();
                }
                for &(y, q) in &ex.target {
                    dz[y.index()] -= q;
                }
                g.add_outer(&ex.features, &dz, inv);
            }
            (loss, g)
        })
        .collect();
    let mut grad = Gradient::like(params);
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grad.add_assign(&g);
    }
    (loss * inv, grad)
}

/// Teaches the response format and a rough admissibility prior before any
/// reward is seen. Returns the final warm-start loss.
pub fn format_warmup(params: &mut PolicyParams, env: &Env, config: &TrainConfig) -> Result<f64> {
    if config.warmup_steps == 0 {
        return Ok(f64::NAN);
    }
    let examples = warmup_examples(env, config)?;
    let mut loss = f64::NAN;
    let mut velocity = Gradient::like(params);
    for _ in 0..config.warmup_steps {
        let (l, g) = cross_entropy_loss_and_grad(params, &examples);
        velocity.decay_add(WARMUP_MOMENTUM, &g);
        params.apply_gradient(&velocity, config.warmup_lr);
        loss = l;
    }
    Ok(loss)
}

/// Sync → rollouts → placement → loss and gradient → one descent step.
pub fn train_step(
    state: &mut TrainState,
    tasks: &[TaskSpec],
    env: &Env,
    config: &TrainConfig,
) -> Result<(MetricsRecord, Vec<RolloutGroup>)> {
    maybe_sync_teacher(state, config);
    let k = state.step;
    let groups = collect_rollouts(&state.params, tasks, env, config, k)?;
    let plans: Vec<_> = groups
        .par_iter()
        .map(|g| place(config.placement_mode, &config.feedback_sources, g, config.hindsight_cap))
        .collect();
    let (loss, grad, _) =
        serl_batch_loss_and_grad(&groups, &plans, &state.params, &state.teacher, config, k)?;
    state.params.apply_gradient(&grad, config.learning_rate);
    if !state.params.is_finite() {
        return Err(Error::NonFiniteLoss);
    }

    let episodes: Vec<&Trajectory> = groups.iter().flat_map(|g| &g.trajectories).collect();
    let n = episodes.len() as f64;
    let record = MetricsRecord {
        step: k,
        mean_reward: episodes.iter().map(|t| t.outcome_reward).sum::<f64>() / n,
        success_rate: episodes.iter().filter(|t| t.success).count() as f64 / n,
        alpha: loss.alpha,
        lambda: loss.lambda,
        l_rw: loss.l_rw,
        l_act: loss.l_act,
        l_total: loss.l_total,
        kl_mean: loss.kl_mean,
        delta_mean_abs: loss.delta_mean_abs,
        frac_w_clipped: loss.frac_w_clipped,
        grad_norm: grad.norm(),
        entropy_mean: loss.entropy_mean,
        seed: state.seed,
    };
    state.step += 1;
    Ok((record, groups))
}

/// Greedy-decoding success rate and mean reward over `tasks`.
pub fn evaluate(
    params: &PolicyParams,
    tasks: &[TaskSpec],
    episodes_per_task: usize,
    env: &Env,
    config: &TrainConfig,
) -> Result<EvalSummary> {
    if tasks.is_empty() || episodes_per_task == 0 {
        return Err(Error::EmptyBatch);
    }
    let max_turns = config.max_turns_for(env.kind());
    let rewards = (0..tasks.len() * episodes_per_task)
        .into_par_iter()
        .map(|idx| {
            // greedy decoding never draws from the stream
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let task = &tasks[idx / episodes_per_task];
            run_episode(params, env, task, max_turns, config.context_cap, Decoding::Greedy, &mut rng)
                .map(|t| t.outcome_reward)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = rewards.len();
    Ok(EvalSummary {
        success_rate: rewards.iter().filter(|r| **r >= 1.0).count() as f64 / n as f64,
        mean_reward: rewards.iter().sum::<f64>() / n as f64,
        episodes: n,
    })
}
