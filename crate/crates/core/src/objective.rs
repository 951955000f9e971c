//! GRPO and SERL objectives with exact gradients.
//!
//! Losses are token means over the whole batch: `L_rw` averages the clipped
//! surrogate over every response token, `L_act` averages the teacher→student
//! KL over command tokens only. The hindsight gap Δ, the weights and the
//! reweighted advantages Ã are constants of the update (no gradient flows
//! through them or through the teacher).

use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::feedback::PlacementPlan;
use crate::history::HistoryStream;
use crate::policy::{featurize, log_softmax, Gradient, PolicyParams, TeacherSnapshot, FEATURE_WINDOW};
use crate::trajectory::RolloutGroup;
use crate::vocab::Token;

const NORM_TOL: f64 = 1e-9;

/// `(R - mean) / (std + eps)` with the population standard deviation.
pub fn group_advantage(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n < 2 {
        return Err(Error::GroupTooSmall(n));
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let denom = var.sqrt() + eps;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

pub fn policy_ratio(logp_new: f64, logp_old: f64) -> f64 {
    (logp_new - logp_old).exp()
}

/// `min(ρB, clip(ρ, 1-ε, 1+ε) B)`
pub fn clipped_surrogate(rho: f64, b: f64, eps: f64) -> f64 {
    (rho * b).min(rho.clamp(1.0 - eps, 1.0 + eps) * b)
}

/// Derivative of [`clipped_surrogate`] with respect to `log ρ`: `ρB` while
/// the unclipped branch is the minimum, zero once clipping takes over.
pub fn surrogate_log_grad(rho: f64, b: f64, eps: f64) -> f64 {
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps);
    if rho * b <= clipped * b {
        rho * b
    } else {
        0.0
    }
}

pub fn hindsight_gap(teacher_logp: f64, student_logp: f64) -> f64 {
    teacher_logp - student_logp
}

/// Sign with `sgn(0) = 0`.
pub fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clamp(exp(sgn(A) Δ), w_min, w_max)`
pub fn reweight(delta: f64, advantage: f64, w_min: f64, w_max: f64) -> f64 {
    (sgn(advantage) * delta).exp().clamp(w_min, w_max)
}

/// `m w + (1 - m)`
pub fn apply_mask(w: f64, mask: bool) -> f64 {
    if mask {
        w
    } else {
        1.0
    }
}

/// `A ((1 - α) + α w̄)`
pub fn token_advantage(advantage: f64, alpha: f64, w_bar: f64) -> f64 {
    advantage * ((1.0 - alpha) + alpha * w_bar)
}

fn check_normalized(p: &[f64], what: &'static str) -> Result<()> {
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > NORM_TOL || p.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::Unnormalized(what));
    }
    Ok(())
}

/// `KL(p ‖ q) = Σ p (log p - log q)` with `0 log 0 = 0`.
pub fn kl_categorical(p_teacher: &[f64], log_q_student: &[f64]) -> Result<f64> {
    if p_teacher.len() != log_q_student.len() {
        return Err(Error::Unnormalized("student distribution"));
    }
    check_normalized(p_teacher, "teacher distribution")?;
    let q: Vec<f64> = log_q_student.iter().map(|l| l.exp()).collect();
    check_normalized(&q, "student distribution")?;
    Ok(kl_unchecked(p_teacher, log_q_student))
}

fn kl_unchecked(p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, lq)| p * (p.ln() - lq))
        .sum()
}

/// Gradient of `KL(p_T ‖ softmax(z))` with respect to the student logits.
pub fn kl_grad_wrt_student_logits(p_teacher: &[f64], p_student: &[f64]) -> Vec<f64> {
    p_student.iter().zip(p_teacher).map(|(s, t)| s - t).collect()
}

/// Teacher conditioning for one token: the student context followed by
/// `<hind> Φ </hind>`. An empty Φ adds nothing, so an unchanged teacher
/// reproduces the student exactly. Only the trailing feature window of the
/// student context can influence the policy, so only that part is copied.
pub fn teacher_context(student_context: &[Token], phi: &[Token]) -> Vec<Token> {
    if phi.is_empty() {
        return student_context.to_vec();
    }
    let tail = &student_context[student_context.len().saturating_sub(FEATURE_WINDOW)..];
    let mut ctx = Vec::with_capacity(tail.len() + phi.len() + 2);
    ctx.extend_from_slice(tail);
    ctx.push(Token::HIND_BEGIN);
    ctx.extend_from_slice(phi);
    ctx.push(Token::HIND_END);
    ctx
}

/// Per-token constants of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenWeights {
    pub delta: f64,
    pub w: f64,
    pub w_bar: f64,
    pub a_tilde: f64,
}

/// Advantages of a batch: `trajectory[g][n]` and `tokens[g][n][t][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTable {
    pub trajectory: Vec<Vec<f64>>,
    pub tokens: Vec<Vec<Vec<Vec<TokenWeights>>>>,
}

impl AdvantageTable {
    /// `A_t`, the trajectory advantage broadcast to each step.
    pub fn step_advantage(&self, g: usize, n: usize) -> f64 {
        self.trajectory[g][n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_rw: f64,
    pub l_act: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub kl_mean: f64,
    pub delta_mean_abs: f64,
    /// Share of command tokens whose weight sits at a clip bound.
    pub frac_w_clipped: f64,
    pub entropy_mean: f64,
    pub n_tokens: usize,
    pub n_masked: usize,
}

#[derive(Default)]
struct Sums {
    rw: f64,
    act: f64,
    delta_abs: f64,
    clipped: usize,
    entropy: f64,
}

struct Coefficients {
    alpha: f64,
    lambda: f64,
    w_min: f64,
    w_max: f64,
    clip_eps: f64,
    cap: usize,
    inv_tokens: f64,
    inv_masked: f64,
}

fn batch_counts(groups: &[RolloutGroup]) -> (usize, usize) {
    let mut tokens = 0;
    let mut masked = 0;
    for g in groups {
        for tr in &g.trajectories {
            for s in &tr.steps {
                tokens += s.action_tokens.len();
                masked += s.action_mask.iter().filter(|m| **m).count();
            }
        }
    }
    (tokens, masked)
}

fn entropy(log_p: &[f64]) -> f64 {
    -log_p.iter().map(|l| l.exp() * l).sum::<f64>()
}

/// Loss contributions and gradient of one group.
#[allow(clippy::too_many_arguments)]
fn group_pass(
    group: &RolloutGroup,
    plan: &PlacementPlan,
    params: &PolicyParams,
    teacher: Option<&TeacherSnapshot>,
    advantages: &[f64],
    recorded: Option<&Vec<Vec<Vec<TokenWeights>>>>,
    c: &Coefficients,
    want_grad: bool,
) -> Result<(Sums, Option<Gradient>, Vec<Vec<Vec<TokenWeights>>>)> {
    let mut sums = Sums::default();
    let mut grad = want_grad.then(|| Gradient::like(params));
    let mut table = Vec::with_capacity(group.len());
    let dim = params.dim();
    for (n, traj) in group.trajectories.iter().enumerate() {
        let stream = HistoryStream::from_trajectory(traj);
        let a = advantages[n];
        let mut traj_rows = Vec::with_capacity(traj.steps.len());
        for (t, step) in traj.steps.iter().enumerate() {
            let phi = plan.phi(n, t)?;
            let mut row = Vec::with_capacity(step.action_tokens.len());
            for (i, &y) in step.action_tokens.iter().enumerate() {
                let ctx = stream.context(t, i, c.cap)?;
                let f = featurize(ctx, dim);
                let log_p = log_softmax(&params.logits(&f), 1.0);
                let logp_new = log_p[y.index()];
                let masked = step.action_mask[i];
                sums.entropy += entropy(&log_p);

                let teacher_log_p = teacher.map(|tp| {
                    log_softmax(&tp.params().context_logits(&teacher_context(ctx, phi)), 1.0)
                });
                let weights = match recorded {
                    Some(r) => r[n][t][i],
                    None => {
                        let delta = teacher_log_p
                            .as_ref()
                            .map_or(0.0, |lt| hindsight_gap(lt[y.index()], logp_new));
                        let w = reweight(delta, a, c.w_min, c.w_max);
                        let w_bar = apply_mask(w, masked);
                        TokenWeights {
                            delta,
                            w,
                            w_bar,
                            a_tilde: token_advantage(a, c.alpha, w_bar),
                        }
                    }
                };
                row.push(weights);

                let rho = policy_ratio(logp_new, step.sampled_logprobs[i]);
                sums.rw -= clipped_surrogate(rho, weights.a_tilde, c.clip_eps);
                let gate = surrogate_log_grad(rho, weights.a_tilde, c.clip_eps);

                let mut dz: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
                let p_student = dz.clone();
                // ∂(-ℓ)/∂z = -gate (onehot(y) - p)
                let scale = gate * c.inv_tokens;
                for d in dz.iter_mut() {
                    *d *= scale;
                }
                dz[y.index()] -= scale;

                if masked {
                    sums.delta_abs += weights.delta.abs();
                    if a != 0.0 {
                        let raw = (sgn(a) * weights.delta).exp();
                        if raw <= c.w_min || raw >= c.w_max {
                            sums.clipped += 1;
                        }
                    }
                    if let Some(lt) = &teacher_log_p {
                        let p_teacher: Vec<f64> = lt.iter().map(|l| l.exp()).collect();
                        sums.act += kl_unchecked(&p_teacher, &log_p);
                        if c.lambda != 0.0 {
                            let k = c.lambda * c.inv_masked;
                            let kg = kl_grad_wrt_student_logits(&p_teacher, &p_student);
                            for (d, g) in dz.iter_mut().zip(kg) {
                                *d += k * g;
                            }
                        }
                    }
                }
                if let Some(g) = grad.as_mut() {
                    g.add_outer(&f, &dz, 1.0);
                }
            }
            traj_rows.push(row);
        }
        table.push(traj_rows);
    }
    Ok((sums, grad, table))
}

fn run_batch(
    groups: &[RolloutGroup],
    plans: &[PlacementPlan],
    params: &PolicyParams,
    teacher: &TeacherSnapshot,
    recorded: Option<&AdvantageTable>,
    config: &TrainConfig,
    k: usize,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Gradient>, AdvantageTable)> {
    if groups.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if plans.len() != groups.len() {
        return Err(Error::PlanMismatch {
            n: plans.len(),
            t: 0,
        });
    }
    for (g, p) in groups.iter().zip(plans) {
        p.check_covers(g)?;
    }
    let (n_tokens, n_masked) = batch_counts(groups);
    if n_tokens == 0 {
        return Err(Error::EmptyBatch);
    }
    let alpha = config.alpha_schedule.value(k);
    let lambda = config.lambda_schedule.value(k);
    let (w_min, w_max) = config.weight_bounds();
    let c = Coefficients {
        alpha,
        lambda,
        w_min,
        w_max,
        clip_eps: config.clip_eps,
        cap: config.context_cap,
        inv_tokens: 1.0 / n_tokens as f64,
        inv_masked: if n_masked > 0 { 1.0 / n_masked as f64 } else { 0.0 },
    };
    // the teacher only matters while either coefficient is active
    let teacher = (alpha != 0.0 || lambda != 0.0).then_some(teacher);
    let advantages = match recorded {
        Some(r) => r.trajectory.clone(),
        None => groups
            .iter()
            .map(|g| group_advantage(&g.rewards(), config.adv_eps))
            .collect::<Result<Vec<_>>>()?,
    };
    let parts = groups
        .par_iter()
        .zip(plans)
        .enumerate()
        .map(|(gi, (g, p))| {
            group_pass(
                g,
                p,
                params,
                teacher,
                &advantages[gi],
                recorded.map(|r| &r.tokens[gi]),
                &c,
                want_grad,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = Sums::default();
    let mut grad = want_grad.then(|| Gradient::like(params));
    let mut tokens = Vec::with_capacity(parts.len());
    for (s, g, t) in parts {
        total.rw += s.rw;
        total.act += s.act;
        total.delta_abs += s.delta_abs;
        total.clipped += s.clipped;
        total.entropy += s.entropy;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.add_assign(&g);
        }
        tokens.push(t);
    }
    let l_rw = total.rw * c.inv_tokens;
    let l_act = total.act * c.inv_masked;
    let breakdown = LossBreakdown {
        l_rw,
        l_act,
        l_total: l_rw + lambda * l_act,
        alpha,
        lambda,
        kl_mean: l_act,
        delta_mean_abs: total.delta_abs * c.inv_masked,
        frac_w_clipped: total.clipped as f64 * c.inv_masked,
        entropy_mean: total.entropy * c.inv_tokens,
        n_tokens,
        n_masked,
    };
    if !breakdown.l_total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((
        breakdown,
        grad,
        AdvantageTable {
            trajectory: advantages,
            tokens,
        },
    ))
}

/// `L_SERL = L_rw + λ_k L_act` over a batch of groups, its gradient, and the
/// advantage table that was held constant.
pub fn serl_batch_loss_and_grad(
    groups: &[RolloutGroup],
    plans: &[PlacementPlan],
    params: &PolicyParams,
    teacher: &TeacherSnapshot,
    config: &TrainConfig,
    k: usize,
) -> Result<(LossBreakdown, Gradient, AdvantageTable)> {
    let (b, g, t) = run_batch(groups, plans, params, teacher, None, config, k, true)?;
    Ok((b, g.expect("gradient requested"), t))
}

pub fn serl_loss_and_grad(
    group: &RolloutGroup,
    params: &PolicyParams,
    teacher: &TeacherSnapshot,
    plan: &PlacementPlan,
    config: &TrainConfig,
    k: usize,
) -> Result<(LossBreakdown, Gradient)> {
    let (b, g, _) = serl_batch_loss_and_grad(
        std::slice::from_ref(group),
        std::slice::from_ref(plan),
        params,
        teacher,
        config,
        k,
    )?;
    Ok((b, g))
}

/// The loss at `params` with Δ and Ã taken from `table` instead of being
/// recomputed — the scalar function whose gradient the update follows.
pub fn loss_with_recorded(
    groups: &[RolloutGroup],
    plans: &[PlacementPlan],
    params: &PolicyParams,
    teacher: &TeacherSnapshot,
    table: &AdvantageTable,
    config: &TrainConfig,
    k: usize,
) -> Result<LossBreakdown> {
    run_batch(groups, plans, params, teacher, Some(table), config, k, false).map(|r| r.0)
}

/// Plain GRPO: `-mean_tokens min(ρA, clip(ρ) A)` with trajectory advantages.
pub fn grpo_loss_and_grad(
    groups: &[RolloutGroup],
    params: &PolicyParams,
    config: &TrainConfig,
) -> Result<(f64, Gradient)> {
    if groups.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (n_tokens, _) = batch_counts(groups);
    if n_tokens == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / n_tokens as f64;
    let mut loss = 0.0;
    let mut grad = Gradient::like(params);
    for group in groups {
        let adv = group_advantage(&group.rewards(), config.adv_eps)?;
        let mut partial = Gradient::like(params);
        for (traj, &a) in group.trajectories.iter().zip(&adv) {
            let stream = HistoryStream::from_trajectory(traj);
            for (t, step) in traj.steps.iter().enumerate() {
                for (i, &y) in step.action_tokens.iter().enumerate() {
                    let f = featurize(stream.context(t, i, config.context_cap)?, params.dim());
                    let log_p = log_softmax(&params.logits(&f), 1.0);
                    let rho = policy_ratio(log_p[y.index()], step.sampled_logprobs[i]);
                    loss -= clipped_surrogate(rho, a, config.clip_eps);
                    let scale = surrogate_log_grad(rho, a, config.clip_eps) * inv;
                    let mut dz: Vec<f64> = log_p.iter().map(|l| l.exp() * scale).collect();
                    dz[y.index()] -= scale;
                    partial.add_outer(&f, &dz, 1.0);
                }
            }
        }
        grad.add_assign(&partial);
    }
    Ok((loss * inv, grad))
}
