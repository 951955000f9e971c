//! `train`, `eval`, `compare` and `inspect`.
//!
//! Everything a command writes goes under the run's `out_dir`; wall-clock
//! progress goes to standard error only, so every file is a deterministic
//! function of the settings and seed.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serl_core::envs::{Env, EnvKind};
use serl_core::oracle::oracle_replay;
use serl_core::policy::{read_checkpoint, snapshot, write_checkpoint, PolicyParams};
use serl_core::trainer::{
    eval_tasks, evaluate, init_state, step_tasks, train_step, EvalSummary, MetricsRecord, TrainState,
};
use serl_core::trajectory::{read_jsonl, write_jsonl, Trajectory};
use serl_core::TrainConfig;
use thiserror::Error;

use crate::settings::RunSettings;

/// Bad invocation; the binary exits with status 2.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// First line of a checkpoint that stands for the search-plan policy.
pub const ORACLE_CHECKPOINT: &str = "SERLCKPT oracle";
pub const CHECKPOINT_EVERY: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Serl,
    /// Reweighting and distillation switched off.
    Grpo,
}

impl Algo {
    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Serl => "serl",
            Algo::Grpo => "grpo",
        }
    }

    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        match self {
            Algo::Serl => config.clone(),
            Algo::Grpo => config.clone().grpo(),
        }
    }
}

impl FromStr for Algo {
    type Err = UsageError;

    fn from_str(s: &str) -> std::result::Result<Self, UsageError> {
        match s {
            "serl" => Ok(Algo::Serl),
            "grpo" => Ok(Algo::Grpo),
            _ => Err(UsageError(format!("unknown algorithm `{s}` (expected serl or grpo)"))),
        }
    }
}

/// One held-out evaluation during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Completed training steps.
    pub step: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub episodes: usize,
}

impl EvalPoint {
    fn new(step: usize, e: &EvalSummary) -> Self {
        EvalPoint {
            step,
            success_rate: e.success_rate,
            mean_reward: e.mean_reward,
            episodes: e.episodes,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the newest checkpoint in the output directory.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_eval: EvalPoint,
    pub metrics: Vec<MetricsRecord>,
    pub evals: Vec<EvalPoint>,
    pub params: PolicyParams,
}

pub fn make_env(settings: &RunSettings) -> Result<Env> {
    Ok(Env::new(settings.env, settings.env_size())?)
}

pub fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    out.join(format!("ckpt_{step}.txt"))
}

pub fn teacher_path(out: &Path, step: usize) -> PathBuf {
    out.join(format!("teacher_{step}.txt"))
}

/// Step count of the newest `ckpt_<k>.txt` in `out`.
pub fn latest_checkpoint(out: &Path) -> Result<Option<usize>> {
    let mut best = None;
    if !out.exists() {
        return Ok(None);
    }
    for entry in fs::read_dir(out)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(k) = name
            .strip_prefix("ckpt_")
            .and_then(|r| r.strip_suffix(".txt"))
            .and_then(|k| k.parse::<usize>().ok())
        {
            best = best.max(Some(k));
        }
    }
    Ok(best)
}

fn save_state(out: &Path, state: &TrainState, env: &Env) -> Result<()> {
    fs::write(checkpoint_path(out, state.step), write_checkpoint(&state.params, state.step, env.vocab()))?;
    fs::write(
        teacher_path(out, state.step),
        write_checkpoint(state.teacher.params(), state.teacher.step(), env.vocab()),
    )?;
    Ok(())
}

fn load_params(path: &Path, env: &Env) -> Result<(PolicyParams, usize)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ckpt = read_checkpoint(&text).with_context(|| format!("loading {}", path.display()))?;
    if &ckpt.vocab != env.vocab() {
        bail!("{}: vocabulary does not match the {} environment", path.display(), env.kind());
    }
    Ok((ckpt.params, ckpt.step))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", path.display())))
        .collect()
}

fn join_lines(lines: &[&str]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

fn append_line<T: Serialize>(file: &mut File, item: &T) -> Result<()> {
    let mut line = serde_json::to_string(item)?;
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.flush()?;
    Ok(())
}

fn restore(settings: &RunSettings, env: &Env, metrics: &Path, evals: &Path) -> Result<Option<TrainState>> {
    let out = &settings.out_dir;
    let Some(k) = latest_checkpoint(out)? else {
        return Ok(None);
    };
    let (params, step) = load_params(&checkpoint_path(out, k), env)?;
    let (teacher, teacher_step) = load_params(&teacher_path(out, k), env)?;
    if step != k {
        bail!("checkpoint ckpt_{k}.txt records step {step}");
    }
    // cut the files textually: re-serializing parsed floats is not guaranteed
    // to reproduce the original bytes
    let text = fs::read_to_string(metrics).unwrap_or_default();
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() < k {
        bail!("{} has {} records but the checkpoint is at step {k}", metrics.display(), lines.len());
    }
    fs::write(metrics, join_lines(&lines[..k]))?;
    let text = fs::read_to_string(evals).unwrap_or_default();
    let mut kept = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let point: EvalPoint =
            serde_json::from_str(line).with_context(|| format!("parsing {}", evals.display()))?;
        if point.step <= k {
            kept.push(line);
        }
    }
    fs::write(evals, join_lines(&kept))?;
    Ok(Some(TrainState {
        step: k,
        params,
        teacher: snapshot(&teacher, teacher_step),
        seed: settings.config.seed,
    }))
}

/// Trains for `total_steps`, writing `metrics.jsonl`, `eval.jsonl`,
/// checkpoints, the last step's rollouts and `final_eval.json` under
/// `out_dir`.
pub fn run_train(settings: &RunSettings, opts: &TrainOptions) -> Result<TrainOutcome> {
    let config = &settings.config;
    let env = make_env(settings)?;
    let out = &settings.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let metrics_path = out.join("metrics.jsonl");
    let evals_path = out.join("eval.jsonl");
    let start = Instant::now();

    let resumed = if opts.resume {
        restore(settings, &env, &metrics_path, &evals_path)?
    } else {
        None
    };
    let mut state = match resumed {
        Some(s) => {
            eprintln!("resuming at step {}", s.step);
            s
        }
        None => {
            if opts.resume {
                eprintln!("no checkpoint in {}; starting fresh", out.display());
            }
            fs::write(&metrics_path, "")?;
            fs::write(&evals_path, "")?;
            init_state(&env, config)?
        }
    };
    let mut metrics_file = OpenOptions::new().append(true).open(&metrics_path)?;
    let mut evals_file = OpenOptions::new().append(true).open(&evals_path)?;
    let held_out = eval_tasks(&env, config, settings.eval_tasks)?;

    let mut last_groups = Vec::new();
    let mut last_eval = None;
    while state.step < config.total_steps {
        let tasks = step_tasks(&env, config, state.step, settings.tasks_per_step)?;
        let (record, groups) = train_step(&mut state, &tasks, &env, config)?;
        append_line(&mut metrics_file, &record)?;
        last_groups = groups;
        if state.step % settings.eval_every == 0 {
            let e = EvalPoint::new(state.step, &evaluate(&state.params, &held_out, 1, &env, config)?);
            append_line(&mut evals_file, &e)?;
            eprintln!(
                "step {:>4}  train success {:.3}  eval success {:.3}  ({:.1}s)",
                state.step,
                record.success_rate,
                e.success_rate,
                start.elapsed().as_secs_f64()
            );
            last_eval = Some(e);
        }
        if state.step % CHECKPOINT_EVERY == 0 {
            save_state(out, &state, &env)?;
        }
    }
    save_state(out, &state, &env)?;
    let trajectories: Vec<Trajectory> =
        last_groups.into_iter().flat_map(|g| g.trajectories).collect();
    fs::write(out.join("trajectories.jsonl"), write_jsonl(&trajectories, env.vocab())?)?;

    let final_eval = match last_eval {
        Some(e) if e.step == state.step => e,
        _ => EvalPoint::new(state.step, &evaluate(&state.params, &held_out, 1, &env, config)?),
    };
    fs::write(out.join("final_eval.json"), serde_json::to_string(&final_eval)? + "\n")?;
    Ok(TrainOutcome {
        final_eval,
        metrics: read_lines(&metrics_path)?,
        evals: read_lines(&evals_path)?,
        params: state.params,
    })
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub env: EnvKind,
    /// Number of held-out tasks, each played once with greedy decoding.
    pub episodes: usize,
    pub seed: u64,
    pub size: Option<usize>,
}

pub fn run_eval(req: &EvalRequest) -> Result<EvalSummary> {
    if req.episodes == 0 {
        return Err(UsageError("--episodes must be at least 1".into()).into());
    }
    let mut settings = RunSettings {
        env: req.env,
        ..RunSettings::default()
    };
    settings.config.seed = req.seed;
    if let Some(size) = req.size {
        match req.env {
            EnvKind::KeyDoor => settings.config.grid_size = size,
            EnvKind::MiniShop => settings.config.catalog_size = size,
        }
    }
    let env = make_env(&settings)?;
    let text = fs::read_to_string(&req.checkpoint)
        .with_context(|| format!("reading {}", req.checkpoint.display()))?;
    if text.lines().next().map(str::trim) == Some(ORACLE_CHECKPOINT) {
        let tasks = eval_tasks(&env, &settings.config, req.episodes)?;
        let (success_rate, mean_reward) =
            oracle_replay(&tasks, settings.config.max_turns_for(env.kind()))?;
        return Ok(EvalSummary {
            success_rate,
            mean_reward,
            episodes: tasks.len(),
        });
    }
    let (params, _) = load_params(&req.checkpoint, &env)?;
    settings.config.feature_dim = params.dim();
    let tasks = eval_tasks(&env, &settings.config, req.episodes)?;
    Ok(evaluate(&params, &tasks, 1, &env, &settings.config)?)
}

#[derive(Debug, Clone)]
pub struct CompareOptions {
    /// Eval success rate that counts as solved.
    pub threshold: f64,
    /// Stop an arm once it reaches the threshold instead of running
    /// `total_steps`.
    pub stop_at_threshold: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            threshold: 0.8,
            stop_at_threshold: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub seed: u64,
    pub algo: &'static str,
    pub step: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmRun {
    pub seed: u64,
    pub algo: &'static str,
    /// Completed steps at the first evaluation reaching the threshold.
    pub steps_to_threshold: Option<usize>,
    pub evals: Vec<EvalPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub algo: &'static str,
    pub threshold: f64,
    pub seeds: usize,
    pub reached: usize,
    /// `None` when fewer than half of the seeds reach the threshold.
    pub median_steps_to_threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub runs: Vec<ArmRun>,
    pub summary: Vec<ArmSummary>,
}

/// Median with unreached runs ordered after every reached one.
pub fn median_steps(values: &[Option<usize>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<Option<usize>> = values.to_vec();
    v.sort_by_key(|x| x.unwrap_or(usize::MAX));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2].map(|x| x as f64)
    } else {
        match (v[n / 2 - 1], v[n / 2]) {
            (Some(a), Some(b)) => Some((a + b) as f64 / 2.0),
            _ => None,
        }
    }
}

pub const ARMS: [Algo; 2] = [Algo::Grpo, Algo::Serl];

/// Runs GRPO and SERL per seed from the same warm start and task stream;
/// writes `compare.csv` (training reward per step) and `compare_summary.json`.
pub fn run_compare(settings: &RunSettings, seeds: &[u64], opts: &CompareOptions) -> Result<CompareReport> {
    if seeds.is_empty() {
        return Err(UsageError("at least one seed is required".into()).into());
    }
    let env = make_env(settings)?;
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &seed in seeds {
        let base = TrainConfig {
            seed,
            ..settings.config.clone()
        };
        // the warm start depends only on the seed, so both arms share it
        let init = init_state(&env, &Algo::Grpo.apply(&base))?;
        let held_out = eval_tasks(&env, &base, settings.eval_tasks)?;
        for algo in ARMS {
            let config = algo.apply(&base);
            let mut state = init.clone();
            let mut evals = Vec::new();
            let mut reached = None;
            while state.step < config.total_steps {
                let tasks = step_tasks(&env, &config, state.step, settings.tasks_per_step)?;
                let (m, _) = train_step(&mut state, &tasks, &env, &config)?;
                rows.push(CompareRow {
                    seed,
                    algo: algo.as_str(),
                    step: m.step,
                    mean_reward: m.mean_reward,
                    success_rate: m.success_rate,
                });
                if state.step % settings.eval_every == 0 || state.step == config.total_steps {
                    let e = EvalPoint::new(state.step, &evaluate(&state.params, &held_out, 1, &env, &config)?);
                    if reached.is_none() && e.success_rate >= opts.threshold {
                        reached = Some(state.step);
                    }
                    evals.push(e);
                    if reached.is_some() && opts.stop_at_threshold {
                        break;
                    }
                }
            }
            eprintln!(
                "seed {seed} {}: steps to {} = {}  ({:.1}s)",
                algo.as_str(),
                opts.threshold,
                reached.map_or("never".to_string(), |s| s.to_string()),
                start.elapsed().as_secs_f64()
            );
            runs.push(ArmRun {
                seed,
                algo: algo.as_str(),
                steps_to_threshold: reached,
                evals,
            });
        }
    }
    let summary = ARMS
        .iter()
        .map(|algo| {
            let steps: Vec<Option<usize>> = runs
                .iter()
                .filter(|r| r.algo == algo.as_str())
                .map(|r| r.steps_to_threshold)
                .collect();
            ArmSummary {
                algo: algo.as_str(),
                threshold: opts.threshold,
                seeds: steps.len(),
                reached: steps.iter().filter(|s| s.is_some()).count(),
                median_steps_to_threshold: median_steps(&steps),
            }
        })
        .collect();
    let report = CompareReport { rows, runs, summary };

    fs::create_dir_all(&settings.out_dir)?;
    let mut csv = csv::Writer::from_path(settings.out_dir.join("compare.csv"))?;
    for r in &report.rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    let summary_json = serde_json::json!({ "summary": report.summary, "runs": report.runs });
    fs::write(
        settings.out_dir.join("compare_summary.json"),
        serde_json::to_string_pretty(&summary_json)? + "\n",
    )?;
    Ok(report)
}

/// Human-readable rendering of a trajectory dump.
pub fn inspect(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records = read_jsonl(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        let _ = writeln!(
            out,
            "#{i} task {}  reward {}  {}  ({} turns)",
            r.task_id,
            r.reward,
            if r.success { "success" } else { "failure" },
            r.steps.len()
        );
        for (t, s) in r.steps.iter().enumerate() {
            let _ = writeln!(out, "  [{t}] obs: {}", s.obs);
            let _ = writeln!(out, "      act: {}", s.act);
            let _ = writeln!(out, "      fb:  {}", s.fb);
        }
    }
    Ok(out)
}
