//! `key = value` run files.
//!
//! Keys are the [`TrainConfig`] field names plus the run-level keys `env`,
//! `out_dir`, `tasks_per_step`, `eval_tasks` and `eval_every`. Unknown keys,
//! malformed values and out-of-range values are errors that carry the key and
//! its line number.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serl_core::{EnvKind, Error as CoreError, FeedbackSource, PlacementMode, Schedule, TrainConfig, WeightClipMode};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SettingsError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: `{key}` is set twice")]
    DuplicateKey { key: String, line: usize },
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { text: String, line: usize },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value { key: String, line: usize, msg: String },
    #[error("{}: `{key}` {msg}", line_label(*.line))]
    Range { key: String, line: usize, msg: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn line_label(line: usize) -> String {
    if line == 0 {
        "default".to_string()
    } else {
        format!("line {line}")
    }
}

/// A training config plus what the driver needs around it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub config: TrainConfig,
    pub env: EnvKind,
    pub out_dir: PathBuf,
    pub tasks_per_step: usize,
    pub eval_tasks: usize,
    pub eval_every: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            config: TrainConfig::default(),
            env: EnvKind::KeyDoor,
            out_dir: PathBuf::from("runs/serl"),
            tasks_per_step: 16,
            eval_tasks: 50,
            eval_every: 10,
        }
    }
}

impl RunSettings {
    pub fn env_size(&self) -> usize {
        self.config.env_size(self.env)
    }
}

pub const KEYS: [&str; 27] = [
    "group_size",
    "learning_rate",
    "rollout_temperature",
    "max_turns",
    "clip_eps",
    "adv_eps",
    "weight_clip",
    "weight_clip_mode",
    "alpha_schedule",
    "lambda_schedule",
    "teacher_sync_interval",
    "feedback_sources",
    "placement_mode",
    "context_cap",
    "hindsight_cap",
    "seed",
    "total_steps",
    "feature_dim",
    "grid_size",
    "catalog_size",
    "warmup_steps",
    "warmup_lr",
    "env",
    "out_dir",
    "tasks_per_step",
    "eval_tasks",
    "eval_every",
];

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

/// `init/decay_steps`, e.g. `0.5/50`.
fn parse_schedule(v: &str) -> Result<Schedule, String> {
    let (init, decay) = v
        .split_once('/')
        .ok_or_else(|| format!("`{v}`: expected init/decay_steps"))?;
    Ok(Schedule::new(parse_num(init.trim())?, parse_num(decay.trim())?))
}

fn format_schedule(s: &Schedule) -> String {
    format!("{}/{}", s.init_value, s.decay_steps)
}

fn core_msg(e: CoreError) -> String {
    match e {
        CoreError::InvalidConfig { message, .. } => message,
        other => other.to_string(),
    }
}

fn apply(s: &mut RunSettings, key: &str, v: &str) -> Result<(), String> {
    let c = &mut s.config;
    match key {
        "group_size" => c.group_size = parse_num(v)?,
        "learning_rate" => c.learning_rate = parse_num(v)?,
        "rollout_temperature" => c.rollout_temperature = parse_num(v)?,
        "max_turns" => {
            c.max_turns = match v {
                "auto" => None,
                _ => Some(parse_num(v)?),
            }
        }
        "clip_eps" => c.clip_eps = parse_num(v)?,
        "adv_eps" => c.adv_eps = parse_num(v)?,
        "weight_clip" => c.weight_clip = parse_num(v)?,
        "weight_clip_mode" => {
            c.weight_clip_mode =
                WeightClipMode::parse(v).ok_or_else(|| format!("`{v}`: expected exponent or linear"))?
        }
        "alpha_schedule" => c.alpha_schedule = parse_schedule(v)?,
        "lambda_schedule" => c.lambda_schedule = parse_schedule(v)?,
        "teacher_sync_interval" => c.teacher_sync_interval = parse_num(v)?,
        "feedback_sources" => {
            let list = if v == "none" { "" } else { v };
            c.feedback_sources = FeedbackSource::parse_list(list).map_err(core_msg)?;
        }
        "placement_mode" => c.placement_mode = PlacementMode::from_str(v).map_err(core_msg)?,
        "context_cap" => c.context_cap = parse_num(v)?,
        "hindsight_cap" => c.hindsight_cap = parse_num(v)?,
        "seed" => c.seed = parse_num(v)?,
        "total_steps" => c.total_steps = parse_num(v)?,
        "feature_dim" => c.feature_dim = parse_num(v)?,
        "grid_size" => c.grid_size = parse_num(v)?,
        "catalog_size" => c.catalog_size = parse_num(v)?,
        "warmup_steps" => c.warmup_steps = parse_num(v)?,
        "warmup_lr" => c.warmup_lr = parse_num(v)?,
        "env" => s.env = EnvKind::from_str(v).map_err(core_msg)?,
        "out_dir" => s.out_dir = PathBuf::from(v),
        "tasks_per_step" => s.tasks_per_step = parse_num(v)?,
        "eval_tasks" => s.eval_tasks = parse_num(v)?,
        "eval_every" => s.eval_every = parse_num(v)?,
        _ => unreachable!("key list and match arms disagree: {key}"),
    }
    Ok(())
}

/// Which file key a validation error refers to.
fn file_key(validation_key: &str) -> &str {
    if validation_key.starts_with("alpha_") {
        "alpha_schedule"
    } else if validation_key.starts_with("lambda_") {
        "lambda_schedule"
    } else {
        validation_key
    }
}

pub fn parse_settings(text: &str) -> Result<RunSettings, SettingsError> {
    let mut s = RunSettings::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| SettingsError::Syntax {
            text: body.to_string(),
            line,
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(SettingsError::UnknownKey {
                key: key.to_string(),
                line,
            });
        }
        if seen.insert(key.to_string(), line).is_some() {
            return Err(SettingsError::DuplicateKey {
                key: key.to_string(),
                line,
            });
        }
        apply(&mut s, key, value).map_err(|msg| SettingsError::Value {
            key: key.to_string(),
            line,
            msg,
        })?;
    }
    let range = |key: &str, msg: String| {
        let key = file_key(key).to_string();
        let line = seen.get(&key).copied().unwrap_or(0);
        SettingsError::Range { key, line, msg }
    };
    if let Err(e) = s.config.validate() {
        return Err(match e {
            CoreError::InvalidConfig { key, message } => range(&key, message),
            other => range("config", other.to_string()),
        });
    }
    for (key, value) in [
        ("tasks_per_step", s.tasks_per_step),
        ("eval_tasks", s.eval_tasks),
        ("eval_every", s.eval_every),
    ] {
        if value == 0 {
            return Err(range(key, "must be positive".to_string()));
        }
    }
    Ok(s)
}

pub fn load_settings(path: &Path) -> Result<RunSettings, SettingsError> {
    let text = std::fs::read_to_string(path).map_err(|source| SettingsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_settings(&text)
}

/// Every key, in [`KEYS`] order; parses back to an equal value.
pub fn serialize_settings(s: &RunSettings) -> String {
    let c = &s.config;
    let mut out = String::new();
    for key in KEYS {
        let value = match key {
            "group_size" => c.group_size.to_string(),
            "learning_rate" => c.learning_rate.to_string(),
            "rollout_temperature" => c.rollout_temperature.to_string(),
            "max_turns" => c.max_turns.map_or("auto".to_string(), |m| m.to_string()),
            "clip_eps" => c.clip_eps.to_string(),
            "adv_eps" => c.adv_eps.to_string(),
            "weight_clip" => c.weight_clip.to_string(),
            "weight_clip_mode" => c.weight_clip_mode.as_str().to_string(),
            "alpha_schedule" => format_schedule(&c.alpha_schedule),
            "lambda_schedule" => format_schedule(&c.lambda_schedule),
            "teacher_sync_interval" => c.teacher_sync_interval.to_string(),
            "feedback_sources" if c.feedback_sources.is_empty() => "none".to_string(),
            "feedback_sources" => FeedbackSource::format_list(&c.feedback_sources),
            "placement_mode" => c.placement_mode.as_str().to_string(),
            "context_cap" => c.context_cap.to_string(),
            "hindsight_cap" => c.hindsight_cap.to_string(),
            "seed" => c.seed.to_string(),
            "total_steps" => c.total_steps.to_string(),
            "feature_dim" => c.feature_dim.to_string(),
            "grid_size" => c.grid_size.to_string(),
            "catalog_size" => c.catalog_size.to_string(),
            "warmup_steps" => c.warmup_steps.to_string(),
            "warmup_lr" => c.warmup_lr.to_string(),
            "env" => s.env.as_str().to_string(),
            "out_dir" => s.out_dir.display().to_string(),
            "tasks_per_step" => s.tasks_per_step.to_string(),
            "eval_tasks" => s.eval_tasks.to_string(),
            "eval_every" => s.eval_every.to_string(),
            _ => unreachable!(),
        };
        let _ = writeln!(out, "{key} = {value}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let s = parse_settings("").unwrap();
        assert_eq!(s, RunSettings::default());
        assert_eq!(s.config.group_size, 8);
        assert_eq!(s.config.rollout_temperature, 0.4);
    }

    #[test]
    fn comments_and_blank_lines() {
        let s = parse_settings("# run\n\ngroup_size = 4  # small\nenv = minishop\n").unwrap();
        assert_eq!(s.config.group_size, 4);
        assert_eq!(s.env, EnvKind::MiniShop);
    }

    #[test]
    fn errors_carry_key_and_line() {
        let e = parse_settings("seed = 1\nclip_eps = 1.5\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("clip_eps") && msg.contains("line 2"), "{msg}");
        assert!(matches!(e, SettingsError::Range { .. }));

        let e = parse_settings("\n\nbogus = 3\n").unwrap_err();
        assert!(matches!(e, SettingsError::UnknownKey { ref key, line: 3 } if key == "bogus"));

        let e = parse_settings("group_size = many\n").unwrap_err();
        assert!(matches!(e, SettingsError::Value { line: 1, .. }));

        let e = parse_settings("alpha_schedule = 2/50\n").unwrap_err();
        assert!(e.to_string().contains("alpha_schedule"), "{e}");

        let e = parse_settings("seed = 1\nseed = 2\n").unwrap_err();
        assert!(matches!(e, SettingsError::DuplicateKey { line: 2, .. }));

        assert!(matches!(parse_settings("just words").unwrap_err(), SettingsError::Syntax { .. }));
        assert!(matches!(
            parse_settings("eval_every = 0").unwrap_err(),
            SettingsError::Range { line: 1, .. }
        ));
    }

    #[test]
    fn round_trip_defaults_and_edits() {
        let mut s = RunSettings::default();
        assert_eq!(parse_settings(&serialize_settings(&s)).unwrap(), s);
        s.config.max_turns = Some(20);
        s.config.learning_rate = 0.1 + 0.2;
        s.config.feedback_sources = vec![FeedbackSource::Immediate, FeedbackSource::FutureTrajectory];
        s.config.placement_mode = PlacementMode::Anchor;
        s.config.alpha_schedule = Schedule::new(0.0, 7);
        s.env = EnvKind::MiniShop;
        assert_eq!(parse_settings(&serialize_settings(&s)).unwrap(), s);
    }
}
