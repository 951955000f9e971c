//! Run configuration shared by every module.

use serde::{Deserialize, Serialize};

use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::feedback::{FeedbackSource, PlacementMode};

/// Linearly decaying coefficient: `init * max(0, 1 - k / K)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub init_value: f64,
    pub decay_steps: usize,
}

impl Schedule {
    pub const fn new(init_value: f64, decay_steps: usize) -> Self {
        Schedule {
            init_value,
            decay_steps,
        }
    }

    pub fn value(&self, k: usize) -> f64 {
        if k >= self.decay_steps {
            return 0.0;
        }
        self.init_value * (1.0 - k as f64 / self.decay_steps as f64)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.init_value) {
            return Err(Error::config(
                &format!("{name}_init"),
                format!("{} is outside [0, 1]", self.init_value),
            ));
        }
        if self.decay_steps == 0 {
            return Err(Error::config(
                &format!("{name}_decay_steps"),
                "must be positive",
            ));
        }
        Ok(())
    }
}

/// How `weight_clip` turns into the reweighting bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightClipMode {
    /// `[exp(-c), exp(c)]`
    Exponent,
    /// `[1 - c, 1 + c]`
    Linear,
}

impl WeightClipMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightClipMode::Exponent => "exponent",
            WeightClipMode::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exponent" => Some(WeightClipMode::Exponent),
            "linear" => Some(WeightClipMode::Linear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    pub learning_rate: f64,
    pub rollout_temperature: f64,
    /// `None` selects the environment default (50 KeyDoorGrid, 15 MiniShop).
    pub max_turns: Option<usize>,
    pub clip_eps: f64,
    pub adv_eps: f64,
    pub weight_clip: f64,
    pub weight_clip_mode: WeightClipMode,
    pub alpha_schedule: Schedule,
    pub lambda_schedule: Schedule,
    pub teacher_sync_interval: usize,
    /// Kept in canonical source order without duplicates.
    pub feedback_sources: Vec<FeedbackSource>,
    pub placement_mode: PlacementMode,
    pub context_cap: usize,
    pub hindsight_cap: usize,
    pub seed: u64,
    pub total_steps: usize,
    pub feature_dim: usize,
    pub grid_size: usize,
    pub catalog_size: usize,
    /// Supervised steps that teach the response format before RL starts.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 8,
            learning_rate: 0.5,
            rollout_temperature: 0.4,
            max_turns: None,
            clip_eps: 0.2,
            adv_eps: 1e-8,
            weight_clip: 0.2,
            weight_clip_mode: WeightClipMode::Exponent,
            alpha_schedule: Schedule::new(0.5, 50),
            lambda_schedule: Schedule::new(0.5, 50),
            teacher_sync_interval: 10,
            feedback_sources: vec![FeedbackSource::Immediate],
            placement_mode: PlacementMode::Step,
            context_cap: 256,
            hindsight_cap: 64,
            seed: 0,
            total_steps: 150,
            feature_dim: 1024,
            grid_size: 3,
            catalog_size: 20,
            warmup_steps: 200,
            warmup_lr: 0.5,
        }
    }
}

impl TrainConfig {
    /// Plain GRPO: no reweighting and no distillation.
    pub fn grpo(mut self) -> Self {
        self.alpha_schedule.init_value = 0.0;
        self.lambda_schedule.init_value = 0.0;
        self
    }

    pub fn max_turns_for(&self, kind: EnvKind) -> usize {
        self.max_turns.unwrap_or(kind.default_max_turns())
    }

    pub fn env_size(&self, kind: EnvKind) -> usize {
        match kind {
            EnvKind::KeyDoor => self.grid_size,
            EnvKind::MiniShop => self.catalog_size,
        }
    }

    /// Reweighting bounds `(w_min, w_max)`.
    pub fn weight_bounds(&self) -> (f64, f64) {
        match self.weight_clip_mode {
            WeightClipMode::Exponent => ((-self.weight_clip).exp(), self.weight_clip.exp()),
            WeightClipMode::Linear => (1.0 - self.weight_clip, 1.0 + self.weight_clip),
        }
    }

    pub fn set_sources(&mut self, sources: impl IntoIterator<Item = FeedbackSource>) {
        let mut v: Vec<FeedbackSource> = sources.into_iter().collect();
        v.sort();
        v.dedup();
        self.feedback_sources = v;
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("group_size", "must be at least 2"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate", "must be finite and >= 0"));
        }
        if !(self.rollout_temperature.is_finite() && self.rollout_temperature > 0.0) {
            return Err(Error::config("rollout_temperature", "must be > 0"));
        }
        if self.max_turns == Some(0) {
            return Err(Error::config("max_turns", "must be positive"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config("clip_eps", "must lie in (0, 1)"));
        }
        if !(self.adv_eps > 0.0 && self.adv_eps.is_finite()) {
            return Err(Error::config("adv_eps", "must be > 0"));
        }
        if !(self.weight_clip > 0.0 && self.weight_clip.is_finite()) {
            return Err(Error::config("weight_clip", "must be > 0"));
        }
        if self.weight_clip_mode == WeightClipMode::Linear && self.weight_clip >= 1.0 {
            return Err(Error::config("weight_clip", "linear bounds need c < 1"));
        }
        self.alpha_schedule.validate("alpha")?;
        self.lambda_schedule.validate("lambda")?;
        if self.teacher_sync_interval == 0 {
            return Err(Error::config("teacher_sync_interval", "must be positive"));
        }
        let active = self.alpha_schedule.init_value > 0.0 || self.lambda_schedule.init_value > 0.0;
        if active && self.feedback_sources.is_empty() {
            return Err(Error::config(
                "feedback_sources",
                "at least one source is required when reweighting is active",
            ));
        }
        if self.context_cap == 0 {
            return Err(Error::config("context_cap", "must be positive"));
        }
        if self.hindsight_cap < 3 {
            return Err(Error::config("hindsight_cap", "must be at least 3"));
        }
        if self.feature_dim < 2 {
            return Err(Error::config("feature_dim", "must be at least 2"));
        }
        if !(2..=10).contains(&self.grid_size) {
            return Err(Error::config("grid_size", "must lie in 2..=10"));
        }
        if !(5..=200).contains(&self.catalog_size) {
            return Err(Error::config("catalog_size", "must lie in 5..=200"));
        }
        if !(self.warmup_lr.is_finite() && self.warmup_lr >= 0.0) {
            return Err(Error::config("warmup_lr", "must be finite and >= 0"));
        }
        Ok(())
    }
}
