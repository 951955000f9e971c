//! Selective environment-reweighted learning (SERL) for multi-turn text agents.
//!
//! The crate bundles everything needed to run the method end to end at desk
//! scale: a word-level vocabulary and trajectory model, two deterministic text
//! environments, an autoregressive linear-softmax token policy with exact
//! gradients, hindsight feedback extraction and placement, the reweighted
//! GRPO objective with action-only distillation, and a seeded trainer.
//!
//! Reference implementations used for cross-checking live in [`oracle`].

pub mod config;
pub mod envs;
pub mod error;
pub mod feedback;
pub mod hash;
pub mod history;
pub mod objective;
pub mod oracle;
pub mod policy;
pub mod trainer;
pub mod trajectory;
pub mod vocab;

pub use config::{Schedule, TrainConfig, WeightClipMode};
pub use envs::{Env, EnvKind, EnvState, StepOutcome, TaskSpec};
pub use error::{Error, Result};
pub use feedback::{FeedbackSource, PlacementMode, PlacementPlan};
pub use policy::{PolicyParams, TeacherSnapshot};
pub use trajectory::{RolloutGroup, Step, Trajectory};
pub use vocab::{Token, Vocabulary};
