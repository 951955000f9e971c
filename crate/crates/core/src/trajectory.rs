//! Trajectory data model and its JSON-lines dump format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Token, Vocabulary};

/// Mask over an emitted response: true strictly between the first ACT_BEGIN
/// and the ACT_END that closes it (or the end of the response if unclosed).
pub fn action_mask(tokens: &[Token]) -> Vec<bool> {
    let mut mask = vec![false; tokens.len()];
    if let Some(start) = tokens.iter().position(|&t| t == Token::ACT_BEGIN) {
        for (i, &t) in tokens.iter().enumerate().skip(start + 1) {
            if t == Token::ACT_END {
                break;
            }
            mask[i] = true;
        }
    }
    mask
}

/// The executable command inside an emitted response.
pub fn command_tokens(tokens: &[Token]) -> Vec<Token> {
    tokens
        .iter()
        .zip(action_mask(tokens))
        .filter(|(_, m)| *m)
        .map(|(&t, _)| t)
        .collect()
}

/// One turn: observation s_t, emitted response a_t, feedback r_t.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation_tokens: Vec<Token>,
    pub action_tokens: Vec<Token>,
    pub feedback_tokens: Vec<Token>,
    /// Temperature-1 log-probability of each action token when it was sampled.
    pub sampled_logprobs: Vec<f64>,
    pub action_mask: Vec<bool>,
    /// Canonical key of the environment state before acting.
    pub state_key: String,
}

impl Step {
    pub fn new(
        observation_tokens: Vec<Token>,
        action_tokens: Vec<Token>,
        feedback_tokens: Vec<Token>,
        sampled_logprobs: Vec<f64>,
        state_key: String,
    ) -> Result<Self> {
        let action_mask = action_mask(&action_tokens);
        let step = Step {
            observation_tokens,
            action_tokens,
            feedback_tokens,
            sampled_logprobs,
            action_mask,
            state_key,
        };
        step.validate()?;
        Ok(step)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.action_tokens.len();
        if self.sampled_logprobs.len() != n || self.action_mask.len() != n {
            return Err(Error::InvalidStep(format!(
                "{} action tokens but {} logprobs and {} mask entries",
                n,
                self.sampled_logprobs.len(),
                self.action_mask.len()
            )));
        }
        if let Some(lp) = self
            .sampled_logprobs
            .iter()
            .find(|lp| !(lp.is_finite() && **lp <= 0.0))
        {
            return Err(Error::InvalidStep(format!("log-probability {lp} is not <= 0")));
        }
        if self.action_mask != action_mask(&self.action_tokens) {
            return Err(Error::InvalidStep(
                "action mask does not match the ACT span".into(),
            ));
        }
        Ok(())
    }

    pub fn command_tokens(&self) -> Vec<Token> {
        command_tokens(&self.action_tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task_id: String,
    pub steps: Vec<Step>,
    pub outcome_reward: f64,
    pub success: bool,
}

impl Trajectory {
    pub fn turn_count(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, t: usize) -> Result<&Step> {
        self.steps.get(t).ok_or(Error::IndexOutOfRange {
            what: "step",
            index: t,
            len: self.steps.len(),
        })
    }

    pub fn to_record(&self, vocab: &Vocabulary) -> Result<TrajectoryRecord> {
        let steps = self
            .steps
            .iter()
            .map(|s| {
                Ok(StepRecord {
                    obs: vocab.detokenize(&s.observation_tokens)?,
                    act: vocab.detokenize(&s.action_tokens)?,
                    fb: vocab.detokenize(&s.feedback_tokens)?,
                    mask: s.action_mask.clone(),
                    logp: s.sampled_logprobs.clone(),
                    state: s.state_key.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrajectoryRecord {
            task_id: self.task_id.clone(),
            steps,
            reward: self.outcome_reward,
            success: self.success,
        })
    }

    pub fn from_record(record: &TrajectoryRecord, vocab: &Vocabulary) -> Result<Self> {
        let steps = record
            .steps
            .iter()
            .map(|s| {
                let step = Step {
                    observation_tokens: vocab.tokenize(&s.obs),
                    action_tokens: vocab.tokenize(&s.act),
                    feedback_tokens: vocab.tokenize(&s.fb),
                    sampled_logprobs: s.logp.clone(),
                    action_mask: s.mask.clone(),
                    state_key: s.state.clone(),
                };
                step.validate().map_err(|e| Error::Record(e.to_string()))?;
                Ok(step)
            })
            .collect::<Result<_>>()?;
        if !(0.0..=1.0).contains(&record.reward) {
            return Err(Error::Record(format!("reward {} outside [0, 1]", record.reward)));
        }
        Ok(Trajectory {
            task_id: record.task_id.clone(),
            steps,
            outcome_reward: record.reward,
            success: record.success,
        })
    }
}

/// N trajectories sampled for one task instance.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task_id: String,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutGroup {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.len() < 2 {
            return Err(Error::GroupTooSmall(trajectories.len()));
        }
        let task_id = trajectories[0].task_id.clone();
        if let Some(other) = trajectories.iter().find(|t| t.task_id != task_id) {
            return Err(Error::MixedGroup(task_id, other.task_id.clone()));
        }
        Ok(RolloutGroup {
            task_id,
            trajectories,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.outcome_reward).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub obs: String,
    pub act: String,
    pub fb: String,
    pub mask: Vec<bool>,
    pub logp: Vec<f64>,
    #[serde(default)]
    pub state: String,
}

/// One line of a trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub task_id: String,
    pub steps: Vec<StepRecord>,
    pub reward: f64,
    pub success: bool,
}

pub fn write_jsonl(trajectories: &[Trajectory], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for t in trajectories {
        out.push_str(&serde_json::to_string(&t.to_record(vocab)?)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl(text: &str) -> Result<Vec<TrajectoryRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
