//! Hindsight feedback sources and their placement onto decision steps.
//!
//! Every `(n, t)` pair of a rollout group (trajectory `n`, step `t`) receives
//! a hindsight block Φ(t) that only the teacher sees. Blocks are built from an
//! ordered set of sources; in [`PlacementMode::Anchor`] the blocks of all
//! steps sharing a pre-action environment state are pooled.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{RolloutGroup, Step};
use crate::vocab::Token;

/// Feedback sources, ordered from local to global. The derived `Ord` is the
/// canonical combination order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Immediate,
    NextObservation,
    FutureTrajectory,
    SuccessfulTrajectory,
    CurrentTrajectory,
}

impl FeedbackSource {
    pub const ALL: [FeedbackSource; 5] = [
        FeedbackSource::Immediate,
        FeedbackSource::NextObservation,
        FeedbackSource::FutureTrajectory,
        FeedbackSource::SuccessfulTrajectory,
        FeedbackSource::CurrentTrajectory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackSource::Immediate => "immediate",
            FeedbackSource::NextObservation => "next_obs",
            FeedbackSource::FutureTrajectory => "future",
            FeedbackSource::SuccessfulTrajectory => "success",
            FeedbackSource::CurrentTrajectory => "current",
        }
    }

    /// Parses a comma-separated list into canonical order, without duplicates.
    pub fn parse_list(s: &str) -> Result<Vec<FeedbackSource>> {
        let mut out = s
            .split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<FeedbackSource>>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }

    pub fn format_list(sources: &[FeedbackSource]) -> String {
        sources.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(",")
    }
}

impl fmt::Display for FeedbackSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeedbackSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeedbackSource::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| {
                Error::config(
                    "feedback_sources",
                    format!("unknown source `{s}` (expected immediate, next_obs, future, success, current)"),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    Step,
    Anchor,
}

impl PlacementMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PlacementMode::Step => "step",
            PlacementMode::Anchor => "anchor",
        }
    }
}

impl fmt::Display for PlacementMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlacementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(PlacementMode::Step),
            "anchor" => Ok(PlacementMode::Anchor),
            _ => Err(Error::config(
                "placement_mode",
                format!("unknown placement `{s}` (expected step or anchor)"),
            )),
        }
    }
}

/// `<obs> s </obs> a` — one serialized step of a trajectory.
fn serialize_step(step: &Step) -> Vec<Token> {
    let mut out = Vec::with_capacity(step.observation_tokens.len() + step.action_tokens.len() + 2);
    out.push(Token::OBS_BEGIN);
    out.extend_from_slice(&step.observation_tokens);
    out.push(Token::OBS_END);
    out.extend_from_slice(&step.action_tokens);
    out
}

/// `<act> command </act>`
fn serialize_command(step: &Step) -> Vec<Token> {
    let mut out = vec![Token::ACT_BEGIN];
    out.extend(step.command_tokens());
    out.push(Token::ACT_END);
    out
}

/// Concatenates whole units while the total stays within `budget`.
fn pack_units(units: impl IntoIterator<Item = Vec<Token>>, budget: usize) -> Vec<Token> {
    let mut out = Vec::new();
    for unit in units {
        if out.len() + unit.len() > budget {
            break;
        }
        out.extend(unit);
    }
    out
}

/// Lowest-index trajectory that succeeded with the group's best reward.
pub fn success_reference(group: &RolloutGroup) -> Option<usize> {
    let best = group
        .trajectories
        .iter()
        .map(|t| t.outcome_reward)
        .fold(f64::NEG_INFINITY, f64::max);
    group
        .trajectories
        .iter()
        .position(|t| t.success && t.outcome_reward == best)
}

fn check_index(group: &RolloutGroup, n: usize, t: usize) -> Result<()> {
    let traj = group.trajectories.get(n).ok_or(Error::IndexOutOfRange {
        what: "trajectory",
        index: n,
        len: group.trajectories.len(),
    })?;
    traj.step(t).map(|_| ())
}

/// Raw (undelimited) feedback of one source at `(n, t)`. Multi-step sources
/// keep whole serialized steps so the block plus its delimiter pair fits
/// within `cap`.
pub fn extract_feedback(
    source: FeedbackSource,
    group: &RolloutGroup,
    n: usize,
    t: usize,
    cap: usize,
) -> Result<Vec<Token>> {
    check_index(group, n, t)?;
    Ok(extract_unchecked(source, group, n, t, cap, success_reference(group)))
}

fn extract_unchecked(
    source: FeedbackSource,
    group: &RolloutGroup,
    n: usize,
    t: usize,
    cap: usize,
    reference: Option<usize>,
) -> Vec<Token> {
    let steps = &group.trajectories[n].steps;
    let budget = cap.saturating_sub(2);
    match source {
        FeedbackSource::Immediate => steps[t].feedback_tokens.clone(),
        FeedbackSource::NextObservation => steps
            .get(t + 1)
            .map(|s| s.observation_tokens.clone())
            .unwrap_or_default(),
        FeedbackSource::FutureTrajectory => {
            pack_units(steps[t + 1..].iter().map(serialize_step), budget)
        }
        FeedbackSource::SuccessfulTrajectory => match reference {
            Some(r) => pack_units(group.trajectories[r].steps.iter().map(serialize_step), budget),
            None => Vec::new(),
        },
        FeedbackSource::CurrentTrajectory => {
            // most recent commands survive truncation
            let mut units: Vec<Vec<Token>> = Vec::new();
            let mut used = 0;
            for step in steps[..=t].iter().rev() {
                let unit = serialize_command(step);
                if used + unit.len() > budget {
                    break;
                }
                used += unit.len();
                units.push(unit);
            }
            units.into_iter().rev().flatten().collect()
        }
    }
}

/// Wraps each non-empty block in `<fb> ... </fb>` and keeps the earliest
/// blocks that fit within `cap`; the first block that does not fit and all
/// later ones are dropped whole.
pub fn combine_sources(extracted: &[Vec<Token>], cap: usize) -> Vec<Token> {
    pack_units(
        extracted.iter().filter(|b| !b.is_empty()).map(|b| {
            let mut unit = Vec::with_capacity(b.len() + 2);
            unit.push(Token::FB_BEGIN);
            unit.extend_from_slice(b);
            unit.push(Token::FB_END);
            unit
        }),
        cap,
    )
}

/// Steps of one rollout group sharing an environment state.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub anchor_id: usize,
    /// `(n, t)` pairs in lexicographic order.
    pub members: Vec<(usize, usize)>,
    pub aggregated_feedback: Vec<Token>,
}

/// Per-`(n, t)` token blocks of a group, indexed `[n][t]`.
pub type StepTable = Vec<Vec<Vec<Token>>>;

/// Errors with the first `(n, t)` whose entry is missing or extra.
pub(crate) fn check_coverage(group: &RolloutGroup, table: &StepTable) -> Result<()> {
    for n in 0..group.len().max(table.len()) {
        let want = group.trajectories.get(n).map_or(0, |tr| tr.steps.len());
        let have = table.get(n).map_or(0, Vec::len);
        if want != have || n >= table.len() || n >= group.len() {
            return Err(Error::PlanMismatch { n, t: want.min(have) });
        }
    }
    Ok(())
}

/// Anchors under exact `state_key` equality.
pub fn build_anchors(group: &RolloutGroup, raw_feedback: &StepTable, cap: usize) -> Result<Vec<Anchor>> {
    build_anchors_by(group, raw_feedback, cap, |s| s.state_key.clone())
}

/// Anchors under an arbitrary state-similarity key. Each member contributes
/// its block (already delimited); blocks are deduplicated, concatenated in
/// `(n, t)` order and truncated whole to `cap`.
pub fn build_anchors_by<K>(
    group: &RolloutGroup,
    raw_feedback: &StepTable,
    cap: usize,
    key: impl Fn(&Step) -> K,
) -> Result<Vec<Anchor>>
where
    K: Eq + std::hash::Hash,
{
    check_coverage(group, raw_feedback)?;
    let mut by_key: HashMap<K, usize> = HashMap::new();
    let mut members: Vec<Vec<(usize, usize)>> = Vec::new();
    for (n, traj) in group.trajectories.iter().enumerate() {
        for (t, step) in traj.steps.iter().enumerate() {
            let id = *by_key.entry(key(step)).or_insert_with(|| {
                members.push(Vec::new());
                members.len() - 1
            });
            members[id].push((n, t));
        }
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(anchor_id, members)| {
            let mut blocks: Vec<&Vec<Token>> = Vec::new();
            for &(n, t) in &members {
                let b = &raw_feedback[n][t];
                if !blocks.contains(&b) {
                    blocks.push(b);
                }
            }
            let aggregated_feedback = pack_units(blocks.into_iter().cloned(), cap);
            Anchor {
                anchor_id,
                members,
                aggregated_feedback,
            }
        })
        .collect())
}

/// Φ for every `(n, t)` of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementPlan {
    pub mode: PlacementMode,
    phi: StepTable,
}

impl PlacementPlan {
    pub fn phi(&self, n: usize, t: usize) -> Result<&[Token]> {
        let row = self.phi.get(n).ok_or(Error::IndexOutOfRange {
            what: "trajectory",
            index: n,
            len: self.phi.len(),
        })?;
        row.get(t).map(Vec::as_slice).ok_or(Error::IndexOutOfRange {
            what: "step",
            index: t,
            len: row.len(),
        })
    }

    pub fn table(&self) -> &StepTable {
        &self.phi
    }

    /// Errors unless the plan has an entry for exactly every `(n, t)` of `group`.
    pub fn check_covers(&self, group: &RolloutGroup) -> Result<()> {
        check_coverage(group, &self.phi)
    }

    /// A plan with every block empty.
    pub fn empty(group: &RolloutGroup, mode: PlacementMode) -> Self {
        PlacementPlan {
            mode,
            phi: group
                .trajectories
                .iter()
                .map(|tr| vec![Vec::new(); tr.steps.len()])
                .collect(),
        }
    }
}

/// Combined step-level blocks for every `(n, t)`.
pub fn step_blocks(sources: &[FeedbackSource], group: &RolloutGroup, cap: usize) -> StepTable {
    let mut ordered = sources.to_vec();
    ordered.sort();
    ordered.dedup();
    let reference = success_reference(group);
    group
        .trajectories
        .iter()
        .enumerate()
        .map(|(n, tr)| {
            (0..tr.steps.len())
                .map(|t| {
                    let extracted: Vec<Vec<Token>> = ordered
                        .iter()
                        .map(|&s| extract_unchecked(s, group, n, t, cap, reference))
                        .collect();
                    combine_sources(&extracted, cap)
                })
                .collect()
        })
        .collect()
}

pub fn place(
    mode: PlacementMode,
    sources: &[FeedbackSource],
    group: &RolloutGroup,
    cap: usize,
) -> PlacementPlan {
    let blocks = step_blocks(sources, group, cap);
    let phi = match mode {
        PlacementMode::Step => blocks,
        PlacementMode::Anchor => {
            let anchors = build_anchors(group, &blocks, cap).expect("step blocks cover the group");
            let mut phi = blocks;
            for a in anchors {
                for &(n, t) in &a.members {
                    phi[n][t] = a.aggregated_feedback.clone();
                }
            }
            phi
        }
    };
    PlacementPlan { mode, phi }
}
