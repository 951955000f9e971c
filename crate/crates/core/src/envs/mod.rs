//! Deterministic multi-turn text environments.
//!
//! Two environments share one interface:
//!
//! * [`EnvKind::KeyDoor`] — a small grid in which the agent must fetch a key,
//!   open a door, pick up an item and put it on the target the door guards.
//!   Reward is 1.0 on success and 0.0 otherwise.
//! * [`EnvKind::MiniShop`] — a catalog search task. The agent searches,
//!   opens an item page and buys; the reward is the fraction of required
//!   attributes the bought item matches.
//!
//! Inapplicable or unparseable commands never fail: they leave the state
//! unchanged and answer `"Nothing happens."`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::oracle;
use crate::vocab::Vocabulary;

pub mod keydoor;
pub mod minishop;

pub use keydoor::{GridState, KeyDoorLayout};
pub use minishop::{Catalog, ShopState};

pub const NOTHING_HAPPENS: &str = "Nothing happens.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "keydoor")]
    KeyDoor,
    #[serde(rename = "minishop")]
    MiniShop,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::KeyDoor => "keydoor",
            EnvKind::MiniShop => "minishop",
        }
    }

    pub fn default_max_turns(self) -> usize {
        match self {
            EnvKind::KeyDoor => 50,
            EnvKind::MiniShop => 15,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keydoor" => Ok(EnvKind::KeyDoor),
            "minishop" => Ok(EnvKind::MiniShop),
            other => Err(Error::UnknownEnv(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layout {
    KeyDoor(Arc<KeyDoorLayout>),
    MiniShop(Arc<Catalog>),
}

/// A task instance. The same `(kind, seed, size)` always yields the same task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: EnvKind,
    pub seed: u64,
    pub size: usize,
    pub goal_text: String,
    pub(crate) layout: Layout,
}

impl TaskSpec {
    pub fn generate(kind: EnvKind, seed: u64, size: usize) -> Result<Self> {
        let task_id = format!("{kind}-{size}-{seed:016x}");
        match kind {
            EnvKind::KeyDoor => {
                let layout = KeyDoorLayout::generate(seed, size)?;
                Ok(Self::from_keydoor_layout(task_id, seed, layout))
            }
            EnvKind::MiniShop => {
                let catalog = Catalog::generate(seed, size)?;
                Ok(TaskSpec {
                    task_id,
                    kind,
                    seed,
                    size,
                    goal_text: catalog.goal_text(),
                    layout: Layout::MiniShop(Arc::new(catalog)),
                })
            }
        }
    }

    /// A hand-built grid task, used by tests and the oracle.
    pub fn from_keydoor_layout(task_id: String, seed: u64, layout: KeyDoorLayout) -> Self {
        TaskSpec {
            task_id,
            kind: EnvKind::KeyDoor,
            seed,
            size: layout.size,
            goal_text: keydoor::GOAL_TEXT.to_string(),
            layout: Layout::KeyDoor(Arc::new(layout)),
        }
    }

    pub fn keydoor_layout(&self) -> Option<&KeyDoorLayout> {
        match &self.layout {
            Layout::KeyDoor(l) => Some(l),
            Layout::MiniShop(_) => None,
        }
    }

    pub fn catalog(&self) -> Option<&Catalog> {
        match &self.layout {
            Layout::MiniShop(c) => Some(c),
            Layout::KeyDoor(_) => None,
        }
    }

    pub fn to_record(&self) -> TaskRecord {
        TaskRecord {
            task_id: self.task_id.clone(),
            kind: self.kind,
            seed: self.seed,
            size: self.size,
            goal: self.goal_text.clone(),
        }
    }

    pub fn from_record(record: &TaskRecord) -> Result<Self> {
        let task = Self::generate(record.kind, record.seed, record.size)?;
        if task.goal_text != record.goal {
            return Err(Error::Record(format!(
                "task {} regenerates with goal {:?}, not {:?}",
                record.task_id, task.goal_text, record.goal
            )));
        }
        Ok(task)
    }
}

/// One line of a task list dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub kind: EnvKind,
    pub seed: u64,
    pub size: usize,
    pub goal: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvState {
    KeyDoor(GridState),
    MiniShop(ShopState),
}

impl EnvState {
    /// Canonical description of the semantic state, independent of history.
    pub fn state_key(&self) -> String {
        match self {
            EnvState::KeyDoor(s) => s.state_key(),
            EnvState::MiniShop(s) => s.state_key(),
        }
    }

    pub fn is_terminal(&self) -> bool {
        match self {
            EnvState::KeyDoor(s) => s.is_terminal(),
            EnvState::MiniShop(s) => s.is_terminal(),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            EnvState::KeyDoor(_) => EnvKind::KeyDoor,
            EnvState::MiniShop(_) => EnvKind::MiniShop,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub feedback_text: String,
    pub next_observation_text: String,
    pub done: bool,
    /// Non-zero only on the terminal transition.
    pub reward: f64,
}

impl StepOutcome {
    pub fn is_noop(&self) -> bool {
        self.feedback_text == NOTHING_HAPPENS
    }
}

pub fn reset(task: &TaskSpec) -> Result<(EnvState, String)> {
    match &task.layout {
        Layout::KeyDoor(l) => {
            let s = GridState::initial(l.clone());
            let obs = s.initial_observation();
            Ok((EnvState::KeyDoor(s), obs))
        }
        Layout::MiniShop(c) => {
            let s = ShopState::initial(c.clone());
            let obs = s.observation();
            Ok((EnvState::MiniShop(s), obs))
        }
    }
}

pub fn env_step(state: &EnvState, command: &str) -> Result<(EnvState, StepOutcome)> {
    if state.is_terminal() {
        return Err(Error::TerminalState);
    }
    Ok(match state {
        EnvState::KeyDoor(s) => {
            let (next, out) = s.step(command);
            (EnvState::KeyDoor(next), out)
        }
        EnvState::MiniShop(s) => {
            let (next, out) = s.step(command);
            (EnvState::MiniShop(next), out)
        }
    })
}

/// Command templates of an environment.
pub fn action_grammar(kind: EnvKind) -> Vec<&'static str> {
    match kind {
        EnvKind::KeyDoor => keydoor::COMMANDS.to_vec(),
        EnvKind::MiniShop => vec!["search <word>...", "click item-<k>", "buy", "back"],
    }
}

/// Concrete commands worth trying in `state`; every other command is a no-op
/// there.
pub fn candidate_commands(state: &EnvState) -> Vec<String> {
    match state {
        EnvState::KeyDoor(s) if !s.is_terminal() => {
            keydoor::COMMANDS.iter().map(|c| c.to_string()).collect()
        }
        EnvState::MiniShop(s) => s.candidate_commands(),
        _ => Vec::new(),
    }
}

/// Commands that do not answer "Nothing happens." in `state`.
pub fn admissible_commands(state: &EnvState) -> Vec<String> {
    candidate_commands(state)
        .into_iter()
        .filter(|c| env_step(state, c).map(|(_, o)| !o.is_noop()).unwrap_or(false))
        .collect()
}

/// An environment kind together with its closed vocabulary.
#[derive(Debug, Clone)]
pub struct Env {
    kind: EnvKind,
    size: usize,
    vocab: Vocabulary,
}

impl Env {
    pub fn new(kind: EnvKind, size: usize) -> Result<Self> {
        let vocab = match kind {
            EnvKind::KeyDoor => {
                if !(2..=10).contains(&size) {
                    return Err(Error::config("grid_size", "must lie in 2..=10"));
                }
                keydoor::vocabulary()
            }
            EnvKind::MiniShop => {
                if size < minishop::RESULTS_PER_PAGE {
                    return Err(Error::config("catalog_size", "must be at least 5"));
                }
                minishop::vocabulary(size)
            }
        }?;
        Ok(Env { kind, size, vocab })
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn check_task(&self, task: &TaskSpec) -> Result<()> {
        if task.kind != self.kind || task.size != self.size {
            return Err(Error::TaskMismatch {
                task_id: task.task_id.clone(),
                expected: format!("{}/{}", self.kind, self.size),
            });
        }
        Ok(())
    }

    pub fn reset(&self, task: &TaskSpec) -> Result<(EnvState, String)> {
        self.check_task(task)?;
        reset(task)
    }

    pub fn step(&self, state: &EnvState, command: &str) -> Result<(EnvState, StepOutcome)> {
        env_step(state, command)
    }

    /// `count` tasks, each verified solvable within `max_turns` by exhaustive
    /// search.
    pub fn generate_tasks(&self, count: usize, seed: u64, max_turns: usize) -> Result<Vec<TaskSpec>> {
        generate_tasks(self.kind, count, seed, self.size, max_turns)
    }
}

pub fn generate_tasks(
    kind: EnvKind,
    count: usize,
    seed: u64,
    size: usize,
    max_turns: usize,
) -> Result<Vec<TaskSpec>> {
    let mut tasks = Vec::with_capacity(count);
    let mut candidate = 0u64;
    while tasks.len() < count {
        let task_seed = derive_seed(seed, &["task", &candidate.to_string()]);
        candidate += 1;
        let task = TaskSpec::generate(kind, task_seed, size)?;
        let (best, _) = oracle::brute_force_best(&task, max_turns)?;
        if best >= 1.0 {
            tasks.push(task);
        } else if candidate > 1000 * (count as u64 + 1) {
            return Err(Error::config(
                "max_turns",
                format!("no solvable {kind} task found within {max_turns} turns"),
            ));
        }
    }
    Ok(tasks)
}
