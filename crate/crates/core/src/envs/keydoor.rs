//! KeyDoorGrid: fetch the key, open the door, bring the item to the target.
//!
//! The door guards the target: the target only accepts the item once the
//! door has been opened (the door cell itself is walkable). Each observation
//! ends with a sentence locating the next object the agent needs, relative to
//! its own cell.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{StepOutcome, NOTHING_HAPPENS};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const GOAL_TEXT: &str = "put the item on the target behind the door";

pub const COMMANDS: [&str; 9] = [
    "go north",
    "go south",
    "go east",
    "go west",
    "take key",
    "open door",
    "take item",
    "put item",
    "look",
];

const WORDS: &str = "Goal: put the item on target behind door. You are at row col hold \
    nothing. key. item. and The door is closed. open. key target here. \
    north south east west north. south. east. west. go take open look \
    pick up around. Nothing happens. target.";

pub fn vocabulary() -> Result<Vocabulary> {
    let mut words: Vec<String> = Vec::new();
    for w in WORDS.split_whitespace() {
        if !words.iter().any(|x| x == w) {
            words.push(w.to_string());
        }
    }
    for d in 0..10 {
        words.push(d.to_string());
        words.push(format!("{d}."));
    }
    Vocabulary::new(words)
}

pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyDoorLayout {
    pub size: usize,
    pub agent: Cell,
    pub key: Cell,
    pub door: Cell,
    pub item: Cell,
    pub target: Cell,
    pub start_has_key: bool,
    pub start_door_open: bool,
    pub start_holding_item: bool,
}

impl KeyDoorLayout {
    /// Four distinct object cells and an arbitrary start cell.
    pub fn generate(seed: u64, size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::config("grid_size", "must be at least 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = size * size;
        let picked = sample(&mut rng, cells, 4).into_vec();
        let cell = |i: usize| (i / size, i % size);
        let agent = cell(rng.gen_range(0..cells));
        Ok(KeyDoorLayout {
            size,
            agent,
            key: cell(picked[0]),
            door: cell(picked[1]),
            item: cell(picked[2]),
            target: cell(picked[3]),
            start_has_key: false,
            start_door_open: false,
            start_holding_item: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    layout: Arc<KeyDoorLayout>,
    pub pos: Cell,
    pub has_key: bool,
    pub door_open: bool,
    pub holding_item: bool,
    pub item_placed: bool,
}

#[derive(Clone, Copy)]
enum Objective {
    Key,
    Door,
    Item,
    Target,
}

impl GridState {
    pub(crate) fn initial(layout: Arc<KeyDoorLayout>) -> Self {
        GridState {
            pos: layout.agent,
            has_key: layout.start_has_key,
            door_open: layout.start_door_open,
            holding_item: layout.start_holding_item,
            item_placed: false,
            layout,
        }
    }

    pub fn layout(&self) -> &KeyDoorLayout {
        &self.layout
    }

    pub fn is_terminal(&self) -> bool {
        self.item_placed
    }

    pub fn state_key(&self) -> String {
        format!(
            "pos={},{};key={};door={};item={};placed={}",
            self.pos.0,
            self.pos.1,
            self.has_key as u8,
            self.door_open as u8,
            self.holding_item as u8,
            self.item_placed as u8
        )
    }

    fn objective(&self) -> (Objective, Cell) {
        let l = &self.layout;
        if !self.has_key {
            (Objective::Key, l.key)
        } else if !self.door_open {
            (Objective::Door, l.door)
        } else if !self.holding_item && !self.item_placed {
            (Objective::Item, l.item)
        } else {
            (Objective::Target, l.target)
        }
    }

    fn direction_to(&self, cell: Cell) -> String {
        let mut parts = Vec::new();
        if cell.0 < self.pos.0 {
            parts.push("north");
        } else if cell.0 > self.pos.0 {
            parts.push("south");
        }
        if cell.1 > self.pos.1 {
            parts.push("east");
        } else if cell.1 < self.pos.1 {
            parts.push("west");
        }
        if parts.is_empty() {
            parts.push("here");
        }
        parts.join(" ")
    }

    pub fn observation(&self) -> String {
        let inventory = match (self.has_key, self.holding_item) {
            (false, false) => "nothing",
            (true, false) => "the key",
            (false, true) => "the item",
            (true, true) => "the key and the item",
        };
        let door = if self.door_open { "open" } else { "closed" };
        let (objective, cell) = self.objective();
        let name = match objective {
            Objective::Key => "key",
            Objective::Door => "door",
            Objective::Item => "item",
            Objective::Target => "target",
        };
        format!(
            "You are at row {} col {}. You hold {inventory}. The door is {door}. The {name} is {}.",
            self.pos.0,
            self.pos.1,
            self.direction_to(cell)
        )
    }

    pub(crate) fn initial_observation(&self) -> String {
        format!("Goal: {GOAL_TEXT}. {}", self.observation())
    }

    pub(crate) fn step(&self, command: &str) -> (GridState, StepOutcome) {
        let words: Vec<&str> = command.split_whitespace().collect();
        let mut next = self.clone();
        let l = &self.layout;
        let feedback: Option<&str> = match words.as_slice() {
            ["go", dir] => {
                let (r, c) = self.pos;
                let moved = match *dir {
                    "north" if r > 0 => Some((r - 1, c)),
                    "south" if r + 1 < l.size => Some((r + 1, c)),
                    "east" if c + 1 < l.size => Some((r, c + 1)),
                    "west" if c > 0 => Some((r, c - 1)),
                    _ => None,
                };
                moved.map(|p| {
                    next.pos = p;
                    match *dir {
                        "north" => "You go north.",
                        "south" => "You go south.",
                        "east" => "You go east.",
                        _ => "You go west.",
                    }
                })
            }
            ["take", "key"] if self.pos == l.key && !self.has_key => {
                next.has_key = true;
                Some("You pick up the key.")
            }
            ["open", "door"] if self.pos == l.door && self.has_key && !self.door_open => {
                next.door_open = true;
                Some("You open the door.")
            }
            ["take", "item"]
                if self.pos == l.item && !self.holding_item && !self.item_placed =>
            {
                next.holding_item = true;
                Some("You pick up the item.")
            }
            ["put", "item"] if self.pos == l.target && self.holding_item && self.door_open => {
                next.holding_item = false;
                next.item_placed = true;
                Some("You put the item on the target.")
            }
            ["look"] => Some("You look around."),
            _ => None,
        };
        let done = next.item_placed;
        let outcome = StepOutcome {
            feedback_text: feedback.unwrap_or(NOTHING_HAPPENS).to_string(),
            next_observation_text: next.observation(),
            done,
            reward: if done { 1.0 } else { 0.0 },
        };
        (next, outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{admissible_commands, env_step, reset, EnvState, TaskSpec};
    use crate::vocab::Token;

    fn layout() -> KeyDoorLayout {
        KeyDoorLayout {
            size: 3,
            agent: (0, 0),
            key: (0, 0),
            door: (0, 1),
            item: (1, 1),
            target: (2, 2),
            start_has_key: false,
            start_door_open: false,
            start_holding_item: false,
        }
    }

    fn task(l: KeyDoorLayout) -> TaskSpec {
        TaskSpec::from_keydoor_layout("t".into(), 0, l)
    }

    #[test]
    fn take_key_flips_flag() {
        let (s, obs) = reset(&task(layout())).unwrap();
        assert!(obs.starts_with("Goal:"));
        assert!(obs.contains("You are at row 0 col 0."));
        assert_eq!(s.state_key(), "pos=0,0;key=0;door=0;item=0;placed=0");
        let (s2, out) = env_step(&s, "take key").unwrap();
        assert_eq!(out.feedback_text, "You pick up the key.");
        assert_eq!(s2.state_key(), "pos=0,0;key=1;door=0;item=0;placed=0");
        assert!(!out.done);
        // taking it twice does nothing
        let (s3, out) = env_step(&s2, "take key").unwrap();
        assert_eq!(out.feedback_text, NOTHING_HAPPENS);
        assert_eq!(s3, s2);
    }

    #[test]
    fn full_solution_and_terminal_error() {
        let (mut s, _) = reset(&task(layout())).unwrap();
        let plan = [
            "take key", "go east", "open door", "go south", "take item", "go south", "go east",
            "put item",
        ];
        let mut last = None;
        for cmd in plan {
            let (n, out) = env_step(&s, cmd).unwrap();
            assert_ne!(out.feedback_text, NOTHING_HAPPENS, "{cmd}");
            s = n;
            last = Some(out);
        }
        let last = last.unwrap();
        assert!(last.done);
        assert_eq!(last.reward, 1.0);
        assert!(matches!(env_step(&s, "look"), Err(Error::TerminalState)));
    }

    #[test]
    fn put_requires_open_door() {
        let mut l = layout();
        l.agent = (2, 2);
        l.start_holding_item = true;
        let (s, _) = reset(&task(l.clone())).unwrap();
        let (_, out) = env_step(&s, "put item").unwrap();
        assert_eq!(out.feedback_text, NOTHING_HAPPENS);
        l.start_door_open = true;
        let (s, _) = reset(&task(l)).unwrap();
        let (_, out) = env_step(&s, "put item").unwrap();
        assert!(out.done);
    }

    #[test]
    fn walls_block_movement() {
        let (s, _) = reset(&task(layout())).unwrap();
        let (n, out) = env_step(&s, "go north").unwrap();
        assert_eq!(out.feedback_text, NOTHING_HAPPENS);
        assert_eq!(n, s);
        let adm = admissible_commands(&s);
        assert_eq!(adm, vec!["go south", "go east", "take key", "look"]);
    }

    #[test]
    fn objective_sentence_tracks_progress() {
        let (s, _) = reset(&task(layout())).unwrap();
        let EnvState::KeyDoor(g) = &s else { unreachable!() };
        assert!(g.observation().ends_with("The key is here."));
        let (s, _) = env_step(&s, "take key").unwrap();
        let EnvState::KeyDoor(g) = &s else { unreachable!() };
        assert!(g.observation().ends_with("The door is east."));
        assert!(g.observation().contains("You hold the key."));
    }

    #[test]
    fn texts_are_in_vocabulary() {
        let v = vocabulary().unwrap();
        for seed in 0..40 {
            let t = TaskSpec::generate(crate::envs::EnvKind::KeyDoor, seed, 3 + (seed as usize % 4)).unwrap();
            let (s, obs) = reset(&t).unwrap();
            assert!(!v.tokenize(&obs).contains(&Token::UNK), "{obs}");
            let mut frontier = vec![s];
            let mut seen = std::collections::HashSet::new();
            while let Some(s) = frontier.pop() {
                if !seen.insert(s.state_key()) || s.is_terminal() {
                    continue;
                }
                for cmd in COMMANDS {
                    let (n, out) = env_step(&s, cmd).unwrap();
                    for text in [&out.feedback_text, &out.next_observation_text] {
                        assert!(!v.tokenize(text).contains(&Token::UNK), "{text}");
                    }
                    assert!(!v.tokenize(cmd).contains(&Token::UNK));
                    frontier.push(n);
                }
            }
        }
    }
}
