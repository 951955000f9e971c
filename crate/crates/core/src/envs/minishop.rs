//! MiniShop: search a small catalog, open an item page and buy.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{StepOutcome, NOTHING_HAPPENS};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const COLORS: [&str; 5] = ["red", "blue", "green", "black", "white"];
pub const MATERIALS: [&str; 4] = ["cotton", "leather", "wool", "silk"];
pub const TYPES: [&str; 5] = ["shoes", "shirt", "hat", "bag", "watch"];
pub const RESULTS_PER_PAGE: usize = 5;

const WORDS: &str = "Goal: buy search page | results or back purchased You searched \
    clicked bought went click Nothing happens.";

pub fn vocabulary(catalog_size: usize) -> Result<Vocabulary> {
    let mut words: Vec<String> = WORDS.split_whitespace().map(str::to_string).collect();
    words.extend(COLORS.iter().chain(&MATERIALS).chain(&TYPES).map(|s| s.to_string()));
    words.extend((0..catalog_size).map(item_name));
    Vocabulary::new(words)
}

fn item_name(k: usize) -> String {
    format!("item-{k}")
}

fn parse_item(word: &str) -> Option<usize> {
    word.strip_prefix("item-")?.parse().ok()
}

fn is_attribute(word: &str) -> bool {
    COLORS.contains(&word) || MATERIALS.contains(&word) || TYPES.contains(&word)
}

/// Color, material and type of one product.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Product {
    pub attributes: [&'static str; 3],
}

impl Product {
    fn describe(&self) -> String {
        self.attributes.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    pub items: Vec<Product>,
    /// The attributes the instruction asks for (color, material, type).
    pub required: [&'static str; 3],
}

impl Catalog {
    pub fn generate(seed: u64, size: usize) -> Result<Self> {
        if size < RESULTS_PER_PAGE {
            return Err(Error::config("catalog_size", "must be at least 5"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<Product> = (0..size)
            .map(|_| Product {
                attributes: [
                    COLORS[rng.gen_range(0..COLORS.len())],
                    MATERIALS[rng.gen_range(0..MATERIALS.len())],
                    TYPES[rng.gen_range(0..TYPES.len())],
                ],
            })
            .collect();
        let target = rng.gen_range(0..size);
        let required = items[target].attributes;
        Ok(Catalog { items, required })
    }

    pub fn goal_text(&self) -> String {
        format!("buy {}", self.required.join(" "))
    }

    /// Fraction of required attributes `item` matches.
    pub fn score(&self, item: usize) -> f64 {
        let attrs = &self.items[item].attributes;
        let hits = self.required.iter().filter(|r| attrs.contains(r)).count();
        hits as f64 / 3.0
    }

    /// Top results: most query words present, ties by ascending index.
    pub fn search(&self, query: &[String]) -> Vec<usize> {
        let mut ranked: Vec<(usize, usize)> = self
            .items
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let hits = query
                    .iter()
                    .filter(|w| p.attributes.contains(&w.as_str()))
                    .count();
                (hits, k)
            })
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked
            .into_iter()
            .take(RESULTS_PER_PAGE)
            .map(|(_, k)| k)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Page {
    Search,
    Results { query: Vec<String>, shown: Vec<usize> },
    Item { query: Vec<String>, shown: Vec<usize>, item: usize },
    Done { item: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShopState {
    catalog: Arc<Catalog>,
    pub page: Page,
}

impl ShopState {
    pub(crate) fn initial(catalog: Arc<Catalog>) -> Self {
        ShopState {
            catalog,
            page: Page::Search,
        }
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.page, Page::Done { .. })
    }

    pub fn state_key(&self) -> String {
        match &self.page {
            Page::Search => "page=search".into(),
            Page::Results { query, .. } => format!("page=results;query={}", query.join(" ")),
            Page::Item { query, item, .. } => {
                format!("page=item;query={};item={item}", query.join(" "))
            }
            Page::Done { item } => format!("page=done;item={item}"),
        }
    }

    pub fn observation(&self) -> String {
        match &self.page {
            Page::Search => format!("search page | Goal: {}", self.catalog.goal_text()),
            Page::Results { shown, .. } => {
                let mut s = String::from("results");
                for &k in shown {
                    s.push_str(&format!(" | {} {}", item_name(k), self.catalog.items[k].describe()));
                }
                s
            }
            Page::Item { item, .. } => format!(
                "{} {} | buy or back",
                item_name(*item),
                self.catalog.items[*item].describe()
            ),
            Page::Done { item } => format!("purchased {}", item_name(*item)),
        }
    }

    /// Every command that can change this state.
    pub(crate) fn candidate_commands(&self) -> Vec<String> {
        match &self.page {
            Page::Search => {
                let mut out = Vec::new();
                let pick = |pool: &[&'static str]| {
                    std::iter::once(None).chain(pool.iter().copied().map(Some)).collect::<Vec<_>>()
                };
                for c in pick(&COLORS) {
                    for m in pick(&MATERIALS) {
                        for t in pick(&TYPES) {
                            let words: Vec<&str> = [c, m, t].into_iter().flatten().collect();
                            if !words.is_empty() {
                                out.push(format!("search {}", words.join(" ")));
                            }
                        }
                    }
                }
                out
            }
            Page::Results { shown, .. } => {
                let mut out: Vec<String> =
                    shown.iter().map(|&k| format!("click {}", item_name(k))).collect();
                out.push("back".into());
                out
            }
            Page::Item { .. } => vec!["buy".into(), "back".into()],
            Page::Done { .. } => Vec::new(),
        }
    }

    pub(crate) fn step(&self, command: &str) -> (ShopState, StepOutcome) {
        let words: Vec<&str> = command.split_whitespace().collect();
        let mut next = self.clone();
        let mut reward = 0.0;
        let feedback: Option<String> = match (&self.page, words.as_slice()) {
            (Page::Search, ["search", rest @ ..]) if !rest.is_empty() => {
                let mut query: Vec<String> = Vec::new();
                for w in rest.iter().filter(|w| is_attribute(w)) {
                    if !query.iter().any(|q| q == w) {
                        query.push(w.to_string());
                    }
                }
                let shown = self.catalog.search(&query);
                let fb = if query.is_empty() {
                    "You searched".to_string()
                } else {
                    format!("You searched {}", query.join(" "))
                };
                next.page = Page::Results { query, shown };
                Some(fb)
            }
            (Page::Results { query, shown }, ["click", id]) => match parse_item(id) {
                Some(k) if shown.contains(&k) => {
                    next.page = Page::Item {
                        query: query.clone(),
                        shown: shown.clone(),
                        item: k,
                    };
                    Some(format!("You clicked {}", item_name(k)))
                }
                _ => None,
            },
            (Page::Results { .. }, ["back"]) => {
                next.page = Page::Search;
                Some("You went back".into())
            }
            (Page::Item { query, shown, .. }, ["back"]) => {
                next.page = Page::Results {
                    query: query.clone(),
                    shown: shown.clone(),
                };
                Some("You went back".into())
            }
            (Page::Item { item, .. }, ["buy"]) => {
                reward = self.catalog.score(*item);
                next.page = Page::Done { item: *item };
                Some(format!("You bought {}", item_name(*item)))
            }
            _ => None,
        };
        let done = next.is_terminal();
        let outcome = StepOutcome {
            feedback_text: feedback.unwrap_or_else(|| NOTHING_HAPPENS.to_string()),
            next_observation_text: next.observation(),
            done,
            reward,
        };
        (next, outcome)
    }
}
