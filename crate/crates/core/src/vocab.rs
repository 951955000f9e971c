//! Word-level vocabulary and tokenization.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub const OBS_BEGIN: Token = Token(0);
    pub const OBS_END: Token = Token(1);
    pub const ACT_BEGIN: Token = Token(2);
    pub const ACT_END: Token = Token(3);
    pub const FB_BEGIN: Token = Token(4);
    pub const FB_END: Token = Token(5);
    pub const HIND_BEGIN: Token = Token(6);
    pub const HIND_END: Token = Token(7);
    pub const THINK: Token = Token(8);
    pub const UNK: Token = Token(9);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Surface forms of the special markers, in id order.
pub const SPECIAL_MARKERS: [&str; 10] = [
    "<obs>", "</obs>", "<act>", "</act>", "<fb>", "</fb>", "<hind>", "</hind>", "<think>", "<unk>",
];

fn is_separator(c: char) -> bool {
    c.is_whitespace() || c == '[' || c == ']'
}

/// Ordered list of unique words; the ten special markers occupy ids 0..10.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from the non-special words, which are appended after
    /// the markers in the given order.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut all: Vec<String> = SPECIAL_MARKERS.iter().map(|s| s.to_string()).collect();
        all.extend(words.into_iter().map(|w| w.as_ref().to_string()));
        Self::from_words(all)
    }

    fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIAL_MARKERS.len()
            || words[..SPECIAL_MARKERS.len()]
                .iter()
                .zip(SPECIAL_MARKERS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::InvalidVocabulary(
                "the ten special markers must come first".into(),
            ));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (id, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(is_separator) {
                return Err(Error::InvalidVocabulary(format!("bad word {w:?}")));
            }
            if index.insert(w.clone(), id as u32).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate word {w:?}")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn lookup(&self, word: &str) -> Token {
        self.index.get(word).map_or(Token::UNK, |&id| Token(id))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Panics if `word` is missing; only for words the caller put there.
    pub fn id(&self, word: &str) -> Token {
        match self.index.get(word) {
            Some(&id) => Token(id),
            None => panic!("word {word:?} is not in the vocabulary"),
        }
    }

    pub fn word(&self, token: Token) -> Result<&str> {
        self.words
            .get(token.index())
            .map(String::as_str)
            .ok_or(Error::InvalidToken {
                id: token.0,
                size: self.words.len(),
            })
    }

    /// Splits on whitespace and square brackets; unknown words become UNK.
    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        text.split(is_separator)
            .filter(|w| !w.is_empty())
            .map(|w| self.lookup(w))
            .collect()
    }

    pub fn detokenize(&self, tokens: &[Token]) -> Result<String> {
        let mut out = String::new();
        for (i, &t) in tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.word(t)?);
        }
        Ok(out)
    }

    /// One word per line, line number = id.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn parse_dump(text: &str) -> Result<Self> {
        let words: Vec<String> = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Self::from_words(words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["go", "north", "take", "key", "Nothing", "happens."]).unwrap()
    }

    #[test]
    fn markers_take_lowest_ids() {
        let v = vocab();
        for (i, m) in SPECIAL_MARKERS.iter().enumerate() {
            assert_eq!(v.lookup(m), Token(i as u32));
        }
        assert_eq!(v.id("go"), Token(10));
    }

    #[test]
    fn tokenize_contract() {
        let v = vocab();
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.tokenize("take key"), vec![v.id("take"), v.id("key")]);
        assert_eq!(v.tokenize("zzqx key"), vec![Token::UNK, v.id("key")]);
        assert_eq!(v.tokenize("take[key]"), vec![v.id("take"), v.id("key")]);
        assert_eq!(
            v.tokenize("Nothing happens."),
            vec![v.id("Nothing"), v.id("happens.")]
        );
    }

    #[test]
    fn detokenize_contract() {
        let v = vocab();
        assert_eq!(v.detokenize(&[]).unwrap(), "");
        assert_eq!(v.detokenize(&[v.id("go"), v.id("north")]).unwrap(), "go north");
        assert!(matches!(
            v.detokenize(&[Token(99)]),
            Err(Error::InvalidToken { id: 99, .. })
        ));
    }

    #[test]
    fn rejects_duplicates_and_separators() {
        assert!(Vocabulary::new(["a", "a"]).is_err());
        assert!(Vocabulary::new(["a b"]).is_err());
        assert!(Vocabulary::new(["<obs>"]).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let v = vocab();
        let back = Vocabulary::parse_dump(&v.dump()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::parse_dump("go\nnorth\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_unk_free(
            words in proptest::collection::vec("[a-z]{1,6}", 1..20),
            picks in proptest::collection::vec(any::<prop::sample::Index>(), 0..30),
        ) {
            let mut uniq = words.clone();
            uniq.sort();
            uniq.dedup();
            let v = Vocabulary::new(&uniq).unwrap();
            // every id except UNK, markers included
            let ids: Vec<Token> = picks
                .iter()
                .map(|p| p.index(v.len() - 1))
                .map(|i| if i >= Token::UNK.index() { Token(i as u32 + 1) } else { Token(i as u32) })
                .collect();
            let text = v.detokenize(&ids).unwrap();
            prop_assert_eq!(v.tokenize(&text), ids);
        }
    }
}
