//! Greedy longest-match subword segmentation.
//!
//! The first piece of every whitespace-delimited word carries the word-begin
//! marker (`_` by default), so `hosting` becomes `_host`, `ing`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_MARKER: &str = "_";

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    units: Vec<String>,
    ids: HashMap<String, usize>,
    marker: String,
    max_unit_chars: usize,
}

impl Vocabulary {
    pub fn new(units: Vec<String>, marker: impl Into<String>) -> Result<Self> {
        let marker = marker.into();
        if units.is_empty() {
            return Err(Error::Argument("vocabulary is empty".into()));
        }
        let mut ids = HashMap::with_capacity(units.len());
        let mut max_unit_chars = 0;
        for (i, u) in units.iter().enumerate() {
            if u.is_empty() || u.chars().any(char::is_whitespace) {
                return Err(Error::Argument(format!("invalid vocabulary unit {u:?}")));
            }
            if ids.insert(u.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate vocabulary unit {u:?}")));
            }
            let body = u.strip_prefix(marker.as_str()).unwrap_or(u);
            max_unit_chars = max_unit_chars.max(body.chars().count());
        }
        Ok(Self {
            units,
            ids,
            marker,
            max_unit_chars,
        })
    }

    /// One unit per line, line number = id.
    pub fn from_text(text: &str, marker: impl Into<String>) -> Result<Self> {
        let units = text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        Self::new(units, marker)
    }

    pub fn load(path: &Path, marker: impl Into<String>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, marker)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.units.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn marker(&self) -> &str {
        &self.marker
    }

    pub fn id(&self, unit: &str) -> Option<usize> {
        self.ids.get(unit).copied()
    }

    pub fn unit(&self, id: usize) -> &str {
        &self.units[id]
    }

    /// Splits `text` into subword units.
    pub fn segment(&self, text: &str) -> Result<Vec<String>> {
        let mut pieces = Vec::new();
        for word in text.split_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            let mut start = 0;
            while start < chars.len() {
                let prefix = if start == 0 { self.marker.as_str() } else { "" };
                let longest = (start + self.max_unit_chars).min(chars.len());
                let found = (start + 1..=longest).rev().find_map(|end| {
                    let cand: String = prefix
                        .chars()
                        .chain(chars[start..end].iter().copied())
                        .collect();
                    self.ids.contains_key(&cand).then_some((cand, end))
                });
                match found {
                    Some((piece, end)) => {
                        pieces.push(piece);
                        start = end;
                    }
                    None => {
                        return Err(Error::Tokenization(format!(
                            "character {:?} is not in the vocabulary alphabet",
                            chars[start]
                        )))
                    }
                }
            }
        }
        if pieces.is_empty() {
            return Err(Error::Tokenization(
                "input has no tokens; at least one is required".into(),
            ));
        }
        Ok(pieces)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        Ok(self
            .segment(text)?
            .iter()
            .map(|p| self.ids[p.as_str()])
            .collect())
    }

    /// Inverse of [`segment`](Self::segment) up to whitespace normalization.
    pub fn detokenize<S: AsRef<str>>(&self, pieces: &[S]) -> String {
        let joined: String = pieces.iter().map(AsRef::as_ref).collect();
        joined
            .replace(self.marker.as_str(), " ")
            .trim_start()
            .to_owned()
    }

    /// Frequency-based vocabulary over a corpus.
    ///
    /// Always contains every character of the corpus in both marked and
    /// unmarked form, so segmentation of any corpus sentence succeeds. The
    /// remaining budget goes to whole marked words, most frequent first.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize, marker: &str) -> Result<Self> {
        let mut alphabet = BTreeSet::new();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in corpus {
            for word in line.as_ref().split_whitespace() {
                alphabet.extend(word.chars());
                *counts.entry(word).or_default() += 1;
            }
        }
        let mut units: Vec<String> = Vec::new();
        for c in &alphabet {
            units.push(c.to_string());
            units.push(format!("{marker}{c}"));
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| w.chars().count() > 1)
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        for (w, _) in words {
            if units.len() >= max_size {
                break;
            }
            units.push(format!("{marker}{w}"));
        }
        Self::new(units, marker)
    }
}

/// Collapses runs of whitespace to single spaces and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(units: &[&str]) -> Vocabulary {
        Vocabulary::new(units.iter().map(|s| s.to_string()).collect(), "_").unwrap()
    }

    #[test]
    fn worked_example() {
        let v = vocab(&[
            "_The", "_super", "market", "_is", "_host", "ing", "_a", "_sale",
        ]);
        let pieces = v.segment("The supermarket is hosting a sale").unwrap();
        assert_eq!(
            pieces,
            ["_The", "_super", "market", "_is", "_host", "ing", "_a", "_sale"]
        );
    }

    #[test]
    fn single_characters() {
        let v = vocab(&["a", "_a", "b", "_b"]);
        assert_eq!(v.segment("ab").unwrap(), ["_a", "b"]);
    }

    #[test]
    fn longest_match_wins() {
        let v = vocab(&["_h", "o", "s", "t", "_ho", "_host", "st"]);
        assert_eq!(v.segment("host").unwrap(), ["_host"]);
        assert_eq!(v.segment("hot").unwrap(), ["_ho", "t"]);
    }

    #[test]
    fn empty_and_unknown_rejected() {
        let v = vocab(&["a", "_a"]);
        assert!(matches!(v.segment(""), Err(Error::Tokenization(_))));
        assert!(matches!(v.segment("   \t"), Err(Error::Tokenization(_))));
        let err = v.segment("az").unwrap_err().to_string();
        assert!(err.contains("'z'"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let v = vocab(&["_x", "y", "x"]);
        let again = Vocabulary::from_text(&v.to_text(), "_").unwrap();
        assert_eq!(v, again);
        assert!(Vocabulary::from_text("a\na\n", "_").is_err());
    }

    #[test]
    fn built_vocabulary_covers_corpus() {
        let corpus = ["red apple red", "blue apple", "green grape"];
        let v = Vocabulary::build(&corpus, 64, "_").unwrap();
        for line in corpus {
            let pieces = v.segment(line).unwrap();
            assert_eq!(v.detokenize(&pieces), normalize_whitespace(line));
        }
        assert_eq!(v.segment("red").unwrap(), ["_red"]);
    }
}
