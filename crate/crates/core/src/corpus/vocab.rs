use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const ITEM: u32 = 4;
pub const SEEKER: u32 = 5;
pub const RECOMMENDER: u32 = 6;

pub const RESERVED: [&str; 7] = [
    "[PAD]",
    "[UNK]",
    "[BOS]",
    "[EOS]",
    "[ITEM]",
    "[SEEKER]",
    "[RECOMMENDER]",
];

/// Bijective token ↔ id map with fixed reserved ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Reserved tokens followed by every token seen at least `min_frequency`
    /// times, most frequent first (ties alphabetical).
    pub fn build<'a, I>(tokens: I, min_frequency: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_frequency && !RESERVED.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let list = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect::<Vec<_>>();
        Vocabulary::from(list)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("[UNK]", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed_and_rare_tokens_dropped() {
        let words = "a b a c a b d".split(' ');
        let v = Vocabulary::build(words, 2);
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), i as u32);
        }
        assert_eq!(v.id("[ITEM]"), ITEM);
        assert_eq!(v.token(7), "a");
        assert_eq!(v.token(8), "b");
        assert_eq!(v.id("c"), UNK);
        assert_eq!(v.len(), 9);
    }

    #[test]
    fn bijective() {
        let v = Vocabulary::build("x y z x y z".split(' '), 1);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), i as u32);
        }
    }
}
