//! Dialogue corpora: ReDial ingestion, item masking, vocabulary, splits and a
//! synthetic generator for desk-scale experiments.

mod examples;
mod redial;
mod split;
mod synth;
pub mod tokenize;
pub mod vocab;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use examples::{
    build_vocabulary, make_examples, mask_items, unmask, ExampleStats, ItemOnlyLinker, MaskedExample, MentionLinker,
};
pub use redial::{ingest_redial, parse_redial_line, read_redial, to_redial_line, write_redial, IngestStats};
pub use split::{split_corpus, CorpusSplit, SplitRatios};
pub use synth::{synth_corpus, SynthCorpus, SynthSpec};
pub use vocab::Vocabulary;

/// Catalog item identifier (the digits of an `@<id>` mention).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u64);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Seeker,
    Recommender,
}

impl Role {
    pub fn marker(self) -> u32 {
        match self {
            Role::Seeker => vocab::SEEKER,
            Role::Recommender => vocab::RECOMMENDER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub raw_text: String,
    pub tokens: Vec<String>,
    /// `(token position, item)` pairs, strictly increasing in position.
    pub item_mentions: Vec<(usize, ItemId)>,
}

impl Turn {
    /// Tokenizes `text` and records every `@id` token whose id is in `known`.
    /// Returns the turn and the number of `@id` tokens left unresolved.
    pub fn parse(role: Role, text: &str, known: &BTreeMap<ItemId, String>) -> (Turn, usize) {
        let tokens = tokenize::tokenize(text);
        let mut item_mentions = Vec::new();
        let mut unknown = 0;
        for (pos, tok) in tokens.iter().enumerate() {
            if let Some(id) = tokenize::mention_id(tok) {
                if known.contains_key(&ItemId(id)) {
                    item_mentions.push((pos, ItemId(id)));
                } else {
                    unknown += 1;
                }
            }
        }
        (
            Turn {
                role,
                raw_text: text.to_string(),
                tokens,
                item_mentions,
            },
            unknown,
        )
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.item_mentions.iter().map(|&(_, id)| id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
    pub mentioned_items: BTreeMap<ItemId, String>,
}

impl Conversation {
    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.turns.iter().flat_map(Turn::items)
    }
}

/// Every known item with its surface title, indexed in ascending id order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    ids: Vec<ItemId>,
    titles: Vec<String>,
}

impl Catalog {
    pub fn new(titles: BTreeMap<ItemId, String>) -> Self {
        let (ids, titles) = titles.into_iter().unzip();
        Catalog { ids, titles }
    }

    /// Union of every conversation's `mentioned_items`; the first title seen
    /// for an id wins.
    pub fn from_conversations(convs: &[Conversation]) -> Self {
        let mut all = BTreeMap::new();
        for c in convs {
            for (id, title) in &c.mentioned_items {
                all.entry(*id).or_insert_with(|| title.clone());
            }
        }
        Catalog::new(all)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn index_of(&self, id: ItemId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.index_of(id).is_some()
    }

    pub fn title(&self, id: ItemId) -> Option<&str> {
        self.index_of(id).map(|i| self.titles[i].as_str())
    }

    pub fn titles(&self) -> BTreeMap<ItemId, String> {
        self.iter().map(|(id, t)| (id, t.to_string())).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, &str)> {
        self.ids.iter().copied().zip(self.titles.iter().map(String::as_str))
    }
}
