use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, BOS, EOS, ITEM};
use super::{Conversation, ItemId, Role, Turn};

/// Extracts the knowledge-graph entity keys a turn mentions.
pub trait MentionLinker {
    fn link(&self, turn: &Turn) -> Vec<String>;
}

/// Links only `@id` item mentions, keyed by the decimal id.
#[derive(Clone, Copy, Debug, Default)]
pub struct ItemOnlyLinker;

impl MentionLinker for ItemOnlyLinker {
    fn link(&self, turn: &Turn) -> Vec<String> {
        turn.items().map(|id| id.to_string()).collect()
    }
}

/// One training instance: history, masked target template and the ground
/// truth item for every `[ITEM]` slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub conversation_id: String,
    pub turn_index: usize,
    pub context_ids: Vec<u32>,
    /// `[BOS] template… [EOS]`.
    pub target_ids: Vec<u32>,
    pub slot_items: Vec<ItemId>,
    /// Entity keys mentioned anywhere in the history, in order.
    pub context_entities: Vec<String>,
}

impl MaskedExample {
    pub fn slot_count(&self) -> usize {
        self.target_ids.iter().filter(|&&t| t == ITEM).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ExampleStats {
    pub examples: usize,
    pub dropped_empty: usize,
}

impl std::ops::AddAssign for ExampleStats {
    fn add_assign(&mut self, o: Self) {
        self.examples += o.examples;
        self.dropped_empty += o.dropped_empty;
    }
}

/// Token strings of `turn` with each item mention replaced by `[ITEM]`, plus
/// the mentioned items left to right.
pub fn mask_tokens(turn: &Turn) -> (Vec<String>, Vec<ItemId>) {
    let mut tokens = turn.tokens.clone();
    let mut slots = Vec::with_capacity(turn.item_mentions.len());
    for &(pos, id) in &turn.item_mentions {
        tokens[pos] = "[ITEM]".to_string();
        slots.push(id);
    }
    (tokens, slots)
}

pub fn mask_items(turn: &Turn, vocab: &Vocabulary) -> (Vec<u32>, Vec<ItemId>) {
    let (tokens, slots) = mask_tokens(turn);
    (vocab.encode(&tokens), slots)
}

/// Inverse of [`mask_tokens`]: fills `[ITEM]` tokens with `@id` in order.
pub fn unmask<S: AsRef<str>>(template: &[S], slots: &[ItemId]) -> Vec<String> {
    let mut it = slots.iter();
    template
        .iter()
        .map(|t| match t.as_ref() {
            "[ITEM]" => it.next().map_or_else(|| "[ITEM]".to_string(), |id| format!("@{id}")),
            other => other.to_string(),
        })
        .collect()
}

/// Vocabulary over masked tokens of `convs`.
pub fn build_vocabulary(convs: &[Conversation], min_frequency: usize) -> Vocabulary {
    let masked: Vec<Vec<String>> = convs
        .iter()
        .flat_map(|c| c.turns.iter().map(|t| mask_tokens(t).0))
        .collect();
    Vocabulary::build(masked.iter().flatten().map(String::as_str), min_frequency)
}

/// One example per recommender turn with at least one preceding turn.
///
/// The context concatenates every earlier turn as `[ROLE] masked tokens…`,
/// keeping only the newest `max_context_tokens` ids.
pub fn make_examples(
    conv: &Conversation,
    vocab: &Vocabulary,
    max_context_tokens: usize,
    linker: &dyn MentionLinker,
) -> (Vec<MaskedExample>, ExampleStats) {
    let mut stats = ExampleStats::default();
    let mut out = Vec::new();
    let mut history: Vec<u32> = Vec::new();
    let mut entities: Vec<String> = Vec::new();
    for (t, turn) in conv.turns.iter().enumerate() {
        let (ids, slots) = mask_items(turn, vocab);
        if t >= 1 && turn.role == Role::Recommender {
            if ids.is_empty() {
                stats.dropped_empty += 1;
            } else {
                let start = history.len().saturating_sub(max_context_tokens);
                let mut target_ids = Vec::with_capacity(ids.len() + 2);
                target_ids.push(BOS);
                target_ids.extend_from_slice(&ids);
                target_ids.push(EOS);
                out.push(MaskedExample {
                    conversation_id: conv.id.clone(),
                    turn_index: t,
                    context_ids: history[start..].to_vec(),
                    target_ids,
                    slot_items: slots,
                    context_entities: entities.clone(),
                });
                stats.examples += 1;
            }
        }
        history.push(turn.role.marker());
        history.extend_from_slice(&ids);
        entities.extend(linker.link(turn));
    }
    (out, stats)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::corpus::vocab::{RECOMMENDER, SEEKER};

    fn conv(turns: &[(Role, &str)]) -> Conversation {
        let known: BTreeMap<ItemId, String> = [1u64, 2, 42]
            .into_iter()
            .map(|i| (ItemId(i), format!("Movie {i}")))
            .collect();
        Conversation {
            id: "c".into(),
            turns: turns.iter().map(|(r, t)| Turn::parse(*r, t, &known).0).collect(),
            mentioned_items: known,
        }
    }

    fn vocab_of(c: &Conversation) -> Vocabulary {
        build_vocabulary(std::slice::from_ref(c), 1)
    }

    #[test]
    fn masking_examples() {
        let c = conv(&[
            (Role::Recommender, "i recommend @42 !"),
            (Role::Recommender, "no mentions here"),
            (Role::Recommender, "@1 and @2"),
        ]);
        let (t, s) = mask_tokens(&c.turns[0]);
        assert_eq!(t, ["i", "recommend", "[ITEM]", "!"]);
        assert_eq!(s, [ItemId(42)]);
        let (t, s) = mask_tokens(&c.turns[1]);
        assert_eq!(t, c.turns[1].tokens);
        assert!(s.is_empty());
        let (t, s) = mask_tokens(&c.turns[2]);
        assert_eq!(t, ["[ITEM]", "and", "[ITEM]"]);
        assert_eq!(s, [ItemId(1), ItemId(2)]);

        let v = vocab_of(&c);
        let (ids, _) = mask_items(&c.turns[2], &v);
        assert_eq!(ids[0], ITEM);
        assert_eq!(ids[2], ITEM);
    }

    #[test]
    fn unmask_round_trips() {
        let c = conv(&[(Role::Seeker, "@1 then @2 , or @42 ?")]);
        let (t, s) = mask_tokens(&c.turns[0]);
        assert_eq!(unmask(&t, &s), c.turns[0].tokens);
    }

    #[test]
    fn example_counts() {
        let c = conv(&[(Role::Seeker, "hi"), (Role::Recommender, "try @42")]);
        let (ex, _) = make_examples(&c, &vocab_of(&c), 256, &ItemOnlyLinker);
        assert_eq!(ex.len(), 1);
        let e = &ex[0];
        assert_eq!(e.slot_items, [ItemId(42)]);
        assert_eq!(e.slot_count(), 1);
        assert_eq!(e.target_ids.first(), Some(&BOS));
        assert_eq!(e.target_ids.last(), Some(&EOS));
        assert_eq!(e.context_ids[0], SEEKER);

        let c = conv(&[(Role::Seeker, "hi"), (Role::Seeker, "anyone ?")]);
        let (ex, _) = make_examples(&c, &vocab_of(&c), 256, &ItemOnlyLinker);
        assert!(ex.is_empty());

        // A leading recommender turn has no history and yields no example.
        let c = conv(&[(Role::Recommender, "hello"), (Role::Seeker, "hi")]);
        assert!(make_examples(&c, &vocab_of(&c), 256, &ItemOnlyLinker).0.is_empty());
    }

    #[test]
    fn context_is_left_truncated() {
        let c = conv(&[
            (Role::Seeker, "one two three four five"),
            (Role::Recommender, "six seven @1"),
            (Role::Seeker, "eight"),
            (Role::Recommender, "nine"),
        ]);
        let v = vocab_of(&c);
        let (ex, _) = make_examples(&c, &v, 4, &ItemOnlyLinker);
        assert_eq!(ex.len(), 2);
        let last = &ex[1];
        assert_eq!(last.context_ids.len(), 4);
        // newest tokens survive: ... [ITEM] [SEEKER] eight
        assert_eq!(last.context_ids[1], ITEM);
        assert_eq!(last.context_ids[2], SEEKER);
        assert_eq!(last.context_ids[3], v.id("eight"));
        assert_eq!(last.context_entities, ["1"]);
        assert_eq!(ex[0].context_ids.len(), 4);
        assert_ne!(ex[0].context_ids[0], RECOMMENDER);
    }

    #[test]
    fn empty_targets_are_dropped_and_counted() {
        let c = conv(&[(Role::Seeker, "hi"), (Role::Recommender, "   ")]);
        let (ex, stats) = make_examples(&c, &vocab_of(&c), 256, &ItemOnlyLinker);
        assert!(ex.is_empty());
        assert_eq!(stats.dropped_empty, 1);
    }
}
