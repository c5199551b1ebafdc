use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Conversation, ItemId, Role, Turn};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct RawMessage {
    #[serde(rename = "senderWorkerId")]
    sender: Value,
    text: String,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    #[serde(rename = "conversationId", default)]
    conversation_id: Option<Value>,
    messages: Vec<RawMessage>,
    #[serde(rename = "movieMentions", default)]
    movie_mentions: Value,
    #[serde(rename = "initiatorWorkerId")]
    initiator: Value,
    #[serde(rename = "respondentWorkerId", default)]
    respondent: Option<Value>,
}

/// Line-format record as written by [`to_redial_line`].
#[derive(Serialize)]
struct OutRecord<'a> {
    #[serde(rename = "conversationId")]
    conversation_id: &'a str,
    messages: Vec<OutMessage<'a>>,
    #[serde(rename = "movieMentions")]
    movie_mentions: BTreeMap<String, &'a str>,
    #[serde(rename = "initiatorWorkerId")]
    initiator: u32,
    #[serde(rename = "respondentWorkerId")]
    respondent: u32,
}

#[derive(Serialize)]
struct OutMessage<'a> {
    #[serde(rename = "senderWorkerId")]
    sender: u32,
    text: &'a str,
}

/// Warnings accumulated while ingesting a file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub lines: usize,
    pub malformed_lines: usize,
    pub unknown_mentions: usize,
    pub utterances: usize,
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_mentions(v: &Value) -> Result<BTreeMap<ItemId, String>> {
    let mut out = BTreeMap::new();
    match v {
        Value::Null => {}
        Value::Array(a) if a.is_empty() => {}
        Value::Object(map) => {
            for (k, title) in map {
                let id: u64 = k
                    .parse()
                    .map_err(|_| Error::contract(format!("movieMentions key {k:?} is not an id")))?;
                let title = match title {
                    Value::String(s) => s.trim().to_string(),
                    Value::Null => String::new(),
                    other => other.to_string(),
                };
                out.insert(ItemId(id), title);
            }
        }
        other => {
            return Err(Error::contract(format!(
                "movieMentions must be an object, found {other}"
            )))
        }
    }
    Ok(out)
}

/// Parses one ReDial JSON line. Returns the conversation and the count of
/// `@id` tokens that did not match a `movieMentions` key.
pub fn parse_redial_line(line: &str, fallback_id: &str) -> Result<(Conversation, usize)> {
    let raw: RawRecord = serde_json::from_str(line)?;
    let initiator =
        id_string(&raw.initiator).ok_or_else(|| Error::contract("initiatorWorkerId must be a string or number"))?;
    let mentioned_items = parse_mentions(&raw.movie_mentions)?;
    let id = raw
        .conversation_id
        .as_ref()
        .and_then(id_string)
        .unwrap_or_else(|| fallback_id.to_string());
    let _ = raw.respondent;
    let mut unknown = 0;
    let mut turns = Vec::with_capacity(raw.messages.len());
    for m in &raw.messages {
        let sender =
            id_string(&m.sender).ok_or_else(|| Error::contract("senderWorkerId must be a string or number"))?;
        let role = if sender == initiator {
            Role::Seeker
        } else {
            Role::Recommender
        };
        let (turn, u) = Turn::parse(role, &m.text, &mentioned_items);
        unknown += u;
        turns.push(turn);
    }
    Ok((
        Conversation {
            id,
            turns,
            mentioned_items,
        },
        unknown,
    ))
}

/// Parses ReDial-format text; malformed lines are skipped and counted.
pub fn read_redial<R: BufRead>(reader: R) -> Result<(Vec<Conversation>, IngestStats)> {
    let mut stats = IngestStats::default();
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<redial>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        match parse_redial_line(&line, &format!("line-{}", n + 1)) {
            Ok((conv, unknown)) => {
                stats.unknown_mentions += unknown;
                stats.utterances += conv.turns.len();
                out.push(conv);
            }
            Err(e) => {
                warn!("skipping malformed line {}: {e}", n + 1);
                stats.malformed_lines += 1;
            }
        }
    }
    if stats.malformed_lines > 0 || stats.unknown_mentions > 0 {
        warn!(
            "ingest: {} malformed lines, {} unresolved @id mentions",
            stats.malformed_lines, stats.unknown_mentions
        );
    }
    Ok((out, stats))
}

pub fn ingest_redial(path: impl AsRef<Path>) -> Result<(Vec<Conversation>, IngestStats)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_redial(BufReader::new(f))
}

/// Serializes a conversation back into one ReDial JSON line. Seeker turns are
/// attributed to worker 1, recommender turns to worker 2.
pub fn to_redial_line(conv: &Conversation) -> String {
    let rec = OutRecord {
        conversation_id: &conv.id,
        messages: conv
            .turns
            .iter()
            .map(|t| OutMessage {
                sender: match t.role {
                    Role::Seeker => 1,
                    Role::Recommender => 2,
                },
                text: &t.raw_text,
            })
            .collect(),
        movie_mentions: conv
            .mentioned_items
            .iter()
            .map(|(id, t)| (id.to_string(), t.as_str()))
            .collect(),
        initiator: 1,
        respondent: 2,
    };
    serde_json::to_string(&rec).expect("record serializes")
}

pub fn write_redial(path: impl AsRef<Path>, convs: &[Conversation]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for c in convs {
        writeln!(w, "{}", to_redial_line(c)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"movieMentions": {"111776": "Super Troopers (2001)"}, "respondentWorkerId": 2, "messages": [{"text": "Hi! I like comedies", "senderWorkerId": 1}, {"text": "You should watch @111776", "senderWorkerId": 2}, {"text": "seen @999 already", "senderWorkerId": 1}], "conversationId": "20001", "initiatorWorkerId": 1}"#;

    #[test]
    fn parses_mentions_and_roles() {
        let (c, unknown) = parse_redial_line(LINE, "x").unwrap();
        assert_eq!(c.id, "20001");
        assert_eq!(c.turns.len(), 3);
        assert_eq!(c.turns[0].role, Role::Seeker);
        assert_eq!(c.turns[1].role, Role::Recommender);
        assert_eq!(c.turns[1].item_mentions, vec![(3, ItemId(111776))]);
        assert_eq!(c.turns[1].tokens[3], "@111776");
        assert_eq!(unknown, 1);
        assert!(c.turns[2].item_mentions.is_empty());
        assert_eq!(c.mentioned_items[&ItemId(111776)], "Super Troopers (2001)");
    }

    #[test]
    fn empty_mentions_in_either_encoding() {
        for mm in ["{}", "[]"] {
            let line = format!(
                r#"{{"movieMentions": {mm}, "messages": [{{"text": "hi", "senderWorkerId": "a"}}], "initiatorWorkerId": "a", "respondentWorkerId": "b"}}"#
            );
            let (c, _) = parse_redial_line(&line, "fallback").unwrap();
            assert!(c.mentioned_items.is_empty());
            assert_eq!(c.id, "fallback");
        }
    }

    #[test]
    fn malformed_lines_are_skipped_and_counted() {
        let text = format!("{LINE}\nnot json\n{{\"messages\": 3}}\n\n{LINE}\n");
        let (convs, stats) = read_redial(text.as_bytes()).unwrap();
        assert_eq!(convs.len(), 2);
        assert_eq!(stats.malformed_lines, 2);
        assert_eq!(stats.unknown_mentions, 2);
        assert_eq!(stats.utterances, 6);
    }

    #[test]
    fn written_line_parses_back() {
        let (c, _) = parse_redial_line(LINE, "x").unwrap();
        let (back, _) = parse_redial_line(&to_redial_line(&c), "y").unwrap();
        assert_eq!(back, c);
    }
}
