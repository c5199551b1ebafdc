//! Automatic evaluation over generated responses.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, ItemId};
use crate::error::{Error, Result};
use crate::model::{Model, Prepared, Reply};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotRecord {
    pub position: usize,
    /// Selector probability per candidate, aligned with `candidates`.
    pub distribution: Vec<f64>,
    /// Candidate ids ranked by the recommender, best first.
    pub candidates: Vec<ItemId>,
    pub item: ItemId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedRecord {
    pub conversation_id: String,
    pub turn_index: usize,
    /// Response tokens after slot filling; filled items appear as `@id`.
    pub response: Vec<String>,
    pub slots: Vec<SlotRecord>,
    pub ground_truth: Vec<ItemId>,
    /// Teacher-forced NLL of each reference token.
    pub nlls: Vec<f64>,
}

impl GeneratedRecord {
    pub fn from_reply(
        conversation_id: &str,
        turn_index: usize,
        reply: &Reply,
        ground_truth: Vec<ItemId>,
        nlls: Vec<f64>,
    ) -> Self {
        GeneratedRecord {
            conversation_id: conversation_id.to_string(),
            turn_index,
            response: reply.tokens.clone(),
            slots: reply
                .slots
                .iter()
                .map(|s| SlotRecord {
                    position: s.position,
                    distribution: s.probabilities.clone(),
                    candidates: s.candidates.clone(),
                    item: s.item,
                })
                .collect(),
            ground_truth,
            nlls,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let at = || format!("record {}#{}", self.conversation_id, self.turn_index);
        for (i, s) in self.slots.iter().enumerate() {
            let expected = format!("@{}", s.item);
            if self.response.get(s.position) != Some(&expected) {
                return Err(Error::contract(format!(
                    "{}: slot {i} does not match response position {}",
                    at(),
                    s.position
                )));
            }
            if s.distribution.len() != s.candidates.len() {
                return Err(Error::contract(format!(
                    "{}: slot {i} distribution and candidates differ in length",
                    at()
                )));
            }
        }
        if self.nlls.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::contract(format!("{}: negative or NaN token NLL", at())));
        }
        Ok(())
    }

    pub fn filled_items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.slots.iter().map(|s| s.item)
    }
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<GeneratedRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Some(r) = parse_record_line(&line)? {
            out.push(r);
        }
    }
    Ok(out)
}

/// Parses one JSONL line; blank lines yield `None`.
pub fn parse_record_line(line: &str) -> Result<Option<GeneratedRecord>> {
    if line.trim().is_empty() {
        return Ok(None);
    }
    let r: GeneratedRecord = serde_json::from_str(line)?;
    r.validate()?;
    Ok(Some(r))
}

pub fn write_records(path: impl AsRef<Path>, records: &[GeneratedRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `exp` of the mean per-token NLL over every record.
pub fn perplexity(records: &[GeneratedRecord]) -> Result<f64> {
    let (sum, n) = records
        .iter()
        .flat_map(|r| &r.nlls)
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(Error::contract("perplexity needs at least one scored token"));
    }
    Ok((sum / n as f64).exp())
}

/// Distinct n-grams over words, per sentence, averaged over sentences.
pub fn dist_n(records: &[GeneratedRecord], n: usize) -> f64 {
    if records.is_empty() || n == 0 {
        return 0.0;
    }
    let total: f64 = records.iter().map(|r| sentence_dist(&r.response, n)).sum();
    total / records.len() as f64
}

fn sentence_dist(words: &[String], n: usize) -> f64 {
    if words.len() < n {
        return 0.0;
    }
    let grams: HashSet<&[String]> = words.windows(n).collect();
    grams.len() as f64 / words.len() as f64
}

fn item_turns(records: &[GeneratedRecord]) -> impl Iterator<Item = &GeneratedRecord> {
    records.iter().filter(|r| !r.ground_truth.is_empty())
}

/// Percent of turns with a ground-truth item whose response (k = 1) or
/// some slot's top-k candidates (k > 1) contain one of them.
pub fn rer_at_k(records: &[GeneratedRecord], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for r in item_turns(records) {
        total += 1;
        let hit = if k == 1 {
            r.filled_items().any(|i| r.ground_truth.contains(&i))
        } else {
            let mut any = false;
            for (i, s) in r.slots.iter().enumerate() {
                if s.candidates.len() < k {
                    return Err(Error::contract(format!(
                        "record {}#{} slot {i} has {} candidates, fewer than k = {k}",
                        r.conversation_id,
                        r.turn_index,
                        s.candidates.len()
                    )));
                }
                any |= s.candidates[..k].iter().any(|c| r.ground_truth.contains(c));
            }
            any
        };
        hits += usize::from(hit);
    }
    Ok(percent(hits, total))
}

/// Percent of responses with at least one filled item.
pub fn item_ratio(records: &[GeneratedRecord]) -> f64 {
    percent(records.iter().filter(|r| !r.slots.is_empty()).count(), records.len())
}

/// Percent of response tokens that are filled items.
pub fn item_token_ratio(records: &[GeneratedRecord]) -> f64 {
    let items: usize = records.iter().map(|r| r.slots.len()).sum();
    let words: usize = records.iter().map(|r| r.response.len()).sum();
    percent(items, words)
}

fn distinct_items(records: &[GeneratedRecord]) -> BTreeSet<ItemId> {
    records.iter().flat_map(GeneratedRecord::filled_items).collect()
}

pub fn item_diversity(records: &[GeneratedRecord], catalog: &Catalog) -> f64 {
    percent(distinct_items(records).len(), catalog.len())
}

pub fn novel_ratio(records: &[GeneratedRecord], novel: &BTreeSet<ItemId>) -> f64 {
    let emitted = distinct_items(records);
    percent(novel.iter().filter(|i| emitted.contains(i)).count(), novel.len())
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Denominators {
    /// Scored tokens behind PPL.
    pub tokens: usize,
    /// Responses (sentences) behind Dist-n and Item Ratio.
    pub responses: usize,
    /// Turns with at least one ground-truth item, behind ReR@k.
    pub item_turns: usize,
    /// Response words behind the per-token item ratio.
    pub words: usize,
    pub catalog: usize,
    pub novel_items: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub ppl: f64,
    pub dist2: f64,
    pub dist3: f64,
    pub dist4: f64,
    pub rer1: f64,
    /// `None` when some slot has fewer than 10 candidates.
    pub rer10: Option<f64>,
    pub rer50: Option<f64>,
    pub item_ratio: f64,
    pub item_token_ratio: f64,
    pub item_diversity: f64,
    /// `None` without a novel item set.
    pub novel_ratio: Option<f64>,
    pub counts: Denominators,
}

pub fn report(records: &[GeneratedRecord], catalog: &Catalog, novel: &BTreeSet<ItemId>) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::contract("cannot report on zero records"));
    }
    let optional_rer = |k| match rer_at_k(records, k) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("ReR@{k} undefined: {e}");
            None
        }
    };
    Ok(MetricsReport {
        ppl: perplexity(records)?,
        dist2: dist_n(records, 2),
        dist3: dist_n(records, 3),
        dist4: dist_n(records, 4),
        rer1: rer_at_k(records, 1)?,
        rer10: optional_rer(10),
        rer50: optional_rer(50),
        item_ratio: item_ratio(records),
        item_token_ratio: item_token_ratio(records),
        item_diversity: item_diversity(records, catalog),
        novel_ratio: (!novel.is_empty()).then(|| novel_ratio(records, novel)),
        counts: Denominators {
            tokens: records.iter().map(|r| r.nlls.len()).sum(),
            responses: records.len(),
            item_turns: item_turns(records).count(),
            words: records.iter().map(|r| r.response.len()).sum(),
            catalog: catalog.len(),
            novel_items: novel.len(),
        },
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        let c = &self.counts;
        let rows = [
            ("PPL", format!("{:.4}", self.ppl), format!("{} tokens", c.tokens)),
            (
                "Dist-2",
                format!("{:.4}", self.dist2),
                format!("{} responses", c.responses),
            ),
            (
                "Dist-3",
                format!("{:.4}", self.dist3),
                format!("{} responses", c.responses),
            ),
            (
                "Dist-4",
                format!("{:.4}", self.dist4),
                format!("{} responses", c.responses),
            ),
            (
                "ReR@1",
                format!("{:.2}", self.rer1),
                format!("{} item turns", c.item_turns),
            ),
            ("ReR@10", opt(self.rer10), format!("{} item turns", c.item_turns)),
            ("ReR@50", opt(self.rer50), format!("{} item turns", c.item_turns)),
            (
                "Item Ratio",
                format!("{:.2}", self.item_ratio),
                format!("{} responses", c.responses),
            ),
            (
                "Item Ratio/token",
                format!("{:.2}", self.item_token_ratio),
                format!("{} words", c.words),
            ),
            (
                "Item Diversity",
                format!("{:.2}", self.item_diversity),
                format!("{} catalog items", c.catalog),
            ),
            (
                "Novel Ratio",
                opt(self.novel_ratio),
                format!("{} novel items", c.novel_items),
            ),
        ];
        let mut out = String::new();
        for (name, value, den) in rows {
            let _ = writeln!(out, "{name:<18}{value:>10}   {den}");
        }
        out
    }
}

/// Generates a response for every example and scores the reference under
/// teacher forcing.
pub fn generate_records(model: &Model, examples: &[Prepared]) -> Result<Vec<GeneratedRecord>> {
    let table = model.inference_table()?;
    examples
        .iter()
        .map(|p| {
            let reply = model.reply_to_context(&table, &p.example.context_ids, &p.mentions)?;
            let nlls = model.token_nlls(&table, p)?;
            Ok(GeneratedRecord::from_reply(
                &p.example.conversation_id,
                p.example.turn_index,
                &reply,
                p.example.slot_items.clone(),
                nlls,
            ))
        })
        .collect()
}
