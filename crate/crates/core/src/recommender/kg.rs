use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize::{mention_id, tokenize};
use crate::corpus::{Catalog, MentionLinker, Turn};
use crate::error::{Error, Result};
use crate::numerics::Adjacency;

/// Item-oriented knowledge graph. Catalog items occupy the first entity
/// indices in catalog order; attribute entities follow in key order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    relations: Vec<String>,
    /// `(head, relation, tail)` indices.
    edges: Vec<(usize, usize, usize)>,
    num_items: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

/// Parses `head<TAB>relation<TAB>tail` lines. Blank lines are ignored.
pub fn parse_triples(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        match parts.as_slice() {
            [h, r, t] if !h.is_empty() && !r.is_empty() && !t.is_empty() => {
                out.push((h.to_string(), r.to_string(), t.to_string()))
            }
            _ => {
                return Err(Error::contract(format!(
                    "kg line {}: expected head<TAB>relation<TAB>tail",
                    n + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn read_triples(path: impl AsRef<Path>) -> Result<Vec<(String, String, String)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triples(&text)
}

impl KnowledgeGraph {
    pub fn build(catalog: &Catalog, triples: &[(String, String, String)]) -> Self {
        let mut entities: Vec<String> = catalog.ids().iter().map(|id| id.to_string()).collect();
        let items: BTreeSet<&str> = entities.iter().map(String::as_str).collect();
        let mut others = BTreeSet::new();
        let mut relations = BTreeSet::new();
        for (h, r, t) in triples {
            for e in [h, t] {
                if !items.contains(e.as_str()) {
                    others.insert(e.clone());
                }
            }
            relations.insert(r.clone());
        }
        let num_items = entities.len();
        entities.extend(others);
        let relations: Vec<String> = relations.into_iter().collect();
        let mut kg = KnowledgeGraph {
            entities,
            relations,
            edges: Vec::new(),
            num_items,
            index: HashMap::new(),
        };
        kg.reindex();
        let rel_index: HashMap<&str, usize> = kg.relations.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
        let mut edges: Vec<(usize, usize, usize)> = triples
            .iter()
            .map(|(h, r, t)| (kg.index[h], rel_index[r.as_str()], kg.index[t]))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        kg.edges = edges;
        kg
    }

    fn reindex(&mut self) {
        self.index = self.entities.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
    }

    /// Restores the lookup index after deserialization.
    pub fn restored(mut self) -> Self {
        self.reindex();
        self
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn edges(&self) -> &[(usize, usize, usize)] {
        &self.edges
    }

    pub fn entity(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Neighbour lists for every relation in both directions: entry `2r`
    /// maps heads to tails, `2r + 1` maps tails back to heads.
    pub fn adjacency(&self) -> Vec<Adjacency> {
        let n = self.entities.len();
        let mut adj = vec![vec![Vec::new(); n]; 2 * self.relations.len()];
        for &(h, r, t) in &self.edges {
            adj[2 * r][h].push(t);
            adj[2 * r + 1][t].push(h);
        }
        adj.into_iter().map(Arc::new).collect()
    }

    /// Surface phrase of a non-item entity: the key after its last `:`,
    /// underscores read as spaces.
    pub fn attribute_phrase(key: &str) -> Vec<String> {
        let name = key.rsplit(':').next().unwrap_or(key).replace('_', " ");
        tokenize(&name)
    }
}

fn strip_year(title: &str) -> &str {
    let t = title.trim_end();
    if let Some(open) = t.rfind('(') {
        let inner = &t[open + 1..];
        if inner.len() == 5 && inner.ends_with(')') && inner[..4].bytes().all(|b| b.is_ascii_digit()) {
            return t[..open].trim_end();
        }
    }
    t
}

/// Finds entity mentions in token streams: `@id` items plus longest-match
/// attribute phrases, and optionally catalog titles.
#[derive(Clone, Debug)]
pub struct EntityLinker {
    phrases: HashMap<Vec<String>, String>,
    max_len: usize,
    items: BTreeSet<String>,
}

impl EntityLinker {
    pub fn new(kg: &KnowledgeGraph, titles: Option<&Catalog>) -> Self {
        let mut phrases = HashMap::new();
        for key in &kg.entities[kg.num_items..] {
            let p = KnowledgeGraph::attribute_phrase(key);
            if !p.is_empty() {
                phrases.entry(p).or_insert_with(|| key.clone());
            }
        }
        if let Some(cat) = titles {
            for (id, title) in cat.iter() {
                let p = tokenize(strip_year(title));
                if !p.is_empty() {
                    phrases.insert(p, id.to_string());
                }
            }
        }
        let max_len = phrases.keys().map(Vec::len).max().unwrap_or(0);
        let items = kg.entities[..kg.num_items].iter().cloned().collect();
        EntityLinker {
            phrases,
            max_len,
            items,
        }
    }

    pub fn link_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        self.link_with_spans(tokens).into_iter().map(|(_, _, k)| k).collect()
    }

    /// Mentions as `(start, end, entity key)` token spans, left to right.
    pub fn link_with_spans<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<(usize, usize, String)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            if let Some(id) = mention_id(tokens[i].as_ref()) {
                let key = id.to_string();
                if self.items.contains(&key) {
                    out.push((i, i + 1, key));
                }
                i += 1;
                continue;
            }
            let mut matched = None;
            for len in (1..=self.max_len.min(tokens.len() - i)).rev() {
                let window: Vec<String> = tokens[i..i + len].iter().map(|t| t.as_ref().to_string()).collect();
                if let Some(key) = self.phrases.get(&window) {
                    matched = Some((len, key.clone()));
                    break;
                }
            }
            match matched {
                Some((len, key)) => {
                    out.push((i, i + len, key));
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }
}

impl MentionLinker for EntityLinker {
    fn link(&self, turn: &Turn) -> Vec<String> {
        self.link_tokens(&turn.tokens)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::corpus::ItemId;

    fn catalog() -> Catalog {
        Catalog::new(BTreeMap::from([
            (ItemId(7), "Super Troopers (2001)".to_string()),
            (ItemId(9), "Borat".to_string()),
        ]))
    }

    #[test]
    fn parses_triples() {
        let t = parse_triples("7\tgenre\tgenre:comedy\n\n9\tgenre\tgenre:comedy\r\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].2, "genre:comedy");
        assert!(parse_triples("a\tb").is_err());
        assert!(parse_triples("a\t\tc").is_err());
    }

    #[test]
    fn items_come_first_and_adjacency_is_bidirectional() {
        let triples =
            parse_triples("7\tgenre\tgenre:comedy\n9\tgenre\tgenre:comedy\n9\tactor\tperson:sacha_baron_cohen")
                .unwrap();
        let kg = KnowledgeGraph::build(&catalog(), &triples);
        assert_eq!(kg.num_items(), 2);
        assert_eq!(&kg.entities()[..2], ["7", "9"]);
        assert_eq!(kg.num_entities(), 4);
        let adj = kg.adjacency();
        assert_eq!(adj.len(), 4);
        let comedy = kg.entity("genre:comedy").unwrap();
        let genre = kg.relations().iter().position(|r| r == "genre").unwrap();
        assert_eq!(adj[2 * genre][0], vec![comedy]);
        assert_eq!(adj[2 * genre + 1][comedy], vec![0, 1]);
    }

    #[test]
    fn links_items_attributes_and_titles() {
        let triples = parse_triples("9\tactor\tperson:sacha_baron_cohen\n7\tgenre\tgenre:comedy").unwrap();
        let kg = KnowledgeGraph::build(&catalog(), &triples);
        let plain = EntityLinker::new(&kg, None);
        let toks = tokenize("I loved @9 and Sacha Baron Cohen, also @5 comedy");
        assert_eq!(
            plain.link_tokens(&toks),
            ["9", "person:sacha_baron_cohen", "genre:comedy"]
        );
        let live = EntityLinker::new(&kg, Some(&catalog()));
        let toks = tokenize("have you seen super troopers or BORAT?");
        assert_eq!(live.link_tokens(&toks), ["7", "9"]);
    }
}
