//! Knowledge-graph recommender: relational propagation over entity
//! embeddings, self-attentive user encoding and dot-product item ranking.

mod kg;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use kg::{parse_triples, read_triples, EntityLinker, KnowledgeGraph};

use crate::corpus::{Catalog, ItemId, MaskedExample};
use crate::error::{Error, Result};
use crate::numerics::{init, AdamState, Adjacency, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecommenderConfig {
    pub entity_dim: usize,
    pub layers: usize,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        RecommenderConfig {
            entity_dim: 128,
            layers: 1,
        }
    }
}

#[derive(Clone, Debug)]
struct PropagationLayer {
    self_weight: ParamId,
    relation_weights: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub struct KgRecommender {
    entity_table: ParamId,
    layers: Vec<PropagationLayer>,
    attn_proj: ParamId,
    attn_vec: ParamId,
    default_user: ParamId,
    adjacency: Vec<Adjacency>,
    num_items: usize,
    dim: usize,
}

/// Top-K items for one turn with their embeddings (`H_cand`).
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    /// Catalog indices in rank order.
    pub items: Vec<usize>,
    pub ids: Vec<ItemId>,
    /// Recommender probabilities, non-increasing.
    pub scores: Vec<f64>,
    /// `K × entity_dim`.
    pub embeddings: Tensor,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn position(&self, item: usize) -> Option<usize> {
        self.items.iter().position(|&i| i == item)
    }

    /// Natural-log recommender scores, floored to stay finite.
    pub fn log_scores(&self) -> Vec<f64> {
        self.scores.iter().map(|p| p.max(1e-300).ln()).collect()
    }

    /// Reorders candidates by `perm` (new position `j` holds old `perm[j]`).
    pub fn permuted(&self, perm: &[usize]) -> CandidateSet {
        let d = self.embeddings.cols();
        let rows: Vec<f64> = perm.iter().flat_map(|&p| self.embeddings.row(p).to_vec()).collect();
        CandidateSet {
            items: perm.iter().map(|&p| self.items[p]).collect(),
            ids: perm.iter().map(|&p| self.ids[p]).collect(),
            scores: perm.iter().map(|&p| self.scores[p]).collect(),
            embeddings: Tensor::new(vec![perm.len(), d], rows).expect("permutation keeps shape"),
        }
    }
}

/// Indices of the `k` largest scores, ties broken by ascending index.
pub fn top_k_candidates(distribution: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > distribution.len() {
        return Err(Error::contract(format!(
            "candidate count {k} must be in 1..={}",
            distribution.len()
        )));
    }
    let mut order: Vec<usize> = (0..distribution.len()).collect();
    order.sort_by(|&a, &b| {
        distribution[b]
            .partial_cmp(&distribution[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

impl KgRecommender {
    pub fn new<R: Rng>(params: &mut ParamStore, kg: &KnowledgeGraph, cfg: &RecommenderConfig, rng: &mut R) -> Self {
        let d = cfg.entity_dim;
        let entity_table = params.add(
            "recommender.entity_table",
            init::normal(rng, &[kg.num_entities(), d], init::EMBEDDING_STD),
        );
        let adjacency = kg.adjacency();
        let layers = (0..cfg.layers)
            .map(|l| PropagationLayer {
                self_weight: params.add(format!("recommender.layer{l}.self"), init::xavier_uniform(rng, d, d)),
                relation_weights: (0..adjacency.len())
                    .map(|r| params.add(format!("recommender.layer{l}.rel{r}"), init::xavier_uniform(rng, d, d)))
                    .collect(),
            })
            .collect();
        let attn_proj = params.add("recommender.attn_proj", init::xavier_uniform(rng, d, d));
        let attn_vec = params.add("recommender.attn_vec", init::xavier_uniform(rng, d, 1));
        let default_user = params.add(
            "recommender.default_user",
            init::normal(rng, &[1, d], init::EMBEDDING_STD),
        );
        KgRecommender {
            entity_table,
            layers,
            attn_proj,
            attn_vec,
            default_user,
            adjacency,
            num_items: kg.num_items(),
            dim: d,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.entity_table];
        for l in &self.layers {
            ids.push(l.self_weight);
            ids.extend(&l.relation_weights);
        }
        ids.extend([self.attn_proj, self.attn_vec, self.default_user]);
        ids
    }

    pub fn entity_table_param(&self) -> ParamId {
        self.entity_table
    }

    pub fn layer_params(&self, layer: usize) -> (ParamId, &[ParamId]) {
        let l = &self.layers[layer];
        (l.self_weight, &l.relation_weights)
    }

    pub fn attention_params(&self) -> (ParamId, ParamId, ParamId) {
        (self.attn_proj, self.attn_vec, self.default_user)
    }

    /// Applies the first `layers` propagation layers to `table`:
    /// `h' = ReLU(h·W_self + Σ_r mean_{N_r(e)} h·W_r)`.
    pub fn propagate(&self, tape: &mut Tape<'_>, table: Var, layers: usize) -> Result<Var> {
        if layers > self.layers.len() {
            return Err(Error::contract(format!(
                "requested {layers} propagation layers, model has {}",
                self.layers.len()
            )));
        }
        let mut h = table;
        for layer in &self.layers[..layers] {
            let w0 = tape.param(layer.self_weight);
            let mut acc = tape.matmul(h, w0)?;
            for (adj, &wr) in self.adjacency.iter().zip(&layer.relation_weights) {
                if adj.iter().all(Vec::is_empty) {
                    continue;
                }
                let agg = tape.sparse_mean(h, adj)?;
                let w = tape.param(wr);
                let msg = tape.matmul(agg, w)?;
                acc = tape.add(acc, msg)?;
            }
            h = tape.relu(acc);
        }
        Ok(h)
    }

    /// Fully propagated entity table on the tape.
    pub fn table(&self, tape: &mut Tape<'_>) -> Result<Var> {
        let raw = tape.param(self.entity_table);
        self.propagate(tape, raw, self.layers.len())
    }

    /// Propagated table values, for use as a constant when frozen.
    pub fn materialize(&self, params: &ParamStore) -> Result<Tensor> {
        let mut tape = Tape::new(params);
        let t = self.table(&mut tape)?;
        Ok(tape.to_tensor(t))
    }

    /// Self-attentive pooling of mentioned entity rows into `p_u` (`1 × d`).
    /// No mentions yields the learned default vector.
    pub fn encode_user(&self, tape: &mut Tape<'_>, table: Var, mentions: &[usize]) -> Result<Var> {
        if mentions.is_empty() {
            return Ok(tape.param(self.default_user));
        }
        let h = tape.gather(table, mentions)?;
        let wa = tape.param(self.attn_proj);
        let v = tape.param(self.attn_vec);
        let proj = tape.matmul(h, wa)?;
        let act = tape.tanh(proj);
        let scores = tape.matmul(act, v)?;
        let scores = tape.reshape(scores, &[1, mentions.len()])?;
        let weights = tape.softmax(scores);
        tape.matmul(weights, h)
    }

    /// `p_u · h_m` for every catalog item (`1 × n_items`).
    pub fn item_logits(&self, tape: &mut Tape<'_>, table: Var, user: Var) -> Result<Var> {
        let items = tape.slice_rows(table, 0, self.num_items)?;
        tape.matmul_t(user, items)
    }

    /// Softmax over every catalog item of `p_u · h_m`.
    pub fn rank_items(&self, tape: &mut Tape<'_>, table: Var, user: Var) -> Result<Var> {
        if self.num_items == 0 {
            return Err(Error::contract("cannot rank an empty catalog"));
        }
        let logits = self.item_logits(tape, table, user)?;
        Ok(tape.softmax(logits))
    }

    /// Ranks items for `mentions` and returns the top `k`. When `force` names
    /// an item outside the top `k`, it replaces the last candidate.
    pub fn candidates(
        &self,
        tape: &mut Tape<'_>,
        table: Var,
        mentions: &[usize],
        k: usize,
        catalog: &Catalog,
        force: Option<usize>,
    ) -> Result<(CandidateSet, bool)> {
        let user = self.encode_user(tape, table, mentions)?;
        let dist = self.rank_items(tape, table, user)?;
        let dist = tape.value(dist).to_vec();
        let mut items = top_k_candidates(&dist, k)?;
        let mut forced = false;
        if let Some(gt) = force {
            if !items.contains(&gt) {
                *items.last_mut().expect("k >= 1") = gt;
                forced = true;
            }
        }
        let table_vals = tape.value(table);
        let d = self.dim;
        let mut rows = Vec::with_capacity(items.len() * d);
        for &i in &items {
            rows.extend_from_slice(&table_vals[i * d..(i + 1) * d]);
        }
        let set = CandidateSet {
            ids: items.iter().map(|&i| catalog.ids()[i]).collect(),
            scores: items.iter().map(|&i| dist[i]).collect(),
            embeddings: Tensor::new(vec![items.len(), d], rows)?,
            items,
        };
        Ok((set, forced))
    }
}

/// Maps entity keys to indices, dropping keys the graph does not know.
pub fn mention_indices(kg: &KnowledgeGraph, keys: &[String]) -> Vec<usize> {
    keys.iter().filter_map(|k| kg.entity(k)).collect()
}

/// One supervised recommendation: entities in the history and the item the
/// recommender went on to mention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecPair {
    pub mentions: Vec<usize>,
    pub item: usize,
}

/// One pair per filled slot whose item is in the catalog.
pub fn rec_pairs(examples: &[MaskedExample], kg: &KnowledgeGraph, catalog: &Catalog) -> Vec<RecPair> {
    let mut out = Vec::new();
    for ex in examples {
        let mentions = mention_indices(kg, &ex.context_entities);
        for &item in &ex.slot_items {
            if let Some(idx) = catalog.index_of(item) {
                out.push(RecPair {
                    mentions: mentions.clone(),
                    item: idx,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Stop after `patience` epochs whose mean loss improves by less than
    /// `tolerance` (relative).
    pub tolerance: f64,
    pub patience: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            max_epochs: 200,
            learning_rate: 1e-3,
            batch_size: 32,
            tolerance: 1e-3,
            patience: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PretrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub epochs: usize,
}

impl PretrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.step_losses.first().copied()
    }
}

fn pair_loss(
    rec: &KgRecommender,
    params: &ParamStore,
    batch: &[&RecPair],
) -> Result<(f64, crate::numerics::Gradients)> {
    let mut tape = Tape::new(params);
    let table = rec.table(&mut tape)?;
    let mut rows = Vec::with_capacity(batch.len());
    for p in batch {
        let u = rec.encode_user(&mut tape, table, &p.mentions)?;
        rows.push(rec.item_logits(&mut tape, table, u)?);
    }
    let logits = tape.concat_rows(&rows)?;
    let targets: Vec<usize> = batch.iter().map(|p| p.item).collect();
    let loss = tape.cross_entropy(logits, &targets, &vec![true; batch.len()])?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar_value(loss), grads))
}

/// Minimizes cross-entropy of the item ranking against ground-truth items
/// until the epoch loss stops improving.
pub fn pretrain_recommender(
    rec: &KgRecommender,
    params: &mut ParamStore,
    pairs: &[RecPair],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    if pairs.is_empty() {
        return Err(Error::contract(
            "recommender pretraining needs at least one supervised pair",
        ));
    }
    if let Some(p) = pairs.iter().find(|p| p.item >= rec.num_items) {
        return Err(Error::Index {
            context: "pretraining target item",
            index: p.item,
            len: rec.num_items,
        });
    }
    let mut adam = AdamState::new(params, cfg.learning_rate);
    let mut report = PretrainReport::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&RecPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (loss, grads) = pair_loss(rec, params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: report.step_losses.len() as u64,
                    batch_id: epoch as u64,
                });
            }
            report.step_losses.push(loss);
            total += loss * batch.len() as f64;
            params.accumulate(&grads);
            adam.step(params)?;
        }
        let mean = total / pairs.len() as f64;
        if let Some(&prev) = report.epoch_losses.last() {
            if prev - mean < cfg.tolerance * prev.abs() {
                stale += 1;
            } else {
                stale = 0;
            }
        }
        report.epoch_losses.push(mean);
        report.epochs = epoch + 1;
        if stale >= cfg.patience {
            break;
        }
    }
    Ok(report)
}

/// Fraction of pairs whose top-ranked item is the ground truth.
pub fn top1_accuracy(rec: &KgRecommender, params: &ParamStore, pairs: &[RecPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::new(params);
    let table = rec.table(&mut tape)?;
    let mut hits = 0;
    for p in pairs {
        let u = rec.encode_user(&mut tape, table, &p.mentions)?;
        let logits = rec.item_logits(&mut tape, table, u)?;
        if top_k_candidates(tape.value(logits), 1)?[0] == p.item {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    fn small() -> (ParamStore, KgRecommender, KnowledgeGraph) {
        let catalog = Catalog::new(BTreeMap::from([
            (ItemId(1), "a".to_string()),
            (ItemId(2), "b".to_string()),
        ]));
        let triples = vec![
            ("1".to_string(), "r".to_string(), "x".to_string()),
            ("2".to_string(), "r".to_string(), "x".to_string()),
        ];
        let kg = KnowledgeGraph::build(&catalog, &triples);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = RecommenderConfig {
            entity_dim: 3,
            layers: 1,
        };
        let rec = KgRecommender::new(&mut params, &kg, &cfg, &mut rng);
        (params, rec, kg)
    }

    #[test]
    fn zero_layers_is_identity() {
        let (params, rec, _) = small();
        let mut tape = Tape::new(&params);
        let raw = tape.param(rec.entity_table_param());
        let out = rec.propagate(&mut tape, raw, 0).unwrap();
        assert_eq!(out, raw);
        assert!(rec.propagate(&mut tape, raw, 2).is_err());
    }

    #[test]
    fn single_mention_and_duplicates_return_the_embedding() {
        let (params, rec, _) = small();
        let mut tape = Tape::new(&params);
        let table = rec.table(&mut tape).unwrap();
        let row = tape.value(table)[3..6].to_vec();
        let u = rec.encode_user(&mut tape, table, &[1]).unwrap();
        assert_eq!(tape.value(u), row.as_slice());
        let u = rec.encode_user(&mut tape, table, &[1, 1]).unwrap();
        assert_eq!(tape.value(u), row.as_slice());
    }

    #[test]
    fn empty_mentions_use_the_default_vector() {
        let (params, rec, _) = small();
        let mut tape = Tape::new(&params);
        let table = rec.table(&mut tape).unwrap();
        let u = rec.encode_user(&mut tape, table, &[]).unwrap();
        assert_eq!(tape.value(u), params.get(rec.attention_params().2).data());
    }

    #[test]
    fn top_k_orders_and_breaks_ties_by_index() {
        assert_eq!(top_k_candidates(&[0.5, 0.3, 0.2], 2).unwrap(), [0, 1]);
        assert_eq!(top_k_candidates(&[0.2, 0.5, 0.3], 3).unwrap(), [1, 2, 0]);
        assert_eq!(top_k_candidates(&[0.25; 4], 3).unwrap(), [0, 1, 2]);
        assert!(top_k_candidates(&[0.5, 0.5], 3).is_err());
        assert!(top_k_candidates(&[1.0], 0).is_err());
    }

    #[test]
    fn pretraining_without_pairs_is_rejected() {
        let (mut params, rec, _) = small();
        let err = pretrain_recommender(&rec, &mut params, &[], &PretrainConfig::default(), 0);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn forced_ground_truth_replaces_the_last_candidate() {
        let (params, rec, kg) = small();
        let catalog = Catalog::new(BTreeMap::from([
            (ItemId(1), "a".to_string()),
            (ItemId(2), "b".to_string()),
        ]));
        let mut tape = Tape::new(&params);
        let table = rec.table(&mut tape).unwrap();
        let x = kg.entity("x").unwrap();
        let (set, _) = rec.candidates(&mut tape, table, &[x], 1, &catalog, None).unwrap();
        let other = 1 - set.items[0];
        let (forced, was) = rec
            .candidates(&mut tape, table, &[x], 1, &catalog, Some(other))
            .unwrap();
        assert!(was);
        assert_eq!(forced.items, [other]);
        assert_eq!(forced.embeddings.shape(), &[1, 3]);
    }
}
