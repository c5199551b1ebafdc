//! NTRD model: template generator, item selector and the switching-network
//! baseline over a shared knowledge-graph recommender.

pub mod generator;
pub mod layers;
pub mod selector;
pub mod switching;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use generator::{argmax_token, EncoderState, GeneratorConfig, TeacherForced, TemplateGenerator, TemplateResult};
pub use selector::{choose_slots, ItemSelector, SelectorConfig, SlotFusionTrace};
pub use switching::{mix, SwitchingHead, NLL_FLOOR};

use crate::corpus::tokenize::{detokenize, mention_id, tokenize};
use crate::corpus::vocab::{BOS, EOS, ITEM, PAD};
use crate::corpus::{make_examples, mask_items, Catalog, Conversation, ItemId, MaskedExample, Role, Turn, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::recommender::{
    mention_indices, top_k_candidates, CandidateSet, EntityLinker, KgRecommender, KnowledgeGraph, RecommenderConfig,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Ntrd,
    Switching,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Ntrd => "ntrd",
            Variant::Switching => "switching",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub generator: GeneratorConfig,
    pub recommender: RecommenderConfig,
    pub selector: SelectorConfig,
    /// Candidate set size; capped at the catalog size.
    pub candidates: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Ntrd,
            generator: GeneratorConfig::default(),
            recommender: RecommenderConfig::default(),
            selector: SelectorConfig::default(),
            candidates: 100,
        }
    }
}

/// A masked example with its recommender inputs resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub example: MaskedExample,
    /// Entity indices mentioned in the context.
    pub mentions: Vec<usize>,
    /// Catalog index of each slot's ground-truth item, if known.
    pub slot_targets: Vec<Option<usize>>,
}

/// Candidates for one turn with tape handles for `H_cand` and the
/// recommender's log-probabilities.
#[derive(Clone, Debug)]
pub struct TapeCandidates {
    pub items: Vec<usize>,
    pub probs: Vec<f64>,
    pub embeddings: Var,
    pub log_scores: Var,
    /// Ground-truth items that had to replace a ranked candidate.
    pub forced: usize,
}

/// Loss terms for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub gen: Var,
    pub slot: Option<Var>,
    pub tokens: usize,
    pub slots: usize,
    pub forced: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotFill {
    /// Index of the slot in the response tokens.
    pub position: usize,
    pub candidates: Vec<ItemId>,
    pub probabilities: Vec<f64>,
    pub item: ItemId,
}

impl SlotFill {
    pub fn probability(&self) -> f64 {
        self.candidates
            .iter()
            .position(|&c| c == self.item)
            .map_or(0.0, |i| self.probabilities[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    /// Generated tokens with `[ITEM]` slots.
    pub template: Vec<String>,
    /// Tokens with each slot replaced by `@id`.
    pub tokens: Vec<String>,
    /// Detokenized response with item titles.
    pub text: String,
    pub slots: Vec<SlotFill>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub vocab: Vocabulary,
    pub catalog: Catalog,
    pub kg: KnowledgeGraph,
    pub recommender: KgRecommender,
    pub generator: TemplateGenerator,
    pub selector: Option<ItemSelector>,
    pub switching: Option<SwitchingHead>,
    dialogue_items: Vec<usize>,
    linker: EntityLinker,
    title_linker: EntityLinker,
}

impl Model {
    /// Builds a freshly initialized model. Parameter registration order is
    /// fixed, so equal seeds give equal weights.
    pub fn new(cfg: ModelConfig, vocab: Vocabulary, catalog: Catalog, kg: KnowledgeGraph, seed: u64) -> Result<Self> {
        if catalog.is_empty() {
            return Err(Error::Config("the item catalog is empty".into()));
        }
        if cfg.candidates == 0 {
            return Err(Error::Config("candidates must be at least 1".into()));
        }
        if cfg.recommender.entity_dim == 0 {
            return Err(Error::Config("recommender.entity_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let recommender = KgRecommender::new(&mut params, &kg, &cfg.recommender, &mut rng);
        let generator = TemplateGenerator::new(&mut params, &cfg.generator, vocab.len(), &mut rng)?;
        let (selector, switching) = match cfg.variant {
            Variant::Ntrd => {
                if !cfg.generator.d_model.is_multiple_of(cfg.selector.heads.max(1)) || cfg.selector.heads == 0 {
                    return Err(Error::Config(format!(
                        "d_model {} is not divisible by selector.heads {}",
                        cfg.generator.d_model, cfg.selector.heads
                    )));
                }
                let s = ItemSelector::new(
                    &mut params,
                    &cfg.selector,
                    cfg.generator.d_model,
                    cfg.recommender.entity_dim,
                    &mut rng,
                )?;
                (Some(s), None)
            }
            Variant::Switching => (None, Some(SwitchingHead::new(&mut params, cfg.generator.d_model))),
        };
        let linker = EntityLinker::new(&kg, None);
        let title_linker = EntityLinker::new(&kg, Some(&catalog));
        let dialogue_items = (0..catalog.len()).collect();
        Ok(Model {
            cfg,
            params,
            vocab,
            catalog,
            kg,
            recommender,
            generator,
            selector,
            switching,
            dialogue_items,
            linker,
            title_linker,
        })
    }

    pub fn candidate_count(&self) -> usize {
        self.cfg.candidates.min(self.catalog.len())
    }

    pub fn recommender_params(&self) -> Vec<ParamId> {
        self.recommender.param_ids()
    }

    /// Items the switching baseline may emit (catalog indices, ascending).
    pub fn dialogue_items(&self) -> &[usize] {
        &self.dialogue_items
    }

    pub fn set_dialogue_items(&mut self, mut items: Vec<usize>) -> Result<()> {
        items.sort_unstable();
        items.dedup();
        if items.is_empty() {
            return Err(Error::contract("the baseline item set is empty"));
        }
        if let Some(&bad) = items.iter().find(|&&i| i >= self.catalog.len()) {
            return Err(Error::Index {
                context: "dialogue item",
                index: bad,
                len: self.catalog.len(),
            });
        }
        self.dialogue_items = items;
        Ok(())
    }

    pub fn linker(&self) -> &EntityLinker {
        &self.linker
    }

    pub fn prepare(&self, example: MaskedExample) -> Prepared {
        let mentions = mention_indices(&self.kg, &example.context_entities);
        let slot_targets = example.slot_items.iter().map(|&id| self.catalog.index_of(id)).collect();
        Prepared {
            example,
            mentions,
            slot_targets,
        }
    }

    pub fn prepare_conversations(&self, convs: &[Conversation]) -> Vec<Prepared> {
        convs
            .iter()
            .flat_map(|c| make_examples(c, &self.vocab, self.cfg.generator.max_context, &self.linker).0)
            .map(|e| self.prepare(e))
            .collect()
    }

    /// Context ids and mentioned entities for a dialogue history, built the
    /// same way as training examples.
    pub fn encode_history(&self, history: &[Turn]) -> (Vec<u32>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut entities = Vec::new();
        for turn in history {
            ids.push(turn.role.marker());
            ids.extend(mask_items(turn, &self.vocab).0);
            entities.extend(self.linker.link_tokens(&turn.tokens));
        }
        let start = ids.len().saturating_sub(self.cfg.generator.max_context);
        (ids[start..].to_vec(), mention_indices(&self.kg, &entities))
    }

    /// Parses free text from a live user; with `link_titles`, catalog
    /// titles are rewritten to `@id` mentions first.
    pub fn parse_turn(&self, role: Role, text: &str, link_titles: bool) -> Turn {
        let known = self.catalog.titles();
        if !link_titles {
            return Turn::parse(role, text, &known).0;
        }
        let tokens = tokenize(text);
        let mut rewritten: Vec<String> = Vec::with_capacity(tokens.len());
        let mut i = 0;
        let spans = self.title_linker.link_with_spans(&tokens);
        let mut spans = spans.into_iter().peekable();
        while i < tokens.len() {
            match spans.peek() {
                Some((start, end, key)) if *start == i => {
                    if mention_id(&tokens[i]).is_some() || key.parse::<u64>().is_err() {
                        rewritten.extend(tokens[*start..*end].iter().cloned());
                    } else {
                        rewritten.push(format!("@{key}"));
                    }
                    i = *end;
                    spans.next();
                }
                _ => {
                    rewritten.push(tokens[i].clone());
                    i += 1;
                }
            }
        }
        let mut turn = Turn::parse(role, &rewritten.join(" "), &known).0;
        turn.raw_text = text.to_string();
        turn
    }

    /// Propagated recommender table as a tape leaf: trainable when `live`,
    /// otherwise a constant.
    pub fn rec_table(&self, tape: &mut Tape<'_>, live: bool) -> Result<Var> {
        if live {
            self.recommender.table(tape)
        } else {
            let t = self.recommender.materialize(&self.params)?;
            Ok(tape.constant(t))
        }
    }

    pub fn inference_table(&self) -> Result<Tensor> {
        self.recommender.materialize(&self.params)
    }

    fn user_logits(&self, tape: &mut Tape<'_>, table: Var, mentions: &[usize]) -> Result<Var> {
        let u = self.recommender.encode_user(tape, table, mentions)?;
        self.recommender.item_logits(tape, table, u)
    }

    /// Top-K candidates for `mentions`; each item in `force` that misses the
    /// top K replaces the lowest-ranked candidate not itself forced.
    pub fn tape_candidates(
        &self,
        tape: &mut Tape<'_>,
        table: Var,
        mentions: &[usize],
        force: &[usize],
    ) -> Result<TapeCandidates> {
        let logits = self.user_logits(tape, table, mentions)?;
        let logp = tape.log_softmax(logits);
        let probs: Vec<f64> = tape.value(logp).iter().map(|v| v.exp()).collect();
        let mut items = top_k_candidates(&probs, self.candidate_count())?;
        let mut forced = 0;
        let mut locked = vec![false; items.len()];
        for &gt in force {
            if let Some(p) = items.iter().position(|&i| i == gt) {
                locked[p] = true;
                continue;
            }
            if let Some(slot) = (0..items.len()).rev().find(|&p| !locked[p]) {
                items[slot] = gt;
                locked[slot] = true;
                forced += 1;
            }
        }
        let embeddings = tape.gather(table, &items)?;
        let picked = tape.pick(logp, &items)?;
        let log_scores = tape.reshape(picked, &[1, items.len()])?;
        Ok(TapeCandidates {
            probs: items.iter().map(|&i| probs[i]).collect(),
            items,
            embeddings,
            log_scores,
            forced,
        })
    }

    /// Values-only candidate set for `mentions` against a materialized table.
    pub fn candidate_set(&self, table: &Tensor, mentions: &[usize]) -> Result<CandidateSet> {
        let mut tape = Tape::new(&self.params);
        let t = tape.constant(table.clone());
        let c = self.tape_candidates(&mut tape, t, mentions, &[])?;
        Ok(CandidateSet {
            ids: c.items.iter().map(|&i| self.catalog.ids()[i]).collect(),
            scores: c.probs,
            embeddings: tape.to_tensor(c.embeddings),
            items: c.items,
        })
    }

    /// Teacher-forced loss terms for a batch: `λ·L_gen + L_slot` for NTRD,
    /// the mean joint NLL for the switching baseline.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&Prepared],
        lambda: f64,
        live_recommender: bool,
    ) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let table = self.rec_table(tape, live_recommender)?;
        match self.cfg.variant {
            Variant::Ntrd => self.ntrd_loss(tape, batch, lambda, table),
            Variant::Switching => self.switching_loss(tape, batch, table),
        }
    }

    fn ntrd_loss(&self, tape: &mut Tape<'_>, batch: &[&Prepared], lambda: f64, table: Var) -> Result<LossParts> {
        let selector = self
            .selector
            .as_ref()
            .ok_or_else(|| Error::contract("model has no item selector"))?;
        let mut gen_rows = Vec::with_capacity(batch.len());
        let mut gen_targets = Vec::new();
        let mut slot_rows = Vec::new();
        let mut slot_targets = Vec::new();
        let mut slot_mask = Vec::new();
        let mut forced = 0;
        for p in batch {
            let enc = self.generator.encode(tape, &p.example.context_ids)?;
            let tf = self.generator.teacher_forced(tape, &enc, &p.example.target_ids)?;
            gen_rows.push(tf.logits);
            gen_targets.extend_from_slice(&tf.targets);
            let (slots, words) = tf.slot_and_word_rows();
            if slots.is_empty() || p.slot_targets.iter().all(Option::is_none) {
                continue;
            }
            if slots.len() != p.slot_targets.len() {
                return Err(Error::contract(format!(
                    "example {}#{} has {} slots but {} slot items",
                    p.example.conversation_id,
                    p.example.turn_index,
                    slots.len(),
                    p.slot_targets.len()
                )));
            }
            let gts: Vec<usize> = p.slot_targets.iter().flatten().copied().collect();
            let cands = self.tape_candidates(tape, table, &p.mentions, &gts)?;
            forced += cands.forced;
            let e_slot = tape.gather(tf.hidden, &slots)?;
            let e_word = if words.is_empty() {
                None
            } else {
                Some(tape.gather(tf.hidden, &words)?)
            };
            let trace = selector.fuse(tape, e_slot, e_word, enc.ctx, &enc.key_mask, cands.embeddings)?;
            slot_rows.push(selector.score_logits(tape, trace.candidates, cands.embeddings, cands.log_scores)?);
            for t in &p.slot_targets {
                match t {
                    Some(gt) => {
                        let pos = cands
                            .items
                            .iter()
                            .position(|i| i == gt)
                            .expect("forced into candidates");
                        slot_targets.push(pos);
                        slot_mask.push(true);
                    }
                    None => {
                        slot_targets.push(0);
                        slot_mask.push(false);
                    }
                }
            }
        }
        let logits = tape.concat_rows(&gen_rows)?;
        let tokens = gen_targets.len();
        let gen = tape.cross_entropy(logits, &gen_targets, &vec![true; tokens])?;
        let weighted = tape.scale(gen, lambda);
        let (slot, total) = if slot_rows.is_empty() {
            (None, weighted)
        } else {
            let logits = tape.concat_rows(&slot_rows)?;
            let s = tape.cross_entropy(logits, &slot_targets, &slot_mask)?;
            (Some(s), tape.add(weighted, s)?)
        };
        Ok(LossParts {
            total,
            gen,
            slot,
            tokens,
            slots: slot_mask.iter().filter(|&&m| m).count(),
            forced,
        })
    }

    /// Log-probabilities of the baseline's closed item set, `1 × |M|`.
    fn closed_world_log_probs(&self, tape: &mut Tape<'_>, table: Var, mentions: &[usize]) -> Result<Var> {
        let logits = self.user_logits(tape, table, mentions)?;
        let picked = tape.pick(logits, &self.dialogue_items)?;
        let row = tape.reshape(picked, &[1, self.dialogue_items.len()])?;
        Ok(tape.log_softmax(row))
    }

    fn switching_loss(&self, tape: &mut Tape<'_>, batch: &[&Prepared], table: Var) -> Result<LossParts> {
        let head = self
            .switching
            .as_ref()
            .ok_or_else(|| Error::contract("model has no switching head"))?;
        let v = self.vocab.len();
        let mut terms = Vec::new();
        let mut tokens = 0;
        let mut slots = 0;
        for p in batch {
            let enc = self.generator.encode(tape, &p.example.context_ids)?;
            let tf = self.generator.teacher_forced(tape, &enc, &p.example.target_ids)?;
            let log_dial = tape.log_softmax(tf.logits);
            let z = head.logit(tape, tf.hidden)?;
            let log_word = tape.log_sigmoid(z);
            let neg = tape.scale(z, -1.0);
            let log_item = tape.log_sigmoid(neg);
            let log_rec = self.closed_world_log_probs(tape, table, &p.mentions)?;
            let (mut word_pos, mut word_flat, mut item_pos, mut item_idx) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            let mut slot_iter = p.slot_targets.iter();
            for (t, &target) in tf.targets.iter().enumerate() {
                if target == ITEM as usize {
                    let gt = slot_iter.next().copied().flatten();
                    if let Some(j) = gt.and_then(|g| self.dialogue_items.binary_search(&g).ok()) {
                        item_pos.push(t);
                        item_idx.push(j);
                        slots += 1;
                        tokens += 1;
                    }
                } else {
                    word_pos.push(t);
                    word_flat.push(t * v + target);
                    tokens += 1;
                }
            }
            if !word_pos.is_empty() {
                let a = tape.pick(log_word, &word_pos)?;
                let b = tape.pick(log_dial, &word_flat)?;
                terms.push(tape.sum(a));
                terms.push(tape.sum(b));
            }
            if !item_pos.is_empty() {
                let a = tape.pick(log_item, &item_pos)?;
                let b = tape.pick(log_rec, &item_idx)?;
                terms.push(tape.sum(a));
                terms.push(tape.sum(b));
            }
        }
        if tokens == 0 {
            return Err(Error::contract("batch has no scorable target tokens"));
        }
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = tape.add(sum, t)?;
        }
        let gen = tape.scale(sum, -1.0 / tokens as f64);
        Ok(LossParts {
            total: gen,
            gen,
            slot: None,
            tokens,
            slots,
            forced: 0,
        })
    }

    /// Per-token teacher-forced NLL of the reference response. NTRD scores
    /// templates under `P_dial`; the baseline scores the joint distribution,
    /// flooring items outside its closed set.
    pub fn token_nlls(&self, table: &Tensor, p: &Prepared) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let enc = self.generator.encode(&mut tape, &p.example.context_ids)?;
        let tf = self.generator.teacher_forced(&mut tape, &enc, &p.example.target_ids)?;
        let log_dial = tape.log_softmax(tf.logits);
        let v = self.vocab.len();
        let ld = tape.value(log_dial).to_vec();
        match self.cfg.variant {
            Variant::Ntrd => Ok(tf.targets.iter().enumerate().map(|(t, &w)| -ld[t * v + w]).collect()),
            Variant::Switching => {
                let head = self
                    .switching
                    .as_ref()
                    .ok_or_else(|| Error::contract("model has no switching head"))?;
                let hidden = tape.value(tf.hidden).to_vec();
                let d = self.cfg.generator.d_model;
                let tbl = tape.constant(table.clone());
                let log_rec = self.closed_world_log_probs(&mut tape, tbl, &p.mentions)?;
                let lr = tape.value(log_rec).to_vec();
                let mut slot_iter = p.slot_targets.iter();
                let mut out = Vec::with_capacity(tf.targets.len());
                for (t, &w) in tf.targets.iter().enumerate() {
                    let ps = head.switch_probability(&self.params, &hidden[t * d..(t + 1) * d])?;
                    let prob = if w == ITEM as usize {
                        let gt = slot_iter.next().copied().flatten();
                        match gt.and_then(|g| self.dialogue_items.binary_search(&g).ok()) {
                            Some(j) => (1.0 - ps) * lr[j].exp(),
                            None => 0.0,
                        }
                    } else {
                        ps * ld[t * v + w].exp()
                    };
                    out.push(-prob.max(NLL_FLOOR).ln());
                }
                Ok(out)
            }
        }
    }

    /// Slot-filling accuracy on the reference template: `(hits, slots)`
    /// where a hit means the selector's argmax is the ground-truth item.
    /// Candidates are not forced, so a ground truth outside the top K misses.
    pub fn teacher_forced_slot_hits(&self, table: &Tensor, p: &Prepared) -> Result<(usize, usize)> {
        let Some(selector) = self.selector.as_ref() else {
            return Ok((0, 0));
        };
        let total = p.slot_targets.iter().flatten().count();
        if total == 0 {
            return Ok((0, 0));
        }
        let mut tape = Tape::new(&self.params);
        let enc = self.generator.encode(&mut tape, &p.example.context_ids)?;
        let tf = self.generator.teacher_forced(&mut tape, &enc, &p.example.target_ids)?;
        let (slots, words) = tf.slot_and_word_rows();
        if slots.len() != p.slot_targets.len() {
            return Err(Error::contract("slot count does not match slot items"));
        }
        let tbl = tape.constant(table.clone());
        let cands = self.tape_candidates(&mut tape, tbl, &p.mentions, &[])?;
        let e_slot = tape.gather(tf.hidden, &slots)?;
        let e_word = if words.is_empty() {
            None
        } else {
            Some(tape.gather(tf.hidden, &words)?)
        };
        let trace = selector.fuse(&mut tape, e_slot, e_word, enc.ctx, &enc.key_mask, cands.embeddings)?;
        let probs = selector.score_candidates(&mut tape, trace.candidates, cands.embeddings, cands.log_scores)?;
        let k = cands.items.len();
        let dists: Vec<Vec<f64>> = tape.value(probs).chunks(k).map(<[f64]>::to_vec).collect();
        let choice = choose_slots(&dists, false);
        let hits = p
            .slot_targets
            .iter()
            .zip(choice)
            .filter(|(gt, c)| gt.is_some_and(|g| cands.items[*c] == g))
            .count();
        Ok((hits, total))
    }

    /// Generates a filled response for an encoded context.
    pub fn reply_to_context(&self, table: &Tensor, context: &[u32], mentions: &[usize]) -> Result<Reply> {
        match self.cfg.variant {
            Variant::Ntrd => self.ntrd_reply(table, context, mentions),
            Variant::Switching => {
                self.generate_with_switching(table, context, mentions, self.cfg.generator.max_response)
            }
        }
    }

    pub fn reply(&self, history: &[Turn]) -> Result<Reply> {
        if history.is_empty() {
            return Err(Error::contract("cannot reply to an empty history"));
        }
        let (ids, mentions) = self.encode_history(history);
        let table = self.inference_table()?;
        self.reply_to_context(&table, &ids, &mentions)
    }

    pub fn template(&self, context: &[u32]) -> Result<TemplateResult> {
        self.generator
            .generate_template(&self.params, context, self.cfg.generator.max_response)
    }

    fn ntrd_reply(&self, table: &Tensor, context: &[u32], mentions: &[usize]) -> Result<Reply> {
        let selector = self
            .selector
            .as_ref()
            .ok_or_else(|| Error::contract("model has no item selector"))?;
        let tr = self.template(context)?;
        let mut slots = Vec::new();
        if !tr.slot_positions.is_empty() {
            let cands = self.candidate_set(table, mentions)?;
            let dists = selector.distributions(
                &self.params,
                &tr.e_slot,
                &tr.e_word,
                &tr.e_ctx,
                &tr.ctx_mask,
                &cands.embeddings,
                &cands.log_scores(),
            )?;
            let choice = choose_slots(&dists, self.cfg.selector.no_repeat);
            for ((&pos, dist), c) in tr.slot_positions.iter().zip(dists).zip(choice) {
                slots.push(SlotFill {
                    position: pos,
                    candidates: cands.ids.clone(),
                    probabilities: dist,
                    item: cands.ids[c],
                });
            }
        }
        let template: Vec<String> = tr.tokens.iter().map(|&t| self.vocab.token(t).to_string()).collect();
        Ok(self.render(template, slots))
    }

    /// Greedy decoding over `[p_s·P_dial, (1−p_s)·P_rec]`; an emitted item is
    /// fed back to the decoder as `[ITEM]`.
    pub fn generate_with_switching(
        &self,
        table: &Tensor,
        context: &[u32],
        mentions: &[usize],
        max_len: usize,
    ) -> Result<Reply> {
        let head = self
            .switching
            .as_ref()
            .ok_or_else(|| Error::contract("model has no switching head"))?;
        let mut tape = Tape::new(&self.params);
        let enc = self.generator.encode(&mut tape, context)?;
        let tbl = tape.constant(table.clone());
        let log_rec = self.closed_world_log_probs(&mut tape, tbl, mentions)?;
        let p_rec: Vec<f64> = tape.value(log_rec).iter().map(|v| v.exp()).collect();
        let order = top_k_candidates(&p_rec, p_rec.len())?;
        let ranked_ids: Vec<ItemId> = order
            .iter()
            .map(|&j| self.catalog.ids()[self.dialogue_items[j]])
            .collect();
        let ranked_probs: Vec<f64> = order.iter().map(|&j| p_rec[j]).collect();
        let max_len = max_len.min(self.cfg.generator.max_positions() - 1);
        let v = self.vocab.len();
        let mut prefix = vec![BOS];
        let mut template = Vec::new();
        let mut slots = Vec::new();
        while template.len() < max_len {
            let (p_dial, hidden) = self.generator.next_token_distribution(&mut tape, &enc, &prefix)?;
            let ps = head.switch_probability(&self.params, &hidden)?;
            let joint = mix(&p_dial, &p_rec, ps)?;
            let mut best: Option<usize> = None;
            for (i, &p) in joint.iter().enumerate() {
                if i < v && (i == PAD as usize || i == BOS as usize || i == ITEM as usize) {
                    continue;
                }
                if best.is_none_or(|b| p > joint[b]) {
                    best = Some(i);
                }
            }
            let best = best.unwrap_or(EOS as usize);
            if best == EOS as usize {
                break;
            }
            if best >= v {
                let item = self.catalog.ids()[self.dialogue_items[best - v]];
                slots.push(SlotFill {
                    position: template.len(),
                    candidates: ranked_ids.clone(),
                    probabilities: ranked_probs.clone(),
                    item,
                });
                template.push(self.vocab.token(ITEM).to_string());
                prefix.push(ITEM);
            } else {
                template.push(self.vocab.token(best as u32).to_string());
                prefix.push(best as u32);
            }
        }
        Ok(self.render(template, slots))
    }

    fn render(&self, template: Vec<String>, slots: Vec<SlotFill>) -> Reply {
        let mut tokens = template.clone();
        let mut shown = template.clone();
        for s in &slots {
            tokens[s.position] = format!("@{}", s.item);
            shown[s.position] = self
                .catalog
                .title(s.item)
                .map_or_else(|| format!("@{}", s.item), str::to_string);
        }
        Reply {
            text: detokenize(&shown),
            template,
            tokens,
            slots,
        }
    }
}
