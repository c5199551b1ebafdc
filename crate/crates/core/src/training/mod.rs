//! Staged training: recommender pretraining, then joint optimization of
//! `λ·L_gen + L_slot` with Adam and global-norm clipping.

mod checkpoint;

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, OptimizerSnapshot, FORMAT_VERSION, MAGIC};

use crate::corpus::{
    build_vocabulary, ingest_redial, split_corpus, Catalog, Conversation, CorpusSplit, SplitRatios, SynthCorpus,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Prepared, Variant};
use crate::numerics::{clip_gradients, AdamState, Tape, Tensor};
use crate::recommender::{
    pretrain_recommender, read_triples, top1_accuracy, KnowledgeGraph, PretrainConfig, PretrainReport, RecPair,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Which conversations supply recommender pretraining pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainScope {
    #[default]
    Train,
    /// Every split, so items held out of dialogue training still get
    /// supervised embeddings.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_max_norm: f64,
    pub epochs: usize,
    /// Optional hard cap on joint steps.
    pub max_steps: Option<u64>,
    /// Epochs without a validation PPL improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub precision: Precision,
    pub freeze_recommender: bool,
    pub min_frequency: usize,
    pub pretrain_on: PretrainScope,
    pub pretrain: PretrainConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 5.0,
            learning_rate: 1e-3,
            batch_size: 32,
            clip_max_norm: 0.1,
            epochs: 30,
            max_steps: None,
            patience: 3,
            seed: 0,
            precision: Precision::F64,
            freeze_recommender: true,
            min_frequency: 1,
            pretrain_on: PretrainScope::Train,
            pretrain: PretrainConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be a finite value >= 0, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.clip_max_norm.is_nan() || self.clip_max_norm <= 0.0 {
            return Err(Error::Config("clip_max_norm must be positive".into()));
        }
        if self.precision == Precision::F32 {
            return Err(Error::Config("precision: only f64 is supported".into()));
        }
        self.model.generator.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A loaded corpus with its split and knowledge graph.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub conversations: Vec<Conversation>,
    pub catalog: Catalog,
    pub kg_triples: Vec<(String, String, String)>,
    pub split: CorpusSplit,
}

impl Corpus {
    /// Splits a generated corpus with the default ratios.
    pub fn from_synth(synth: &SynthCorpus, split_seed: u64) -> Result<Self> {
        Ok(Corpus {
            split: split_corpus(&synth.conversations, split_seed, SplitRatios::default())?,
            conversations: synth.conversations.clone(),
            catalog: synth.catalog.clone(),
            kg_triples: synth.kg_triples.clone(),
        })
    }

    /// Reads a ReDial-format dialogue file and an optional triple file; the
    /// catalog is every item the dialogues mention.
    pub fn load(dialogues: &Path, kg: Option<&Path>, split_seed: u64) -> Result<Self> {
        let (conversations, stats) = ingest_redial(dialogues)?;
        log::info!(
            "loaded {} conversations ({} malformed lines) from {}",
            conversations.len(),
            stats.malformed_lines,
            dialogues.display()
        );
        let kg_triples = match kg {
            Some(p) => read_triples(p)?,
            None => Vec::new(),
        };
        Ok(Corpus {
            split: split_corpus(&conversations, split_seed, SplitRatios::default())?,
            catalog: Catalog::from_conversations(&conversations),
            conversations,
            kg_triples,
        })
    }

    pub fn train(&self) -> Vec<Conversation> {
        self.split
            .select(&self.conversations, &self.split.train)
            .into_iter()
            .cloned()
            .collect()
    }

    pub fn validation(&self) -> Vec<Conversation> {
        self.split
            .select(&self.conversations, &self.split.validation)
            .into_iter()
            .cloned()
            .collect()
    }

    pub fn test(&self) -> Vec<Conversation> {
        self.split
            .select(&self.conversations, &self.split.test)
            .into_iter()
            .cloned()
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    /// Next batch index within the current epoch.
    pub batch: usize,
    pub best_val_ppl: Option<f64>,
    pub stale_epochs: usize,
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_gen: f64,
    pub l_slot: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_factor: f64,
    pub tokens: usize,
    pub slots: usize,
    pub forced: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub val_ppl: Option<f64>,
    pub val_slot_accuracy: Option<f64>,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Pretrain {
        steps: usize,
        epochs: usize,
        initial_loss: f64,
        final_loss: f64,
        top1_accuracy: f64,
    },
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Append-only JSONL training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps().map(|s| s.loss).collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(TrainLog { records })
    }
}

/// `λ·L_gen + L_slot`.
pub fn total_loss(l_gen: f64, l_slot: f64, lambda: f64) -> f64 {
    lambda * l_gen + l_slot
}

/// Recommender pretraining pairs: each ground-truth slot item with the
/// entities mentioned before it.
pub fn pretrain_pairs(examples: &[Prepared]) -> Vec<RecPair> {
    examples
        .iter()
        .flat_map(|p| {
            p.slot_targets.iter().flatten().map(move |&item| RecPair {
                mentions: p.mentions.clone(),
                item,
            })
        })
        .collect()
}

/// Catalog indices of items mentioned in `convs`.
pub fn mentioned_items(convs: &[Conversation], catalog: &Catalog) -> Vec<usize> {
    let mut v: Vec<usize> = convs
        .iter()
        .flat_map(Conversation::items)
        .filter_map(|id| catalog.index_of(id))
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub state: TrainState,
    pub pretrain_report: Option<PretrainReport>,
    adam: AdamState,
    train: Vec<Prepared>,
    validation: Vec<Prepared>,
    order: Vec<usize>,
}

impl Trainer {
    /// Builds the model and runs recommender pretraining.
    pub fn new(cfg: TrainConfig, corpus: &Corpus) -> Result<Self> {
        cfg.validate()?;
        let train_convs = corpus.train();
        let vocab = build_vocabulary(&train_convs, cfg.min_frequency);
        let kg = KnowledgeGraph::build(&corpus.catalog, &corpus.kg_triples);
        let mut model = Model::new(cfg.model.clone(), vocab, corpus.catalog.clone(), kg, cfg.seed)?;
        let items = mentioned_items(&train_convs, &corpus.catalog);
        if !items.is_empty() {
            model.set_dialogue_items(items)?;
        }
        let train = model.prepare_conversations(&train_convs);
        if train.is_empty() {
            return Err(Error::contract("the training split yields no examples"));
        }
        let validation = model.prepare_conversations(&corpus.validation());
        let pairs = match cfg.pretrain_on {
            PretrainScope::Train => pretrain_pairs(&train),
            PretrainScope::All => pretrain_pairs(&model.prepare_conversations(&corpus.conversations)),
        };
        let report = pretrain_recommender(&model.recommender, &mut model.params, &pairs, &cfg.pretrain, cfg.seed)?;
        log::info!(
            "recommender pretraining: {} epochs, loss {:.4} -> {:.4}",
            report.epochs,
            report.initial_loss().unwrap_or(f64::NAN),
            report.epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
        Self::assemble(cfg, model, train, validation, TrainState::default(), None, Some(report))
    }

    /// Rebuilds a trainer from a checkpoint; `cfg` must hash identically.
    pub fn resume(cfg: TrainConfig, corpus: &Corpus, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let run = cfg.hash();
        if run != ckpt.config_hash {
            return Err(Error::ConfigMismatch {
                checkpoint: ckpt.config_hash.clone(),
                run,
            });
        }
        let model = model_from_checkpoint(ckpt)?;
        let train = model.prepare_conversations(&corpus.train());
        let validation = model.prepare_conversations(&corpus.validation());
        Self::assemble(
            cfg,
            model,
            train,
            validation,
            ckpt.state.clone(),
            ckpt.optimizer.as_ref(),
            None,
        )
    }

    fn assemble(
        cfg: TrainConfig,
        mut model: Model,
        train: Vec<Prepared>,
        validation: Vec<Prepared>,
        state: TrainState,
        optimizer: Option<&OptimizerSnapshot>,
        pretrain_report: Option<PretrainReport>,
    ) -> Result<Self> {
        if cfg.freeze_recommender {
            for id in model.recommender_params() {
                model.params.set_trainable(id, false);
            }
        }
        let mut adam = AdamState::new(&model.params, cfg.learning_rate);
        if let Some(o) = optimizer {
            adam.restore(o.step, o.first.clone(), o.second.clone())?;
        }
        let mut t = Trainer {
            cfg,
            model,
            state,
            pretrain_report,
            adam,
            train,
            validation,
            order: Vec::new(),
        };
        t.order = t.epoch_order(t.state.epoch);
        Ok(t)
    }

    pub fn train_examples(&self) -> &[Prepared] {
        &self.train
    }

    pub fn validation_examples(&self) -> &[Prepared] {
        &self.validation
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let seed = self.cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    /// Loss of the next batch without updating anything.
    pub fn peek_loss(&self) -> Result<f64> {
        let batch = self.next_batch();
        let mut tape = Tape::new(&self.model.params);
        let parts = self
            .model
            .batch_loss(&mut tape, &batch, self.cfg.lambda, !self.cfg.freeze_recommender)?;
        Ok(tape.scalar_value(parts.total))
    }

    fn next_batch(&self) -> Vec<&Prepared> {
        let bs = self.cfg.batch_size;
        let start = self.state.batch * bs;
        let end = (start + bs).min(self.order.len());
        self.order[start..end].iter().map(|&i| &self.train[i]).collect()
    }

    /// One optimizer step on the next batch. Returns the step record and,
    /// at an epoch boundary, the epoch record.
    pub fn step(&mut self) -> Result<(StepRecord, Option<EpochRecord>)> {
        let started = Instant::now();
        let batch_id = self.state.batch as u64;
        let (parts, total, gen, slot, grads) = {
            let batch = self.next_batch();
            let mut tape = Tape::new(&self.model.params);
            let parts = self
                .model
                .batch_loss(&mut tape, &batch, self.cfg.lambda, !self.cfg.freeze_recommender)?;
            let total = tape.scalar_value(parts.total);
            let gen = tape.scalar_value(parts.gen);
            let slot = parts.slot.map_or(0.0, |s| tape.scalar_value(s));
            if !total.is_finite() {
                let ids: Vec<String> = batch
                    .iter()
                    .map(|p| format!("{}#{}", p.example.conversation_id, p.example.turn_index))
                    .collect();
                log::error!(
                    "non-finite loss at step {} in batch {batch_id}: {}",
                    self.state.step,
                    ids.join(", ")
                );
                return Err(Error::NonFinite {
                    step: self.state.step,
                    batch_id,
                });
            }
            let grads = tape.backward(parts.total)?;
            (parts, total, gen, slot, grads)
        };
        self.model.params.accumulate(&grads);
        let grad_norm = self.model.params.grad_norm();
        let clip_factor = clip_gradients(&mut self.model.params, self.cfg.clip_max_norm);
        self.adam.step(&mut self.model.params)?;
        self.state.step += 1;
        let record = StepRecord {
            step: self.state.step,
            epoch: self.state.epoch,
            l_gen: gen,
            l_slot: slot,
            loss: total,
            grad_norm,
            clip_factor,
            tokens: parts.tokens,
            slots: parts.slots,
            forced: parts.forced,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.state.batch += 1;
        let epoch = if self.state.batch >= self.batches_per_epoch() {
            Some(self.end_epoch()?)
        } else {
            None
        };
        Ok((record, epoch))
    }

    fn end_epoch(&mut self) -> Result<EpochRecord> {
        let (val_ppl, val_slot_accuracy) = if self.validation.is_empty() {
            (None, None)
        } else {
            let (ppl, acc) = validate(&self.model, &self.validation)?;
            (Some(ppl), acc)
        };
        let improved = match (val_ppl, self.state.best_val_ppl) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            self.state.best_val_ppl = val_ppl;
            self.state.stale_epochs = 0;
        } else if val_ppl.is_some() {
            self.state.stale_epochs += 1;
        }
        let record = EpochRecord {
            epoch: self.state.epoch,
            step: self.state.step,
            val_ppl,
            val_slot_accuracy,
            improved,
        };
        self.state.epoch += 1;
        self.state.batch = 0;
        self.order = self.epoch_order(self.state.epoch);
        if self.state.epoch >= self.cfg.epochs || self.state.stale_epochs >= self.cfg.patience.max(1) {
            self.state.finished = true;
        }
        Ok(record)
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished || self.cfg.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// Runs until the epoch budget, early stopping or `max_steps`. With an
    /// output directory, appends `trainlog.jsonl` and writes `last.ckpt`
    /// each epoch plus `best.ckpt` on validation improvement.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        let mut sink = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("trainlog.jsonl");
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((BufWriter::new(f), path))
            }
            None => None,
        };
        let mut emit = |rec: LogRecord, log: &mut TrainLog| -> Result<()> {
            if let Some((w, path)) = sink.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
                w.flush().map_err(|e| Error::io(&*path, e))?;
            }
            log.records.push(rec);
            Ok(())
        };
        if self.state.step == 0 {
            if let Some(r) = &self.pretrain_report {
                let acc = top1_accuracy(
                    &self.model.recommender,
                    &self.model.params,
                    &pretrain_pairs(&self.train),
                )?;
                emit(
                    LogRecord::Pretrain {
                        steps: r.step_losses.len(),
                        epochs: r.epochs,
                        initial_loss: r.initial_loss().unwrap_or(0.0),
                        final_loss: r.epoch_losses.last().copied().unwrap_or(0.0),
                        top1_accuracy: acc,
                    },
                    &mut log,
                )?;
            }
        }
        while !self.is_finished() {
            let (step, epoch) = self.step()?;
            log::debug!(
                "step {} loss {:.5} (gen {:.5}, slot {:.5})",
                step.step,
                step.loss,
                step.l_gen,
                step.l_slot
            );
            emit(LogRecord::Step(step), &mut log)?;
            if let Some(e) = epoch {
                log::info!("epoch {} done at step {}: val ppl {:?}", e.epoch, e.step, e.val_ppl);
                let improved = e.improved;
                emit(LogRecord::Epoch(e), &mut log)?;
                if let Some(dir) = out_dir {
                    let ckpt = self.checkpoint()?;
                    ckpt.save(dir.join("last.ckpt"))?;
                    if improved {
                        ckpt.save(dir.join("best.ckpt"))?;
                    }
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint()?.save(dir.join("last.ckpt"))?;
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let (first, second) = self.adam.moments();
        let mut ckpt = checkpoint_of(&self.model, &self.cfg, self.state.clone())?;
        ckpt.optimizer = Some(OptimizerSnapshot {
            step: self.adam.step_count(),
            first: first.to_vec(),
            second: second.to_vec(),
        });
        Ok(ckpt)
    }
}

/// Validation perplexity and teacher-forced slot accuracy.
pub fn validate(model: &Model, examples: &[Prepared]) -> Result<(f64, Option<f64>)> {
    let table = model.inference_table()?;
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for p in examples {
        let v = model.token_nlls(&table, p)?;
        tokens += v.len();
        nll += v.iter().sum::<f64>();
    }
    let ppl = (nll / tokens.max(1) as f64).exp();
    let acc = if model.cfg.variant == Variant::Ntrd {
        let (mut hits, mut total) = (0usize, 0usize);
        for p in examples {
            let (h, t) = model.teacher_forced_slot_hits(&table, p)?;
            hits += h;
            total += t;
        }
        (total > 0).then(|| hits as f64 / total as f64)
    } else {
        None
    };
    Ok((ppl, acc))
}

/// Checkpoint of a model's weights without optimizer state.
pub fn checkpoint_of(model: &Model, cfg: &TrainConfig, state: TrainState) -> Result<Checkpoint> {
    let params = model
        .params
        .ids()
        .map(|id| {
            let t = model.params.get(id);
            Ok((
                model.params.name(id).to_string(),
                Tensor::new(t.shape().to_vec(), t.data().to_vec())?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(Checkpoint {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        vocab: model.vocab.clone(),
        catalog: model.catalog.clone(),
        kg: model.kg.clone(),
        dialogue_items: model.dialogue_items().to_vec(),
        state,
        params,
        optimizer: None,
    })
}

/// Rebuilds a model from a checkpoint; every stored tensor must match a
/// parameter by name and shape, and every parameter must be stored.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let mut model = Model::new(
        ckpt.config.model.clone(),
        ckpt.vocab.clone(),
        ckpt.catalog.clone(),
        ckpt.kg.clone(),
        ckpt.config.seed,
    )?;
    if ckpt.params.len() != model.params.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint has {} tensors, model expects {}",
            ckpt.params.len(),
            model.params.len()
        )));
    }
    for (name, t) in &ckpt.params {
        let id = model
            .params
            .find(name)
            .ok_or_else(|| Error::Corrupt(format!("unexpected tensor {name}")))?;
        if model.params.get(id).shape() != t.shape() {
            return Err(Error::Corrupt(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                t.shape(),
                model.params.get(id).shape()
            )));
        }
        model.params.set_values(id, t.data())?;
    }
    model.set_dialogue_items(ckpt.dialogue_items.clone())?;
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}
