use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{sinusoidal_positions, AttentionBlock, AttentionMask, LayerNorm, Linear, MultiHeadAttention};
use crate::corpus::vocab::{BOS, EOS, ITEM, PAD};
use crate::error::{Error, Result};
use crate::numerics::{init, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_context: usize,
    pub max_response: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d_model: 300,
            heads: 2,
            layers: 2,
            ffn: 1200,
            max_context: 256,
            max_response: 40,
        }
    }
}

impl GeneratorConfig {
    /// Longest sequence either side of the model may see.
    pub fn max_positions(&self) -> usize {
        self.max_context.max(self.max_response + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.layers == 0 || self.ffn == 0 {
            return Err(Error::Config(
                "generator widths and layer count must be positive".into(),
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.max_context == 0 || self.max_response == 0 {
            return Err(Error::Config("max_context and max_response must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    cross: AttentionBlock,
}

/// Encoder output for one context.
#[derive(Clone, Debug)]
pub struct EncoderState {
    /// `E_ctx`, one row per context position.
    pub ctx: Var,
    /// `false` at padding positions.
    pub key_mask: Vec<bool>,
    /// Tokens dropped from the left to fit `max_context`.
    pub truncated: usize,
}

/// A greedily decoded template and the decoder states the selector reads.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateResult {
    pub tokens: Vec<u32>,
    pub slot_positions: Vec<usize>,
    /// Final-layer state that emitted each slot, `#slots × d`.
    pub e_slot: Tensor,
    /// Final-layer state that emitted each word, `#words × d`.
    pub e_word: Tensor,
    pub e_ctx: Tensor,
    pub ctx_mask: Vec<bool>,
}

/// Teacher-forced decoder outputs for `target[..n-1]` predicting `target[1..]`.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    pub logits: Var,
    pub hidden: Var,
    pub targets: Vec<usize>,
}

impl TeacherForced {
    /// Rows of `hidden` that emit `[ITEM]` and the rows that emit words.
    /// The row emitting `[EOS]` is in neither.
    pub fn slot_and_word_rows(&self) -> (Vec<usize>, Vec<usize>) {
        let mut slots = Vec::new();
        let mut words = Vec::new();
        for (i, &t) in self.targets.iter().enumerate() {
            if t == ITEM as usize {
                slots.push(i);
            } else if t != EOS as usize {
                words.push(i);
            }
        }
        (slots, words)
    }
}

/// Transformer encoder-decoder over a shared token embedding.
#[derive(Clone, Debug)]
pub struct TemplateGenerator {
    cfg: GeneratorConfig,
    vocab_size: usize,
    embedding: ParamId,
    encoder: Vec<AttentionBlock>,
    decoder: Vec<DecoderLayer>,
    output: Linear,
    positions: Tensor,
}

impl TemplateGenerator {
    pub fn new<R: Rng>(params: &mut ParamStore, cfg: &GeneratorConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embedding = params.add(
            "generator.embedding",
            init::normal(rng, &[vocab_size, d], init::EMBEDDING_STD),
        );
        let encoder = (0..cfg.layers)
            .map(|l| AttentionBlock::new(params, &format!("generator.encoder{l}"), d, cfg.heads, cfg.ffn, rng))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.layers)
            .map(|l| {
                let name = format!("generator.decoder{l}");
                Ok(DecoderLayer {
                    self_attn: MultiHeadAttention::new(params, &format!("{name}.self_attn"), d, cfg.heads, rng)?,
                    self_norm: LayerNorm::new(params, &format!("{name}.self_norm"), d),
                    cross: AttentionBlock::new(params, &format!("{name}.cross"), d, cfg.heads, cfg.ffn, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let output = Linear::new(params, "generator.output", d, vocab_size, rng);
        Ok(TemplateGenerator {
            cfg: cfg.clone(),
            vocab_size,
            embedding,
            encoder,
            decoder,
            output,
            positions: sinusoidal_positions(cfg.max_positions(), d),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn output_layer(&self) -> &Linear {
        &self.output
    }

    fn embed(&self, tape: &mut Tape<'_>, ids: &[u32]) -> Result<Var> {
        let table = tape.param(self.embedding);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = tape.gather(table, &idx)?;
        let tok = tape.scale(tok, (self.cfg.d_model as f64).sqrt());
        let d = self.cfg.d_model;
        let pos = Tensor::new(vec![ids.len(), d], self.positions.data()[..ids.len() * d].to_vec())?;
        let pos = tape.constant(pos);
        tape.add(tok, pos)
    }

    /// Encodes a context, keeping its newest `max_context` tokens. `[PAD]`
    /// positions are excluded as attention keys.
    pub fn encode(&self, tape: &mut Tape<'_>, context: &[u32]) -> Result<EncoderState> {
        if context.is_empty() {
            return Err(Error::contract("cannot encode an empty context"));
        }
        let truncated = context.len().saturating_sub(self.cfg.max_context);
        if truncated > 0 {
            log::warn!("context of {} tokens left-truncated by {truncated}", context.len());
        }
        let ids = &context[truncated..];
        let mut key_mask: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
        if key_mask.iter().all(|k| !k) {
            key_mask.fill(true);
        }
        let mut h = self.embed(tape, ids)?;
        for block in &self.encoder {
            h = block.forward(tape, h, Some(h), AttentionMask::Keys(&key_mask))?;
        }
        Ok(EncoderState {
            ctx: h,
            key_mask,
            truncated,
        })
    }

    /// Final-layer decoder states for every prefix position.
    pub fn decode(&self, tape: &mut Tape<'_>, enc: &EncoderState, prefix: &[u32]) -> Result<Var> {
        if prefix.is_empty() || prefix.len() > self.cfg.max_positions() {
            return Err(Error::contract(format!(
                "decoder input length {} outside 1..={}",
                prefix.len(),
                self.cfg.max_positions()
            )));
        }
        let mut h = self.embed(tape, prefix)?;
        for layer in &self.decoder {
            let a = layer.self_attn.forward(tape, h, h, AttentionMask::Causal)?;
            let r = tape.add(h, a)?;
            let n = layer.self_norm.forward(tape, r)?;
            h = layer
                .cross
                .forward(tape, n, Some(enc.ctx), AttentionMask::Keys(&enc.key_mask))?;
        }
        Ok(h)
    }

    /// `W_d·e + b_d` for every row of `hidden`.
    pub fn logits(&self, tape: &mut Tape<'_>, hidden: Var) -> Result<Var> {
        self.output.forward(tape, hidden)
    }

    pub fn teacher_forced(&self, tape: &mut Tape<'_>, enc: &EncoderState, target: &[u32]) -> Result<TeacherForced> {
        if target.len() < 2 || target[0] != BOS || target[target.len() - 1] != EOS {
            return Err(Error::contract("target must start with [BOS] and end with [EOS]"));
        }
        let hidden = self.decode(tape, enc, &target[..target.len() - 1])?;
        let logits = self.logits(tape, hidden)?;
        Ok(TeacherForced {
            logits,
            hidden,
            targets: target[1..].iter().map(|&t| t as usize).collect(),
        })
    }

    /// Distribution over the vocabulary for the token after `prefix`, and
    /// the final-layer state that produced it.
    pub fn next_token_distribution(
        &self,
        tape: &mut Tape<'_>,
        enc: &EncoderState,
        prefix: &[u32],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::contract("decoder prefix must start with [BOS]"));
        }
        let hidden = self.decode(tape, enc, prefix)?;
        let last = tape.slice_rows(hidden, prefix.len() - 1, 1)?;
        let logits = self.logits(tape, last)?;
        let probs = tape.softmax(logits);
        Ok((tape.value(probs).to_vec(), tape.value(last).to_vec()))
    }

    /// Greedy decoding until `[EOS]` or `max_len` tokens. `[PAD]` and
    /// `[BOS]` are never emitted.
    pub fn generate_template(&self, params: &ParamStore, context: &[u32], max_len: usize) -> Result<TemplateResult> {
        let mut tape = Tape::new(params);
        let enc = self.encode(&mut tape, context)?;
        let max_len = max_len.min(self.cfg.max_positions() - 1);
        let mut prefix = vec![BOS];
        let mut tokens = Vec::new();
        let mut slot_positions = Vec::new();
        let mut slot_rows = Vec::new();
        let mut word_rows = Vec::new();
        while tokens.len() < max_len {
            let (probs, hidden) = self.next_token_distribution(&mut tape, &enc, &prefix)?;
            let next = argmax_token(&probs);
            if next == EOS {
                break;
            }
            if next == ITEM {
                slot_positions.push(tokens.len());
                slot_rows.extend(hidden);
            } else {
                word_rows.extend(hidden);
            }
            tokens.push(next);
            prefix.push(next);
        }
        let d = self.cfg.d_model;
        Ok(TemplateResult {
            e_slot: Tensor::new(vec![slot_positions.len(), d], slot_rows)?,
            e_word: Tensor::new(vec![tokens.len() - slot_positions.len(), d], word_rows)?,
            e_ctx: tape.to_tensor(enc.ctx),
            ctx_mask: enc.key_mask,
            tokens,
            slot_positions,
        })
    }
}

/// Most probable token other than `[PAD]`/`[BOS]`; ties go to the lower id.
pub fn argmax_token(probs: &[f64]) -> u32 {
    let mut best: Option<usize> = None;
    for (i, &p) in probs.iter().enumerate() {
        if i == PAD as usize || i == BOS as usize {
            continue;
        }
        if best.is_none_or(|b| p > probs[b]) {
            best = Some(i);
        }
    }
    best.map_or(EOS, |b| b as u32)
}
