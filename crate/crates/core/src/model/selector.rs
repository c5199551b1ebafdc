use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{AttentionBlock, AttentionMask, Linear};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    pub heads: usize,
    /// FFN width per stage; 0 means four times the model width.
    pub ffn: usize,
    /// Greedy filling that skips items already used in the same response.
    pub no_repeat: bool,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            heads: 2,
            ffn: 0,
            no_repeat: false,
        }
    }
}

/// Slot states after each fusion stage (`Ê_slot`, `E′_slot`, `E″_slot`).
#[derive(Clone, Copy, Debug)]
pub struct SlotFusionTrace {
    pub words: Var,
    pub context: Var,
    pub candidates: Var,
}

/// Stacked attention from slot states over template words, dialogue
/// context and candidate items, then bilinear scoring of candidates.
#[derive(Clone, Debug)]
pub struct ItemSelector {
    pub word_stage: AttentionBlock,
    pub context_stage: AttentionBlock,
    pub candidate_stage: AttentionBlock,
    /// `d^h → d^e`, applied to `H_cand` before attention.
    pub candidate_proj: Linear,
    /// `W_p: d^e → d^h`, applied to `E″_slot` before scoring.
    pub score_proj: Linear,
    /// Weight on the recommender's log-probability of each candidate.
    pub rec_weight: ParamId,
}

impl ItemSelector {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        cfg: &SelectorConfig,
        d_model: usize,
        d_entity: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let ffn = if cfg.ffn == 0 { 4 * d_model } else { cfg.ffn };
        Ok(ItemSelector {
            word_stage: AttentionBlock::new(params, "selector.word", d_model, cfg.heads, ffn, rng)?,
            context_stage: AttentionBlock::new(params, "selector.context", d_model, cfg.heads, ffn, rng)?,
            candidate_stage: AttentionBlock::new(params, "selector.candidate", d_model, cfg.heads, ffn, rng)?,
            candidate_proj: Linear::new(params, "selector.candidate_proj", d_entity, d_model, rng),
            score_proj: Linear::new(params, "selector.score_proj", d_model, d_entity, rng),
            rec_weight: params.add("selector.rec_weight", Tensor::vector(vec![1.0])),
        })
    }

    /// Runs the three stages. An empty `words` leaves stage one as its
    /// residual path only.
    pub fn fuse(
        &self,
        tape: &mut Tape<'_>,
        slots: Var,
        words: Option<Var>,
        context: Var,
        context_mask: &[bool],
        candidates: Var,
    ) -> Result<SlotFusionTrace> {
        if tape.rows(slots) == 0 {
            return Err(Error::contract("selector needs at least one slot"));
        }
        let words = words.filter(|&w| tape.rows(w) > 0);
        let s1 = self.word_stage.forward(tape, slots, words, AttentionMask::None)?;
        let s2 = self
            .context_stage
            .forward(tape, s1, Some(context), AttentionMask::Keys(context_mask))?;
        let cand = self.candidate_proj.forward(tape, candidates)?;
        let s3 = self
            .candidate_stage
            .forward(tape, s2, Some(cand), AttentionMask::None)?;
        Ok(SlotFusionTrace {
            words: s1,
            context: s2,
            candidates: s3,
        })
    }

    /// Unnormalized scores `(W_p·e″)·h_m + α·log P_rec(m)`, `#slots × K`.
    pub fn score_logits(&self, tape: &mut Tape<'_>, fused: Var, candidates: Var, rec_log_scores: Var) -> Result<Var> {
        let q = self.score_proj.forward(tape, fused)?;
        let bilinear = tape.matmul_t(q, candidates)?;
        let alpha = tape.param(self.rec_weight);
        let prior = tape.mul_scalar(rec_log_scores, alpha)?;
        tape.add_row(bilinear, prior)
    }

    /// Softmax over candidates of [`Self::score_logits`].
    pub fn score_candidates(
        &self,
        tape: &mut Tape<'_>,
        fused: Var,
        candidates: Var,
        rec_log_scores: Var,
    ) -> Result<Var> {
        let logits = self.score_logits(tape, fused, candidates, rec_log_scores)?;
        Ok(tape.softmax(logits))
    }

    /// Fuses and scores in one call, returning the per-slot distributions.
    #[allow(clippy::too_many_arguments)]
    pub fn distributions(
        &self,
        params: &ParamStore,
        e_slot: &Tensor,
        e_word: &Tensor,
        e_ctx: &Tensor,
        ctx_mask: &[bool],
        h_cand: &Tensor,
        rec_log_scores: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(params);
        let slots = tape.constant(e_slot.clone());
        let words = tape.constant(e_word.clone());
        let ctx = tape.constant(e_ctx.clone());
        let cand = tape.constant(h_cand.clone());
        let prior = tape.constant_from(vec![1, rec_log_scores.len()], rec_log_scores.to_vec())?;
        let trace = self.fuse(&mut tape, slots, Some(words), ctx, ctx_mask, cand)?;
        let probs = self.score_candidates(&mut tape, trace.candidates, cand, prior)?;
        let k = rec_log_scores.len();
        Ok(tape.value(probs).chunks(k).map(<[f64]>::to_vec).collect())
    }
}

/// Chosen candidate position per slot: argmax with ties to the better
/// ranked candidate. With `no_repeat`, positions already used are skipped
/// while any unused candidate remains.
pub fn choose_slots(distributions: &[Vec<f64>], no_repeat: bool) -> Vec<usize> {
    let mut used = vec![false; distributions.first().map_or(0, Vec::len)];
    let mut out = Vec::with_capacity(distributions.len());
    for row in distributions {
        let exhausted = used.iter().all(|&u| u);
        let mut best: Option<usize> = None;
        for (i, &p) in row.iter().enumerate() {
            if no_repeat && !exhausted && used[i] {
                continue;
            }
            if best.is_none_or(|b| p > row[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap_or(0);
        if b < used.len() {
            used[b] = true;
        }
        out.push(b);
    }
    out
}
