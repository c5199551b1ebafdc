use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{init, ParamId, ParamStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x·W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: params.add(format!("{name}.weight"), init::xavier_uniform(rng, fan_in, fan_out)),
            bias: params.add(format!("{name}.bias"), init::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: params.add(format!("{name}.gain"), init::ones(&[width])),
            bias: params.add(format!("{name}.bias"), init::zeros(&[width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Position-wise `ReLU(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(params: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            inner: Linear::new(params, &format!("{name}.inner"), width, hidden, rng),
            outer: Linear::new(params, &format!("{name}.outer"), hidden, width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, h)
    }
}

/// Which query/key pairs may attend.
#[derive(Clone, Copy, Debug)]
pub enum AttentionMask<'a> {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Per-key validity, shared by all queries.
    Keys(&'a [bool]),
}

impl AttentionMask<'_> {
    fn expand(&self, queries: usize, keys: usize) -> Result<Option<Vec<bool>>> {
        Ok(match *self {
            AttentionMask::None => None,
            AttentionMask::Causal => Some((0..queries).flat_map(|q| (0..keys).map(move |k| k <= q)).collect()),
            AttentionMask::Keys(valid) => {
                if valid.len() != keys {
                    return Err(Error::Shape {
                        op: "attention mask",
                        lhs: vec![keys],
                        rhs: vec![valid.len()],
                    });
                }
                Some((0..queries).flat_map(|_| valid.iter().copied()).collect())
            }
        })
    }
}

/// Scaled dot-product attention over `heads` column blocks followed by an
/// output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(params: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {width} is not divisible by {heads} attention heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(params, &format!("{name}.query"), width, width, rng),
            key: Linear::new(params, &format!("{name}.key"), width, width, rng),
            value: Linear::new(params, &format!("{name}.value"), width, width, rng),
            output: Linear::new(params, &format!("{name}.output"), width, width, rng),
            heads,
            width,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, queries: Var, keys: Var, mask: AttentionMask<'_>) -> Result<Var> {
        let nk = tape.rows(keys);
        if nk == 0 {
            return Err(Error::contract("attention over an empty key set"));
        }
        let nq = tape.rows(queries);
        let q = self.query.forward(tape, queries)?;
        let k = self.key.forward(tape, keys)?;
        let v = self.value.forward(tape, keys)?;
        let mask = mask.expand(nq, nk)?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_masked(scores, mask.as_deref())?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.output.forward(tape, cat)
    }
}

/// Attention, then residual + layer norm, FFN, residual + layer norm.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub attention: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl AttentionBlock {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AttentionBlock {
            attention: MultiHeadAttention::new(params, &format!("{name}.attn"), width, heads, rng)?,
            attn_norm: LayerNorm::new(params, &format!("{name}.attn_norm"), width),
            ffn: FeedForward::new(params, &format!("{name}.ffn"), width, ffn, rng),
            ffn_norm: LayerNorm::new(params, &format!("{name}.ffn_norm"), width),
        })
    }

    /// `keys == None` skips attention and keeps only the residual path.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, keys: Option<Var>, mask: AttentionMask<'_>) -> Result<Var> {
        let h = match keys {
            Some(k) => {
                let a = self.attention.forward(tape, x, k, mask)?;
                tape.add(x, a)?
            }
            None => x,
        };
        let h = self.attn_norm.forward(tape, h)?;
        self.feed_forward(tape, h)
    }

    pub fn feed_forward(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let f = self.ffn.forward(tape, h)?;
        let h = tape.add(h, f)?;
        self.ffn_norm.forward(tape, h)
    }
}

/// Sinusoidal position table, `len × width`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for pos in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, width], data).expect("sized by construction")
}
