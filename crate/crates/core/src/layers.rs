//! Transformer building blocks recorded on a [`Tape`].
//!
//! Parameter bundles are generic over the handle type: the model stores them
//! with [`ParamId`] indices and resolves them to tape [`Var`]s per forward pass.
//! Activations are `[T, d]` for a single sequence or `[B, T, d]` for a batch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Index of a tensor in a model's parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dropout rate, mode and the rng that draws masks.
pub struct Dropout<'a> {
    pub p: f64,
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Dropout<'a> {
    pub fn new(p: f64, mode: Mode, rng: &'a mut ChaCha8Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout p={p} outside [0, 1)")));
        }
        Ok(Self { p, mode, rng })
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity in eval mode.
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.mode == Mode::Eval || self.p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let scale = 1.0 / keep;
        let mask = (0..tape.value(x).numel())
            .map(|_| if self.rng.gen_bool(keep) { scale } else { 0.0 })
            .collect();
        tape.mask(x, mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<H> {
    pub w: H,
    pub b: H,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<H> {
    pub gamma: H,
    pub beta: H,
}

/// Per-head query/key/value projections plus the shared output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<H> {
    pub query: Vec<DenseParams<H>>,
    pub key: Vec<DenseParams<H>>,
    pub value: Vec<DenseParams<H>>,
    pub output: DenseParams<H>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams<H> {
    pub inner: DenseParams<H>,
    pub outer: DenseParams<H>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlockParams<H> {
    pub attention: AttentionWeights<H>,
    pub norm1: LayerNormParams<H>,
    pub ffn: FeedForwardParams<H>,
    pub norm2: LayerNormParams<H>,
}

/// Hidden layers followed by the class projection.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<H> {
    pub hidden: Vec<DenseParams<H>>,
    pub out: DenseParams<H>,
}

impl<H: Copy> DenseParams<H> {
    pub fn map<G>(&self, f: &impl Fn(H) -> G) -> DenseParams<G> {
        DenseParams {
            w: f(self.w),
            b: f(self.b),
        }
    }
}

impl<H: Copy> LayerNormParams<H> {
    pub fn map<G>(&self, f: &impl Fn(H) -> G) -> LayerNormParams<G> {
        LayerNormParams {
            gamma: f(self.gamma),
            beta: f(self.beta),
        }
    }
}

impl<H: Copy> AttentionWeights<H> {
    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn map<G>(&self, f: &impl Fn(H) -> G) -> AttentionWeights<G> {
        AttentionWeights {
            query: self.query.iter().map(|d| d.map(f)).collect(),
            key: self.key.iter().map(|d| d.map(f)).collect(),
            value: self.value.iter().map(|d| d.map(f)).collect(),
            output: self.output.map(f),
        }
    }
}

impl<H: Copy> FeedForwardParams<H> {
    pub fn map<G>(&self, f: &impl Fn(H) -> G) -> FeedForwardParams<G> {
        FeedForwardParams {
            inner: self.inner.map(f),
            outer: self.outer.map(f),
        }
    }
}

impl<H: Copy> EncoderBlockParams<H> {
    pub fn map<G>(&self, f: &impl Fn(H) -> G) -> EncoderBlockParams<G> {
        EncoderBlockParams {
            attention: self.attention.map(f),
            norm1: self.norm1.map(f),
            ffn: self.ffn.map(f),
            norm2: self.norm2.map(f),
        }
    }
}

impl<H: Copy> HeadParams<H> {
    pub fn map<G>(&self, f: &impl Fn(H) -> G) -> HeadParams<G> {
        HeadParams {
            hidden: self.hidden.iter().map(|d| d.map(f)).collect(),
            out: self.out.map(f),
        }
    }
}

pub fn dense(tape: &mut Tape, x: Var, p: &DenseParams<Var>) -> Result<Var> {
    let y = tape.matmul(x, p.w)?;
    tape.add(y, p.b)
}

/// Number of tokens produced from a signal of length `len`.
pub fn token_count(len: usize, patch_len: usize) -> usize {
    len.div_ceil(patch_len)
}

/// Splits `[B, L]` (or `[L]`) signals into contiguous patches, right-padding
/// with zeros, and maps each patch linearly to `d_model`.
pub fn patch_embed(tape: &mut Tape, signal: Var, patch_len: usize, p: &DenseParams<Var>) -> Result<Var> {
    let shape = tape.shape(signal).to_vec();
    let len = *shape.last().unwrap();
    if patch_len == 0 || patch_len > len {
        return Err(Error::config(format!(
            "patch_len {patch_len} must be in 1..={len}"
        )));
    }
    if tape.shape(p.w)[0] != patch_len {
        return Err(Error::dim("patch_embed", &[patch_len], tape.shape(p.w)));
    }
    let tokens = token_count(len, patch_len);
    let padded = if tokens * patch_len == len {
        signal
    } else {
        tape.pad_last(signal, tokens * patch_len)?
    };
    let mut patch_shape = shape[..shape.len() - 1].to_vec();
    patch_shape.extend([tokens, patch_len]);
    let patches = tape.reshape(padded, patch_shape)?;
    dense(tape, patches, p)
}

/// First `tokens` rows of a positional table, as a `[T, d_model]` var.
pub fn positional_embedding(tape: &mut Tape, table: Var, tokens: usize) -> Result<Var> {
    let max = tape.shape(table)[0];
    if tokens > max {
        return Err(Error::config(format!(
            "sequence of {tokens} tokens exceeds positional table of {max}"
        )));
    }
    if tokens == max {
        return Ok(table);
    }
    tape.slice_rows(table, tokens)
}

/// Fixed sine/cosine position table of shape `[tokens, d_model]`.
pub fn sinusoidal_table(tokens: usize, d_model: usize) -> Tensor {
    let mut t = Tensor::zeros(&[tokens, d_model]);
    let data = t.data_mut();
    for pos in 0..tokens {
        for i in 0..d_model {
            let exponent = (2 * (i / 2)) as f64 / d_model as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// `softmax(QKᵀ/√d_k)·V`. Returns the output and the attention weights.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
    let r = qs.len();
    if ks.len() != r || vs.len() != r || qs[r - 1] != ks[r - 1] || ks[r - 2] != vs[r - 2] {
        return Err(Error::dim("attention", qs, ks));
    }
    let d_k = qs[r - 1] as f64;
    let kt = tape.transpose_last(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / d_k.sqrt());
    let weights = tape.softmax_rows(logits);
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Self-attention with Q = K = V = X, concatenated heads and output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionWeights<Var>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let d_model = *tape.shape(x).last().unwrap();
    if tape.shape(p.query[0].w)[0] != d_model {
        return Err(Error::dim("multi_head_attention", tape.shape(x), tape.shape(p.query[0].w)));
    }
    let mut heads = Vec::with_capacity(p.heads());
    for h in 0..p.heads() {
        let q = dense(tape, x, &p.query[h])?;
        let k = dense(tape, x, &p.key[h])?;
        let v = dense(tape, x, &p.value[h])?;
        heads.push(scaled_dot_attention(tape, q, k, v)?.0);
    }
    let concat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_last(&heads)?
    };
    let out = dense(tape, concat, &p.output)?;
    dropout.apply(tape, out)
}

/// `relu(X·W₁+b₁)·W₂+b₂` at every position.
pub fn feed_forward(tape: &mut Tape, x: Var, p: &FeedForwardParams<Var>) -> Result<Var> {
    let h = dense(tape, x, &p.inner)?;
    let h = tape.relu(h);
    dense(tape, h, &p.outer)
}

/// Post-norm encoder block: `A = LN₁(X + MHA(X))`, `Y = LN₂(A + FFN(A))`.
pub fn encoder_block(
    tape: &mut Tape,
    x: Var,
    p: &EncoderBlockParams<Var>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let attn = multi_head_attention(tape, x, &p.attention, dropout)?;
    let a = tape.add(x, attn)?;
    let a = tape.layer_norm(a, p.norm1.gamma, p.norm1.beta, LAYER_NORM_EPS)?;
    let ff = feed_forward(tape, a, &p.ffn)?;
    let ff = dropout.apply(tape, ff)?;
    let y = tape.add(a, ff)?;
    tape.layer_norm(y, p.norm2.gamma, p.norm2.beta, LAYER_NORM_EPS)
}

/// Mean-pools tokens and runs the MLP head; returns unnormalized logits.
pub fn classification_head(
    tape: &mut Tape,
    x: Var,
    p: &HeadParams<Var>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let mut h = tape.mean_tokens(x)?;
    for layer in &p.hidden {
        h = dense(tape, h, layer)?;
        h = tape.relu(h);
        h = dropout.apply(tape, h)?;
    }
    dense(tape, h, &p.out)
}
