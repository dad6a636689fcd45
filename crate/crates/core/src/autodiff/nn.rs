//! Parameterised layers built on the tape: linear maps, layer norm,
//! multi-head attention and the position-wise feed-forward block.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{invalid, Result};

/// Additive sentinel for masked attention logits.
pub const MASK_VALUE: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = store.zeros(format!("{name}.bias"), &[out_dim]);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x W + b` over the last axis of `x`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), &[dim]),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Scaled dot-product attention over `heads` heads with input and output
/// projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return invalid(format!(
                "model dimension {d_model} is not divisible by {heads} heads"
            ));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            heads,
        })
    }

    /// `q: [Tq, d]`, `k, v: [Tk, d]`; `mask`, if given, is a `[Tq, Tk]`
    /// additive bias applied to every head's logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[f64]>,
    ) -> Result<Var> {
        let d = self.query.out_dim;
        let dh = d / self.heads;
        let qp = self.query.forward(tape, store, q)?;
        let kp = self.key.forward(tape, store, k)?;
        let vp = self.value.forward(tape, store, v)?;
        let qh = tape.split_heads(qp, self.heads)?;
        let kh = tape.split_heads(kp, self.heads)?;
        let vh = tape.split_heads(vp, self.heads)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = tape.shift(scores, m)?;
        }
        let attn = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(attn, vh)?;
        let merged = tape.merge_heads(ctx)?;
        self.output.forward(tape, store, merged)
    }
}

/// `[t, t]` mask that hides future positions.
pub fn causal_mask(t: usize) -> Vec<f64> {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = MASK_VALUE;
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), d_model, d_hidden, rng),
            out: Linear::new(store, &format!("{name}.fc2"), d_hidden, d_model, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, store, h)
    }
}
