use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Attention probabilities `[batch, heads, queries, keys]`; every (batch, head, query) row sums to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub batch: usize,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub weights: Vec<f64>,
}

impl AttentionWeights {
    pub fn new(batch: usize, heads: usize, queries: usize, keys: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != batch * heads * queries * keys {
            return Err(Error::shape(
                "attention_weights",
                format!("{} values for {batch}x{heads}x{queries}x{keys}", weights.len()),
            ));
        }
        Ok(AttentionWeights {
            batch,
            heads,
            queries,
            keys,
            weights,
        })
    }

    pub fn row(&self, b: usize, h: usize, q: usize) -> &[f64] {
        let off = ((b * self.heads + h) * self.queries + q) * self.keys;
        &self.weights[off..off + self.keys]
    }

    /// Head-averaged `[queries, keys]` matrix for one batch element.
    pub fn head_mean(&self, b: usize) -> Vec<f64> {
        let n = self.queries * self.keys;
        let mut out = vec![0.0; n];
        for h in 0..self.heads {
            let off = (b * self.heads + h) * n;
            for (o, w) in out.iter_mut().zip(&self.weights[off..off + n]) {
                *o += w / self.heads as f64;
            }
        }
        out
    }

    /// Largest deviation of any row sum from 1, and whether all entries are ≥ 0.
    pub fn stochastic_error(&self) -> (f64, bool) {
        let mut worst = 0.0f64;
        for row in self.weights.chunks(self.keys.max(1)) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        (worst, self.weights.iter().all(|w| *w >= 0.0))
    }
}

/// Which axis an attention layer mixes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionStage {
    /// Within each latent-image row (across columns).
    Row,
    /// Within each latent-image column (across rows).
    Column,
    /// Within each frame group (across spatial tokens).
    Spatial,
    /// Across frame groups at one spatial location.
    Temporal,
    /// Across the frame sequence.
    Sequence,
}

impl AttentionStage {
    pub fn code(self) -> u32 {
        match self {
            AttentionStage::Row => 0,
            AttentionStage::Column => 1,
            AttentionStage::Spatial => 2,
            AttentionStage::Temporal => 3,
            AttentionStage::Sequence => 4,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        Some(match c {
            0 => AttentionStage::Row,
            1 => AttentionStage::Column,
            2 => AttentionStage::Spatial,
            3 => AttentionStage::Temporal,
            4 => AttentionStage::Sequence,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: String,
    pub stage: AttentionStage,
    pub weights: AttentionWeights,
}

/// Collects attention probabilities during one forward pass. Owned by that pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionRecorder {
    pub records: Vec<AttentionRecord>,
}

impl AttentionRecorder {
    pub fn new() -> Self {
        Self::default()
    }
}

pub fn init_mha<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for p in ["q", "k", "v", "o"] {
        store.init_linear(&format!("{prefix}.{p}"), d, d, rng);
    }
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, b: usize, l: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = g.reshape(x, &[b, l, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, l, dh])
}

/// Output of [`multi_head_attention`]: the projected context plus the softmax node.
pub struct MhaOutput {
    pub out: Var,
    pub attn: Var,
    pub batch: usize,
    pub heads: usize,
}

/// Scaled dot-product multi-head attention with parameters `prefix.{q,k,v,o}.{w,b}`.
/// Inputs are `[len, d]` or batched `[batch, len, d]`; output matches the query shape.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x_q: Var,
    x_k: Var,
    x_v: Var,
    heads: usize,
) -> Result<MhaOutput> {
    let qs = g.shape(x_q).to_vec();
    let ks = g.shape(x_k).to_vec();
    if g.shape(x_v) != ks.as_slice() {
        return Err(Error::shape("multi_head_attention", "key and value shapes differ"));
    }
    let unbatched = qs.len() == 2;
    let (b, lq, d) = match qs.as_slice() {
        [l, d] => (1, *l, *d),
        [b, l, d] => (*b, *l, *d),
        _ => return Err(Error::shape("multi_head_attention", format!("query shape {qs:?}"))),
    };
    let lk = ks[ks.len() - 2];
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("model dim {d} not divisible by {heads} heads")));
    }
    if *ks.last().unwrap() != d || (ks.len() == 3 && ks[0] != b) || ks.len() != qs.len() {
        return Err(Error::shape("multi_head_attention", format!("query {qs:?} vs key {ks:?}")));
    }
    let dh = d / heads;
    let proj = |g: &mut Graph<T>, x: Var, name: &str| -> Result<Var> {
        let w = g.param(store, &format!("{prefix}.{name}.w"))?;
        let bias = g.param(store, &format!("{prefix}.{name}.b"))?;
        g.linear(x, w, bias)
    };
    let q = proj(g, x_q, "q")?;
    let k = proj(g, x_k, "k")?;
    let v = proj(g, x_v, "v")?;
    let q = split_heads(g, q, b, lq, heads, dh)?;
    let k = split_heads(g, k, b, lk, heads, dh)?;
    let v = split_heads(g, v, b, lk, heads, dh)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, T::one() / T::of(dh as f64).sqrt());
    let attn = g.softmax(scores)?;
    let ctx = g.bmm(attn, v, false)?;
    let ctx = g.reshape(ctx, &[b, heads, lq, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = if unbatched {
        g.reshape(ctx, &[lq, d])?
    } else {
        g.reshape(ctx, &[b, lq, d])?
    };
    let out = proj(g, ctx, "o")?;
    Ok(MhaOutput {
        out,
        attn,
        batch: b,
        heads,
    })
}

/// Reads the softmax node of an attention call into an [`AttentionWeights`].
pub fn read_weights<T: Scalar>(g: &Graph<T>, mha: &MhaOutput) -> AttentionWeights {
    let t = g.value(mha.attn);
    let s = t.shape();
    AttentionWeights {
        batch: mha.batch,
        heads: mha.heads,
        queries: s[1],
        keys: s[2],
        weights: t.data().iter().map(|v| v.as_f64()).collect(),
    }
}

/// Self-attention convenience over plain tensors: `(output, weights)`.
pub fn self_attention<T: Scalar>(
    store: &ParamStore<T>,
    prefix: &str,
    x: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, AttentionWeights)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let mha = multi_head_attention(&mut g, store, prefix, xv, xv, xv, heads)?;
    Ok((g.value(mha.out).clone(), read_weights(&g, &mha)))
}
