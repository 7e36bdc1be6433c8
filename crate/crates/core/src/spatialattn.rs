//! Sequential row-then-column attention over a latent image `[rows, cols, d]`.
//!
//! Per block:
//!
//! ```text
//! x_att  = MHA_row(x)                    // within each row, across its columns
//! x_attT = MHA_col(permute(x_att))       // within each column, across its rows
//! x      = LayerNorm(x + permute(x_attT))
//! x      = LayerNorm(x + FFN(x))
//! ```
//!
//! The input embedding `x·W_e + b_e` and positional encoding are applied once,
//! before the first block. There is no residual around the row stage alone.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{
    init_mha, multi_head_attention, read_weights, AttentionRecord, AttentionRecorder, AttentionStage, Graph,
    ParamStore, Scalar, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqSpatialConfig {
    pub latent_rows: usize,
    pub latent_cols: usize,
    /// Channel depth of the incoming latent image.
    pub d_in: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub num_blocks: usize,
    pub positional_encoding: bool,
}

impl Default for SeqSpatialConfig {
    fn default() -> Self {
        SeqSpatialConfig {
            latent_rows: 4,
            latent_cols: 4,
            d_in: 64,
            d: 64,
            heads: 4,
            ffn_hidden: 128,
            num_blocks: 2,
            positional_encoding: true,
        }
    }
}

impl SeqSpatialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::invalid(format!("d={} not divisible by heads={}", self.d, self.heads)));
        }
        if self.latent_rows == 0 || self.latent_cols == 0 || self.d_in == 0 {
            return Err(Error::invalid("latent dimensions must be >= 1"));
        }
        if self.positional_encoding && self.d % 2 != 0 {
            return Err(Error::invalid(format!("positional encoding needs even d, got {}", self.d)));
        }
        Ok(())
    }
}

/// Sinusoidal value for one channel of a 1-D encoding of width `dim`.
pub fn sinusoid(pos: usize, channel: usize, dim: usize) -> f64 {
    let pair = (channel - channel % 2) as f64;
    let angle = pos as f64 / 10000f64.powf(pair / dim as f64);
    if channel % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// `[len, d]` table of 1-D sinusoidal encodings.
pub fn sequence_encoding<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, d], |i| T::of(sinusoid(i / d, i % d, d)))
}

/// `[rows, cols, d]` table: the first `d/2` channels encode the row, the last `d/2` the column.
pub fn grid_encoding<T: Scalar>(rows: usize, cols: usize, d: usize) -> Result<Tensor<T>> {
    if d % 2 != 0 {
        return Err(Error::invalid(format!("2-D positional encoding needs even depth, got {d}")));
    }
    let half = d / 2;
    Ok(Tensor::from_fn(&[rows, cols, d], |i| {
        let ch = i % d;
        let cell = i / d;
        let (r, c) = (cell / cols, cell % cols);
        T::of(if ch < half {
            sinusoid(r, ch, half)
        } else {
            sinusoid(c, ch - half, half)
        })
    }))
}

/// `x + E` where `E` depends only on the grid position.
pub fn positional_encode<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("positional_encode", format!("{s:?}")));
    }
    let table = grid_encoding(s[0], s[1], s[2])?;
    g.add_const(x, &table)
}

fn record<T: Scalar>(
    g: &Graph<T>,
    mha: &crate::nncore::MhaOutput,
    layer: &str,
    stage: AttentionStage,
    rec: &mut Option<&mut AttentionRecorder>,
) {
    if let Some(r) = rec.as_deref_mut() {
        r.records.push(AttentionRecord {
            layer: layer.to_string(),
            stage,
            weights: read_weights(g, mha),
        });
    }
}

/// Self-attention inside each row of `x[rows, cols, d]`.
pub fn row_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    rec: &mut Option<&mut AttentionRecorder>,
) -> Result<Var> {
    let mha = multi_head_attention(g, store, prefix, x, x, x, heads)?;
    record(g, &mha, prefix, AttentionStage::Row, rec);
    Ok(mha.out)
}

/// Self-attention inside each column: permute, attend, permute back.
pub fn col_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    rec: &mut Option<&mut AttentionRecorder>,
) -> Result<Var> {
    let xt = g.permute(x, &[1, 0, 2])?;
    let mha = multi_head_attention(g, store, prefix, xt, xt, xt, heads)?;
    record(g, &mha, prefix, AttentionStage::Column, rec);
    g.permute(mha.out, &[1, 0, 2])
}

/// Two-layer position-wise feed-forward with ReLU.
pub fn feed_forward<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = g.param(store, &format!("{prefix}.ffn1.w"))?;
    let b1 = g.param(store, &format!("{prefix}.ffn1.b"))?;
    let w2 = g.param(store, &format!("{prefix}.ffn2.w"))?;
    let b2 = g.param(store, &format!("{prefix}.ffn2.b"))?;
    let h = g.linear(x, w1, b1)?;
    let h = g.relu(h);
    g.linear(h, w2, b2)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

pub fn init_ffn<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) {
    store.init_linear(&format!("{prefix}.ffn1"), d, hidden, rng);
    store.init_linear(&format!("{prefix}.ffn2"), hidden, d, rng);
}

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &SeqSpatialConfig, rng: &mut ChaCha8Rng) {
    store.init_linear(&format!("{prefix}.embed"), cfg.d_in, cfg.d, rng);
    for b in 0..cfg.num_blocks {
        let p = format!("{prefix}.block{b}");
        init_mha(store, &format!("{p}.row"), cfg.d, rng);
        init_mha(store, &format!("{p}.col"), cfg.d, rng);
        store.init_layer_norm(&format!("{p}.ln1"), cfg.d);
        init_ffn(store, &p, cfg.d, cfg.ffn_hidden, rng);
        store.init_layer_norm(&format!("{p}.ln2"), cfg.d);
    }
}

/// Embed, encode positions, then run `num_blocks` sequential-attention blocks.
/// `x` is `[rows, cols, d_in]`; the result is `[rows, cols, d]`.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &SeqSpatialConfig,
    x: Var,
    mut rec: Option<&mut AttentionRecorder>,
) -> Result<Var> {
    cfg.validate()?;
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] != cfg.d_in {
        return Err(Error::shape(
            "block_forward",
            format!("latent {s:?} vs configured depth {}", cfg.d_in),
        ));
    }
    let we = g.param(store, &format!("{prefix}.embed.w"))?;
    let be = g.param(store, &format!("{prefix}.embed.b"))?;
    let mut x = g.linear(x, we, be)?;
    if cfg.positional_encoding {
        x = positional_encode(g, x)?;
    }
    for b in 0..cfg.num_blocks {
        let p = format!("{prefix}.block{b}");
        let x_att = row_attention(g, store, &format!("{p}.row"), x, cfg.heads, &mut rec)?;
        let x_att_t = col_attention(g, store, &format!("{p}.col"), x_att, cfg.heads, &mut rec)?;
        let r = g.add(x, x_att_t)?;
        x = layer_norm(g, store, &format!("{p}.ln1"), r)?;
        let f = feed_forward(g, store, &p, x)?;
        let r = g.add(x, f)?;
        x = layer_norm(g, store, &format!("{p}.ln2"), r)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::nncore::{grad_check_with_params, DEFAULT_EPS, LAYER_NORM_EPS};

    fn cfg(rows: usize, cols: usize, d: usize, heads: usize, blocks: usize, pe: bool) -> SeqSpatialConfig {
        SeqSpatialConfig {
            latent_rows: rows,
            latent_cols: cols,
            d_in: d,
            d,
            heads,
            ffn_hidden: 2 * d,
            num_blocks: blocks,
            positional_encoding: pe,
        }
    }

    fn store(c: &SeqSpatialConfig, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init_params(&mut s, "sa", c, &mut rng);
        s
    }

    fn rand_latent(rows: usize, cols: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[rows, cols, d], |_| rng.gen_range(-1.0..1.0))
    }

    fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
        let s = t.shape();
        let (r, c, d) = (s[0], s[1], s[2]);
        Tensor::from_fn(&[c, r, d], |i| {
            let (cell, ch) = (i / d, i % d);
            let (ci, ri) = (cell / r, cell % r);
            t.data()[(ri * c + ci) * d + ch]
        })
    }

    #[test]
    fn zero_position_closed_form() {
        let e = grid_encoding::<f64>(3, 3, 8).unwrap();
        let at00 = &e.data()[..8];
        assert_eq!(at00, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn odd_depth_rejected() {
        assert!(grid_encoding::<f64>(2, 2, 7).is_err());
    }

    #[test]
    fn grid_encoding_is_injective() {
        let (rows, cols, d) = (64, 64, 16);
        let e = grid_encoding::<f64>(rows, cols, d).unwrap();
        let cells: Vec<&[f64]> = e.data().chunks(d).collect();
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                let diff = cells[i].iter().zip(cells[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff > 1e-9, "positions {i} and {j} collide");
            }
        }
    }

    #[test]
    fn encoding_is_additive() {
        let x = rand_latent(3, 4, 6, 1);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = positional_encode(&mut g, xv).unwrap();
        let table = grid_encoding::<f64>(3, 4, 6).unwrap();
        for ((o, a), b) in g.value(y).data().iter().zip(x.data()).zip(table.data()) {
            assert_eq!(*o, a + b);
        }
    }

    fn attend(rows: usize, cols: usize, d: usize, x: Tensor<f64>, col: bool) -> (Tensor<f64>, AttentionRecorder) {
        let c = cfg(rows, cols, d, 2, 1, false);
        let s = store(&c, 4);
        let mut g = Graph::new();
        let xv = g.input(x);
        let mut rec = AttentionRecorder::new();
        let mut r = Some(&mut rec);
        let y = if col {
            col_attention(&mut g, &s, "sa.block0.col", xv, 2, &mut r).unwrap()
        } else {
            row_attention(&mut g, &s, "sa.block0.row", xv, 2, &mut r).unwrap()
        };
        (g.value(y).clone(), rec)
    }

    #[test]
    fn singleton_rows_and_columns_attend_to_themselves() {
        let (_, rec) = attend(3, 1, 4, rand_latent(3, 1, 4, 2), false);
        assert!(rec.records[0].weights.weights.iter().all(|w| *w == 1.0));
        let (_, rec) = attend(1, 3, 4, rand_latent(1, 3, 4, 2), true);
        assert!(rec.records[0].weights.weights.iter().all(|w| *w == 1.0));
    }

    #[test]
    fn identical_row_pixels_get_uniform_weights() {
        let x = Tensor::from_fn(&[2, 5, 4], |i| {
            let row = i / 20;
            (row as f64 + 1.0) * ((i % 4) as f64 - 1.5)
        });
        let (_, rec) = attend(2, 5, 4, x, false);
        for w in &rec.records[0].weights.weights {
            assert!((w - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn row_attention_keeps_rows_independent() {
        let a = rand_latent(4, 3, 4, 5);
        let mut b = a.clone();
        for v in &mut b.data_mut()[2 * 3 * 4..3 * 3 * 4] {
            *v += 0.5;
        }
        let (ya, _) = attend(4, 3, 4, a, false);
        let (yb, _) = attend(4, 3, 4, b, false);
        for r in 0..4 {
            let sl = r * 12..(r + 1) * 12;
            let same = ya.data()[sl.clone()] == yb.data()[sl];
            assert_eq!(same, r != 2, "row {r}");
        }
    }

    #[test]
    fn col_attention_keeps_columns_independent() {
        let a = rand_latent(3, 4, 4, 6);
        let mut b = a.clone();
        for r in 0..3 {
            for ch in 0..4 {
                b.data_mut()[(r * 4 + 1) * 4 + ch] -= 0.7;
            }
        }
        let (ya, _) = attend(3, 4, 4, a, true);
        let (yb, _) = attend(3, 4, 4, b, true);
        for col in 0..4 {
            let mut same = true;
            for r in 0..3 {
                let o = (r * 4 + col) * 4;
                same &= ya.data()[o..o + 4] == yb.data()[o..o + 4];
            }
            assert_eq!(same, col != 1, "column {col}");
        }
    }

    #[test]
    fn col_of_transpose_is_transpose_of_row() {
        let c = cfg(3, 5, 4, 2, 1, false);
        let mut s = store(&c, 8);
        let names: Vec<String> = s.iter().map(|(k, _)| k.clone()).filter(|k| k.contains(".row.")).collect();
        for n in names {
            let t = s.get(&n).unwrap().clone();
            s.insert(n.replace(".row.", ".col."), t);
        }
        let x = rand_latent(3, 5, 4, 9);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let row = row_attention(&mut g, &s, "sa.block0.row", xv, 2, &mut None).unwrap();
        let xt = g.input(transpose(&x));
        let col = col_attention(&mut g, &s, "sa.block0.col", xt, 2, &mut None).unwrap();
        let lhs = g.value(col).clone();
        let rhs = transpose(g.value(row));
        assert!(lhs.max_abs_diff(&rhs) < 1e-14);
    }

    #[test]
    fn block_preserves_shape() {
        for blocks in [1, 2, 3] {
            let c = SeqSpatialConfig {
                d_in: 64,
                ..cfg(7, 7, 64, 4, blocks, true)
            };
            let s = store(&c, 10);
            let mut g = Graph::new();
            let x = g.input(rand_latent(7, 7, 64, 11));
            let y = block_forward(&mut g, &s, "sa", &c, x, None).unwrap();
            assert_eq!(g.shape(y), &[7, 7, 64]);
        }
    }

    fn ln_rows(x: &[f64], d: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for row in x.chunks(d) {
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / d as f64;
            out.extend(row.iter().map(|a| (a - m) / (v + LAYER_NORM_EPS).sqrt()));
        }
        out
    }

    #[test]
    fn zeroed_outputs_reduce_to_double_layer_norm() {
        let c = SeqSpatialConfig {
            d_in: 6,
            ..cfg(3, 4, 8, 2, 1, true)
        };
        let mut s = store(&c, 12);
        for name in ["row.o.w", "row.o.b", "col.o.w", "col.o.b", "ffn2.w", "ffn2.b"] {
            for v in s.get_mut(&format!("sa.block0.{name}")).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let x = rand_latent(3, 4, 6, 13);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = block_forward(&mut g, &s, "sa", &c, xv, None).unwrap();

        // independent reference: embed, add encoding, layer-norm twice
        let we = s.get("sa.embed.w").unwrap().data();
        let be = s.get("sa.embed.b").unwrap().data();
        let pe = grid_encoding::<f64>(3, 4, 8).unwrap();
        let mut emb = vec![0.0; 12 * 8];
        for p in 0..12 {
            for o in 0..8 {
                let mut acc = be[o];
                for i in 0..6 {
                    acc += x.data()[p * 6 + i] * we[i * 8 + o];
                }
                emb[p * 8 + o] = acc + pe.data()[p * 8 + o];
            }
        }
        let want = ln_rows(&ln_rows(&emb, 8), 8);
        let got = g.value(y).data();
        let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max err {err}");
    }

    #[test]
    fn column_permutation_equivariance_without_encoding() {
        let c = cfg(3, 4, 8, 2, 2, false);
        let s = store(&c, 14);
        let x = rand_latent(3, 4, 8, 15);
        let perm = [2usize, 0, 3, 1];
        let xp = Tensor::from_fn(&[3, 4, 8], |i| {
            let (cell, ch) = (i / 8, i % 8);
            let (r, col) = (cell / 4, cell % 4);
            x.data()[(r * 4 + perm[col]) * 8 + ch]
        });
        let run = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.input(t);
            let y = block_forward(&mut g, &s, "sa", &c, v, None).unwrap();
            g.value(y).clone()
        };
        let y = run(x);
        let yp = run(xp);
        for r in 0..3 {
            for col in 0..4 {
                let a = &yp.data()[(r * 4 + col) * 8..(r * 4 + col + 1) * 8];
                let b = &y.data()[(r * 4 + perm[col]) * 8..(r * 4 + perm[col] + 1) * 8];
                let err = a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                assert!(err < 1e-12, "cell ({r},{col}) differs by {err}");
            }
        }
    }

    #[test]
    fn full_block_gradient_check() {
        let c = cfg(3, 3, 8, 2, 1, true);
        let s = store(&c, 16);
        let x = rand_latent(3, 3, 8, 17);
        let rep = grad_check_with_params(
            |g, st, v| block_forward(g, st, "sa", &c, v[0], None),
            &s,
            &[x],
            DEFAULT_EPS,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn recorder_does_not_change_output() {
        let c = cfg(3, 4, 8, 2, 2, true);
        let s = store(&c, 18);
        let x = rand_latent(3, 4, 8, 19);
        let mut g1 = Graph::new();
        let v1 = g1.input(x.clone());
        let y1 = block_forward(&mut g1, &s, "sa", &c, v1, None).unwrap();
        let mut rec = AttentionRecorder::new();
        let mut g2 = Graph::new();
        let v2 = g2.input(x);
        let y2 = block_forward(&mut g2, &s, "sa", &c, v2, Some(&mut rec)).unwrap();
        assert_eq!(g1.value(y1), g2.value(y2));
        assert_eq!(rec.records.len(), 4);
        assert_eq!(rec.records[0].stage, AttentionStage::Row);
        assert_eq!(rec.records[1].stage, AttentionStage::Column);
        assert_eq!((rec.records[0].weights.batch, rec.records[0].weights.queries), (3, 4));
        assert_eq!((rec.records[1].weights.batch, rec.records[1].weights.queries), (4, 3));
    }
}
