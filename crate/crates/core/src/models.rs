//! The four clip classifiers, each mapping a `[t, S, S, 3]` clip to a crossing probability.
//!
//! | arch              | pipeline                                                              |
//! |-------------------|-----------------------------------------------------------------------|
//! | `i3d`             | 3-D conv stack → latent image → global average pool → dense → sigmoid |
//! | `i3d-trans`       | 3-D conv stack → row/column attention blocks → pool → dense → sigmoid |
//! | `inception-trans` | per-frame 2-D CNN → frame vectors → encoder blocks → mean → dense     |
//! | `vivit`           | tubelet tokens → spatial then temporal attention blocks → mean → dense|
//!
//! All backbones are small and trained from scratch. Conv layer lists are generated
//! by [`ModelConfig::new`] and stored explicitly in the config, so a checkpoint
//! carries the exact geometry it was trained with.

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cropper::CropClip;
use crate::error::{Error, Result};
use crate::nncore::{
    init_mha, multi_head_attention, read_weights, AttentionRecord, AttentionRecorder, AttentionStage, ConvGeom,
    Graph, ParamStore, Scalar, Tensor, Var,
};
use crate::spatialattn::{self, feed_forward, grid_encoding, init_ffn, layer_norm, sequence_encoding, SeqSpatialConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    I3dLite,
    I3dTrans,
    InceptionTrans,
    FactorizedVit,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::I3dLite,
        Architecture::I3dTrans,
        Architecture::InceptionTrans,
        Architecture::FactorizedVit,
    ];

    /// Command-line spelling.
    pub fn flag(self) -> &'static str {
        match self {
            Architecture::I3dLite => "i3d",
            Architecture::I3dTrans => "i3d-trans",
            Architecture::InceptionTrans => "inception-trans",
            Architecture::FactorizedVit => "vivit",
        }
    }

    pub fn has_attention(self) -> bool {
        self != Architecture::I3dLite
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "i3d" | "i3d_lite" => Architecture::I3dLite,
            "i3d-trans" | "i3d_trans" => Architecture::I3dTrans,
            "inception-trans" | "inception_trans" => Architecture::InceptionTrans,
            "vivit" | "factorized_vit" => Architecture::FactorizedVit,
            other => {
                return Err(Error::invalid(format!(
                    "unknown architecture '{other}' (expected i3d, i3d-trans, inception-trans or vivit)"
                )))
            }
        })
    }
}

/// One conv layer of a backbone, followed by ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub geom: ConvGeom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub input_size: usize,
    pub frames: usize,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    /// 3-D stack for the i3d variants, per-frame stack (temporal kernel 1) for inception-trans.
    pub conv_layers: Vec<ConvLayer>,
    /// `[frames per group, patch side]`; only used by vivit.
    pub tubelet: [usize; 2],
    pub positional_encoding: bool,
    pub seed: u64,
}

/// Conv stack that halves space down to 4×4 and, if `collapse_time`, halves time down to 1.
/// Layer `i` has `min(d, 16·2^i)` channels; the last layer always has `d`.
pub fn default_conv_layers(input_size: usize, frames: usize, d: usize, collapse_time: bool) -> Vec<ConvLayer> {
    let mut layers = Vec::new();
    let (mut s, mut t) = (input_size, frames);
    while s > 4 || (collapse_time && t > 1) {
        let (ks, ss, ps) = if s > 4 { (3, 2, 1) } else { (1, 1, 0) };
        let (kt, st, pt) = if collapse_time && t > 1 { (3, 2, 1) } else { (1, 1, 0) };
        let geom = ConvGeom {
            kernel: [kt, ks, ks],
            stride: [st, ss, ss],
            pad: [pt, ps, ps],
        };
        let [t2, s2, _] = geom.output_dims([t, s, s]).expect("kernel fits after padding");
        layers.push(ConvLayer {
            out_channels: (16usize << layers.len().min(16)).min(d),
            geom,
        });
        t = t2;
        s = s2;
    }
    if let Some(last) = layers.last_mut() {
        last.out_channels = d;
    }
    layers
}

impl ModelConfig {
    /// Desk-scale defaults: d=64, 4 heads, 2 blocks, FFN width 128, 8 frames,
    /// tubelets of 2 frames × (S/4)².
    pub fn new(architecture: Architecture, input_size: usize) -> Self {
        let frames = 8;
        let d = 64;
        let conv_layers = match architecture {
            Architecture::I3dLite | Architecture::I3dTrans => default_conv_layers(input_size, frames, d, true),
            Architecture::InceptionTrans => default_conv_layers(input_size, frames, d, false),
            Architecture::FactorizedVit => Vec::new(),
        };
        ModelConfig {
            architecture,
            input_size,
            frames,
            d,
            heads: 4,
            blocks: 2,
            ffn_hidden: 128,
            conv_layers,
            tubelet: [2, (input_size / 4).max(1)],
            positional_encoding: true,
            seed: 0,
        }
    }

    /// Rebuilds the conv stacks after changing `input_size`, `frames` or `d`.
    pub fn regenerate_layers(&mut self) {
        self.conv_layers = match self.architecture {
            Architecture::I3dLite | Architecture::I3dTrans => {
                default_conv_layers(self.input_size, self.frames, self.d, true)
            }
            Architecture::InceptionTrans => default_conv_layers(self.input_size, self.frames, self.d, false),
            Architecture::FactorizedVit => Vec::new(),
        };
    }

    /// Output `[t, h, w, c]` of the conv stack.
    pub fn backbone_output(&self) -> Result<[usize; 4]> {
        let mut dims = [self.frames, self.input_size, self.input_size];
        let mut c = 3;
        for (i, l) in self.conv_layers.iter().enumerate() {
            dims = l.geom.output_dims(dims).ok_or_else(|| {
                Error::invalid(format!("conv layer {i} does not fit input {dims:?}"))
            })?;
            c = l.out_channels;
        }
        Ok([dims[0], dims[1], dims[2], c])
    }

    pub fn spatial_config(&self) -> Result<SeqSpatialConfig> {
        let [_, h, w, c] = self.backbone_output()?;
        Ok(SeqSpatialConfig {
            latent_rows: h,
            latent_cols: w,
            d_in: c,
            d: self.d,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            num_blocks: self.blocks,
            positional_encoding: self.positional_encoding,
        })
    }

    /// `(groups, rows, cols)` of the tubelet token grid.
    pub fn token_grid(&self) -> (usize, usize, usize) {
        let [tt, p] = self.tubelet;
        (self.frames / tt.max(1), self.input_size / p.max(1), self.input_size / p.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.frames == 0 || self.d == 0 {
            return Err(Error::invalid("input size, frames and d must be >= 1"));
        }
        if self.architecture.has_attention() {
            if self.heads == 0 || self.d % self.heads != 0 {
                return Err(Error::invalid(format!("d={} not divisible by heads={}", self.d, self.heads)));
            }
            if self.positional_encoding && self.d % 2 != 0 {
                return Err(Error::invalid(format!("positional encoding needs even d, got {}", self.d)));
            }
        }
        match self.architecture {
            Architecture::I3dLite | Architecture::I3dTrans => {
                let [t, ..] = self.backbone_output()?;
                if t != 1 {
                    return Err(Error::invalid(format!(
                        "conv stack leaves {t} time steps; it must condense time to 1"
                    )));
                }
            }
            Architecture::InceptionTrans => {
                let [t, ..] = self.backbone_output()?;
                if t != self.frames {
                    return Err(Error::invalid("per-frame encoder must keep every frame"));
                }
            }
            Architecture::FactorizedVit => {
                let [tt, p] = self.tubelet;
                if tt == 0 || p == 0 || self.frames % tt != 0 || self.input_size % p != 0 {
                    return Err(Error::invalid(format!(
                        "tubelet {tt}x{p}x{p} does not tile {} frames of {}x{}",
                        self.frames, self.input_size, self.input_size
                    )));
                }
            }
        }
        Ok(())
    }
}

fn init_head<T: Scalar>(store: &mut ParamStore<T>, d: usize) {
    // zero classifier: an untrained model outputs exactly 0.5
    store.init_zeros("head.w", &[d, 1]);
    store.init_zeros("head.b", &[1]);
}

fn init_convs<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, layers: &[ConvLayer], rng: &mut ChaCha8Rng) {
    let mut cin = 3;
    for (i, l) in layers.iter().enumerate() {
        let [kt, kh, kw] = l.geom.kernel;
        let fan_in = kt * kh * kw * cin;
        store.init_uniform(&format!("{prefix}.conv{i}.w"), &[kt, kh, kw, cin, l.out_channels], fan_in, rng);
        store.init_zeros(&format!("{prefix}.conv{i}.b"), &[l.out_channels]);
        cin = l.out_channels;
    }
}

fn init_encoder_block<T: Scalar>(store: &mut ParamStore<T>, p: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    init_mha(store, &format!("{p}.attn"), cfg.d, rng);
    store.init_layer_norm(&format!("{p}.ln1"), cfg.d);
    init_ffn(store, p, cfg.d, cfg.ffn_hidden, rng);
    store.init_layer_norm(&format!("{p}.ln2"), cfg.d);
}

/// Fresh parameters for `cfg`, seeded from `cfg.seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    match cfg.architecture {
        Architecture::I3dLite => {
            init_convs(&mut store, "backbone", &cfg.conv_layers, &mut rng);
            init_head(&mut store, cfg.backbone_output()?[3]);
        }
        Architecture::I3dTrans => {
            init_convs(&mut store, "backbone", &cfg.conv_layers, &mut rng);
            spatialattn::init_params(&mut store, "sa", &cfg.spatial_config()?, &mut rng);
            init_head(&mut store, cfg.d);
        }
        Architecture::InceptionTrans => {
            init_convs(&mut store, "frame", &cfg.conv_layers, &mut rng);
            store.init_linear("frame.embed", cfg.backbone_output()?[3], cfg.d, &mut rng);
            for b in 0..cfg.blocks {
                init_encoder_block(&mut store, &format!("seq.block{b}"), cfg, &mut rng);
            }
            init_head(&mut store, cfg.d);
        }
        Architecture::FactorizedVit => {
            let [tt, p] = cfg.tubelet;
            store.init_linear("vit.embed", tt * p * p * 3, cfg.d, &mut rng);
            for b in 0..cfg.blocks {
                let pre = format!("vit.block{b}");
                init_mha(&mut store, &format!("{pre}.spatial"), cfg.d, &mut rng);
                store.init_layer_norm(&format!("{pre}.ln1"), cfg.d);
                init_mha(&mut store, &format!("{pre}.temporal"), cfg.d, &mut rng);
                store.init_layer_norm(&format!("{pre}.ln2"), cfg.d);
                init_ffn(&mut store, &pre, cfg.d, cfg.ffn_hidden, &mut rng);
                store.init_layer_norm(&format!("{pre}.ln3"), cfg.d);
            }
            init_head(&mut store, cfg.d);
        }
    }
    Ok(store)
}

fn conv_stack<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    layers: &[ConvLayer],
    mut x: Var,
) -> Result<Var> {
    for (i, l) in layers.iter().enumerate() {
        let w = g.param(store, &format!("{prefix}.conv{i}.w"))?;
        let b = g.param(store, &format!("{prefix}.conv{i}.b"))?;
        x = g.conv3d(x, w, b, l.geom)?;
        x = g.relu(x);
    }
    Ok(x)
}

fn check_clip<T: Scalar>(g: &Graph<T>, cfg: &ModelConfig, clip: Var) -> Result<()> {
    let want = [cfg.frames, cfg.input_size, cfg.input_size, 3];
    if g.shape(clip) != want {
        return Err(Error::shape("model input", format!("{:?}, expected {want:?}", g.shape(clip))));
    }
    Ok(())
}

/// 3-D conv stack that condenses the clip to a `[rows, cols, channels]` latent image.
pub fn i3d_lite_backbone<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &ModelConfig, clip: Var) -> Result<Var> {
    check_clip(g, cfg, clip)?;
    let y = conv_stack(g, store, "backbone", &cfg.conv_layers, clip)?;
    let s = g.shape(y).to_vec();
    if s[0] != 1 {
        return Err(Error::shape("i3d_lite_backbone", format!("time not condensed: {s:?}")));
    }
    g.reshape(y, &s[1..])
}

/// Mean over every axis but the last: `[.., c] → [c]`.
fn pool_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let c = *s.last().unwrap();
    let n = s.iter().product::<usize>() / c;
    let flat = g.reshape(x, &[n, c])?;
    g.mean_axis(flat, 0)
}

fn classify<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, pooled: Var) -> Result<Var> {
    let c = g.shape(pooled)[0];
    let row = g.reshape(pooled, &[1, c])?;
    let w = g.param(store, "head.w")?;
    let b = g.param(store, "head.b")?;
    let logit = g.linear(row, w, b)?;
    let logit = g.reshape(logit, &[1])?;
    Ok(g.sigmoid(logit))
}

/// Shared per-frame CNN followed by a projection: `[t, S, S, 3] → [t, d]`.
pub fn frame_encoder<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &ModelConfig, clip: Var) -> Result<Var> {
    check_clip(g, cfg, clip)?;
    let y = conv_stack(g, store, "frame", &cfg.conv_layers, clip)?;
    let s = g.shape(y).to_vec();
    let per_frame = g.reshape(y, &[s[0], s[1] * s[2], s[3]])?;
    let pooled = g.mean_axis(per_frame, 1)?;
    let w = g.param(store, "frame.embed.w")?;
    let b = g.param(store, "frame.embed.b")?;
    g.linear(pooled, w, b)
}

fn push_record<T: Scalar>(
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

/// Post-LN encoder over the frame sequence `[t, d]`.
pub fn temporal_encoder<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    h: Var,
    mut rec: Option<&mut AttentionRecorder>,
) -> Result<Var> {
    let mut x = h;
    if cfg.positional_encoding {
        x = g.add_const(x, &sequence_encoding(cfg.frames, cfg.d))?;
    }
    for b in 0..cfg.blocks {
        let p = format!("seq.block{b}");
        let name = format!("{p}.attn");
        let mha = multi_head_attention(g, store, &name, x, x, x, cfg.heads)?;
        push_record(g, &mha, &name, AttentionStage::Sequence, &mut rec);
        let r = g.add(x, mha.out)?;
        x = layer_norm(g, store, &format!("{p}.ln1"), r)?;
        let f = feed_forward(g, store, &p, x)?;
        let r = g.add(x, f)?;
        x = layer_norm(g, store, &format!("{p}.ln2"), r)?;
    }
    Ok(x)
}

/// Cuts the clip into tubelets and embeds each: `[t, S, S, 3] → [groups, rows·cols, d]`.
pub fn tubelet_embed<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &ModelConfig, clip: Var) -> Result<Var> {
    check_clip(g, cfg, clip)?;
    let [tt, p] = cfg.tubelet;
    let (groups, rows, cols) = cfg.token_grid();
    let x = g.reshape(clip, &[groups, tt, rows, p, cols, p, 3])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5, 6])?;
    let x = g.reshape(x, &[groups, rows * cols, tt * p * p * 3])?;
    let w = g.param(store, "vit.embed.w")?;
    let b = g.param(store, "vit.embed.b")?;
    let mut x = g.linear(x, w, b)?;
    if cfg.positional_encoding {
        x = g.add_const(x, &tubelet_encoding(groups, rows, cols, cfg.d)?)?;
    }
    Ok(x)
}

/// 2-D grid encoding of the token position plus 1-D encoding of its frame group.
fn tubelet_encoding<T: Scalar>(groups: usize, rows: usize, cols: usize, d: usize) -> Result<Tensor<T>> {
    let space = grid_encoding::<f64>(rows, cols, d)?;
    let time = sequence_encoding::<f64>(groups, d);
    let n = rows * cols;
    Ok(Tensor::from_fn(&[groups, n, d], |i| {
        let (gi, rest) = (i / (n * d), i % (n * d));
        T::of(space.data()[rest] + time.data()[gi * d + rest % d])
    }))
}

/// Factorized blocks over `[groups, tokens, d]`: attention within each group, then across groups.
pub fn factorized_blocks<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    tokens: Var,
    mut rec: Option<&mut AttentionRecorder>,
) -> Result<Var> {
    let mut x = tokens;
    for b in 0..cfg.blocks {
        let p = format!("vit.block{b}");
        let name = format!("{p}.spatial");
        let mha = multi_head_attention(g, store, &name, x, x, x, cfg.heads)?;
        push_record(g, &mha, &name, AttentionStage::Spatial, &mut rec);
        let r = g.add(x, mha.out)?;
        x = layer_norm(g, store, &format!("{p}.ln1"), r)?;

        let name = format!("{p}.temporal");
        let xt = g.permute(x, &[1, 0, 2])?;
        let mha = multi_head_attention(g, store, &name, xt, xt, xt, cfg.heads)?;
        push_record(g, &mha, &name, AttentionStage::Temporal, &mut rec);
        let back = g.permute(mha.out, &[1, 0, 2])?;
        let r = g.add(x, back)?;
        x = layer_norm(g, store, &format!("{p}.ln2"), r)?;

        let f = feed_forward(g, store, &p, x)?;
        let r = g.add(x, f)?;
        x = layer_norm(g, store, &format!("{p}.ln3"), r)?;
    }
    Ok(x)
}

/// Crossing probability (shape `[1]`) for one normalized clip `[t, S, S, 3]`.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    clip: Var,
    rec: Option<&mut AttentionRecorder>,
) -> Result<Var> {
    let pooled = match cfg.architecture {
        Architecture::I3dLite => {
            let latent = i3d_lite_backbone(g, store, cfg, clip)?;
            pool_tokens(g, latent)?
        }
        Architecture::I3dTrans => {
            let latent = i3d_lite_backbone(g, store, cfg, clip)?;
            let sa = cfg.spatial_config()?;
            let x = spatialattn::block_forward(g, store, "sa", &sa, latent, rec)?;
            pool_tokens(g, x)?
        }
        Architecture::InceptionTrans => {
            let h = frame_encoder(g, store, cfg, clip)?;
            let x = temporal_encoder(g, store, cfg, h, rec)?;
            pool_tokens(g, x)?
        }
        Architecture::FactorizedVit => {
            let tokens = tubelet_embed(g, store, cfg, clip)?;
            let x = factorized_blocks(g, store, cfg, tokens, rec)?;
            pool_tokens(g, x)?
        }
    };
    classify(g, store, pooled)
}

/// `u8 / 255 - 0.5` per channel.
pub fn normalize_pixel<T: Scalar>(v: u8) -> T {
    T::of(v as f64 / 255.0 - 0.5)
}

/// Stacks frames into a normalized `[t, h, w, 3]` tensor.
pub fn frames_tensor<T: Scalar>(frames: &[RgbImage]) -> Result<Tensor<T>> {
    let first = frames.first().ok_or_else(|| Error::invalid("clip has no frames"))?;
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(frames.len() * (w * h * 3) as usize);
    for f in frames {
        if f.dimensions() != (w, h) {
            return Err(Error::shape("frames_tensor", "frames differ in size"));
        }
        data.extend(f.as_raw().iter().map(|&v| normalize_pixel::<T>(v)));
    }
    Tensor::new(vec![frames.len(), h as usize, w as usize, 3], data)
}

pub fn clip_tensor<T: Scalar>(clip: &CropClip) -> Result<Tensor<T>> {
    frames_tensor(&clip.frames)
}

/// A configured architecture with its parameters.
#[derive(Clone, Debug)]
pub struct ModelAssembly {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl ModelAssembly {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(ModelAssembly { config, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn predict(&self, clip: &Tensor<f32>) -> Result<f32> {
        let mut g = Graph::new();
        let x = g.input(clip.clone());
        let p = forward(&mut g, &self.params, &self.config, x, None)?;
        Ok(g.value(p).item())
    }

    /// Prediction plus every attention map of the pass (empty for `i3d`).
    pub fn predict_with_attention(&self, clip: &Tensor<f32>) -> Result<(f32, AttentionRecorder)> {
        let mut rec = AttentionRecorder::new();
        let mut g = Graph::new();
        let x = g.input(clip.clone());
        let p = forward(&mut g, &self.params, &self.config, x, Some(&mut rec))?;
        Ok((g.value(p).item(), rec))
    }
}
