//! Attention rollout and heatmap rendering.
//!
//! Rollout: heads are averaged into `A`, the residual path is folded in as
//! `Ã = 0.5·A + 0.5·I` (rows renormalized), and layers compose as `Ã_L ⋯ Ã_1`.
//! The models pool by averaging tokens, so a token's relevance is the mean of its
//! column over all query rows.
//!
//! Factorized (spatial/temporal) stacks are rolled out per stage: spatial layers per
//! frame group, temporal layers per token position. A group's pixel relevance is its
//! spatial relevance scaled by the group's temporal relevance.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Architecture, ModelAssembly};
use crate::nncore::{AttentionRecord, AttentionRecorder, AttentionStage, AttentionWeights, Tensor};
use crate::trackdata::write_atomic;

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Matrix { n, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        Matrix { n, data: out }
    }

    /// Mean of each column over all rows.
    pub fn column_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v / self.n as f64;
            }
        }
        out
    }
}

/// `0.5·A + 0.5·I` with rows renormalized to sum to one.
pub fn residual_adjust(a: &Matrix) -> Matrix {
    let n = a.n;
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..n {
            out.data[i * n + j] = 0.5 * a.data[i * n + j] + if i == j { 0.5 } else { 0.0 };
        }
        let s: f64 = out.row(i).iter().sum();
        if s > 0.0 {
            for v in &mut out.data[i * n..(i + 1) * n] {
                *v /= s;
            }
        }
    }
    out
}

/// Head-averaged attention of batch element `b`.
pub fn head_mean(w: &AttentionWeights, b: usize) -> Result<Matrix> {
    if w.queries != w.keys {
        return Err(Error::shape(
            "rollout",
            format!("attention is {}x{}, not square", w.queries, w.keys),
        ));
    }
    if b >= w.batch {
        return Err(Error::shape("rollout", format!("batch index {b} of {}", w.batch)));
    }
    Ok(Matrix {
        n: w.queries,
        data: w.head_mean(b),
    })
}

/// `Ã_L ⋯ Ã_1` over head-averaged layer matrices, first layer first.
pub fn rollout(layers: &[Matrix]) -> Result<Matrix> {
    let first = layers.first().ok_or_else(|| Error::invalid("rollout needs at least one layer"))?;
    let n = first.n;
    let mut acc = Matrix::identity(n);
    for (i, a) in layers.iter().enumerate() {
        if a.n != n || a.data.len() != n * n {
            return Err(Error::shape(
                "rollout",
                format!("layer {i} has {} tokens, expected {n}", a.n),
            ));
        }
        acc = residual_adjust(a).matmul(&acc);
    }
    Ok(acc)
}

/// Relevance of each token under mean pooling: column means of the rollout.
pub fn token_relevance(layers: &[Matrix]) -> Result<Vec<f64>> {
    Ok(rollout(layers)?.column_means())
}

fn stage_records<'a>(records: &'a [AttentionRecord], stage: AttentionStage) -> Vec<&'a AttentionWeights> {
    records.iter().filter(|r| r.stage == stage).map(|r| &r.weights).collect()
}

/// Relevance from a spatial/temporal factorized stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizedRelevance {
    /// `[group][token]`.
    pub spatial: Vec<Vec<f64>>,
    /// One value per frame group.
    pub temporal: Vec<f64>,
    /// `spatial[g][n] · temporal[g]`.
    pub combined: Vec<Vec<f64>>,
}

pub fn factorized_rollout(records: &[AttentionRecord]) -> Result<FactorizedRelevance> {
    let spatial_layers = stage_records(records, AttentionStage::Spatial);
    let temporal_layers = stage_records(records, AttentionStage::Temporal);
    if spatial_layers.is_empty() || temporal_layers.is_empty() {
        return Err(Error::invalid("factorized rollout needs spatial and temporal layers"));
    }
    let groups = spatial_layers[0].batch;
    let tokens = spatial_layers[0].queries;
    for w in &spatial_layers {
        if w.batch != groups || w.queries != tokens {
            return Err(Error::shape("factorized_rollout", "spatial layers disagree on token grid"));
        }
    }
    for w in &temporal_layers {
        if w.batch != tokens || w.queries != groups {
            return Err(Error::shape(
                "factorized_rollout",
                format!(
                    "temporal layer is {}x{}x{}, expected {tokens} positions over {groups} groups",
                    w.batch, w.queries, w.keys
                ),
            ));
        }
    }
    let mut spatial = Vec::with_capacity(groups);
    for g in 0..groups {
        let mats = spatial_layers.iter().map(|w| head_mean(w, g)).collect::<Result<Vec<_>>>()?;
        spatial.push(token_relevance(&mats)?);
    }
    let mut temporal = vec![0.0; groups];
    for n in 0..tokens {
        let mats = temporal_layers.iter().map(|w| head_mean(w, n)).collect::<Result<Vec<_>>>()?;
        for (t, r) in temporal.iter_mut().zip(token_relevance(&mats)?) {
            *t += r / tokens as f64;
        }
    }
    let combined = spatial
        .iter()
        .zip(&temporal)
        .map(|(s, t)| s.iter().map(|v| v * t).collect())
        .collect();
    Ok(FactorizedRelevance {
        spatial,
        temporal,
        combined,
    })
}

/// Expands per-row or per-column attention on a `rows × cols` grid to a full
/// token-by-token matrix (tokens in row-major order).
pub fn expand_axial(w: &AttentionWeights, stage: AttentionStage, rows: usize, cols: usize) -> Result<Matrix> {
    let n = rows * cols;
    let mut m = Matrix {
        n,
        data: vec![0.0; n * n],
    };
    match stage {
        AttentionStage::Row => {
            if w.batch != rows || w.queries != cols || w.keys != cols {
                return Err(Error::shape("expand_axial", "row attention does not match grid"));
            }
            for r in 0..rows {
                let a = w.head_mean(r);
                for q in 0..cols {
                    for k in 0..cols {
                        m.data[(r * cols + q) * n + r * cols + k] = a[q * cols + k];
                    }
                }
            }
        }
        AttentionStage::Column => {
            if w.batch != cols || w.queries != rows || w.keys != rows {
                return Err(Error::shape("expand_axial", "column attention does not match grid"));
            }
            for c in 0..cols {
                let a = w.head_mean(c);
                for q in 0..rows {
                    for k in 0..rows {
                        m.data[(q * cols + c) * n + k * cols + c] = a[q * rows + k];
                    }
                }
            }
        }
        _ => return Err(Error::invalid("only row and column stages are axial")),
    }
    Ok(m)
}

/// Relevance over the latent grid of a row/column attention stack.
pub fn axial_relevance(records: &[AttentionRecord], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mats = records
        .iter()
        .map(|r| expand_axial(&r.weights, r.stage, rows, cols))
        .collect::<Result<Vec<_>>>()?;
    token_relevance(&mats)
}

/// Per-pixel relevance for one frame, `size × size`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub size: usize,
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.size + x]
    }

    /// Share of total heat inside `mask` (weights in `[0, 1]`, same layout).
    pub fn mass_in(&self, mask: &[f32]) -> f64 {
        let total: f64 = self.values.iter().map(|v| *v as f64).sum();
        if total == 0.0 {
            return 0.0;
        }
        let inside: f64 = self.values.iter().zip(mask).map(|(v, m)| (*v * *m) as f64).sum();
        inside / total
    }
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all ones.
pub fn normalize_min_max(values: &mut [f32]) {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        values.iter_mut().for_each(|v| *v = 1.0);
        return;
    }
    let span = hi - lo;
    values.iter_mut().for_each(|v| *v = (*v - lo) / span);
}

/// Interpolation taps along one axis: token `k` is anchored at pixel `⌊(k + ½)·size/n⌋`,
/// pixels between two anchors blend linearly, pixels past the outer anchors clamp.
/// Every token owns a pixel carrying exactly its value, so upsampling never moves the peak.
fn axis_taps(n: usize, size: usize) -> Vec<(usize, usize, f32)> {
    let anchor = |k: usize| ((k as f64 + 0.5) * size as f64 / n as f64).floor() as usize;
    (0..size)
        .map(|x| {
            if n == 1 || x <= anchor(0) {
                return (0, 0, 0.0);
            }
            if x >= anchor(n - 1) {
                return (n - 1, n - 1, 0.0);
            }
            let k = (0..n - 1).find(|&k| x < anchor(k + 1)).unwrap();
            let (a, b) = (anchor(k), anchor(k + 1));
            (k, k + 1, (x - a) as f32 / (b - a) as f32)
        })
        .collect()
}

/// Bilinearly upsamples a `rows × cols` relevance grid to `size × size` and normalizes it.
pub fn relevance_to_heatmap(relevance: &[f64], rows: usize, cols: usize, size: usize) -> Result<Heatmap> {
    if relevance.len() != rows * cols || rows == 0 || cols == 0 || size < rows.max(cols) {
        return Err(Error::shape(
            "relevance_to_heatmap",
            format!("{} values for a {rows}x{cols} grid at size {size}", relevance.len()),
        ));
    }
    let (xt, yt) = (axis_taps(cols, size), axis_taps(rows, size));
    let at = |r: usize, c: usize| relevance[r * cols + c] as f32;
    let mut values = Vec::with_capacity(size * size);
    for &(r0, r1, fy) in &yt {
        for &(c0, c1, fx) in &xt {
            let top = (1.0 - fx) * at(r0, c0) + fx * at(r0, c1);
            let bottom = (1.0 - fx) * at(r1, c0) + fx * at(r1, c1);
            values.push((1.0 - fy) * top + fy * bottom);
        }
    }
    normalize_min_max(&mut values);
    Ok(Heatmap { size, values })
}

/// Fixed black → red → yellow → white ramp.
pub fn heat_color(h: f32) -> [f32; 3] {
    let h = h.clamp(0.0, 1.0);
    [
        (3.0 * h).min(1.0) * 255.0,
        (3.0 * h - 1.0).clamp(0.0, 1.0) * 255.0,
        (3.0 * h - 2.0).clamp(0.0, 1.0) * 255.0,
    ]
}

/// Opacity of the color ramp at full relevance.
pub const OVERLAY_ALPHA: f32 = 0.6;

/// `(1 − α·h)·pixel + α·h·color(h)`; a zero heatmap leaves the frame unchanged.
pub fn blend(frame: &RgbImage, heat: &Heatmap) -> Result<RgbImage> {
    let (w, h) = frame.dimensions();
    if w as usize != heat.size || h as usize != heat.size {
        return Err(Error::shape(
            "overlay",
            format!("frame {w}x{h} vs heatmap {0}x{0}", heat.size),
        ));
    }
    let mut out = frame.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let v = heat.at(x as usize, y as usize);
        let a = OVERLAY_ALPHA * v.clamp(0.0, 1.0);
        let c = heat_color(v);
        for ch in 0..3 {
            px.0[ch] = ((1.0 - a) * px.0[ch] as f32 + a * c[ch]).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Top row: the frames side by side. Bottom row: each frame blended with its heatmap.
pub fn overlay_image(frames: &[RgbImage], heatmaps: &[Heatmap]) -> Result<RgbImage> {
    if frames.is_empty() || frames.len() != heatmaps.len() {
        return Err(Error::invalid(format!(
            "{} frames vs {} heatmaps",
            frames.len(),
            heatmaps.len()
        )));
    }
    let (w, h) = frames[0].dimensions();
    let mut canvas = RgbImage::from_pixel(w * frames.len() as u32, 2 * h, Rgb([0, 0, 0]));
    for (i, (f, hm)) in frames.iter().zip(heatmaps).enumerate() {
        if f.dimensions() != (w, h) {
            return Err(Error::shape("overlay", "frames differ in size"));
        }
        let blended = blend(f, hm)?;
        image::imageops::replace(&mut canvas, f, (i as u32 * w) as i64, 0);
        image::imageops::replace(&mut canvas, &blended, (i as u32 * w) as i64, h as i64);
    }
    Ok(canvas)
}

/// Writes [`overlay_image`] as PNG; nothing is left behind on failure.
pub fn overlay_export(frames: &[RgbImage], heatmaps: &[Heatmap], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let img = overlay_image(frames, heatmaps)?;
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_atomic(path, &buf.into_inner())
}

const DUMP_MAGIC: &[u8; 8] = b"PXATTN01";

/// Binary dump of recorded attention:
///
/// ```text
/// "PXATTN01" | u32 layers | per layer: u32 stage, u32 name length, name bytes,
///              u32 batch, u32 heads, u32 queries, u32 keys, f32 LE weights
/// ```
pub fn attention_dump_bytes(rec: &AttentionRecorder) -> Vec<u8> {
    let mut out = DUMP_MAGIC.to_vec();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    u32le(&mut out, rec.records.len());
    for r in &rec.records {
        u32le(&mut out, r.stage.code() as usize);
        u32le(&mut out, r.layer.len());
        out.extend_from_slice(r.layer.as_bytes());
        let w = &r.weights;
        for v in [w.batch, w.heads, w.queries, w.keys] {
            u32le(&mut out, v);
        }
        for v in &w.weights {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_attention_dump(rec: &AttentionRecorder, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &attention_dump_bytes(rec))
}

pub fn parse_attention_dump(bytes: &[u8], path: &Path) -> Result<AttentionRecorder> {
    let corrupt = |m: String| Error::Corrupt {
        path: path.to_path_buf(),
        message: m,
    };
    if bytes.len() < 12 || &bytes[..8] != DUMP_MAGIC {
        return Err(corrupt("not an attention dump".into()));
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| corrupt(format!("truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let layers = read_u32(take(4)?);
    let mut rec = AttentionRecorder::new();
    for _ in 0..layers {
        let code = read_u32(take(4)?) as u32;
        let stage = AttentionStage::from_code(code).ok_or_else(|| corrupt(format!("unknown stage {code}")))?;
        let name_len = read_u32(take(4)?);
        let layer = String::from_utf8(take(name_len)?.to_vec()).map_err(|e| corrupt(e.to_string()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u32(take(4)?);
        }
        let n = dims.iter().product::<usize>();
        let raw = take(4 * n)?;
        let weights = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        rec.records.push(AttentionRecord {
            layer,
            stage,
            weights: AttentionWeights::new(dims[0], dims[1], dims[2], dims[3], weights)?,
        });
    }
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes".into()));
    }
    Ok(rec)
}

pub fn read_attention_dump(path: impl AsRef<Path>) -> Result<AttentionRecorder> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_attention_dump(&bytes, path)
}

/// Everything `explain` produces for one clip.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub score: f32,
    /// One per input frame, `S × S`.
    pub heatmaps: Vec<Heatmap>,
    /// Relevance per frame (uniform when the architecture has no temporal attention).
    pub frame_relevance: Vec<f64>,
    pub attention: AttentionRecorder,
}

/// Runs the model with attention recording and converts the maps to per-frame heatmaps.
pub fn explain(model: &ModelAssembly, clip: &Tensor<f32>) -> Result<Explanation> {
    let cfg = &model.config;
    let (score, attention) = model.predict_with_attention(clip)?;
    let s = cfg.input_size;
    let t = cfg.frames;
    let (heatmaps, frame_relevance) = match cfg.architecture {
        Architecture::I3dLite => {
            return Err(Error::invalid("the i3d baseline has no attention to explain"));
        }
        Architecture::I3dTrans => {
            let [_, rows, cols, _] = cfg.backbone_output()?;
            let rel = axial_relevance(&attention.records, rows, cols)?;
            let hm = relevance_to_heatmap(&rel, rows, cols, s)?;
            (vec![hm; t], vec![1.0 / t as f64; t])
        }
        Architecture::InceptionTrans => {
            let mats = attention
                .records
                .iter()
                .map(|r| head_mean(&r.weights, 0))
                .collect::<Result<Vec<_>>>()?;
            let rel = token_relevance(&mats)?;
            let flat = Heatmap {
                size: s,
                values: vec![1.0; s * s],
            };
            (vec![flat; t], rel)
        }
        Architecture::FactorizedVit => {
            let (groups, rows, cols) = cfg.token_grid();
            let f = factorized_rollout(&attention.records)?;
            let per_group = f
                .combined
                .iter()
                .map(|r| relevance_to_heatmap(r, rows, cols, s))
                .collect::<Result<Vec<_>>>()?;
            let tt = t / groups;
            let heatmaps = (0..t).map(|i| per_group[i / tt].clone()).collect();
            let frame_relevance = (0..t).map(|i| f.temporal[i / tt] / tt as f64).collect();
            (heatmaps, frame_relevance)
        }
    };
    Ok(Explanation {
        score,
        heatmaps,
        frame_relevance,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sha2::{Digest, Sha256};

    use super::*;

    fn random_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n {
            let row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| v / s));
        }
        Matrix { n, data }
    }

    fn weights_from(mats: &[Matrix]) -> AttentionWeights {
        let n = mats[0].n;
        let data = mats.iter().flat_map(|m| m.data.clone()).collect();
        AttentionWeights::new(mats.len(), 1, n, n, data).unwrap()
    }

    #[test]
    fn identity_stack_is_identity() {
        for k in 1..5 {
            let layers = vec![Matrix::identity(4); k];
            assert_eq!(rollout(&layers).unwrap(), Matrix::identity(4));
        }
    }

    #[test]
    fn two_uniform_layers_closed_form() {
        let u = Matrix {
            n: 2,
            data: vec![0.5; 4],
        };
        let adj = residual_adjust(&u);
        assert_eq!(adj.data, vec![0.75, 0.25, 0.25, 0.75]);
        let r = rollout(&[u.clone(), u]).unwrap();
        let want = [0.625, 0.375, 0.375, 0.625];
        for (a, b) in r.data.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_stacks_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.gen_range(1..12);
            let depth = rng.gen_range(1..6);
            let layers: Vec<Matrix> = (0..depth).map(|_| random_stochastic(&mut rng, n)).collect();
            let r = rollout(&layers).unwrap();
            for i in 0..n {
                let s: f64 = r.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(r.row(i).iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn inserting_identity_layer_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layers: Vec<Matrix> = (0..3).map(|_| random_stochastic(&mut rng, 5)).collect();
        let base = rollout(&layers).unwrap();
        for at in 0..=3 {
            let mut l = layers.clone();
            l.insert(at, Matrix::identity(5));
            let r = rollout(&l).unwrap();
            let err = r.data.iter().zip(&base.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-15, "insert at {at}: {err}");
        }
    }

    #[test]
    fn rollout_rejects_bad_stacks() {
        assert!(rollout(&[]).is_err());
        assert!(rollout(&[Matrix::identity(3), Matrix::identity(4)]).is_err());
        let rect = AttentionWeights::new(1, 1, 2, 3, vec![0.0; 6]).unwrap();
        assert!(head_mean(&rect, 0).is_err());
    }

    #[test]
    fn heads_are_averaged() {
        let w = AttentionWeights::new(1, 2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(head_mean(&w, 0).unwrap().data, vec![0.5; 4]);
    }

    fn record(stage: AttentionStage, w: AttentionWeights) -> AttentionRecord {
        AttentionRecord {
            layer: format!("{stage:?}"),
            stage,
            weights: w,
        }
    }

    #[test]
    fn uniform_temporal_relevance_keeps_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (groups, tokens) = (3, 4);
        let spatial: Vec<Matrix> = (0..groups).map(|_| random_stochastic(&mut rng, tokens)).collect();
        let uniform = Matrix {
            n: groups,
            data: vec![1.0 / groups as f64; groups * groups],
        };
        let recs = vec![
            record(AttentionStage::Spatial, weights_from(&spatial)),
            record(AttentionStage::Temporal, weights_from(&vec![uniform; tokens])),
        ];
        let f = factorized_rollout(&recs).unwrap();
        for t in &f.temporal {
            assert!((t - 1.0 / groups as f64).abs() < 1e-12);
        }
        for g in 0..groups {
            let solo = token_relevance(&[spatial[g].clone()]).unwrap();
            for (c, s) in f.combined[g].iter().zip(&solo) {
                assert!((c * groups as f64 - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_group_has_unit_temporal_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spatial = vec![random_stochastic(&mut rng, 4)];
        let recs = vec![
            record(AttentionStage::Spatial, weights_from(&spatial)),
            record(AttentionStage::Temporal, weights_from(&vec![Matrix::identity(1); 4])),
        ];
        let f = factorized_rollout(&recs).unwrap();
        assert_eq!(f.temporal, vec![1.0]);
        assert_eq!(f.combined[0], f.spatial[0]);
    }

    #[test]
    fn factorized_product_normalizes_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (groups, side) = (rng.gen_range(1..4), rng.gen_range(2..4));
            let tokens = side * side;
            let spatial: Vec<Matrix> = (0..groups).map(|_| random_stochastic(&mut rng, tokens)).collect();
            let temporal: Vec<Matrix> = (0..tokens).map(|_| random_stochastic(&mut rng, groups)).collect();
            let recs = vec![
                record(AttentionStage::Spatial, weights_from(&spatial)),
                record(AttentionStage::Temporal, weights_from(&temporal)),
            ];
            let f = factorized_rollout(&recs).unwrap();
            let total: f64 = f.temporal.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            for g in 0..groups {
                assert!((f.spatial[g].iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let hm = relevance_to_heatmap(&f.combined[g], side, side, 8).unwrap();
                let max = hm.values.iter().copied().fold(0.0f32, f32::max);
                assert!(max == 1.0 && hm.values.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn factorized_rollout_needs_both_stages() {
        let recs = vec![record(AttentionStage::Spatial, weights_from(&[Matrix::identity(2)]))];
        assert!(factorized_rollout(&recs).is_err());
    }

    #[test]
    fn one_hot_token_peaks_inside_its_block() {
        let (side, size) = (4, 32);
        let block = size / side;
        for tok in 0..side * side {
            let mut rel = vec![0.0; side * side];
            rel[tok] = 1.0;
            let hm = relevance_to_heatmap(&rel, side, side, size).unwrap();
            let (arg, _) = hm
                .values
                .iter()
                .enumerate()
                .fold((0, f32::MIN), |b, (i, v)| if *v > b.1 { (i, *v) } else { b });
            let (x, y) = (arg % size, arg / size);
            assert_eq!((y / block) * side + x / block, tok);
        }
    }

    #[test]
    fn uniform_relevance_gives_all_ones() {
        let hm = relevance_to_heatmap(&[0.25; 4], 2, 2, 16).unwrap();
        assert!(hm.values.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn heatmap_argmax_maps_back_to_argmax_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (side, size) = (4, 32);
        for _ in 0..100 {
            let rel: Vec<f64> = (0..side * side).map(|_| rng.gen_range(0.0..1.0)).collect();
            let best = rel.iter().enumerate().fold((0, f64::MIN), |b, (i, v)| if *v > b.1 { (i, *v) } else { b }).0;
            let hm = relevance_to_heatmap(&rel, side, side, size).unwrap();
            let arg = hm
                .values
                .iter()
                .enumerate()
                .fold((0, f32::MIN), |b, (i, v)| if *v > b.1 { (i, *v) } else { b })
                .0;
            let block = size / side;
            assert_eq!(((arg / size) / block) * side + (arg % size) / block, best);
        }
    }

    #[test]
    fn grid_mismatch_rejected() {
        assert!(relevance_to_heatmap(&[1.0; 5], 2, 2, 8).is_err());
    }

    fn test_frame(seed: u64, size: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(size, size, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
    }

    #[test]
    fn zero_heatmap_leaves_frame_unchanged() {
        let f = test_frame(7, 16);
        let zero = Heatmap {
            size: 16,
            values: vec![0.0; 256],
        };
        assert_eq!(blend(&f, &zero).unwrap(), f);
    }

    #[test]
    fn overlay_layout_has_two_rows() {
        let frames = vec![test_frame(8, 8), test_frame(9, 8)];
        let hms = vec![
            Heatmap {
                size: 8,
                values: vec![0.0; 64],
            };
            2
        ];
        let img = overlay_image(&frames, &hms).unwrap();
        assert_eq!(img.dimensions(), (16, 16));
        assert_eq!(img.get_pixel(9, 3), frames[1].get_pixel(1, 3));
        assert_eq!(img.get_pixel(9, 11), frames[1].get_pixel(1, 3));
    }

    #[test]
    fn overlay_golden_pixels() {
        let frames: Vec<RgbImage> = (0..3).map(|i| test_frame(100 + i, 16)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let hms: Vec<Heatmap> = (0..3)
            .map(|_| {
                let rel: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
                relevance_to_heatmap(&rel, 4, 4, 16).unwrap()
            })
            .collect();
        let img = overlay_image(&frames, &hms).unwrap();
        let digest = Sha256::digest(img.as_raw());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, GOLDEN_OVERLAY, "overlay pixels changed");
    }

    const GOLDEN_OVERLAY: &str = "565cb112f0a7f9526faae6b7226052336e7734a987759053f311c7c241ce0031";

    #[test]
    fn overlay_to_invalid_path_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("missing").join("x.png");
        let frames = vec![test_frame(10, 8)];
        let hms = vec![Heatmap {
            size: 8,
            values: vec![0.5; 64],
        }];
        assert!(overlay_export(&frames, &hms, &target).is_err());
        assert!(!target.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
        let ok = dir.path().join("ok.png");
        overlay_export(&frames, &hms, &ok).unwrap();
        let back = image::open(&ok).unwrap().to_rgb8();
        assert_eq!(back, overlay_image(&frames, &hms).unwrap());
    }

    #[test]
    fn axial_expansion_is_block_structured() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (rows, cols) = (2, 3);
        let row_mats: Vec<Matrix> = (0..rows).map(|_| random_stochastic(&mut rng, cols)).collect();
        let col_mats: Vec<Matrix> = (0..cols).map(|_| random_stochastic(&mut rng, rows)).collect();
        let r = expand_axial(&weights_from(&row_mats), AttentionStage::Row, rows, cols).unwrap();
        let c = expand_axial(&weights_from(&col_mats), AttentionStage::Column, rows, cols).unwrap();
        // token (1, 2) = index 5 attends within row 1 and within column 2 only
        assert_eq!(r.data[5 * 6 + 3], row_mats[1].data[2 * 3]);
        assert_eq!(r.data[5 * 6 + 2], 0.0);
        assert_eq!(c.data[5 * 6 + 2], col_mats[2].data[2]);
        assert_eq!(c.data[5 * 6 + 4], 0.0);
        for m in [&r, &c] {
            for i in 0..6 {
                assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dump_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut rec = AttentionRecorder::new();
        rec.records.push(record(
            AttentionStage::Temporal,
            weights_from(&[random_stochastic(&mut rng, 3), random_stochastic(&mut rng, 3)]),
        ));
        rec.records.push(record(AttentionStage::Row, weights_from(&[random_stochastic(&mut rng, 2)])));
        let bytes = attention_dump_bytes(&rec);
        let back = parse_attention_dump(&bytes, Path::new("d")).unwrap();
        assert_eq!(back.records.len(), 2);
        for (a, b) in back.records.iter().zip(&rec.records) {
            assert_eq!((a.stage, &a.layer), (b.stage, &b.layer));
            for (x, y) in a.weights.weights.iter().zip(&b.weights.weights) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert!(parse_attention_dump(&bytes[..bytes.len() - 2], Path::new("d")).is_err());
        assert!(parse_attention_dump(b"garbage!", Path::new("d")).is_err());
    }

    #[test]
    fn explain_covers_every_attention_model() {
        use crate::models::ModelConfig;
        for arch in Architecture::ALL {
            let mut cfg = ModelConfig::new(arch, 16);
            cfg.d = 8;
            cfg.heads = 2;
            cfg.ffn_hidden = 8;
            cfg.tubelet = [2, 4];
            cfg.regenerate_layers();
            let m = ModelAssembly::new(cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let clip = Tensor::from_fn(&[8, 16, 16, 3], |_| rng.gen_range(-0.5..0.5f32));
            match explain(&m, &clip) {
                Err(_) => assert_eq!(arch, Architecture::I3dLite),
                Ok(e) => {
                    assert_eq!(e.heatmaps.len(), 8);
                    assert_eq!(e.frame_relevance.len(), 8);
                    assert!((e.frame_relevance.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{arch}");
                    for h in &e.heatmaps {
                        assert_eq!(h.values.len(), 256);
                        assert!(h.values.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
                    }
                }
            }
        }
    }

    #[test]
    fn mass_counts_share_of_heat() {
        let hm = Heatmap {
            size: 2,
            values: vec![1.0, 1.0, 0.0, 2.0],
        };
        assert_eq!(hm.mass_in(&[1.0, 0.0, 0.0, 0.0]), 0.25);
        assert_eq!(hm.mass_in(&[0.0, 0.0, 0.0, 1.0]), 0.5);
    }
}
