//! Mini-batch training with Adam and binary cross-entropy, plus checkpoints.
//!
//! Each sample gets its own tape; gradients are averaged over the batch before
//! the optimizer step, so results do not depend on how samples are scheduled.
//! Batch order in epoch `e` comes from a permutation seeded with `(seed, e)`,
//! which makes a run fully reproducible and resumable from `(seed, epoch)`.
//!
//! # Checkpoint layout
//!
//! ```text
//! magic "PXCKPT" | u16 version | u64 header length | JSON header | f32 LE blobs | SHA-256 of all prior bytes
//! ```
//!
//! The header lists every blob (`name`, `group`, `shape`) in storage order; groups
//! are `param`, `adam_m` and `adam_v`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cropper::{crop_clip, CropConfig, CropMode};
use crate::error::{Error, Result};
use crate::models::{clip_tensor, forward, Architecture, ModelAssembly, ModelConfig};
use crate::nncore::{adam_step, bce, AdamConfig, AdamState, Graph, ParamStore, Tensor};
use crate::sampler::{ObservationWindow, SamplingConfig, SplitConfig};
use crate::trackdata::{write_atomic, CrossingLabel, FrameSource, Manifest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub crop_mode: CropMode,
    /// Evaluate the validation set every this many epochs (and always after the last).
    pub report_every: usize,
    /// Stop once validation accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
    /// Track split the training windows came from; lets evaluation rebuild the held-out set.
    pub split: SplitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 20,
            seed: 0,
            adam: AdamConfig::default(),
            crop_mode: CropMode::Dynamic,
            report_every: 1,
            stop_at_accuracy: None,
            split: SplitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

/// One model input with its target.
#[derive(Clone, Debug)]
pub struct Example {
    pub sample_id: String,
    pub track_id: String,
    pub label: CrossingLabel,
    pub clip: Tensor<f32>,
}

/// Crops every window and converts it to a normalized tensor, spreading work over
/// `workers` threads. Output order matches `windows`.
pub fn build_examples(
    manifest: &Manifest,
    windows: &[ObservationWindow],
    frames: &dyn FrameSource,
    crop: &CropConfig,
    workers: usize,
) -> Result<Vec<Example>> {
    let one = |w: &ObservationWindow| -> Result<Example> {
        let track = manifest
            .track(&w.track_id)
            .ok_or_else(|| Error::invalid(format!("window refers to unknown track {}", w.track_id)))?;
        let clip = crop_clip(track, w, frames, crop)?;
        Ok(Example {
            sample_id: clip.sample_id(),
            track_id: w.track_id.clone(),
            label: w.label,
            clip: clip_tensor(&clip)?,
        })
    };
    parallel_map(windows, workers, one)
}

/// Order-preserving map over scoped worker threads.
pub fn parallel_map<I, O, F>(items: &[I], workers: usize, f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O> + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let parts: Vec<Result<Vec<O>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<O>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub batch_losses: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation: Option<ValidationSummary>,
}

/// Everything needed to resume training or evaluate a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub train: TrainConfig,
    pub crop: CropConfig,
    pub sampling: SamplingConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer: AdamState<f32>,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn new(model: ModelAssembly, train: TrainConfig, crop: CropConfig, sampling: SamplingConfig) -> Self {
        Checkpoint {
            model: model.config,
            params: model.params,
            train,
            crop,
            sampling,
            epoch: 0,
            optimizer: AdamState::new(),
            history: Vec::new(),
        }
    }

    pub fn assembly(&self) -> ModelAssembly {
        ModelAssembly {
            config: self.model.clone(),
            params: self.params.clone(),
        }
    }

    /// Refuses a checkpoint trained for a different architecture.
    pub fn expect_architecture(&self, arch: Architecture) -> Result<()> {
        if self.model.architecture != arch {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds a {} model, not {}",
                self.model.architecture, arch
            )));
        }
        Ok(())
    }

    pub fn predict(&self, clip: &Tensor<f32>) -> Result<f32> {
        let mut g = Graph::new();
        let x = g.input(clip.clone());
        let p = forward(&mut g, &self.params, &self.model, x, None)?;
        Ok(g.value(p).item())
    }
}

/// Scores for each example, computed in parallel; order matches `examples`.
pub fn predict_all(model: &ModelConfig, params: &ParamStore<f32>, examples: &[Example], workers: usize) -> Result<Vec<f32>> {
    parallel_map(examples, workers, |e| {
        let mut g = Graph::new();
        let x = g.input(e.clip.clone());
        let p = forward(&mut g, params, model, x, None)?;
        Ok(g.value(p).item())
    })
}

fn target(label: CrossingLabel) -> f32 {
    label.as_target() as f32
}

fn is_correct(p: f32, label: CrossingLabel) -> bool {
    (p >= 0.5) == (label == CrossingLabel::Crossing)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
}

pub fn validate_examples(ckpt: &Checkpoint, examples: &[Example], workers: usize) -> Result<ValidationSummary> {
    let scores = predict_all(&ckpt.model, &ckpt.params, examples, workers)?;
    let n = examples.len().max(1) as f64;
    let loss = scores
        .iter()
        .zip(examples)
        .map(|(&p, e)| bce(p as f64, target(e.label) as f64))
        .sum::<f64>()
        / n;
    let correct = scores.iter().zip(examples).filter(|(&p, e)| is_correct(p, e.label)).count();
    Ok(ValidationSummary {
        samples: examples.len(),
        loss,
        accuracy: correct as f64 / n,
    })
}

/// Drives epochs over a checkpoint in place.
pub struct Trainer {
    pub checkpoint: Checkpoint,
    pub workers: usize,
}

impl Trainer {
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        checkpoint.train.validate()?;
        checkpoint.model.validate()?;
        Ok(Trainer { checkpoint, workers: 1 })
    }

    /// One pass over `train` in the epoch's seeded order.
    pub fn run_epoch(&mut self, train: &[Example], validation: &[Example]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let ck = &mut self.checkpoint;
        let epoch = ck.epoch;
        let order = epoch_order(ck.train.seed, epoch, train.len());
        let mut batch_losses = Vec::new();
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, idx) in order.chunks(ck.train.batch_size).enumerate() {
            let inv = 1.0 / idx.len() as f32;
            let mut acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            let mut batch_loss = 0.0f64;
            for &i in idx {
                let ex = &train[i];
                let mut g = Graph::new();
                let x = g.input(ex.clip.clone());
                let p = forward(&mut g, &ck.params, &ck.model, x, None)?;
                let pv = g.value(p).item();
                let loss = g.bce_loss(p, &[target(ex.label)])?;
                let lv = g.value(loss).item() as f64;
                if !lv.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss in epoch {epoch}, batch {b} (sample {})",
                        ex.sample_id
                    )));
                }
                batch_loss += lv;
                correct += is_correct(pv, ex.label) as usize;
                let grads = g.backward(loss)?;
                for (name, grad) in g.param_grads(&grads) {
                    match acc.get_mut(&name) {
                        Some(sum) => {
                            for (s, v) in sum.data_mut().iter_mut().zip(grad.data()) {
                                *s += v * inv;
                            }
                        }
                        None => {
                            let mut t = grad;
                            t.data_mut().iter_mut().for_each(|v| *v *= inv);
                            acc.insert(name, t);
                        }
                    }
                }
            }
            let grads: Vec<(String, Tensor<f32>)> = acc.into_iter().collect();
            adam_step(&mut ck.params, &grads, &mut ck.optimizer, &ck.train.adam).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} in epoch {epoch}, batch {b}")),
                other => other,
            })?;
            loss_sum += batch_loss;
            batch_losses.push(batch_loss / idx.len() as f64);
        }
        ck.epoch += 1;
        let last = ck.epoch == ck.train.epochs;
        let report = ck.train.report_every > 0 && (ck.epoch % ck.train.report_every == 0 || last);
        let validation = if !validation.is_empty() && report {
            Some(validate_examples(ck, validation, self.workers)?)
        } else {
            None
        };
        let ck = &mut self.checkpoint;
        let rec = EpochRecord {
            epoch: ck.epoch,
            steps: ck.optimizer.step,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            batch_losses,
            validation,
        };
        log::info!(
            "epoch {}/{}: loss {:.4}, train acc {:.3}{}",
            rec.epoch,
            ck.train.epochs,
            rec.train_loss,
            rec.train_accuracy,
            rec.validation
                .as_ref()
                .map(|v| format!(", validation acc {:.3}", v.accuracy))
                .unwrap_or_default()
        );
        ck.history.push(rec.clone());
        Ok(rec)
    }

    /// Runs the remaining epochs, stopping early if the validation target is met.
    pub fn fit(&mut self, train: &[Example], validation: &[Example]) -> Result<()> {
        while self.checkpoint.epoch < self.checkpoint.train.epochs {
            let rec = self.run_epoch(train, validation)?;
            if let (Some(target), Some(v)) = (self.checkpoint.train.stop_at_accuracy, &rec.validation) {
                if v.accuracy >= target {
                    log::info!("validation accuracy {:.3} reached target, stopping", v.accuracy);
                    break;
                }
            }
        }
        Ok(())
    }
}

/// Trains a fresh model for `cfg.epochs` epochs.
pub fn train(
    model: ModelConfig,
    cfg: TrainConfig,
    crop: CropConfig,
    sampling: SamplingConfig,
    train: &[Example],
    validation: &[Example],
    workers: usize,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let assembly = ModelAssembly::new(model)?;
    let mut t = Trainer::new(Checkpoint::new(assembly, cfg, crop, sampling))?;
    t.workers = workers;
    t.fit(train, validation)?;
    Ok(t.checkpoint)
}

/// One JSON object per epoch.
pub fn write_metrics_log(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    for rec in history {
        serde_json::to_writer(&mut buf, rec)?;
        buf.push(b'\n');
    }
    write_atomic(path.as_ref(), &buf)
}

const MAGIC: &[u8; 6] = b"PXCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    crop: CropConfig,
    sampling: SamplingConfig,
    epoch: usize,
    rng: RngState,
    optimizer_step: u64,
    history: Vec<EpochRecord>,
    blobs: Vec<BlobEntry>,
}

/// Shuffles are a pure function of these two values.
#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_epoch: usize,
}

pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut put = |name: &str, group: &str, shape: Vec<usize>, values: &[f32]| {
        blobs.push(BlobEntry {
            name: name.to_string(),
            group: group.to_string(),
            shape,
        });
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in ck.params.iter() {
        put(name, "param", t.shape().to_vec(), t.data());
    }
    for (group, map) in [("adam_m", &ck.optimizer.first), ("adam_v", &ck.optimizer.second)] {
        for (name, v) in map {
            put(name, group, vec![v.len()], v);
        }
    }
    let header = Header {
        model: ck.model.clone(),
        train: ck.train.clone(),
        crop: ck.crop.clone(),
        sampling: ck.sampling.clone(),
        epoch: ck.epoch,
        rng: RngState {
            seed: ck.train.seed,
            next_epoch: ck.epoch,
        },
        optimizer_step: ck.optimizer.step,
        history: ck.history.clone(),
        blobs,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(CHECKPOINT_VERSION as u16).to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_bytes(ck)?)
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::Corrupt {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if bytes.len() < MAGIC.len() + 2 + 8 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u16::from_le_bytes([bytes[6], bytes[7]]) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)"));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let json = body.get(16..16 + hlen).ok_or_else(|| corrupt("header length out of range"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;
    let mut data = &body[16 + hlen..];
    let mut params = ParamStore::new();
    let mut optimizer = AdamState::new();
    optimizer.step = header.optimizer_step;
    for b in &header.blobs {
        let n: usize = b.shape.iter().product();
        if data.len() < 4 * n {
            return Err(corrupt(&format!("blob {} truncated", b.name)));
        }
        let (raw, rest) = data.split_at(4 * n);
        data = rest;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        match b.group.as_str() {
            "param" => params.insert(b.name.clone(), Tensor::new(b.shape.clone(), values)?),
            "adam_m" => {
                optimizer.first.insert(b.name.clone(), values);
            }
            "adam_v" => {
                optimizer.second.insert(b.name.clone(), values);
            }
            other => return Err(corrupt(&format!("unknown blob group {other}"))),
        }
    }
    if !data.is_empty() {
        return Err(corrupt("trailing bytes after blobs"));
    }
    let expected = crate::models::init_params::<f32>(&header.model)?;
    for (name, t) in expected.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => return Err(corrupt(&format!("parameter {name} missing or misshapen"))),
        }
    }
    Ok(Checkpoint {
        model: header.model,
        params,
        train: header.train,
        crop: header.crop,
        sampling: header.sampling,
        epoch: header.epoch,
        optimizer,
        history: header.history,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}
