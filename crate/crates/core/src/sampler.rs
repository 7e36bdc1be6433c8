//! Observation windows, track-level splits and training-set balancing.
//!
//! A window ends at `t_last` and keeps every `stride`-th frame walking back
//! from it: `t_last − (k−1)·stride, …, t_last` with `k = obs_len / stride`.

use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trackdata::{write_atomic, CrossingLabel, Manifest, PedestrianTrack, SplitTag};

// Separate ChaCha streams keep consumers sharing one user seed from drawing
// identical permutations (same seed and list length would otherwise line up).
const SPLIT_STREAM: u64 = 0x5350_4c49_5400;
const BALANCE_STREAM: u64 = 0x4241_4c41_4e00;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPolicy {
    /// Every admissible end frame.
    AllAdmissible,
    /// One admissible window per track, chosen with the sampling seed.
    OnePerTrack,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub obs_len_frames: u64,
    pub stride: u64,
    pub tte_min: i64,
    pub tte_max: i64,
    pub seed: u64,
    pub policy: WindowPolicy,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            obs_len_frames: 16,
            stride: 2,
            tte_min: 30,
            tte_max: 60,
            seed: 0,
            policy: WindowPolicy::AllAdmissible,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.obs_len_frames == 0 || self.obs_len_frames % self.stride != 0 {
            return Err(Error::invalid(format!(
                "observation length {} must be a positive multiple of stride {}",
                self.obs_len_frames, self.stride
            )));
        }
        if self.tte_min > self.tte_max {
            return Err(Error::invalid(format!(
                "tte_min {} exceeds tte_max {}",
                self.tte_min, self.tte_max
            )));
        }
        Ok(())
    }

    /// Frames per window after striding.
    pub fn clip_len(&self) -> usize {
        (self.obs_len_frames / self.stride) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub track_id: String,
    pub frame_indices: Vec<u64>,
    pub label: CrossingLabel,
    /// `event_frame − last observed index`.
    pub tte: i64,
    pub flipped: bool,
    #[serde(default)]
    pub split: SplitTag,
}

impl ObservationWindow {
    pub fn last_frame(&self) -> u64 {
        *self.frame_indices.last().expect("non-empty window")
    }

    pub fn sample_id(&self) -> String {
        crate::cropper::sample_id(&self.track_id, self.last_frame(), self.flipped)
    }
}

pub fn enumerate_windows(track: &PedestrianTrack, cfg: &SamplingConfig) -> Vec<ObservationWindow> {
    let first = match track.frames.first() {
        Some(f) => f.idx as i64,
        None => return Vec::new(),
    };
    let present: HashSet<u64> = track.frames.iter().map(|f| f.idx).collect();
    let k = cfg.clip_len() as u64;
    let mut out = Vec::new();
    for f in &track.frames {
        let t_last = f.idx as i64;
        let tte = track.event_frame - t_last;
        if tte < cfg.tte_min || tte > cfg.tte_max {
            continue;
        }
        if t_last - (cfg.obs_len_frames as i64 - 1) < first {
            continue;
        }
        let indices: Vec<u64> = (0..k).rev().map(|j| f.idx - j * cfg.stride).collect();
        if !indices.iter().all(|i| present.contains(i)) {
            continue;
        }
        out.push(ObservationWindow {
            track_id: track.track_id.clone(),
            frame_indices: indices,
            label: track.label,
            tte,
            flipped: false,
            split: track.split,
        });
    }
    out
}

/// Windows for a set of tracks under `cfg.policy`, in track order.
pub fn sample_windows<'a>(
    tracks: impl IntoIterator<Item = &'a PedestrianTrack>,
    cfg: &SamplingConfig,
) -> Vec<ObservationWindow> {
    let mut out = Vec::new();
    for (i, t) in tracks.into_iter().enumerate() {
        let mut w = enumerate_windows(t, cfg);
        if cfg.policy == WindowPolicy::OnePerTrack && w.len() > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let pick = rng.gen_range(0..w.len());
            w = vec![w.swap_remove(pick)];
        }
        out.extend(w);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrackSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Tracks in neither split.
    pub holdout: Vec<String>,
}

/// Ratios and seed for [`split_random`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_ratio: f64,
    pub test_ratio: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_ratio: 0.7,
            test_ratio: 0.2,
            seed: 0,
        }
    }
}

/// Seeded random split at track granularity.
pub fn split_random(m: &Manifest, train_ratio: f64, test_ratio: f64, seed: u64) -> Result<TrackSplit> {
    if m.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 tracks to split, got {}", m.len())));
    }
    if !(train_ratio > 0.0 && test_ratio > 0.0 && train_ratio + test_ratio <= 1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "ratios train={train_ratio} test={test_ratio} must be positive and sum to at most 1"
        )));
    }
    let n = m.len();
    let mut ids: Vec<String> = m.tracks.iter().map(|t| t.track_id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    ids.shuffle(&mut rng);
    let n_train = ((n as f64 * train_ratio).round() as usize).clamp(1, n - 1);
    let n_test = ((n as f64 * test_ratio).round() as usize).clamp(1, n - n_train);
    let holdout = ids.split_off(n_train + n_test);
    let test = ids.split_off(n_train);
    Ok(TrackSplit {
        train: ids,
        test,
        holdout,
    })
}

/// Uses the split tags already present in the manifest.
pub fn split_from_tags(m: &Manifest) -> TrackSplit {
    let pick = |tag: SplitTag| {
        m.tracks
            .iter()
            .filter(|t| t.split == tag)
            .map(|t| t.track_id.clone())
            .collect()
    };
    TrackSplit {
        train: pick(SplitTag::Train),
        test: pick(SplitTag::Test),
        holdout: pick(SplitTag::Unassigned),
    }
}

/// Returns a copy of `m` with split tags set from `split`.
pub fn apply_split(m: &Manifest, split: &TrackSplit) -> Manifest {
    let train: HashSet<&str> = split.train.iter().map(String::as_str).collect();
    let test: HashSet<&str> = split.test.iter().map(String::as_str).collect();
    let mut out = m.clone();
    for t in &mut out.tracks {
        t.split = if train.contains(t.track_id.as_str()) {
            SplitTag::Train
        } else if test.contains(t.track_id.as_str()) {
            SplitTag::Test
        } else {
            SplitTag::Unassigned
        };
    }
    out
}

/// Adds a mirrored twin of every window, then undersamples the majority class
/// (without replacement) down to the minority count.
pub fn balance_training_set(windows: &[ObservationWindow], seed: u64) -> Result<Vec<ObservationWindow>> {
    let mut augmented = Vec::with_capacity(windows.len() * 2);
    for w in windows {
        augmented.push(w.clone());
        augmented.push(ObservationWindow {
            flipped: !w.flipped,
            ..w.clone()
        });
    }
    let pos: Vec<usize> = (0..augmented.len())
        .filter(|&i| augmented[i].label == CrossingLabel::Crossing)
        .collect();
    let neg: Vec<usize> = (0..augmented.len())
        .filter(|&i| augmented[i].label == CrossingLabel::NonCrossing)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("balancing needs both crossing and non-crossing windows"));
    }
    let (minority, mut majority) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BALANCE_STREAM);
    majority.shuffle(&mut rng);
    majority.truncate(minority.len());
    let mut keep: Vec<usize> = minority.into_iter().chain(majority).collect();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| augmented[i].clone()).collect())
}

/// Window list: one JSON record per line with
/// `track_id, frame_indices, label, tte, flipped, split`.
pub fn write_windows(windows: &[ObservationWindow], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    for w in windows {
        serde_json::to_writer(&mut buf, w)?;
        buf.push(b'\n');
    }
    write_atomic(path.as_ref(), &buf)
}

pub fn read_windows(path: impl AsRef<Path>) -> Result<Vec<ObservationWindow>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
