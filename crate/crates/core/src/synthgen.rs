//! Deterministic synthetic street scenes with one pedestrian per track.
//!
//! The road lies on one side of a vertical curb line. Crossing pedestrians walk
//! laterally toward the curb with a scissor gait and lean into the motion.
//! Non-crossing pedestrians stand still or walk parallel to the curb. An optional
//! zebra marker sits on the road next to the curb: close enough to show up in a
//! static crop, far enough from the pedestrian to stay out of every dynamic crop.
//! Ground-truth masks (figure, head, legs, marker) are produced alongside the frames.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cropper::{CropConfig, CropMode};
use crate::error::{Error, Result};
use crate::sampler::{SamplingConfig, WindowPolicy};
use crate::trackdata::{
    write_atomic, write_manifest, BoundingBox, CrossingLabel, Manifest, MemoryFrames, PedestrianTrack, SplitTag,
    TrackFrame,
};
use crate::trainer::parallel_map;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Crossing,
    Standing,
    /// Walking along the curb (vertically in the image).
    Parallel,
}

impl Motion {
    pub fn label(self) -> CrossingLabel {
        match self {
            Motion::Crossing => CrossingLabel::Crossing,
            _ => CrossingLabel::NonCrossing,
        }
    }
}

/// Which side of the pedestrian the road is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Left => -1.0,
            Side::Right => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub track_id: String,
    /// `[width, height]`.
    pub image_size: [u32; 2],
    pub motion: Motion,
    pub marker: bool,
    pub road_side: Side,
    /// Contiguous frames rendered before the event frame.
    pub frames: u32,
    /// Frames from the last contiguous frame to the event frame.
    pub tte: i64,
    /// Figure height in pixels.
    pub figure_height: f64,
    /// Lateral speed toward the curb in px/frame. Also fixes the curb distance for
    /// non-crossing tracks, so distance alone says nothing about the label.
    pub speed: f64,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
    pub background_seed: u64,
}

impl ScenarioSpec {
    /// Defaults scaled to the image height (tuned at 64×64).
    pub fn new(track_id: impl Into<String>, image_size: [u32; 2], motion: Motion, marker: bool) -> Self {
        let u = image_size[1] as f64 / 64.0;
        ScenarioSpec {
            track_id: track_id.into(),
            image_size,
            motion,
            marker,
            road_side: Side::Right,
            frames: 16,
            tte: 45,
            figure_height: 24.0 * u,
            speed: 0.25 * u,
            noise: 4.0,
            background_seed: 0,
        }
    }

    pub fn label(&self) -> CrossingLabel {
        self.motion.label()
    }

    fn unit(&self) -> f64 {
        self.image_size[1] as f64 / 64.0
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.image_size;
        if w < 32 || h < 32 {
            return Err(Error::invalid(format!("image {w}x{h} is below the 32x32 minimum")));
        }
        if !(self.figure_height >= 4.0 && self.figure_height.is_finite()) {
            return Err(Error::invalid(format!(
                "figure height {} is degenerate",
                self.figure_height
            )));
        }
        if self.frames == 0 || self.tte < 1 {
            return Err(Error::invalid("need at least one frame and tte >= 1"));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("speed must be positive and noise non-negative"));
        }
        let span = self.speed * (self.tte as f64 + self.frames as f64) + 0.25 * self.figure_height;
        let room = w as f64 - self.marker_width() - 4.0 * self.unit();
        if span > room {
            return Err(Error::invalid(format!(
                "trajectory needs {span:.1}px but the {w}px frame leaves {room:.1}px"
            )));
        }
        if self.figure_height + 9.0 * self.unit() > 0.62 * h as f64 {
            return Err(Error::invalid("figure too tall for the frame"));
        }
        Ok(())
    }

    fn marker_width(&self) -> f64 {
        self.figure_height * 7.0 / 24.0
    }
}

/// Binary `width × height` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    fn set(&mut self, x: u32, y: u32) {
        self.data[(y * self.width + x) as usize] = true;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.data.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()
    }

    /// Pixel-tight box `[x_min, y_min, x_max + 1, y_max + 1]`.
    pub fn bounds(&self) -> Option<BoundingBox> {
        let mut b: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x1, y1, x2, y2)) => (x1.min(x), y1.min(y), x2.max(x), y2.max(y)),
                    });
                }
            }
        }
        b.map(|(x1, y1, x2, y2)| BoundingBox::new(x1 as f64, y1 as f64, x2 as f64 + 1.0, y2 as f64 + 1.0))
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| Luma([if self.get(x, y) { 255 } else { 0 }]))
    }
}

/// Masks for one track, one entry per manifest frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub frame_indices: Vec<u64>,
    pub figure: Vec<Mask>,
    pub head: Vec<Mask>,
    pub legs: Vec<Mask>,
    pub marker: Mask,
}

impl GroundTruth {
    pub fn frame_position(&self, idx: u64) -> Option<usize> {
        self.frame_indices.iter().position(|i| *i == idx)
    }
}

#[derive(Clone, Debug)]
pub struct RenderedClip {
    pub track: PedestrianTrack,
    pub frames: Vec<RgbImage>,
    /// Hip position `(x, y)` per frame.
    pub positions: Vec<(f64, f64)>,
    pub curb_x: f64,
    pub truth: GroundTruth,
}

struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    r: f64,
}

impl Capsule {
    fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        };
        let (cx, cy) = (self.a.0 + t * dx, self.a.1 + t * dy);
        (p.0 - cx).powi(2) + (p.1 - cy).powi(2) <= self.r * self.r
    }
}

/// Per-track quantities drawn once from the scenario seed.
struct Layout {
    curb_x: f64,
    /// Hip x and foot line y at the last contiguous frame.
    anchor: (f64, f64),
    vertical_speed: f64,
    gait_period: f64,
    gait_phase: f64,
    marker_rect: [f64; 4],
    shirt: [u8; 3],
    pants: [u8; 3],
    skin: [u8; 3],
}

const CURB_COLOR: [u8; 3] = [200, 190, 120];
const STRIPE_COLOR: [u8; 3] = [235, 235, 235];

fn layout(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Layout {
    let [w, h] = spec.image_size;
    let (w, h) = (w as f64, h as f64);
    let u = spec.unit();
    let mw = spec.marker_width();
    let edge = mw + 2.0 * u + rng.gen_range(0.0..4.0 * u);
    let gap = spec.speed * spec.tte as f64;
    let side = spec.road_side.sign();
    let curb_x = if side > 0.0 { w - edge } else { edge };
    let hip_x = curb_x - side * gap;
    let foot_y = rng.gen_range(0.62 * h..0.85 * h).min(h - 5.0 * u);
    let vertical_speed = if spec.motion == Motion::Parallel {
        let v = 0.12 * u;
        if foot_y > 0.73 * h {
            -v
        } else {
            v
        }
    } else {
        0.0
    };
    let marker_x = if side > 0.0 { curb_x + u } else { curb_x - u - mw };
    let palette = [[200, 40, 40], [40, 70, 190], [40, 150, 60], [210, 140, 30], [130, 50, 160]];
    Layout {
        curb_x,
        anchor: (hip_x, foot_y),
        vertical_speed,
        gait_period: rng.gen_range(8.0..12.0),
        gait_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        marker_rect: [marker_x, foot_y - spec.figure_height + 4.0 * u, mw, spec.figure_height],
        shirt: *palette.choose(rng).unwrap(),
        pants: [rng.gen_range(20..60), rng.gen_range(20..60), rng.gen_range(40..90)],
        skin: [rng.gen_range(180..235), rng.gen_range(130..180), rng.gen_range(100..140)],
    }
}

struct Pose {
    hip: (f64, f64),
    head: Capsule,
    torso: Capsule,
    legs: [Capsule; 2],
}

fn pose(spec: &ScenarioSpec, lay: &Layout, t: f64, t_last: f64) -> Pose {
    let h = spec.figure_height;
    let side = spec.road_side.sign();
    let dt = t - t_last;
    let (mut hx, mut fy) = lay.anchor;
    match spec.motion {
        Motion::Crossing => hx += side * spec.speed * dt,
        Motion::Parallel => fy += lay.vertical_speed * dt,
        Motion::Standing => {}
    }
    let phase = lay.gait_phase + std::f64::consts::TAU * t / lay.gait_period;
    let (offsets, lifts, lean) = match spec.motion {
        Motion::Crossing => {
            let s = 0.2 * h * phase.sin();
            ([s, -s], [0.0, 0.0], 0.1 * h * side)
        }
        Motion::Parallel => {
            let l = 0.08 * h * phase.sin();
            ([-0.04 * h, 0.04 * h], [l.max(0.0), (-l).max(0.0)], 0.0)
        }
        Motion::Standing => ([-0.05 * h, 0.05 * h], [0.0, 0.0], 0.0),
    };
    let hip = (hx, fy - 0.45 * h);
    let neck = (hx + lean, fy - 0.8 * h);
    let head_c = (hx + 1.2 * lean, fy - 0.9 * h);
    let leg = |i: usize| Capsule {
        a: hip,
        b: (hx + offsets[i], fy - lifts[i] - 0.055 * h),
        r: 0.055 * h,
    };
    Pose {
        hip,
        head: Capsule {
            a: head_c,
            b: head_c,
            r: 0.1 * h,
        },
        torso: Capsule {
            a: hip,
            b: neck,
            r: 0.09 * h,
        },
        legs: [leg(0), leg(1)],
    }
}

fn background(spec: &ScenarioSpec, lay: &Layout) -> (RgbImage, Mask) {
    let [w, h] = spec.image_size;
    let u = spec.unit();
    let side = spec.road_side.sign();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.background_seed);
    let walk: i32 = rng.gen_range(150..175);
    let road: i32 = rng.gen_range(70..90);
    let stripe = (2.0 * u).max(1.0);
    let [mx, my, mw, mh] = lay.marker_rect;
    let mut marker = Mask::new(w, h);
    let img = RgbImage::from_fn(w, h, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let grain: i32 = rng.gen_range(-10..=10);
        let d = (px - lay.curb_x) * side;
        if d.abs() < u {
            return Rgb(CURB_COLOR);
        }
        let in_marker = spec.marker && px >= mx && px < mx + mw && py >= my && py < my + mh;
        if in_marker {
            marker.set(x, y);
            if (((py - my) / stripe) as i64) % 2 == 0 {
                return Rgb(STRIPE_COLOR);
            }
        }
        let base = if d > 0.0 { road } else { walk };
        let v = (base + grain).clamp(0, 255) as u8;
        Rgb([v, v, (v as i32 + 6).min(255) as u8])
    });
    (img, marker)
}

/// Renders one track: `spec.frames` contiguous frames, plus the event frame for non-crossing tracks.
pub fn generate_scenario(spec: &ScenarioSpec, seed: u64) -> Result<RenderedClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lay = layout(spec, &mut rng);
    let (bg, marker) = background(spec, &lay);
    let [w, h] = spec.image_size;
    let t_last = spec.frames as i64 - 1;
    let event = t_last + spec.tte;
    // A non-crossing track's event is its last observable frame, so that frame is rendered.
    // A crossing track ends before the pedestrian reaches the curb.
    let tail = (spec.motion != Motion::Crossing).then_some(event);
    let indices: Vec<u64> = (0..=t_last).chain(tail).map(|i| i as u64).collect();

    let mut frames = Vec::with_capacity(indices.len());
    let mut track_frames = Vec::with_capacity(indices.len());
    let mut positions = Vec::with_capacity(indices.len());
    let (mut figure_masks, mut head_masks, mut leg_masks) = (Vec::new(), Vec::new(), Vec::new());
    for &idx in &indices {
        let p = pose(spec, &lay, idx as f64, t_last as f64);
        let mut img = bg.clone();
        let (mut fig, mut head, mut legs) = (Mask::new(w, h), Mask::new(w, h), Mask::new(w, h));
        let mut noise = ChaCha8Rng::seed_from_u64(seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for y in 0..h {
            for x in 0..w {
                let c = (x as f64 + 0.5, y as f64 + 0.5);
                let color = if p.head.contains(c) {
                    head.set(x, y);
                    Some(lay.skin)
                } else if p.torso.contains(c) {
                    Some(lay.shirt)
                } else if p.legs.iter().any(|l| l.contains(c)) {
                    legs.set(x, y);
                    Some(lay.pants)
                } else {
                    None
                };
                if let Some(col) = color {
                    fig.set(x, y);
                    img.put_pixel(x, y, Rgb(col));
                }
                if spec.noise > 0.0 {
                    let px = img.get_pixel_mut(x, y);
                    for ch in px.0.iter_mut() {
                        let n: f64 = noise.gen_range(-spec.noise..=spec.noise);
                        *ch = (*ch as f64 + n).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
        let bbox = fig.bounds().ok_or_else(|| {
            Error::invalid(format!("{}: figure left the frame at {idx}", spec.track_id))
        })?;
        track_frames.push(TrackFrame {
            idx,
            path: frame_path(&spec.track_id, idx),
            bbox,
        });
        frames.push(img);
        positions.push(p.hip);
        figure_masks.push(fig);
        head_masks.push(head);
        leg_masks.push(legs);
    }
    let track = PedestrianTrack {
        track_id: spec.track_id.clone(),
        label: spec.label(),
        event_frame: event,
        image_size: spec.image_size,
        frames: track_frames,
        split: SplitTag::Unassigned,
    };
    track.validate()?;
    Ok(RenderedClip {
        track,
        frames,
        positions,
        curb_x: lay.curb_x,
        truth: GroundTruth {
            frame_indices: indices,
            figure: figure_masks,
            head: head_masks,
            legs: leg_masks,
            marker,
        },
    })
}

pub fn frame_path(track_id: &str, idx: u64) -> String {
    format!("frames/{track_id}/{idx:04}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n: usize,
    /// Probability that marker presence equals the crossing label.
    pub rho: f64,
    /// Fraction of crossing tracks.
    pub class_ratio: f64,
    pub seed: u64,
    pub image_size: [u32; 2],
    pub frames: u32,
    pub tte_min: i64,
    pub tte_max: i64,
    pub noise: f64,
    /// Share of non-crossing tracks that stand still (the rest walk along the curb).
    pub standing_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n: 128,
            rho: 1.0,
            class_ratio: 0.5,
            seed: 0,
            image_size: [64, 64],
            frames: 16,
            tte_min: 30,
            tte_max: 60,
            noise: 4.0,
            standing_fraction: 0.5,
        }
    }
}

impl DatasetSpec {
    pub fn crossing_count(&self) -> usize {
        (self.class_ratio * self.n as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::invalid(format!("need at least 4 tracks, got {}", self.n)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho {} outside [0, 1]", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.class_ratio) {
            return Err(Error::invalid(format!("class ratio {} outside [0, 1]", self.class_ratio)));
        }
        let c = self.crossing_count();
        if self.class_ratio > 0.0 && self.class_ratio < 1.0 && (c == 0 || c == self.n) {
            return Err(Error::invalid(format!(
                "class ratio {} cannot be met with {} tracks",
                self.class_ratio, self.n
            )));
        }
        if self.tte_min < 1 || self.tte_min > self.tte_max {
            return Err(Error::invalid(format!("bad tte range {}..={}", self.tte_min, self.tte_max)));
        }
        if !(0.0..=1.0).contains(&self.standing_fraction) {
            return Err(Error::invalid("standing fraction outside [0, 1]"));
        }
        Ok(())
    }

    /// Sampling that yields exactly one window per track: the last `frames` frames, stride 2.
    pub fn sampling(&self) -> SamplingConfig {
        let obs = (self.frames as u64 / 2) * 2;
        SamplingConfig {
            obs_len_frames: obs,
            stride: 2,
            tte_min: self.tte_min,
            tte_max: self.tte_max,
            seed: self.seed,
            policy: WindowPolicy::OnePerTrack,
        }
    }

    /// Static windows of 7/8 of the frame height, which keep the marker in view.
    pub fn crop(&self, mode: CropMode, model_input_size: u32) -> CropConfig {
        let side = self.image_size[1] * 7 / 8;
        CropConfig {
            mode,
            static_size: (side, side),
            model_input_size,
            ..CropConfig::default()
        }
    }
}

/// A generated dataset held in memory.
#[derive(Clone)]
pub struct SynthDataset {
    pub spec: DatasetSpec,
    pub manifest: Manifest,
    pub frames: MemoryFrames,
    pub scenarios: Vec<ScenarioSpec>,
    pub truth: BTreeMap<String, GroundTruth>,
}

impl SynthDataset {
    pub fn scenario(&self, track_id: &str) -> Option<&ScenarioSpec> {
        self.scenarios.iter().find(|s| s.track_id == track_id)
    }
}

/// Draws every scenario from `spec.seed`: exact class counts, and within each class
/// exactly `round(ρ·n_class)` tracks whose marker agrees with the label.
/// Keeps the scenario plan independent of splits drawn with the same seed.
const SCENARIO_STREAM: u64 = 0x5359_4e54_4800;

pub fn scenarios(spec: &DatasetSpec) -> Result<Vec<(ScenarioSpec, u64)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(SCENARIO_STREAM);
    let n = spec.n;
    let crossing = spec.crossing_count();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut is_crossing = vec![false; n];
    for &i in &order[..crossing] {
        is_crossing[i] = true;
    }
    let mut marker = vec![false; n];
    for class in [true, false] {
        let mut members: Vec<usize> = (0..n).filter(|i| is_crossing[*i] == class).collect();
        members.shuffle(&mut rng);
        let agree = (spec.rho * members.len() as f64).round() as usize;
        for (k, &i) in members.iter().enumerate() {
            marker[i] = if k < agree { class } else { !class };
        }
    }
    let width = (n - 1).to_string().len().max(4);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let motion = if is_crossing[i] {
            Motion::Crossing
        } else if rng.gen_bool(spec.standing_fraction) {
            Motion::Standing
        } else {
            Motion::Parallel
        };
        let mut s = ScenarioSpec::new(format!("synth_{i:0width$}"), spec.image_size, motion, marker[i]);
        s.frames = spec.frames;
        s.noise = spec.noise;
        s.tte = rng.gen_range(spec.tte_min..=spec.tte_max);
        s.road_side = if rng.gen_bool(0.5) { Side::Left } else { Side::Right };
        s.background_seed = rng.gen();
        out.push((s, rng.gen()));
    }
    Ok(out)
}

pub fn make_dataset_with(spec: &DatasetSpec, workers: usize) -> Result<SynthDataset> {
    let plan = scenarios(spec)?;
    let clips = parallel_map(&plan, workers, |(s, seed)| generate_scenario(s, *seed))?;
    let mut frames = MemoryFrames::new();
    let mut truth = BTreeMap::new();
    let mut tracks = Vec::with_capacity(clips.len());
    for clip in clips {
        for (f, img) in clip.track.frames.iter().zip(clip.frames) {
            frames.insert(f.path.clone(), img);
        }
        truth.insert(clip.track.track_id.clone(), clip.truth);
        tracks.push(clip.track);
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        manifest: Manifest::new(tracks)?,
        frames,
        scenarios: plan.into_iter().map(|(s, _)| s).collect(),
        truth,
    })
}

pub fn make_dataset(n: usize, rho: f64, class_ratio: f64, seed: u64) -> Result<SynthDataset> {
    let spec = DatasetSpec {
        n,
        rho,
        class_ratio,
        seed,
        ..DatasetSpec::default()
    };
    make_dataset_with(&spec, 1)
}

fn encode_png(img: &image::DynamicImage, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(buf.into_inner())
}

/// Writes `manifest.jsonl`, `frames/<track>/<idx>.png` and, if asked, the
/// ground-truth masks under `masks/<track>/`.
pub fn write_dataset(ds: &SynthDataset, dir: impl AsRef<Path>, with_masks: bool, workers: usize) -> Result<()> {
    let dir = dir.as_ref();
    let mut jobs: Vec<(std::path::PathBuf, image::DynamicImage)> = Vec::new();
    for t in &ds.manifest.tracks {
        for f in &t.frames {
            let img = crate::trackdata::FrameSource::load(&ds.frames, &f.path)?;
            jobs.push((dir.join(&f.path), image::DynamicImage::ImageRgb8((*img).clone())));
        }
        if with_masks {
            let gt = &ds.truth[&t.track_id];
            let mdir = dir.join("masks").join(&t.track_id);
            jobs.push((mdir.join("marker.png"), gt.marker.to_image().into()));
            for (k, idx) in gt.frame_indices.iter().enumerate() {
                for (name, m) in [("figure", &gt.figure[k]), ("head", &gt.head[k]), ("legs", &gt.legs[k])] {
                    jobs.push((mdir.join(format!("{idx:04}_{name}.png")), m.to_image().into()));
                }
            }
        }
    }
    for parent in jobs.iter().filter_map(|(p, _)| p.parent()).collect::<std::collections::BTreeSet<_>>() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    parallel_map(&jobs, workers, |(path, img)| write_atomic(path, &encode_png(img, path)?))?;
    write_manifest(&ds.manifest, dir.join("manifest.jsonl"))
}

/// Reads a mask written by [`write_dataset`].
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    Ok(Mask {
        width: img.width(),
        height: img.height(),
        data: img.pixels().map(|p| p.0[0] > 127).collect(),
    })
}
