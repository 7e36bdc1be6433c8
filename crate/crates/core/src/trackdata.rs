//! Pedestrian tracks and the line-delimited manifest format.
//!
//! One JSON record per line:
//!
//! ```text
//! {"track_id":"t0","label":"crossing","event_frame":18,"image_size":[1920,1080],
//!  "frames":[{"idx":0,"path":"t0/000.png","bbox":[950,500,970,560]}, ...],
//!  "split":"train"}
//! ```
//!
//! `split` is optional (defaults to `unassigned`). Frame paths are relative to
//! the manifest's directory.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        BoundingBox {
            x1: v[0],
            y1: v[1],
            x2: v[2],
            y2: v[3],
        }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoundingBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Mirror across the vertical axis of an image `image_width` pixels wide.
    pub fn flip_horizontal(&self, image_width: f64) -> Self {
        BoundingBox {
            x1: image_width - self.x2,
            y1: self.y1,
            x2: image_width - self.x1,
            y2: self.y2,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) {
            return Err(format!("non-finite coordinates {:?}", <[f64; 4]>::from(*self)));
        }
        if self.x2 <= self.x1 {
            return Err(format!("x2 ({}) must exceed x1 ({})", self.x2, self.x1));
        }
        if self.y2 <= self.y1 {
            return Err(format!("y2 ({}) must exceed y1 ({})", self.y2, self.y1));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossingLabel {
    NonCrossing,
    Crossing,
}

impl CrossingLabel {
    pub fn as_target(self) -> f64 {
        match self {
            CrossingLabel::Crossing => 1.0,
            CrossingLabel::NonCrossing => 0.0,
        }
    }

    pub fn from_bit(b: u8) -> Self {
        if b != 0 {
            CrossingLabel::Crossing
        } else {
            CrossingLabel::NonCrossing
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
    #[default]
    Unassigned,
}

impl SplitTag {
    fn is_unassigned(&self) -> bool {
        *self == SplitTag::Unassigned
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackFrame {
    pub idx: u64,
    pub path: String,
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PedestrianTrack {
    pub track_id: String,
    pub label: CrossingLabel,
    /// Crossing start for crossing tracks; last observable frame otherwise.
    pub event_frame: i64,
    /// `[width, height]` of the source frames.
    pub image_size: [u32; 2],
    pub frames: Vec<TrackFrame>,
    #[serde(default, skip_serializing_if = "SplitTag::is_unassigned")]
    pub split: SplitTag,
}

impl PedestrianTrack {
    fn fail(&self, field: &str, message: impl Into<String>) -> Error {
        Error::InvalidTrack {
            track_id: self.track_id.clone(),
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.track_id.is_empty() {
            return Err(self.fail("track_id", "empty"));
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(self.fail("image_size", format!("{:?}", self.image_size)));
        }
        let (first, last) = match (self.frames.first(), self.frames.last()) {
            (Some(f), Some(l)) => (f.idx as i64, l.idx as i64),
            _ => return Err(self.fail("frames", "track has no frames")),
        };
        for (i, f) in self.frames.iter().enumerate() {
            if i > 0 && f.idx <= self.frames[i - 1].idx {
                return Err(self.fail(
                    "frames",
                    format!("frame index {} not after {}", f.idx, self.frames[i - 1].idx),
                ));
            }
            f.bbox
                .validate()
                .map_err(|m| self.fail("bbox", format!("frame {}: {m}", f.idx)))?;
        }
        match self.label {
            CrossingLabel::NonCrossing if self.event_frame != last => Err(self.fail(
                "event_frame",
                format!(
                    "non-crossing event_frame {} must equal last observable frame {last}",
                    self.event_frame
                ),
            )),
            CrossingLabel::Crossing if self.event_frame < first => Err(self.fail(
                "event_frame",
                format!("crossing event_frame {} precedes first frame {first}", self.event_frame),
            )),
            _ => Ok(()),
        }
    }

    pub fn frame(&self, idx: u64) -> Option<&TrackFrame> {
        self.frames
            .binary_search_by_key(&idx, |f| f.idx)
            .ok()
            .map(|i| &self.frames[i])
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub tracks: Vec<PedestrianTrack>,
}

impl Manifest {
    pub fn new(tracks: Vec<PedestrianTrack>) -> Result<Self> {
        let m = Manifest { tracks };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.tracks {
            t.validate()?;
            if !seen.insert(t.track_id.as_str()) {
                return Err(t.fail("track_id", "duplicate track id"));
            }
        }
        Ok(())
    }

    pub fn track(&self, id: &str) -> Option<&PedestrianTrack> {
        self.tracks.iter().find(|t| t.track_id == id)
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tracks = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let track: PedestrianTrack = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        tracks.push(track);
    }
    Manifest::new(tracks)
}

/// Writes the manifest atomically: either the complete file appears or nothing does.
pub fn write_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    m.validate()?;
    let mut buf = Vec::new();
    for t in &m.tracks {
        serde_json::to_writer(&mut buf, t)?;
        buf.push(b'\n');
    }
    write_atomic(path.as_ref(), &buf)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Where frame images come from.
pub trait FrameSource: Send + Sync {
    fn load(&self, path: &str) -> Result<Arc<RgbImage>>;
}

/// PNG (or any format `image` decodes) files relative to a root directory, with a decode cache.
pub struct DiskFrames {
    root: PathBuf,
    cache: Mutex<HashMap<String, Arc<RgbImage>>>,
}

impl DiskFrames {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DiskFrames {
            root: root.into(),
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Frames resolved against the directory that holds `manifest_path`.
    pub fn for_manifest(manifest_path: impl AsRef<Path>) -> Self {
        let dir = manifest_path
            .as_ref()
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Self::new(dir)
    }
}

impl FrameSource for DiskFrames {
    fn load(&self, path: &str) -> Result<Arc<RgbImage>> {
        if let Some(img) = self.cache.lock().unwrap().get(path) {
            return Ok(img.clone());
        }
        let full = self.root.join(path);
        let img = image::open(&full)
            .map_err(|e| Error::Image {
                path: full.clone(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let img = Arc::new(img);
        self.cache.lock().unwrap().insert(path.to_string(), img.clone());
        Ok(img)
    }
}

/// In-memory frames keyed by their manifest path.
#[derive(Default, Clone)]
pub struct MemoryFrames {
    frames: HashMap<String, Arc<RgbImage>>,
}

impl MemoryFrames {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, img: RgbImage) {
        self.frames.insert(path.into(), Arc::new(img));
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<RgbImage>)> {
        self.frames.iter()
    }
}

impl FrameSource for MemoryFrames {
    fn load(&self, path: &str) -> Result<Arc<RgbImage>> {
        self.frames
            .get(path)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no in-memory frame {path}")))
    }
}
