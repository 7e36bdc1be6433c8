//! Static and dynamic pedestrian crops, resizing to the model input, and the clip store.
//!
//! Window edges are rounded half away from zero. Pixels outside the source
//! frame take `pad_value`. Resampling happens only in [`to_model_input`].

use std::fs::File;
use std::io::Read;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::ObservationWindow;
use crate::trackdata::{write_atomic, BoundingBox, CrossingLabel, FrameSource, PedestrianTrack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    Static,
    Dynamic,
}

impl CropMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CropMode::Static => "static",
            CropMode::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for CropMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(CropMode::Static),
            "dynamic" => Ok(CropMode::Dynamic),
            other => Err(Error::invalid(format!("unknown crop mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub mode: CropMode,
    /// `(w_c, h_c)` of the static window.
    pub static_size: (u32, u32),
    /// Margin added on every side of a dynamic crop, as a fraction of the box height.
    pub dynamic_margin_fraction: f64,
    /// Side length `S` of the square model input.
    pub model_input_size: u32,
    pub pad_value: [u8; 3],
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            mode: CropMode::Static,
            static_size: (600, 600),
            dynamic_margin_fraction: 0.05,
            model_input_size: 224,
            pad_value: [0, 0, 0],
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.static_size.0 == 0 || self.static_size.1 == 0 {
            return Err(Error::invalid("static crop size must be positive"));
        }
        if self.model_input_size == 0 {
            return Err(Error::invalid("model input size must be positive"));
        }
        if !(self.dynamic_margin_fraction >= 0.0 && self.dynamic_margin_fraction.is_finite()) {
            return Err(Error::invalid("dynamic margin fraction must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Integer pixel window `[left, left+width) × [top, top+height)` in source coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub left: i64,
    pub top: i64,
    pub width: u32,
    pub height: u32,
}

impl CropWindow {
    pub fn right(&self) -> i64 {
        self.left + self.width as i64
    }

    pub fn bottom(&self) -> i64 {
        self.top + self.height as i64
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.left && x < self.right() && y >= self.top && y < self.bottom()
    }
}

fn check_visible(frame_w: u32, frame_h: u32, bbox: &BoundingBox) -> Result<()> {
    bbox.validate().map_err(Error::invalid)?;
    if bbox.x2 <= 0.0 || bbox.y2 <= 0.0 || bbox.x1 >= frame_w as f64 || bbox.y1 >= frame_h as f64 {
        return Err(Error::invalid(format!(
            "bounding box {:?} lies entirely outside the {frame_w}x{frame_h} frame",
            <[f64; 4]>::from(*bbox)
        )));
    }
    Ok(())
}

/// Fixed-size window centered on the box center.
pub fn static_window(bbox: &BoundingBox, cfg: &CropConfig) -> CropWindow {
    let (wc, hc) = cfg.static_size;
    let (cx, cy) = bbox.center();
    CropWindow {
        left: (cx - wc as f64 / 2.0).round() as i64,
        top: (cy - hc as f64 / 2.0).round() as i64,
        width: wc,
        height: hc,
    }
}

/// Box grown by `fraction · b_h` on all four sides.
pub fn dynamic_window(bbox: &BoundingBox, cfg: &CropConfig) -> CropWindow {
    let m = cfg.dynamic_margin_fraction * bbox.height();
    let left = (bbox.x1 - m).round() as i64;
    let top = (bbox.y1 - m).round() as i64;
    let right = ((bbox.x2 + m).round() as i64).max(left + 1);
    let bottom = ((bbox.y2 + m).round() as i64).max(top + 1);
    CropWindow {
        left,
        top,
        width: (right - left) as u32,
        height: (bottom - top) as u32,
    }
}

pub fn crop_window(bbox: &BoundingBox, cfg: &CropConfig) -> CropWindow {
    match cfg.mode {
        CropMode::Static => static_window(bbox, cfg),
        CropMode::Dynamic => dynamic_window(bbox, cfg),
    }
}

/// Copies `win` out of `frame`, padding whatever falls outside it.
pub fn extract_window(frame: &RgbImage, win: CropWindow, pad: [u8; 3]) -> RgbImage {
    let (fw, fh) = (frame.width() as i64, frame.height() as i64);
    let mut out = RgbImage::from_pixel(win.width, win.height, Rgb(pad));
    let x0 = win.left.max(0);
    let x1 = win.right().min(fw);
    let y0 = win.top.max(0);
    let y1 = win.bottom().min(fh);
    if x0 >= x1 || y0 >= y1 {
        return out;
    }
    let src = frame.as_raw();
    let dst_w = win.width as usize;
    let run = (x1 - x0) as usize * 3;
    let dst = &mut *out;
    for y in y0..y1 {
        let s = ((y * fw + x0) * 3) as usize;
        let d = (((y - win.top) as usize) * dst_w + (x0 - win.left) as usize) * 3;
        dst[d..d + run].copy_from_slice(&src[s..s + run]);
    }
    out
}

pub fn static_crop(frame: &RgbImage, bbox: &BoundingBox, cfg: &CropConfig) -> Result<RgbImage> {
    check_visible(frame.width(), frame.height(), bbox)?;
    let (wc, hc) = cfg.static_size;
    if bbox.width() >= wc as f64 || bbox.height() >= hc as f64 {
        log::warn!(
            "bounding box {:.1}x{:.1} exceeds static crop {wc}x{hc}; pedestrian will be clipped",
            bbox.width(),
            bbox.height()
        );
    }
    Ok(extract_window(frame, static_window(bbox, cfg), cfg.pad_value))
}

pub fn dynamic_crop(frame: &RgbImage, bbox: &BoundingBox, cfg: &CropConfig) -> Result<RgbImage> {
    check_visible(frame.width(), frame.height(), bbox)?;
    Ok(extract_window(frame, dynamic_window(bbox, cfg), cfg.pad_value))
}

/// Bilinear resize of an interleaved `f32` plane set (align-corners = false,
/// edge-clamped). Source coordinate of output pixel `x` is `(x + 0.5)·in/out − 0.5`.
pub fn resize_bilinear(src: &[f32], w: usize, h: usize, channels: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(out_w, w);
    let ys = taps(out_h, h);
    let mut out = vec![0f32; out_w * out_h * channels];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..channels {
                let p = |x: usize, y: usize| src[(y * w + x) * channels + c];
                let top = if fx == 0.0 { p(x0, y0) } else { p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx };
                let bot = if fx == 0.0 { p(x0, y1) } else { p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx };
                out[(oy * out_w + ox) * channels + c] = if fy == 0.0 { top } else { top * (1.0 - fy) + bot * fy };
            }
        }
    }
    out
}

fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn resize_rgb(img: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    if img.width() == out_w && img.height() == out_h {
        return img.clone();
    }
    let src: Vec<f32> = img.as_raw().iter().map(|&v| v as f32).collect();
    let out = resize_bilinear(&src, img.width() as usize, img.height() as usize, 3, out_w as usize, out_h as usize);
    RgbImage::from_raw(out_w, out_h, out.into_iter().map(to_u8).collect()).expect("sized buffer")
}

/// Placement of resized content inside the `S × S` model input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Letterbox {
    pub content_w: u32,
    pub content_h: u32,
    pub offset_x: u32,
    pub offset_y: u32,
}

/// Aspect-preserving fit: the longer side becomes `S`; leftover split evenly with the
/// odd pixel going right/bottom.
pub fn letterbox_geometry(w: u32, h: u32, size: u32) -> Letterbox {
    let scale = size as f64 / w.max(h) as f64;
    let cw = ((w as f64 * scale).round() as u32).clamp(1, size);
    let ch = ((h as f64 * scale).round() as u32).clamp(1, size);
    Letterbox {
        content_w: cw,
        content_h: ch,
        offset_x: (size - cw) / 2,
        offset_y: (size - ch) / 2,
    }
}

pub fn letterbox_to_model_input(img: &RgbImage, cfg: &CropConfig) -> Result<RgbImage> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::invalid("cannot letterbox an empty image"));
    }
    let s = cfg.model_input_size;
    let lb = letterbox_geometry(img.width(), img.height(), s);
    let content = resize_rgb(img, lb.content_w, lb.content_h);
    let mut out = RgbImage::from_pixel(s, s, Rgb(cfg.pad_value));
    image::imageops::replace(&mut out, &content, lb.offset_x as i64, lb.offset_y as i64);
    Ok(out)
}

/// Static crops are resized straight to `S × S`; dynamic crops are letterboxed.
pub fn to_model_input(img: &RgbImage, cfg: &CropConfig) -> Result<RgbImage> {
    match cfg.mode {
        CropMode::Static => {
            if img.width() == 0 || img.height() == 0 {
                return Err(Error::invalid("cannot resize an empty image"));
            }
            Ok(resize_rgb(img, cfg.model_input_size, cfg.model_input_size))
        }
        CropMode::Dynamic => letterbox_to_model_input(img, cfg),
    }
}

/// Maps a single-channel source-frame mask through the same crop + resize as the frame.
/// Output is `S × S` coverage in `[0, 1]`.
pub fn mask_to_model_input(mask: &[f32], frame_w: u32, frame_h: u32, bbox: &BoundingBox, cfg: &CropConfig) -> Vec<f32> {
    let win = crop_window(bbox, cfg);
    let mut crop = vec![0f32; (win.width * win.height) as usize];
    for y in 0..win.height as i64 {
        for x in 0..win.width as i64 {
            let (sx, sy) = (win.left + x, win.top + y);
            if sx >= 0 && sy >= 0 && sx < frame_w as i64 && sy < frame_h as i64 {
                crop[(y * win.width as i64 + x) as usize] = mask[(sy * frame_w as i64 + sx) as usize];
            }
        }
    }
    let s = cfg.model_input_size as usize;
    match cfg.mode {
        CropMode::Static => resize_bilinear(&crop, win.width as usize, win.height as usize, 1, s, s),
        CropMode::Dynamic => {
            let lb = letterbox_geometry(win.width, win.height, cfg.model_input_size);
            let content = resize_bilinear(
                &crop,
                win.width as usize,
                win.height as usize,
                1,
                lb.content_w as usize,
                lb.content_h as usize,
            );
            let mut out = vec![0f32; s * s];
            for y in 0..lb.content_h as usize {
                for x in 0..lb.content_w as usize {
                    out[(y + lb.offset_y as usize) * s + x + lb.offset_x as usize] = content[y * lb.content_w as usize + x];
                }
            }
            out
        }
    }
}

pub fn flip_horizontal(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

/// One observation window cropped and resized to `S × S × 3` per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CropClip {
    pub track_id: String,
    pub mode: CropMode,
    pub frame_indices: Vec<u64>,
    pub size: u32,
    pub label: CrossingLabel,
    pub tte: i64,
    pub flipped: bool,
    pub frames: Vec<RgbImage>,
}

impl CropClip {
    /// Stable id of the underlying sample, shared by both crop modes.
    pub fn sample_id(&self) -> String {
        sample_id(&self.track_id, *self.frame_indices.last().unwrap_or(&0), self.flipped)
    }
}

pub fn sample_id(track_id: &str, last_frame: u64, flipped: bool) -> String {
    format!("{track_id}@{last_frame}{}", if flipped { "f" } else { "" })
}

/// Crops every frame of `window` from `track`, mirroring frames and boxes first when the window is flipped.
pub fn crop_clip(
    track: &PedestrianTrack,
    window: &ObservationWindow,
    frames: &dyn FrameSource,
    cfg: &CropConfig,
) -> Result<CropClip> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(window.frame_indices.len());
    for &idx in &window.frame_indices {
        let tf = track.frame(idx).ok_or_else(|| Error::InvalidTrack {
            track_id: track.track_id.clone(),
            field: "frames".into(),
            message: format!("window frame {idx} missing"),
        })?;
        let img = frames.load(&tf.path)?;
        let (img, bbox) = if window.flipped {
            (flip_horizontal(&img), tf.bbox.flip_horizontal(img.width() as f64))
        } else {
            ((*img).clone(), tf.bbox)
        };
        let crop = match cfg.mode {
            CropMode::Static => static_crop(&img, &bbox, cfg)?,
            CropMode::Dynamic => dynamic_crop(&img, &bbox, cfg)?,
        };
        out.push(to_model_input(&crop, cfg)?);
    }
    Ok(CropClip {
        track_id: track.track_id.clone(),
        mode: cfg.mode,
        frame_indices: window.frame_indices.clone(),
        size: cfg.model_input_size,
        label: window.label,
        tte: window.tte,
        flipped: window.flipped,
        frames: out,
    })
}

const CLIP_MAGIC: &[u8; 8] = b"PXCLIP01";

#[derive(Serialize, Deserialize)]
struct ClipHeader {
    track_id: String,
    mode: CropMode,
    frame_indices: Vec<u64>,
    size: u32,
    channels: u32,
    dtype: String,
    label: CrossingLabel,
    tte: i64,
    flipped: bool,
}

/// Clip store file: `"PXCLIP01"`, u32 LE header length, UTF-8 JSON header,
/// then `frames × S × S × 3` u8 pixels, row-major RGB, frame after frame.
pub fn write_clip(clip: &CropClip, path: impl AsRef<Path>) -> Result<()> {
    let header = ClipHeader {
        track_id: clip.track_id.clone(),
        mode: clip.mode,
        frame_indices: clip.frame_indices.clone(),
        size: clip.size,
        channels: 3,
        dtype: "u8".into(),
        label: clip.label,
        tte: clip.tte,
        flipped: clip.flipped,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(12 + json.len() + clip.frames.len() * (clip.size * clip.size * 3) as usize);
    buf.extend_from_slice(CLIP_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for f in &clip.frames {
        buf.extend_from_slice(f.as_raw());
    }
    write_atomic(path.as_ref(), &buf)
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<CropClip> {
    let path = path.as_ref();
    let corrupt = |m: &str| Error::Corrupt {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != CLIP_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: ClipHeader = serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| corrupt("truncated header"))?)
        .map_err(|e| corrupt(&e.to_string()))?;
    if header.dtype != "u8" || header.channels != 3 {
        return Err(corrupt("unsupported pixel layout"));
    }
    let frame_len = (header.size * header.size * 3) as usize;
    let payload = &bytes[12 + hlen..];
    if payload.len() != frame_len * header.frame_indices.len() {
        return Err(corrupt("payload length does not match header"));
    }
    let frames = payload
        .chunks(frame_len)
        .map(|c| RgbImage::from_raw(header.size, header.size, c.to_vec()).expect("sized"))
        .collect();
    Ok(CropClip {
        track_id: header.track_id,
        mode: header.mode,
        frame_indices: header.frame_indices,
        size: header.size,
        label: header.label,
        tte: header.tte,
        flipped: header.flipped,
        frames,
    })
}
