//! Frame and clip data model plus the frame-directory storage format.
//!
//! A clip on disk is a directory holding `manifest.json` and one lossless
//! 8-bit RGB PNG per frame. Intensities are normalized to `[0, 1]` in memory
//! and quantized with round-to-nearest on save.

use std::fs;
use std::path::Path;

use image::{ColorType, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_FRAME_PATTERN: &str = "frame_%05d.png";

/// One RGB frame, row-major `height x width x 3`, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl FrameImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::config(format!(
                "frame dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::config(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                width * height * 3
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::config(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, pixels })
    }

    /// Builds a frame from a per-(row, column, channel) function; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "frame dimensions must be positive");
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self { width, height, pixels }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::from_fn(width, height, |_, _, _| value)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn same_size(&self, other: &FrameImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }
}

/// Frame rate as a rational `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fps {
    pub num: u32,
    pub den: u32,
}

impl Fps {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::config(format!("invalid frame rate {num}/{den}")));
        }
        Ok(Self { num, den })
    }
}

impl Default for Fps {
    fn default() -> Self {
        Self { num: 30, den: 1 }
    }
}

/// Ordered frame sequence sharing one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<FrameImage>,
    fps: Fps,
    name: String,
}

impl VideoClip {
    pub fn new(name: impl Into<String>, frames: Vec<FrameImage>, fps: Fps) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::config("a clip needs at least one frame"))?;
        if let Some((i, _)) = frames.iter().enumerate().find(|(_, f)| !f.same_size(first)) {
            return Err(Error::Integrity(format!(
                "frame {i} is {}x{}, clip resolution is {}x{}",
                frames[i].width, frames[i].height, first.width, first.height
            )));
        }
        Ok(Self {
            frames,
            fps,
            name: name.into(),
        })
    }

    pub fn frames(&self) -> &[FrameImage] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &FrameImage {
        &self.frames[i]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn fps(&self) -> Fps {
        self.fps
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn same_resolution(&self, other: &VideoClip) -> bool {
        self.width() == other.width() && self.height() == other.height()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub fps_num: u32,
    pub fps_den: u32,
    #[serde(default = "default_pattern")]
    pub frame_file_pattern: String,
}

fn default_pattern() -> String {
    DEFAULT_FRAME_PATTERN.to_string()
}

/// A printf-style `prefix%0Nd suffix` file pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
struct FramePattern {
    prefix: String,
    width: usize,
    suffix: String,
}

impl FramePattern {
    fn parse(pattern: &str) -> Result<Self> {
        let bad = || Error::Format(format!("unsupported frame_file_pattern {pattern:?}"));
        let start = pattern.find('%').ok_or_else(bad)?;
        let rest = &pattern[start + 1..];
        let end = rest.find('d').ok_or_else(bad)?;
        let spec = &rest[..end];
        let width = if spec.is_empty() {
            0
        } else if spec.starts_with('0') && spec.len() > 1 {
            spec[1..].parse().map_err(|_| bad())?
        } else {
            return Err(bad());
        };
        let suffix = &rest[end + 1..];
        if suffix.contains('%') || pattern[..start].contains(['/', '\\']) || suffix.contains(['/', '\\']) {
            return Err(bad());
        }
        Ok(Self {
            prefix: pattern[..start].to_string(),
            width,
            suffix: suffix.to_string(),
        })
    }

    fn file_name(&self, index: usize) -> String {
        format!("{}{:0width$}{}", self.prefix, index, self.suffix, width = self.width)
    }

    fn matches(&self, name: &str) -> bool {
        name.strip_prefix(&self.prefix)
            .and_then(|s| s.strip_suffix(&self.suffix))
            .is_some_and(|digits| {
                !digits.is_empty() && digits.len() >= self.width && digits.bytes().all(|b| b.is_ascii_digit())
            })
    }
}

pub fn quantize(value: f32) -> u8 {
    (value.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(byte: u8) -> f32 {
    byte as f32 / 255.0
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Format(format!("missing {}", path.display())))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("malformed {}: {e}", path.display())))
}

fn load_frame(path: &Path) -> Result<FrameImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::Format(format!(
            "{}: expected 8-bit RGB without alpha, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.into_raw().into_iter().map(dequantize).collect();
    FrameImage::new(w as usize, h as usize, pixels)
}

/// Loads a frame directory written by [`save_clip`] (or any tool following the same layout).
pub fn load_clip(dir: &Path) -> Result<VideoClip> {
    let manifest = read_manifest(dir)?;
    let pattern = FramePattern::parse(&manifest.frame_file_pattern)?;
    let fps = Fps::new(manifest.fps_num, manifest.fps_den)
        .map_err(|_| Error::Format("manifest frame rate must be positive".into()))?;

    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut present = 0usize;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if pattern.matches(&entry.file_name().to_string_lossy()) {
            present += 1;
        }
    }
    if present != manifest.frame_count {
        return Err(Error::Integrity(format!(
            "manifest declares {} frames, directory holds {present}",
            manifest.frame_count
        )));
    }

    let mut frames = Vec::with_capacity(manifest.frame_count);
    for i in 0..manifest.frame_count {
        let path = dir.join(pattern.file_name(i));
        if !path.is_file() {
            return Err(Error::Integrity(format!("missing frame {}", path.display())));
        }
        let frame = load_frame(&path)?;
        if frame.width != manifest.width || frame.height != manifest.height {
            return Err(Error::Integrity(format!(
                "{} is {}x{}, manifest says {}x{}",
                path.display(),
                frame.width,
                frame.height,
                manifest.width,
                manifest.height
            )));
        }
        frames.push(frame);
    }

    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".to_string());
    VideoClip::new(name, frames, fps).map_err(|e| match e {
        Error::Config(m) => Error::Integrity(m),
        other => other,
    })
}

/// Writes `clip` as PNG frames plus manifest, creating `dir` if needed.
pub fn save_clip(clip: &VideoClip, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pattern = FramePattern::parse(DEFAULT_FRAME_PATTERN)?;
    for (i, frame) in clip.frames().iter().enumerate() {
        let bytes = frame.pixels.iter().map(|&p| quantize(p)).collect();
        let img = RgbImage::from_raw(frame.width as u32, frame.height as u32, bytes)
            .expect("buffer length checked at construction");
        let path = dir.join(pattern.file_name(i));
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&path, io),
                other => Error::Format(format!("{}: {other}", path.display())),
            })?;
    }
    let manifest = Manifest {
        frame_count: clip.len(),
        width: clip.width(),
        height: clip.height(),
        fps_num: clip.fps.num,
        fps_den: clip.fps.den,
        frame_file_pattern: DEFAULT_FRAME_PATTERN.to_string(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}
