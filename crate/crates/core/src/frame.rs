//! Frames, pixel formats, capture regions and frame sources.
//!
//! Three source kinds share one interface: a screen region (through a
//! pluggable grabber), a replay directory and a seeded synthetic generator.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use image::{ImageBuffer, Rgb, RgbImage};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelFormat {
    Bgra,
    Rgb,
    Bgr,
}

impl PixelFormat {
    pub const fn bytes_per_pixel(self) -> usize {
        match self {
            PixelFormat::Bgra => 4,
            PixelFormat::Rgb | PixelFormat::Bgr => 3,
        }
    }

    /// Byte offsets of the red, green and blue channels inside one pixel.
    const fn rgb_offsets(self) -> [usize; 3] {
        match self {
            PixelFormat::Rgb => [0, 1, 2],
            PixelFormat::Bgr | PixelFormat::Bgra => [2, 1, 0],
        }
    }

    /// Stable numeric code used in binary frame headers.
    pub const fn code(self) -> u32 {
        match self {
            PixelFormat::Bgra => 0,
            PixelFormat::Rgb => 1,
            PixelFormat::Bgr => 2,
        }
    }

    pub const fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(PixelFormat::Bgra),
            1 => Some(PixelFormat::Rgb),
            2 => Some(PixelFormat::Bgr),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("buffer length {actual} does not match {width}x{height} {format:?} (expected {expected})")]
    BufferSize {
        width: u32,
        height: u32,
        format: PixelFormat,
        expected: usize,
        actual: usize,
    },
    #[error("frame has zero area")]
    Empty,
    #[error("crop {x},{y} {w}x{h} outside {width}x{height} frame")]
    CropOutOfBounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
}

/// One captured image.
#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    width: u32,
    height: u32,
    format: PixelFormat,
    pixels: Vec<u8>,
    pub timestamp_ns: u64,
    pub source_id: String,
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Frame")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("format", &self.format)
            .field("timestamp_ns", &self.timestamp_ns)
            .field("source_id", &self.source_id)
            .finish_non_exhaustive()
    }
}

impl Frame {
    pub fn new(
        width: u32,
        height: u32,
        format: PixelFormat,
        pixels: Vec<u8>,
    ) -> Result<Self, FrameError> {
        let expected = width as usize * height as usize * format.bytes_per_pixel();
        if pixels.len() != expected {
            return Err(FrameError::BufferSize {
                width,
                height,
                format,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Frame {
            width,
            height,
            format,
            pixels,
            timestamp_ns: 0,
            source_id: String::new(),
        })
    }

    /// A frame filled with one RGB color, stored in `format`.
    pub fn filled(width: u32, height: u32, format: PixelFormat, rgb: [u8; 3]) -> Self {
        let bpp = format.bytes_per_pixel();
        let mut px = vec![0u8; bpp];
        let off = format.rgb_offsets();
        for c in 0..3 {
            px[off[c]] = rgb[c];
        }
        if bpp == 4 {
            px[3] = 255;
        }
        let pixels = px
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * bpp)
            .collect();
        Frame::new(width, height, format, pixels).expect("sized by construction")
    }

    pub fn from_rgb_image(img: &RgbImage) -> Self {
        Frame::new(img.width(), img.height(), PixelFormat::Rgb, img.as_raw().clone())
            .expect("image buffer is tightly packed")
    }

    pub fn with_meta(mut self, timestamp_ns: u64, source_id: impl Into<String>) -> Self {
        self.timestamp_ns = timestamp_ns;
        self.source_id = source_id.into();
        self
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn format(&self) -> PixelFormat {
        self.format
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    fn index(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.format.bytes_per_pixel()
    }

    /// Pixel at (x, y) as `[r, g, b]` regardless of storage order.
    pub fn rgb_at(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.index(x, y);
        let off = self.format.rgb_offsets();
        [
            self.pixels[i + off[0]],
            self.pixels[i + off[1]],
            self.pixels[i + off[2]],
        ]
    }

    pub fn set_rgb(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.index(x, y);
        let off = self.format.rgb_offsets();
        for c in 0..3 {
            self.pixels[i + off[c]] = rgb[c];
        }
    }

    /// Copies a rectangular region into a new frame with the same format.
    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> Result<Frame, FrameError> {
        if x.checked_add(w).is_none_or(|r| r > self.width)
            || y.checked_add(h).is_none_or(|b| b > self.height)
        {
            return Err(FrameError::CropOutOfBounds {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let bpp = self.format.bytes_per_pixel();
        let row_bytes = w as usize * bpp;
        let mut out = Vec::with_capacity(row_bytes * h as usize);
        for row in y..y + h {
            let start = self.index(x, row);
            out.extend_from_slice(&self.pixels[start..start + row_bytes]);
        }
        let mut f = Frame::new(w, h, self.format, out)?;
        f.timestamp_ns = self.timestamp_ns;
        f.source_id.clone_from(&self.source_id);
        Ok(f)
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        let rgb = convert_format(self, PixelFormat::Rgb);
        ImageBuffer::<Rgb<u8>, _>::from_raw(rgb.width, rgb.height, rgb.pixels)
            .expect("rgb buffer is tightly packed")
    }

    /// PNG encoding of the frame as 8-bit RGB.
    pub fn encode_png(&self) -> Result<Vec<u8>, image::ImageError> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb_image()
            .write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Cheap content fingerprint (FNV-1a over dims, format and bytes).
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for b in self
            .width
            .to_le_bytes()
            .into_iter()
            .chain(self.height.to_le_bytes())
            .chain(self.format.code().to_le_bytes())
        {
            eat(b);
        }
        for &b in &self.pixels {
            eat(b);
        }
        h
    }
}

/// Channel-reordering copy. Alpha is dropped when leaving BGRA and set to
/// 255 when entering it; channel values are never changed.
pub fn convert_format(frame: &Frame, target: PixelFormat) -> Frame {
    if frame.format == target {
        return frame.clone();
    }
    let src_bpp = frame.format.bytes_per_pixel();
    let dst_bpp = target.bytes_per_pixel();
    let src_off = frame.format.rgb_offsets();
    let dst_off = target.rgb_offsets();
    let n = frame.width as usize * frame.height as usize;
    let mut out = vec![0u8; n * dst_bpp];
    for (src, dst) in frame
        .pixels
        .chunks_exact(src_bpp)
        .zip(out.chunks_exact_mut(dst_bpp))
    {
        for c in 0..3 {
            dst[dst_off[c]] = src[src_off[c]];
        }
        if dst_bpp == 4 {
            dst[3] = 255;
        }
    }
    Frame {
        width: frame.width,
        height: frame.height,
        format: target,
        pixels: out,
        timestamp_ns: frame.timestamp_ns,
        source_id: frame.source_id.clone(),
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegionError {
    #[error("region {width}x{height} has zero width or height")]
    DegenerateRegion { width: u32, height: u32 },
}

/// Screen rectangle in pixels; `right`/`bottom` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptureRegion {
    pub left: i32,
    pub top: i32,
    pub right: i32,
    pub bottom: i32,
}

impl CaptureRegion {
    pub fn width(&self) -> u32 {
        (self.right - self.left) as u32
    }

    pub fn height(&self) -> u32 {
        (self.bottom - self.top) as u32
    }
}

/// Builds a region from two mouse clicks in either order.
pub fn select_region(a: (i32, i32), b: (i32, i32)) -> Result<CaptureRegion, RegionError> {
    let region = CaptureRegion {
        left: a.0.min(b.0),
        top: a.1.min(b.1),
        right: a.0.max(b.0),
        bottom: a.1.max(b.1),
    };
    if region.width() == 0 || region.height() == 0 {
        return Err(RegionError::DegenerateRegion {
            width: region.width(),
            height: region.height(),
        });
    }
    Ok(region)
}

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("frame source is closed")]
    SourceClosed,
    #[error("could not decode {path}: {reason}")]
    DecodeFailure { path: PathBuf, reason: String },
    #[error("no frame available within {0:?}")]
    Timeout(Duration),
    #[error("replay directory {0} contains no PNG/BMP/JPG images")]
    NoImages(PathBuf),
    #[error("invalid source {0:?}")]
    InvalidSpec(String),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where frames come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameSourceKind {
    Screen { region: CaptureRegion },
    Replay { dir: PathBuf, interval_ms: u64 },
    Synthetic { seed: u64, width: u32, height: u32 },
}

impl FromStr for FrameSourceKind {
    type Err = SourceError;

    /// Parses `screen`, `replay:<dir>` or `synthetic:<seed>x<W>x<H>`.
    ///
    /// A bare `screen` gets a placeholder 512x512 region at the origin; the
    /// real region arrives later from the operator.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SourceError::InvalidSpec(s.to_string());
        if s == "screen" {
            return Ok(FrameSourceKind::Screen {
                region: CaptureRegion {
                    left: 0,
                    top: 0,
                    right: 512,
                    bottom: 512,
                },
            });
        }
        if let Some(dir) = s.strip_prefix("replay:") {
            if dir.is_empty() {
                return Err(bad());
            }
            return Ok(FrameSourceKind::Replay {
                dir: PathBuf::from(dir),
                interval_ms: 0,
            });
        }
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let parts: Vec<&str> = rest.split('x').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            let seed = parts[0].parse().map_err(|_| bad())?;
            let width: u32 = parts[1].parse().map_err(|_| bad())?;
            let height: u32 = parts[2].parse().map_err(|_| bad())?;
            if width == 0 || height == 0 {
                return Err(bad());
            }
            return Ok(FrameSourceKind::Synthetic {
                seed,
                width,
                height,
            });
        }
        Err(bad())
    }
}

/// Nanoseconds since the first call in this process.
pub fn monotonic_ns() -> u64 {
    static BASE: OnceLock<Instant> = OnceLock::new();
    BASE.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

/// Stamps frames with strictly increasing timestamps.
#[derive(Debug, Default)]
struct Clock {
    last: Option<u64>,
}

impl Clock {
    fn stamp(&mut self) -> u64 {
        let now = monotonic_ns();
        let ts = match self.last {
            Some(prev) if now <= prev => prev + 1,
            _ => now,
        };
        self.last = Some(ts);
        ts
    }
}

/// A stream of frames. Owned by a single consumer; may be moved across threads.
pub trait FrameSource: Send {
    fn source_id(&self) -> &str;

    /// Blocks for at most `timeout` and returns the most recent frame.
    fn next_frame(&mut self, timeout: Duration) -> Result<Frame, SourceError>;

    fn close(&mut self);
}

pub fn open_source(kind: &FrameSourceKind) -> Result<Box<dyn FrameSource>, SourceError> {
    Ok(match kind {
        FrameSourceKind::Screen { region } => Box::new(ScreenSource::new(*region, None)),
        FrameSourceKind::Replay { dir, interval_ms } => Box::new(ReplaySource::open(
            dir,
            Duration::from_millis(*interval_ms),
        )?),
        FrameSourceKind::Synthetic {
            seed,
            width,
            height,
        } => Box::new(SyntheticSource::new(*seed, *width, *height)),
    })
}

/// Platform hook that copies a screen rectangle as tightly packed BGRA.
pub trait ScreenGrabber: Send {
    fn grab(&mut self, region: &CaptureRegion) -> Result<Vec<u8>, String>;
}

/// Screen-region source. Without a grabber it reports `SourceClosed`.
///
/// When a grab fails after at least one success, the last good frame is
/// re-issued with a fresh timestamp so the pipeline keeps running.
pub struct ScreenSource {
    region: CaptureRegion,
    grabber: Option<Box<dyn ScreenGrabber>>,
    last_good: Option<Frame>,
    clock: Clock,
    closed: bool,
    id: String,
}

impl ScreenSource {
    pub fn new(region: CaptureRegion, grabber: Option<Box<dyn ScreenGrabber>>) -> Self {
        ScreenSource {
            region,
            grabber,
            last_good: None,
            clock: Clock::default(),
            closed: false,
            id: format!(
                "screen:{},{},{},{}",
                region.left, region.top, region.right, region.bottom
            ),
        }
    }

    pub fn set_region(&mut self, region: CaptureRegion) {
        self.region = region;
        self.last_good = None;
    }
}

impl FrameSource for ScreenSource {
    fn source_id(&self) -> &str {
        &self.id
    }

    fn next_frame(&mut self, _timeout: Duration) -> Result<Frame, SourceError> {
        if self.closed {
            return Err(SourceError::SourceClosed);
        }
        let Some(grabber) = self.grabber.as_mut() else {
            return Err(SourceError::SourceClosed);
        };
        match grabber.grab(&self.region) {
            Ok(bgra) => {
                let frame = Frame::new(
                    self.region.width(),
                    self.region.height(),
                    PixelFormat::Bgra,
                    bgra,
                )
                .map_err(|e| SourceError::DecodeFailure {
                    path: PathBuf::from(&self.id),
                    reason: e.to_string(),
                })?
                .with_meta(self.clock.stamp(), self.id.clone());
                self.last_good = Some(frame.clone());
                Ok(frame)
            }
            Err(reason) => {
                log::warn!("screen grab failed: {reason}");
                match &self.last_good {
                    Some(f) => Ok(f.clone().with_meta(self.clock.stamp(), self.id.clone())),
                    None => Err(SourceError::SourceClosed),
                }
            }
        }
    }

    fn close(&mut self) {
        self.closed = true;
    }
}

/// In-memory desktop used as a screen grabber in headless environments.
#[derive(Clone)]
pub struct VirtualDisplay {
    desktop: Arc<Frame>,
    locked: Arc<AtomicBool>,
}

impl VirtualDisplay {
    pub fn new(desktop: Frame) -> Self {
        VirtualDisplay {
            desktop: Arc::new(convert_format(&desktop, PixelFormat::Bgra)),
            locked: Arc::new(AtomicBool::new(false)),
        }
    }

    /// Simulates a locked display: subsequent grabs fail.
    pub fn set_locked(&self, locked: bool) {
        self.locked.store(locked, Ordering::SeqCst);
    }
}

impl ScreenGrabber for VirtualDisplay {
    fn grab(&mut self, region: &CaptureRegion) -> Result<Vec<u8>, String> {
        if self.locked.load(Ordering::SeqCst) {
            return Err("display locked".into());
        }
        if region.left < 0 || region.top < 0 {
            return Err("region starts off-screen".into());
        }
        self.desktop
            .crop(
                region.left as u32,
                region.top as u32,
                region.width(),
                region.height(),
            )
            .map(Frame::into_pixels)
            .map_err(|e| e.to_string())
    }
}

fn is_replay_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "bmp" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Cycles the images of a directory in lexicographic filename order.
pub struct ReplaySource {
    files: Vec<PathBuf>,
    cursor: usize,
    interval: Duration,
    last_emit: Option<Instant>,
    clock: Clock,
    closed: bool,
    id: String,
}

impl ReplaySource {
    pub fn open(dir: &Path, interval: Duration) -> Result<Self, SourceError> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_replay_image(p))
            .collect();
        if files.is_empty() {
            return Err(SourceError::NoImages(dir.to_path_buf()));
        }
        files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
        Ok(ReplaySource {
            files,
            cursor: 0,
            interval,
            last_emit: None,
            clock: Clock::default(),
            closed: false,
            id: format!("replay:{}", dir.display()),
        })
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }
}

impl FrameSource for ReplaySource {
    fn source_id(&self) -> &str {
        &self.id
    }

    fn next_frame(&mut self, timeout: Duration) -> Result<Frame, SourceError> {
        if self.closed {
            return Err(SourceError::SourceClosed);
        }
        if let Some(last) = self.last_emit {
            let due = last + self.interval;
            let now = Instant::now();
            if due > now {
                let wait = due - now;
                if wait > timeout {
                    std::thread::sleep(timeout);
                    return Err(SourceError::Timeout(timeout));
                }
                std::thread::sleep(wait);
            }
        }
        let mut last_err = None;
        for _ in 0..self.files.len() {
            let path = self.files[self.cursor].clone();
            self.cursor = (self.cursor + 1) % self.files.len();
            match image::open(&path) {
                Ok(img) => {
                    self.last_emit = Some(Instant::now());
                    let frame = Frame::from_rgb_image(&img.to_rgb8())
                        .with_meta(self.clock.stamp(), path.display().to_string());
                    return Ok(frame);
                }
                Err(e) => {
                    log::warn!("skipping unreadable replay image {}: {e}", path.display());
                    last_err = Some(SourceError::DecodeFailure {
                        path,
                        reason: e.to_string(),
                    });
                }
            }
        }
        Err(last_err.expect("at least one file attempted"))
    }

    fn close(&mut self) {
        self.closed = true;
    }
}

/// Seeded pseudo-random RGB texture; content depends only on (seed, w, h).
pub struct SyntheticSource {
    frame: Frame,
    clock: Clock,
    closed: bool,
    id: String,
}

impl SyntheticSource {
    pub fn new(seed: u64, width: u32, height: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = vec![0u8; width as usize * height as usize * 3];
        rng.fill_bytes(&mut pixels);
        let id = format!("synthetic:{seed}x{width}x{height}");
        SyntheticSource {
            frame: Frame::new(width, height, PixelFormat::Rgb, pixels)
                .expect("sized by construction"),
            clock: Clock::default(),
            closed: false,
            id,
        }
    }
}

impl FrameSource for SyntheticSource {
    fn source_id(&self) -> &str {
        &self.id
    }

    fn next_frame(&mut self, _timeout: Duration) -> Result<Frame, SourceError> {
        if self.closed {
            return Err(SourceError::SourceClosed);
        }
        Ok(self.frame.clone().with_meta(self.clock.stamp(), self.id.clone()))
    }

    fn close(&mut self) {
        self.closed = true;
    }
}
