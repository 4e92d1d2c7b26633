//! Model adapter interface shared by the three task shapes.
//!
//! Adapters only turn one tile into raw model output. Merging across tiles
//! (pooling, suppression, stitching) lives in [`crate::pipelines`].

pub mod mock;
pub mod registry;

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, PixelFormat};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Detection,
    Segmentation,
}

impl Task {
    /// Name used in exports and the CLI.
    pub fn export_name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Detection => "mitosis",
            Task::Segmentation => "ki67",
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "classification" | "classify" => Ok(Task::Classification),
            "detection" | "detect" | "mitosis" => Ok(Task::Detection),
            "segmentation" | "segment" | "ki67" => Ok(Task::Segmentation),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("tile is {got_w}x{got_h} {got_format:?}, model expects {want}x{want} {want_format:?}")]
    WrongTileShape {
        got_w: u32,
        got_h: u32,
        got_format: PixelFormat,
        want: u32,
        want_format: PixelFormat,
    },
    #[error("model {model} does not support {task:?}")]
    UnsupportedTask { model: String, task: Task },
    #[error("backend {model} failed: {message}")]
    BackendFailure { model: String, message: String },
    #[error("invalid model output: {0}")]
    InvalidOutput(String),
}

/// Per-class probabilities of one tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxVector<S> {
    probs: Vec<S>,
    class_names: Vec<String>,
}

pub const SOFTMAX_TOLERANCE: f64 = 1e-6;

impl<S: Scalar> SoftmaxVector<S> {
    pub fn new(probs: Vec<S>, class_names: Vec<String>) -> Result<Self, AdapterError> {
        if probs.len() != class_names.len() || probs.len() < 2 {
            return Err(AdapterError::InvalidOutput(format!(
                "{} probabilities for {} classes",
                probs.len(),
                class_names.len()
            )));
        }
        if probs.iter().any(|p| !(*p >= S::zero() && *p <= S::one())) {
            return Err(AdapterError::InvalidOutput("probability outside [0,1]".into()));
        }
        let sum = probs.iter().fold(S::zero(), |a, &b| a + b);
        if (sum - S::one()).abs() > S::lit(SOFTMAX_TOLERANCE) {
            return Err(AdapterError::InvalidOutput(format!("probabilities sum to {sum}")));
        }
        Ok(SoftmaxVector { probs, class_names })
    }

    /// Numerically stable softmax over `logits`.
    pub fn from_logits(logits: &[S], class_names: Vec<String>) -> Result<Self, AdapterError> {
        let max = logits
            .iter()
            .copied()
            .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
        let exps: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total = exps.iter().fold(S::zero(), |a, &b| a + b);
        Self::new(exps.into_iter().map(|e| e / total).collect(), class_names)
    }

    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }
}

/// Axis-aligned box, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRect<S> {
    pub x: S,
    pub y: S,
    pub w: S,
    pub h: S,
}

impl<S: Scalar> BoxRect<S> {
    pub fn center(&self) -> (S, S) {
        let two = S::lit(2.0);
        (self.x + self.w / two, self.y + self.h / two)
    }

    pub fn translated(&self, dx: S, dy: S) -> Self {
        BoxRect {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

/// A candidate object: box, class (1 = mitotic figure, 0 = background) and score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection<S> {
    pub bbox: BoxRect<S>,
    pub class_id: u32,
    pub score: S,
}

impl<S: Scalar> Detection<S> {
    pub fn new(bbox: BoxRect<S>, class_id: u32, score: S) -> Result<Self, AdapterError> {
        if !(score >= S::zero() && score <= S::one()) {
            return Err(AdapterError::InvalidOutput(format!("score {score} outside [0,1]")));
        }
        Ok(Detection {
            bbox,
            class_id,
            score,
        })
    }

    /// Detection whose box is a `size`-wide square centered on (cx, cy).
    pub fn at(cx: S, cy: S, size: S, score: S) -> Self {
        let half = size / S::lit(2.0);
        Detection {
            bbox: BoxRect {
                x: cx - half,
                y: cy - half,
                w: size,
                h: size,
            },
            class_id: 1,
            score,
        }
    }

    pub fn centroid(&self) -> (S, S) {
        self.bbox.center()
    }

    pub fn translated(&self, dx: S, dy: S) -> Self {
        Detection {
            bbox: self.bbox.translated(dx, dy),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLabel {
    Ki67Positive,
    Ki67Negative,
}

/// Horizontal run of mask pixels, relative to the mask's origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Run {
    pub y: u32,
    pub x: u32,
    pub len: u32,
}

/// One segmented instance as run-length rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMask {
    /// Offset added to every run (tile origin, or 0 after stitching).
    pub origin: (u32, u32),
    pub runs: Vec<Run>,
    pub label: MaskLabel,
}

impl InstanceMask {
    pub fn area(&self) -> u64 {
        self.runs.iter().map(|r| r.len as u64).sum()
    }

    /// Absolute pixel coordinates covered by the mask.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.runs.iter().flat_map(move |r| {
            (r.x..r.x + r.len).map(move |x| (self.origin.0 + x, self.origin.1 + r.y))
        })
    }

    /// Same mask with `origin` folded into the runs.
    pub fn stitched(&self) -> InstanceMask {
        InstanceMask {
            origin: (0, 0),
            runs: self
                .runs
                .iter()
                .map(|r| Run {
                    y: r.y + self.origin.1,
                    x: r.x + self.origin.0,
                    len: r.len,
                })
                .collect(),
            label: self.label,
        }
    }

    /// Inclusive-exclusive bounding box `(x0, y0, x1, y1)` in absolute coords.
    pub fn bounds(&self) -> Option<(u32, u32, u32, u32)> {
        let mut it = self.runs.iter();
        let first = it.next()?;
        let mut b = (first.x, first.y, first.x + first.len, first.y + 1);
        for r in it {
            b.0 = b.0.min(r.x);
            b.1 = b.1.min(r.y);
            b.2 = b.2.max(r.x + r.len);
            b.3 = b.3.max(r.y + 1);
        }
        Some((
            b.0 + self.origin.0,
            b.1 + self.origin.1,
            b.2 + self.origin.0,
            b.3 + self.origin.1,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    /// Shipped mock; `name` picks the rule, `delay_ms` adds simulated latency per tile.
    BuiltinMock {
        name: String,
        #[serde(default)]
        delay_ms: u64,
    },
    LocalFile {
        path: PathBuf,
    },
    Remote {
        url: String,
        sha256: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub id: String,
    pub task: Task,
    pub tile_size: u32,
    pub input_format: PixelFormat,
    pub source: ModelSource,
}

impl ModelDescriptor {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty model id".into());
        }
        if self.tile_size == 0 {
            return Err(format!("model {}: tile_size must be positive", self.id));
        }
        if self.input_format == PixelFormat::Bgra {
            return Err(format!("model {}: input_format must be rgb or bgr", self.id));
        }
        Ok(())
    }
}

/// A loaded model. Immutable after load; shareable across threads.
pub trait Backend<S: Scalar>: Send + Sync {
    fn descriptor(&self) -> &ModelDescriptor;

    /// Whether concurrent calls on the same handle are allowed.
    fn reentrant(&self) -> bool {
        false
    }

    fn classify(&self, tile: &Frame) -> Result<SoftmaxVector<S>, AdapterError> {
        let _ = tile;
        Err(self.unsupported(Task::Classification))
    }

    fn detect(&self, tile: &Frame) -> Result<Vec<Detection<S>>, AdapterError> {
        let _ = tile;
        Err(self.unsupported(Task::Detection))
    }

    fn segment(&self, tile: &Frame) -> Result<Vec<InstanceMask>, AdapterError> {
        let _ = tile;
        Err(self.unsupported(Task::Segmentation))
    }

    #[doc(hidden)]
    fn unsupported(&self, task: Task) -> AdapterError {
        AdapterError::UnsupportedTask {
            model: self.descriptor().id.clone(),
            task,
        }
    }
}

fn check_tile<S: Scalar, B: Backend<S> + ?Sized>(
    backend: &B,
    tile: &Frame,
) -> Result<(), AdapterError> {
    let d = backend.descriptor();
    if tile.width() != d.tile_size || tile.height() != d.tile_size || tile.format() != d.input_format
    {
        return Err(AdapterError::WrongTileShape {
            got_w: tile.width(),
            got_h: tile.height(),
            got_format: tile.format(),
            want: d.tile_size,
            want_format: d.input_format,
        });
    }
    Ok(())
}

fn with_context(model: &str, e: AdapterError) -> AdapterError {
    match e {
        AdapterError::InvalidOutput(message) => AdapterError::BackendFailure {
            model: model.to_string(),
            message,
        },
        other => other,
    }
}

/// Classifies one tile after checking its shape against the descriptor.
pub fn classify_tile<S: Scalar, B: Backend<S> + ?Sized>(
    backend: &B,
    tile: &Frame,
) -> Result<SoftmaxVector<S>, AdapterError> {
    check_tile(backend, tile)?;
    backend
        .classify(tile)
        .map_err(|e| with_context(&backend.descriptor().id, e))
}

/// Raw tile-local detections; no suppression happens here.
pub fn detect_tile<S: Scalar, B: Backend<S> + ?Sized>(
    backend: &B,
    tile: &Frame,
) -> Result<Vec<Detection<S>>, AdapterError> {
    check_tile(backend, tile)?;
    backend
        .detect(tile)
        .map_err(|e| with_context(&backend.descriptor().id, e))
}

pub fn segment_tile<S: Scalar, B: Backend<S> + ?Sized>(
    backend: &B,
    tile: &Frame,
) -> Result<Vec<InstanceMask>, AdapterError> {
    check_tile(backend, tile)?;
    backend
        .segment(tile)
        .map_err(|e| with_context(&backend.descriptor().id, e))
}
