//! Per-frame analysis for each task: format conversion, upscaling, tiling,
//! adapter calls, coordinate translation and merging.

pub mod nms;
pub mod pooling;

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{
    classify_tile, detect_tile, segment_tile, AdapterError, Backend, Detection, InstanceMask,
    MaskLabel, SoftmaxVector, Task,
};
use crate::frame::{convert_format, Frame};
use crate::scalar::Scalar;
use crate::tiling::{
    plan_classification, plan_detection, plan_segmentation, upscale_if_undersized, Scale, TilePlan,
    TileRect, TilingError,
};

pub use nms::{distance_nms, ConfidenceBand, NmsConfig};
pub use pooling::{argmax, mean_pool, PoolError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("model {model} is a {actual:?} model, not {expected:?}")]
    TaskMismatch {
        model: String,
        expected: Task,
        actual: Task,
    },
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
}

/// Wall-clock split of one analysis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_ms: f64,
    /// Time spent inside adapter calls (the tile inference phase).
    pub adapter_ms: f64,
}

impl Timing {
    fn from(total: Duration, adapter: Duration) -> Self {
        Timing {
            total_ms: total.as_secs_f64() * 1e3,
            adapter_ms: adapter.as_secs_f64() * 1e3,
        }
    }

    pub fn overhead_ms(&self) -> f64 {
        (self.total_ms - self.adapter_ms).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult<S> {
    pub mean_probs: SoftmaxVector<S>,
    /// Argmax of `mean_probs`, lowest index on ties.
    pub predicted: usize,
    pub tile_count: usize,
    pub scale: (u32, u32),
    pub timing: Timing,
}

impl<S: Scalar> ClassificationResult<S> {
    pub fn predicted_name(&self) -> &str {
        &self.mean_probs.class_names()[self.predicted]
    }

    pub fn confidence(&self) -> S {
        self.mean_probs.probs()[self.predicted]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandedDetection<S> {
    pub detection: Detection<S>,
    pub band: ConfidenceBand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult<S> {
    /// Post-suppression, post-threshold detections in frame coordinates.
    pub detections: Vec<BandedDetection<S>>,
    /// Post-suppression detections before thresholding.
    pub survivors: Vec<Detection<S>>,
    pub raw_count: usize,
    pub threshold_applied: S,
    pub nms: NmsConfig<S>,
    pub tile_count: usize,
    pub scale: (u32, u32),
    pub timing: Timing,
}

impl<S: Scalar> DetectionResult<S> {
    /// Re-filters the suppression survivors at a new threshold without
    /// re-running suppression.
    pub fn rethreshold(&mut self, threshold: S) {
        self.threshold_applied = threshold;
        self.detections = band_and_filter(&self.survivors, threshold, &self.nms);
    }

    pub fn count(&self) -> usize {
        self.detections.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ki67Result<S> {
    pub positive: usize,
    pub negative: usize,
    /// `positive / (positive + negative)`; `None` when nothing was found.
    pub index: Option<S>,
    /// Masks in frame coordinates.
    pub stitched_masks: Vec<InstanceMask>,
    pub tile_count: usize,
    pub scale: (u32, u32),
    pub timing: Timing,
}

/// How instances cut by a tile border are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderCounting {
    /// Each tile's instances count separately; cut cells count twice.
    #[default]
    PerTile,
    /// Same-label masks touching across a tile border merge into one instance.
    MergeAcrossBorders,
}

pub fn ki67_index<S: Scalar>(positive: usize, negative: usize) -> Option<S> {
    let total = positive + negative;
    (total > 0).then(|| S::from_count(positive) / S::from_count(total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum InferenceResult<S> {
    Classification(ClassificationResult<S>),
    Detection(DetectionResult<S>),
    Segmentation(Ki67Result<S>),
}

impl<S> InferenceResult<S> {
    pub fn task(&self) -> Task {
        match self {
            InferenceResult::Classification(_) => Task::Classification,
            InferenceResult::Detection(_) => Task::Detection,
            InferenceResult::Segmentation(_) => Task::Segmentation,
        }
    }

    pub fn timing(&self) -> Timing {
        match self {
            InferenceResult::Classification(r) => r.timing,
            InferenceResult::Detection(r) => r.timing,
            InferenceResult::Segmentation(r) => r.timing,
        }
    }

    pub fn tile_count(&self) -> usize {
        match self {
            InferenceResult::Classification(r) => r.tile_count,
            InferenceResult::Detection(r) => r.tile_count,
            InferenceResult::Segmentation(r) => r.tile_count,
        }
    }
}

fn check_task<S: Scalar>(backend: &dyn Backend<S>, expected: Task) -> Result<(), PipelineError> {
    let d = backend.descriptor();
    if d.task != expected {
        return Err(PipelineError::TaskMismatch {
            model: d.id.clone(),
            expected,
            actual: d.task,
        });
    }
    Ok(())
}

/// Converts to the model's input format and upscales to at least one tile.
pub fn prepare<S: Scalar>(
    frame: &Frame,
    backend: &dyn Backend<S>,
) -> Result<(Frame, Scale), PipelineError> {
    let d = backend.descriptor();
    let converted = convert_format(frame, d.input_format);
    Ok(upscale_if_undersized(&converted, d.tile_size)?)
}

/// Runs `f` on every tile crop, keyed by plan order. Tiles run in parallel
/// when the backend is reentrant.
fn per_tile<S, T, F>(
    frame: &Frame,
    plan: &TilePlan,
    backend: &dyn Backend<S>,
    f: F,
) -> Result<(Vec<T>, Duration), PipelineError>
where
    S: Scalar,
    T: Send,
    F: Fn(&TileRect, &Frame) -> Result<T, AdapterError> + Sync,
{
    let run = |t: &TileRect| -> Result<T, PipelineError> {
        let crop = frame
            .crop(t.x, t.y, t.w, t.h)
            .expect("plan tiles lie inside the frame");
        Ok(f(t, &crop)?)
    };
    let start = Instant::now();
    let out: Result<Vec<T>, PipelineError> = if backend.reentrant() && plan.tiles.len() > 1 {
        plan.tiles.par_iter().map(run).collect()
    } else {
        plan.tiles.iter().map(run).collect()
    };
    Ok((out?, start.elapsed()))
}

fn scale_pair(s: Scale) -> (u32, u32) {
    (*s.numer(), *s.denom())
}

pub fn run_classification<S: Scalar>(
    frame: &Frame,
    backend: &dyn Backend<S>,
) -> Result<ClassificationResult<S>, PipelineError> {
    let start = Instant::now();
    check_task(backend, Task::Classification)?;
    let (frame, scale) = prepare(frame, backend)?;
    let tile_size = backend.descriptor().tile_size;
    let mut plan = plan_classification(frame.dims(), tile_size)?;
    plan.scale_applied = scale;
    let (vectors, adapter) = per_tile(&frame, &plan, backend, |_, tile| classify_tile(backend, tile))?;
    let mean_probs = pool_softmax(&vectors)?;
    let predicted = argmax(mean_probs.probs()).expect("at least two classes");
    Ok(ClassificationResult {
        mean_probs,
        predicted,
        tile_count: vectors.len(),
        scale: scale_pair(scale),
        timing: Timing::from(start.elapsed(), adapter),
    })
}

/// Mean of per-tile softmax vectors, which must share class names.
pub fn pool_softmax<S: Scalar>(vectors: &[SoftmaxVector<S>]) -> Result<SoftmaxVector<S>, PipelineError> {
    let first = vectors.first().ok_or(PoolError::Empty)?;
    if let Some(bad) = vectors.iter().find(|v| v.class_names() != first.class_names()) {
        return Err(AdapterError::InvalidOutput(format!(
            "tiles disagree on classes: {:?} vs {:?}",
            first.class_names(),
            bad.class_names()
        ))
        .into());
    }
    let probs: Vec<&[S]> = vectors.iter().map(|v| v.probs()).collect();
    let mean = mean_pool(&probs)?;
    Ok(SoftmaxVector::new(mean, first.class_names().to_vec())?)
}

fn band_and_filter<S: Scalar>(
    survivors: &[Detection<S>],
    threshold: S,
    nms: &NmsConfig<S>,
) -> Vec<BandedDetection<S>> {
    survivors
        .iter()
        .filter(|d| d.score >= threshold)
        .map(|d| BandedDetection {
            detection: *d,
            band: nms.band(d.score),
        })
        .collect()
}

pub fn run_detection<S: Scalar>(
    frame: &Frame,
    backend: &dyn Backend<S>,
    overlap: u32,
    threshold: S,
    nms: &NmsConfig<S>,
) -> Result<DetectionResult<S>, PipelineError> {
    let start = Instant::now();
    if !(threshold >= S::zero() && threshold <= S::one()) {
        return Err(PipelineError::InvalidThreshold(threshold.to_f64().unwrap_or(f64::NAN)));
    }
    check_task(backend, Task::Detection)?;
    let (frame, scale) = prepare(frame, backend)?;
    let tile_size = backend.descriptor().tile_size;
    let mut plan = plan_detection(frame.dims(), tile_size, overlap)?;
    plan.scale_applied = scale;
    let (per_tile_dets, adapter) = per_tile(&frame, &plan, backend, |t, tile| {
        let dx = S::from_u32(t.x).expect("u32");
        let dy = S::from_u32(t.y).expect("u32");
        Ok(detect_tile(backend, tile)?
            .into_iter()
            .map(|d| d.translated(dx, dy))
            .collect::<Vec<_>>())
    })?;
    let candidates: Vec<Detection<S>> = per_tile_dets.into_iter().flatten().collect();
    let survivors = distance_nms(&candidates, nms);
    Ok(DetectionResult {
        detections: band_and_filter(&survivors, threshold, nms),
        survivors,
        raw_count: candidates.len(),
        threshold_applied: threshold,
        nms: *nms,
        tile_count: plan.tiles.len(),
        scale: scale_pair(scale),
        timing: Timing::from(start.elapsed(), adapter),
    })
}

pub fn run_ki67<S: Scalar>(
    frame: &Frame,
    backend: &dyn Backend<S>,
    counting: BorderCounting,
) -> Result<Ki67Result<S>, PipelineError> {
    let start = Instant::now();
    check_task(backend, Task::Segmentation)?;
    let (frame, scale) = prepare(frame, backend)?;
    let tile_size = backend.descriptor().tile_size;
    let mut plan = plan_segmentation(frame.dims(), tile_size)?;
    plan.scale_applied = scale;
    let (per_tile_masks, adapter) = per_tile(&frame, &plan, backend, |t, tile| {
        Ok(segment_tile::<S, _>(backend, tile)?
            .into_iter()
            .map(|mut m| {
                m.origin = (m.origin.0 + t.x, m.origin.1 + t.y);
                m.stitched()
            })
            .collect::<Vec<_>>())
    })?;
    let mut masks: Vec<InstanceMask> = per_tile_masks.into_iter().flatten().collect();
    if counting == BorderCounting::MergeAcrossBorders {
        masks = merge_across_borders(masks, &plan);
    }
    let positive = masks
        .iter()
        .filter(|m| m.label == MaskLabel::Ki67Positive)
        .count();
    let negative = masks.len() - positive;
    Ok(Ki67Result {
        positive,
        negative,
        index: ki67_index(positive, negative),
        stitched_masks: masks,
        tile_count: plan.tiles.len(),
        scale: scale_pair(scale),
        timing: Timing::from(start.elapsed(), adapter),
    })
}

/// Unions same-label masks that have 4-adjacent pixels on opposite sides of
/// a tile border.
fn merge_across_borders(masks: Vec<InstanceMask>, plan: &TilePlan) -> Vec<InstanceMask> {
    use std::collections::HashMap;

    let tile_of = |x: u32, y: u32| plan.tiles.iter().position(|t| t.contains(x, y));
    let mut owner: HashMap<(u32, u32), usize> = HashMap::new();
    for (i, m) in masks.iter().enumerate() {
        for p in m.pixels() {
            owner.insert(p, i);
        }
    }
    let mut parent: Vec<usize> = (0..masks.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (i, m) in masks.iter().enumerate() {
        for (x, y) in m.pixels() {
            for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                let Some(&j) = owner.get(&(nx, ny)) else { continue };
                if j == i || masks[j].label != m.label || tile_of(x, y) == tile_of(nx, ny) {
                    continue;
                }
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[b.max(a)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Option<InstanceMask>> = vec![None; masks.len()];
    for (i, m) in masks.into_iter().enumerate() {
        let root = find(&mut parent, i);
        match &mut groups[root] {
            Some(g) => g.runs.extend(m.runs),
            slot => *slot = Some(m),
        }
    }
    groups.into_iter().flatten().collect()
}

/// Dispatches on the backend's task.
pub fn run_task<S: Scalar>(
    frame: &Frame,
    backend: &dyn Backend<S>,
    overlap: u32,
    threshold: S,
    nms: &NmsConfig<S>,
) -> Result<InferenceResult<S>, PipelineError> {
    Ok(match backend.descriptor().task {
        Task::Classification => InferenceResult::Classification(run_classification(frame, backend)?),
        Task::Detection => {
            InferenceResult::Detection(run_detection(frame, backend, overlap, threshold, nms)?)
        }
        Task::Segmentation => {
            InferenceResult::Segmentation(run_ki67(frame, backend, BorderCounting::PerTile)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::mock::{
        paint_square, ConstantClassifier, MarkerDetector, MarkerSegmenter, QuadrantClassifier,
        KI67_BLUE, KI67_BROWN, MAGENTA,
    };
    use crate::adapters::ModelDescriptor;
    use crate::frame::PixelFormat;

    #[test]
    fn single_tile_classification_is_the_tile_vector() {
        let q = QuadrantClassifier::<f64>::with_tile_size(64);
        let frame = Frame::filled(64, 64, PixelFormat::Bgra, [0, 255, 0]);
        let r = run_classification(&frame, &q).unwrap();
        assert_eq!(r.tile_count, 1);
        let tile = convert_format(&frame, PixelFormat::Rgb);
        let direct = classify_tile(&q, &tile).unwrap();
        assert_eq!(r.mean_probs, direct);
        assert_eq!(r.predicted_name(), "green");
    }

    #[test]
    fn classification_pools_every_tile() {
        let q = QuadrantClassifier::<f64>::with_tile_size(32);
        let mut frame = Frame::filled(64, 32, PixelFormat::Rgb, [255, 0, 0]);
        paint_square(&mut frame, 32, 0, 32, [0, 0, 255]);
        let r = run_classification(&frame, &q).unwrap();
        assert_eq!(r.tile_count, 2);
        let p = r.mean_probs.probs();
        assert!((p[0] - p[2]).abs() < 1e-12);
        assert!(r.predicted == 0 || r.predicted == 2);
    }

    #[test]
    fn undersized_frames_are_upscaled_before_tiling() {
        let q = QuadrantClassifier::<f64>::with_tile_size(64);
        let frame = Frame::filled(30, 30, PixelFormat::Rgb, [10, 10, 10]);
        let r = run_classification(&frame, &q).unwrap();
        assert_eq!(r.tile_count, 1);
        assert_eq!(r.scale, (32, 15));
    }

    #[test]
    fn wrong_task_is_reported() {
        let q = QuadrantClassifier::<f64>::with_tile_size(64);
        let frame = Frame::filled(64, 64, PixelFormat::Rgb, [0, 0, 0]);
        assert!(matches!(
            run_detection(&frame, &q, 8, 0.5, &NmsConfig::default()),
            Err(PipelineError::TaskMismatch { .. })
        ));
    }

    #[test]
    fn straddling_marker_collapses_to_one() {
        let det = MarkerDetector::<f64>::with_tile_size(64);
        let mut frame = Frame::filled(128, 64, PixelFormat::Rgb, [200, 200, 200]);
        // stride 48 with overlap 16: tiles at x = 0, 48, 64
        paint_square(&mut frame, 60, 20, 8, MAGENTA);
        let r = run_detection(&frame, &det, 16, 0.0, &NmsConfig::default()).unwrap();
        assert!(r.raw_count >= 2);
        assert_eq!(r.count(), 1);
        assert_eq!(r.detections[0].detection.centroid(), (64.0, 24.0));
    }

    #[test]
    fn threshold_filters_after_suppression() {
        let det = MarkerDetector::<f64>::with_tile_size(64);
        let mut frame = Frame::filled(64, 64, PixelFormat::Rgb, [0, 0, 0]);
        paint_square(&mut frame, 4, 4, 8, [255, 85, 255]);
        paint_square(&mut frame, 30, 4, 8, [255, 50, 255]);
        paint_square(&mut frame, 4, 40, 8, [255, 30, 255]);
        let mut r = run_detection(&frame, &det, 8, 0.0, &NmsConfig::default()).unwrap();
        let mut bands: Vec<_> = r.detections.iter().map(|b| (b.detection.score, b.band)).collect();
        bands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        assert_eq!(
            bands,
            vec![
                (0.85, ConfidenceBand::High),
                (0.5, ConfidenceBand::Medium),
                (0.3, ConfidenceBand::Low)
            ]
        );
        r.rethreshold(0.5);
        assert_eq!(r.count(), 2);
        assert!(r.detections.iter().all(|d| d.detection.score >= 0.5));
        let none = run_detection(&frame, &det, 8, 1.0, &NmsConfig::default()).unwrap();
        assert!(none.detections.is_empty());
        assert!(matches!(
            run_detection(&frame, &det, 8, 1.5, &NmsConfig::default()),
            Err(PipelineError::InvalidThreshold(_))
        ));
    }

    #[test]
    fn ki67_counts_and_index() {
        let seg = MarkerSegmenter::with_tile_size(64);
        let mut frame = Frame::filled(64, 64, PixelFormat::Rgb, [255, 255, 255]);
        let empty = run_ki67::<f64>(&frame, &seg, BorderCounting::PerTile).unwrap();
        assert_eq!((empty.positive, empty.negative, empty.index), (0, 0, None));

        paint_square(&mut frame, 2, 2, 12, KI67_BROWN);
        for i in 0..3 {
            paint_square(&mut frame, 2 + 16 * i, 30, 12, KI67_BLUE);
        }
        let r = run_ki67::<f64>(&frame, &seg, BorderCounting::PerTile).unwrap();
        assert_eq!((r.positive, r.negative), (1, 3));
        assert_eq!(r.index, Some(0.25));
    }

    #[test]
    fn ki67_border_blob_counts_twice_unless_merged() {
        let seg = MarkerSegmenter::with_tile_size(64);
        let mut frame = Frame::filled(128, 64, PixelFormat::Rgb, [255, 255, 255]);
        paint_square(&mut frame, 58, 20, 12, KI67_BROWN); // centered on x = 64
        let r = run_ki67::<f64>(&frame, &seg, BorderCounting::PerTile).unwrap();
        assert_eq!(r.positive, 2);
        let merged = run_ki67::<f64>(&frame, &seg, BorderCounting::MergeAcrossBorders).unwrap();
        assert_eq!(merged.positive, 1);
        assert_eq!(merged.stitched_masks[0].area(), 144);
        assert_eq!(merged.stitched_masks[0].bounds(), Some((58, 20, 70, 32)));
    }

    #[test]
    fn ki67_ratio_example() {
        assert_eq!(ki67_index::<f64>(30, 70), Some(0.3));
        assert_eq!(ki67_index::<f64>(0, 0), None);
    }

    #[test]
    fn pooled_classes_must_agree() {
        let a = SoftmaxVector::new(vec![0.5f64, 0.5], vec!["a".into(), "b".into()]).unwrap();
        let b = SoftmaxVector::new(vec![0.5f64, 0.5], vec!["a".into(), "c".into()]).unwrap();
        assert!(pool_softmax(&[a, b]).is_err());
    }

    #[test]
    fn constant_backend_dispatch() {
        let desc = ModelDescriptor {
            id: "c".into(),
            task: Task::Classification,
            tile_size: 16,
            input_format: PixelFormat::Rgb,
            source: crate::adapters::ModelSource::BuiltinMock {
                name: "constant".into(),
                delay_ms: 0,
            },
        };
        let b = ConstantClassifier::<f32>::new(desc);
        let r = run_task(
            &Frame::filled(40, 16, PixelFormat::Bgra, [0, 0, 0]),
            &b,
            0,
            0.5,
            &NmsConfig::default(),
        )
        .unwrap();
        assert_eq!(r.task(), Task::Classification);
        assert_eq!(r.tile_count(), 3);
    }
}
