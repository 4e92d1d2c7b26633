//! Deterministic mock backends.
//!
//! * `quadrant` classifier: channel means `(r, g, b)` scaled to `[0, 1]`
//!   become logits `8 * [r, g, b, 1 - max(r, g, b)]` over the classes
//!   `red, green, blue, dark`, then go through softmax.
//! * `constant` classifier: returns `[0.7, 0.2, 0.1]` without reading pixels.
//! * `marker` detector: every 4-connected region of one marker color
//!   (`R = 255, B = 255, G <= 100`) is one detection. Pure magenta scores
//!   0.9, otherwise `G / 100`; regions smaller than 8x8 (cut by the tile
//!   edge) have their score scaled by `area / 64`.
//! * `seeded` detector: 0..=3 detections with positions and scores drawn
//!   from an RNG seeded by the tile's content hash.
//! * `marker` segmenter: regions of brown `(139, 69, 19)` are Ki-67
//!   positive, pure blue `(0, 0, 255)` regions are negative.
//! * `failing`: every call returns a backend failure.
//!
//! All mocks are pure functions of the tile bytes.

use std::collections::VecDeque;
use std::marker::PhantomData;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    AdapterError, Backend, BoxRect, Detection, InstanceMask, MaskLabel, ModelDescriptor,
    ModelSource, Run, SoftmaxVector, Task,
};
use crate::frame::Frame;
use crate::scalar::Scalar;

pub const MARKER_SIZE: u32 = 8;
pub const MAGENTA: [u8; 3] = [255, 0, 255];
pub const KI67_BROWN: [u8; 3] = [139, 69, 19];
pub const KI67_BLUE: [u8; 3] = [0, 0, 255];
pub const QUADRANT_GAIN: f64 = 8.0;
pub const QUADRANT_CLASSES: [&str; 4] = ["red", "green", "blue", "dark"];

/// Marker color for a detection with the given score (`0.9` maps to pure magenta).
pub fn marker_color(score_percent: u8) -> [u8; 3] {
    assert!(score_percent <= 100);
    if score_percent == 90 {
        MAGENTA
    } else {
        [255, score_percent, 255]
    }
}

/// Paints a `size`x`size` square whose top-left corner is (x, y), clipped to the frame.
pub fn paint_square(frame: &mut Frame, x: i64, y: i64, size: u32, rgb: [u8; 3]) {
    for yy in y..y + size as i64 {
        for xx in x..x + size as i64 {
            if xx >= 0 && yy >= 0 && (xx as u32) < frame.width() && (yy as u32) < frame.height() {
                frame.set_rgb(xx as u32, yy as u32, rgb);
            }
        }
    }
}

/// 4-connected regions of pixels sharing the same key.
fn regions<K, F>(tile: &Frame, key_of: F) -> Vec<(K, Vec<(u32, u32)>)>
where
    K: PartialEq + Copy,
    F: Fn([u8; 3]) -> Option<K>,
{
    let (w, h) = tile.dims();
    let mut seen = vec![false; w as usize * h as usize];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let idx = (y * w + x) as usize;
            if seen[idx] {
                continue;
            }
            let Some(key) = key_of(tile.rgb_at(x, y)) else {
                continue;
            };
            seen[idx] = true;
            let mut pixels = Vec::new();
            queue.push_back((x, y));
            while let Some((cx, cy)) = queue.pop_front() {
                pixels.push((cx, cy));
                let neighbors = [
                    (cx.wrapping_sub(1), cy),
                    (cx + 1, cy),
                    (cx, cy.wrapping_sub(1)),
                    (cx, cy + 1),
                ];
                for (nx, ny) in neighbors {
                    if nx >= w || ny >= h {
                        continue;
                    }
                    let nidx = (ny * w + nx) as usize;
                    if !seen[nidx] && key_of(tile.rgb_at(nx, ny)) == Some(key) {
                        seen[nidx] = true;
                        queue.push_back((nx, ny));
                    }
                }
            }
            out.push((key, pixels));
        }
    }
    out
}

fn to_runs(mut pixels: Vec<(u32, u32)>) -> Vec<Run> {
    pixels.sort_by_key(|&(x, y)| (y, x));
    let mut runs: Vec<Run> = Vec::new();
    for (x, y) in pixels {
        match runs.last_mut() {
            Some(r) if r.y == y && r.x + r.len == x => r.len += 1,
            _ => runs.push(Run { y, x, len: 1 }),
        }
    }
    runs
}

fn descriptor(id: &str, task: Task, tile_size: u32, name: &str) -> ModelDescriptor {
    ModelDescriptor {
        id: id.to_string(),
        task,
        tile_size,
        input_format: match task {
            Task::Segmentation => crate::frame::PixelFormat::Bgr,
            _ => crate::frame::PixelFormat::Rgb,
        },
        source: ModelSource::BuiltinMock {
            name: name.to_string(),
            delay_ms: 0,
        },
    }
}

pub struct QuadrantClassifier<S> {
    desc: ModelDescriptor,
    _s: PhantomData<fn() -> S>,
}

impl<S: Scalar> QuadrantClassifier<S> {
    pub fn new(desc: ModelDescriptor) -> Self {
        QuadrantClassifier {
            desc,
            _s: PhantomData,
        }
    }

    pub fn with_tile_size(tile_size: u32) -> Self {
        Self::new(descriptor("quadrant", Task::Classification, tile_size, "quadrant"))
    }

    /// Softmax produced for the given mean channel intensities in `[0, 1]`.
    pub fn rule(means: [S; 3]) -> SoftmaxVector<S> {
        let gain = S::lit(QUADRANT_GAIN);
        let max = means[0].max(means[1]).max(means[2]);
        let logits = [
            gain * means[0],
            gain * means[1],
            gain * means[2],
            gain * (S::one() - max),
        ];
        SoftmaxVector::from_logits(
            &logits,
            QUADRANT_CLASSES.iter().map(|s| s.to_string()).collect(),
        )
        .expect("four finite logits")
    }
}

impl<S: Scalar> Backend<S> for QuadrantClassifier<S> {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn reentrant(&self) -> bool {
        true
    }

    fn classify(&self, tile: &Frame) -> Result<SoftmaxVector<S>, AdapterError> {
        let mut sums = [0u64; 3];
        for y in 0..tile.height() {
            for x in 0..tile.width() {
                let px = tile.rgb_at(x, y);
                for c in 0..3 {
                    sums[c] += px[c] as u64;
                }
            }
        }
        let n = (tile.width() as u64 * tile.height() as u64).max(1);
        let denom = S::from_u64(n * 255).expect("pixel count fits");
        let means = sums.map(|s| S::from_u64(s).expect("sum fits") / denom);
        Ok(Self::rule(means))
    }
}

pub struct ConstantClassifier<S> {
    desc: ModelDescriptor,
    _s: PhantomData<fn() -> S>,
}

impl<S: Scalar> ConstantClassifier<S> {
    pub const PROBS: [f64; 3] = [0.7, 0.2, 0.1];

    pub fn new(desc: ModelDescriptor) -> Self {
        ConstantClassifier {
            desc,
            _s: PhantomData,
        }
    }
}

impl<S: Scalar> Backend<S> for ConstantClassifier<S> {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn reentrant(&self) -> bool {
        true
    }

    fn classify(&self, _tile: &Frame) -> Result<SoftmaxVector<S>, AdapterError> {
        SoftmaxVector::new(
            Self::PROBS.iter().map(|&p| S::lit(p)).collect(),
            vec!["tumor".into(), "normal".into(), "other".into()],
        )
    }
}

pub struct MarkerDetector<S> {
    desc: ModelDescriptor,
    _s: PhantomData<fn() -> S>,
}

impl<S: Scalar> MarkerDetector<S> {
    pub fn new(desc: ModelDescriptor) -> Self {
        MarkerDetector {
            desc,
            _s: PhantomData,
        }
    }

    pub fn with_tile_size(tile_size: u32) -> Self {
        Self::new(descriptor("marker-detector", Task::Detection, tile_size, "marker"))
    }
}

impl<S: Scalar> Backend<S> for MarkerDetector<S> {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn reentrant(&self) -> bool {
        true
    }

    fn detect(&self, tile: &Frame) -> Result<Vec<Detection<S>>, AdapterError> {
        let key = |px: [u8; 3]| (px[0] == 255 && px[2] == 255 && px[1] <= 100).then_some(px[1]);
        let full = S::from_u32(MARKER_SIZE * MARKER_SIZE).expect("small");
        regions(tile, key)
            .into_iter()
            .map(|(g, pixels)| {
                let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
                for &(x, y) in &pixels {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
                let base = if g == 0 {
                    S::lit(0.9)
                } else {
                    S::from_u8(g).expect("u8") / S::lit(100.0)
                };
                let completeness = (S::from_count(pixels.len()) / full).min(S::one());
                let s = |v: u32| S::from_u32(v).expect("u32");
                Detection::new(
                    BoxRect {
                        x: s(x0),
                        y: s(y0),
                        w: s(x1 - x0),
                        h: s(y1 - y0),
                    },
                    1,
                    base * completeness,
                )
            })
            .collect()
    }
}

pub struct SeededDetector<S> {
    desc: ModelDescriptor,
    _s: PhantomData<fn() -> S>,
}

impl<S: Scalar> SeededDetector<S> {
    pub fn new(desc: ModelDescriptor) -> Self {
        SeededDetector {
            desc,
            _s: PhantomData,
        }
    }
}

impl<S: Scalar> Backend<S> for SeededDetector<S> {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn reentrant(&self) -> bool {
        true
    }

    fn detect(&self, tile: &Frame) -> Result<Vec<Detection<S>>, AdapterError> {
        let mut rng = ChaCha8Rng::seed_from_u64(tile.content_hash());
        let n = rng.gen_range(0..=3);
        let size = 24.0;
        let extent = (tile.width() as f64 - size).max(1.0);
        (0..n)
            .map(|_| {
                let cx = size / 2.0 + rng.gen_range(0.0..extent);
                let cy = size / 2.0 + rng.gen_range(0.0..extent);
                let score: f64 = rng.gen_range(0.0..=1.0);
                Ok(Detection::at(S::lit(cx), S::lit(cy), S::lit(size), S::lit(score)))
            })
            .collect()
    }
}

pub struct MarkerSegmenter {
    desc: ModelDescriptor,
}

impl MarkerSegmenter {
    pub fn new(desc: ModelDescriptor) -> Self {
        MarkerSegmenter { desc }
    }

    pub fn with_tile_size(tile_size: u32) -> Self {
        Self::new(descriptor("marker-segmenter", Task::Segmentation, tile_size, "marker"))
    }
}

impl<S: Scalar> Backend<S> for MarkerSegmenter {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn reentrant(&self) -> bool {
        true
    }

    fn segment(&self, tile: &Frame) -> Result<Vec<InstanceMask>, AdapterError> {
        let key = |px: [u8; 3]| {
            if px == KI67_BROWN {
                Some(MaskLabel::Ki67Positive)
            } else if px == KI67_BLUE {
                Some(MaskLabel::Ki67Negative)
            } else {
                None
            }
        };
        Ok(regions(tile, key)
            .into_iter()
            .map(|(label, pixels)| InstanceMask {
                origin: (0, 0),
                runs: to_runs(pixels),
                label,
            })
            .collect())
    }
}

pub struct FailingBackend {
    desc: ModelDescriptor,
}

impl FailingBackend {
    pub fn new(desc: ModelDescriptor) -> Self {
        FailingBackend { desc }
    }

    fn fail(&self) -> AdapterError {
        AdapterError::BackendFailure {
            model: self.desc.id.clone(),
            message: "injected failure".into(),
        }
    }
}

impl<S: Scalar> Backend<S> for FailingBackend {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn classify(&self, _tile: &Frame) -> Result<SoftmaxVector<S>, AdapterError> {
        Err(self.fail())
    }

    fn detect(&self, _tile: &Frame) -> Result<Vec<Detection<S>>, AdapterError> {
        Err(self.fail())
    }

    fn segment(&self, _tile: &Frame) -> Result<Vec<InstanceMask>, AdapterError> {
        Err(self.fail())
    }
}

/// Adds a fixed sleep before every call of the wrapped backend.
pub struct Delayed<S> {
    inner: Arc<dyn Backend<S>>,
    delay: Duration,
}

impl<S: Scalar> Delayed<S> {
    pub fn new(inner: Arc<dyn Backend<S>>, delay: Duration) -> Self {
        Delayed { inner, delay }
    }
}

impl<S: Scalar> Backend<S> for Delayed<S> {
    fn descriptor(&self) -> &ModelDescriptor {
        self.inner.descriptor()
    }

    fn reentrant(&self) -> bool {
        self.inner.reentrant()
    }

    fn classify(&self, tile: &Frame) -> Result<SoftmaxVector<S>, AdapterError> {
        std::thread::sleep(self.delay);
        self.inner.classify(tile)
    }

    fn detect(&self, tile: &Frame) -> Result<Vec<Detection<S>>, AdapterError> {
        std::thread::sleep(self.delay);
        self.inner.detect(tile)
    }

    fn segment(&self, tile: &Frame) -> Result<Vec<InstanceMask>, AdapterError> {
        std::thread::sleep(self.delay);
        self.inner.segment(tile)
    }
}

pub const MOCK_NAMES: [&str; 5] = ["quadrant", "constant", "marker", "seeded", "failing"];

/// Builds the mock named in a `BuiltinMock` descriptor.
pub fn build<S: Scalar>(desc: &ModelDescriptor) -> Result<Arc<dyn Backend<S>>, String> {
    let ModelSource::BuiltinMock { name, delay_ms } = &desc.source else {
        return Err(format!("model {} is not a builtin mock", desc.id));
    };
    let d = desc.clone();
    let backend: Arc<dyn Backend<S>> = match (name.as_str(), desc.task) {
        ("quadrant", Task::Classification) => Arc::new(QuadrantClassifier::new(d)),
        ("constant", Task::Classification) => Arc::new(ConstantClassifier::new(d)),
        ("marker", Task::Detection) => Arc::new(MarkerDetector::new(d)),
        ("seeded", Task::Detection) => Arc::new(SeededDetector::new(d)),
        ("marker", Task::Segmentation) => Arc::new(MarkerSegmenter::new(d)),
        ("failing", _) => Arc::new(FailingBackend::new(d)),
        (other, task) => return Err(format!("no mock {other:?} for task {task:?}")),
    };
    Ok(if *delay_ms > 0 {
        Arc::new(Delayed::new(backend, Duration::from_millis(*delay_ms)))
    } else {
        backend
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{classify_tile, detect_tile, segment_tile};
    use crate::frame::PixelFormat;

    #[test]
    fn quadrant_all_red_tile_matches_hand_softmax() {
        let q = QuadrantClassifier::<f64>::with_tile_size(16);
        let tile = Frame::filled(16, 16, PixelFormat::Rgb, [255, 0, 0]);
        let v = classify_tile(&q, &tile).unwrap();
        // logits [8, 0, 0, 0]
        let e8 = 8.0f64.exp();
        let expect = [e8 / (e8 + 3.0), 1.0 / (e8 + 3.0), 1.0 / (e8 + 3.0), 1.0 / (e8 + 3.0)];
        for (p, e) in v.probs().iter().zip(expect) {
            assert!((p - e).abs() < 1e-12, "{p} vs {e}");
        }
        assert!(v.probs()[0] > 0.998);
        let s: f64 = v.probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadrant_black_tile_is_dark() {
        let q = QuadrantClassifier::<f32>::with_tile_size(4);
        let v = classify_tile(&q, &Frame::filled(4, 4, PixelFormat::Rgb, [0, 0, 0])).unwrap();
        let best = v
            .probs()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(v.class_names()[best], "dark");
    }

    #[test]
    fn wrong_tile_shape_is_rejected() {
        let q = QuadrantClassifier::<f64>::with_tile_size(16);
        let r = classify_tile(&q, &Frame::filled(8, 16, PixelFormat::Rgb, [0, 0, 0]));
        assert!(matches!(r, Err(AdapterError::WrongTileShape { .. })));
        let r = classify_tile(&q, &Frame::filled(16, 16, PixelFormat::Bgr, [0, 0, 0]));
        assert!(matches!(r, Err(AdapterError::WrongTileShape { .. })));
    }

    #[test]
    fn marker_detector_finds_each_marker_without_suppression() {
        let det = MarkerDetector::<f64>::with_tile_size(128);
        let mut tile = Frame::filled(128, 128, PixelFormat::Rgb, [240, 240, 240]);
        assert!(detect_tile(&det, &tile).unwrap().is_empty());

        paint_square(&mut tile, 20, 30, 8, MAGENTA);
        paint_square(&mut tile, 30, 30, 8, MAGENTA); // 10 px apart, gap of 2
        let mut found = detect_tile(&det, &tile).unwrap();
        found.sort_by(|a, b| a.bbox.x.partial_cmp(&b.bbox.x).unwrap());
        assert_eq!(found.len(), 2);
        assert_eq!(found[0].centroid(), (24.0, 34.0));
        assert_eq!(found[1].centroid(), (34.0, 34.0));
        assert!(found.iter().all(|d| d.score == 0.9 && d.class_id == 1));
    }

    #[test]
    fn marker_scores_follow_green_channel_and_completeness() {
        let det = MarkerDetector::<f64>::with_tile_size(64);
        let mut tile = Frame::filled(64, 64, PixelFormat::Rgb, [0, 0, 0]);
        paint_square(&mut tile, 10, 10, 8, marker_color(85));
        paint_square(&mut tile, 60, 40, 8, MAGENTA); // 4 columns visible
        let mut found = detect_tile(&det, &tile).unwrap();
        found.sort_by(|a, b| a.bbox.x.partial_cmp(&b.bbox.x).unwrap());
        assert_eq!(found[0].score, 0.85);
        assert_eq!(found[1].score, 0.9 * 0.5);
        assert_eq!(found[1].bbox.w, 4.0);
    }

    #[test]
    fn seeded_detector_is_content_deterministic() {
        let det = SeededDetector::<f64>::new(descriptor("s", Task::Detection, 64, "seeded"));
        let a = Frame::filled(64, 64, PixelFormat::Rgb, [1, 2, 3]);
        let b = Frame::filled(64, 64, PixelFormat::Rgb, [1, 2, 4]);
        assert_eq!(detect_tile(&det, &a).unwrap(), detect_tile(&det, &a).unwrap());
        for d in detect_tile(&det, &b).unwrap() {
            assert!((0.0..=1.0).contains(&d.score));
        }
    }

    #[test]
    fn segmenter_labels_brown_and_blue_blobs() {
        let seg = MarkerSegmenter::with_tile_size(64);
        let mut tile = Frame::filled(64, 64, PixelFormat::Bgr, [255, 255, 255]);
        assert!(Backend::<f64>::segment(&seg, &tile).unwrap().is_empty());
        paint_square(&mut tile, 4, 4, 12, KI67_BROWN);
        paint_square(&mut tile, 30, 30, 12, KI67_BLUE);
        paint_square(&mut tile, 58, 10, 12, KI67_BLUE); // clipped at the right edge
        let masks = segment_tile::<f64, _>(&seg, &tile).unwrap();
        assert_eq!(masks.len(), 3);
        let pos: Vec<_> = masks.iter().filter(|m| m.label == MaskLabel::Ki67Positive).collect();
        assert_eq!(pos.len(), 1);
        assert_eq!(pos[0].area(), 144);
        let clipped = masks
            .iter()
            .find(|m| m.bounds().unwrap().0 == 58)
            .unwrap();
        assert_eq!(clipped.bounds(), Some((58, 10, 64, 22)));
        assert_eq!(clipped.area(), 6 * 12);
    }

    #[test]
    fn build_dispatches_on_name_and_task() {
        let d = descriptor("x", Task::Segmentation, 32, "quadrant");
        assert!(build::<f64>(&d).is_err());
        let mut d = descriptor("x", Task::Classification, 32, "constant");
        if let ModelSource::BuiltinMock { delay_ms, .. } = &mut d.source {
            *delay_ms = 5;
        }
        let b = build::<f64>(&d).unwrap();
        let t = std::time::Instant::now();
        b.classify(&Frame::filled(32, 32, PixelFormat::Rgb, [0, 0, 0])).unwrap();
        assert!(t.elapsed() >= Duration::from_millis(5));
    }

    #[test]
    fn failing_backend_fails() {
        let b = FailingBackend::new(descriptor("f", Task::Detection, 8, "failing"));
        let r = detect_tile::<f64, _>(&b, &Frame::filled(8, 8, PixelFormat::Rgb, [0, 0, 0]));
        assert!(matches!(r, Err(AdapterError::BackendFailure { .. })));
    }
}
