//! Result overlays: banded detection boxes, blended Ki-67 masks and the
//! classification banner. Every function returns a new frame.

use font8x8::legacy::BASIC_LEGACY;
use serde::{Deserialize, Serialize};

use crate::frame::Frame;
use crate::pipelines::{
    ClassificationResult, ConfidenceBand, DetectionResult, InferenceResult, Ki67Result,
};
use crate::adapters::MaskLabel;
use crate::scalar::{to_channel, Scalar};

pub const GLYPH: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayStyle<S> {
    pub mask_alpha: S,
    pub high: [u8; 3],
    pub medium: [u8; 3],
    pub low: [u8; 3],
    pub positive: [u8; 3],
    pub negative: [u8; 3],
    pub font_scale: u32,
    pub box_thickness: u32,
}

impl<S: Scalar> Default for OverlayStyle<S> {
    fn default() -> Self {
        OverlayStyle {
            mask_alpha: S::lit(0.5),
            high: [0, 200, 0],
            medium: [255, 165, 0],
            low: [0, 90, 255],
            positive: [200, 0, 0],
            negative: [0, 0, 200],
            font_scale: 1,
            box_thickness: 2,
        }
    }
}

impl<S: Scalar> OverlayStyle<S> {
    pub fn with_alpha(alpha: S) -> Option<Self> {
        (alpha >= S::zero() && alpha <= S::one()).then(|| OverlayStyle {
            mask_alpha: alpha,
            ..Self::default()
        })
    }

    pub fn band_color(&self, band: ConfidenceBand) -> [u8; 3] {
        match band {
            ConfidenceBand::High => self.high,
            ConfidenceBand::Medium => self.medium,
            ConfidenceBand::Low => self.low,
        }
    }
}

fn fill_rect(frame: &mut Frame, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [u8; 3]) {
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            frame.set_rgb(x as u32, y as u32, rgb);
        }
    }
}

/// Width in pixels of `text` at `scale`.
pub fn text_width(text: &str, scale: u32) -> u32 {
    text.chars().count() as u32 * GLYPH * scale
}

/// Draws ASCII text with the 8x8 bitmap font; non-ASCII renders as `?`.
pub fn draw_text(frame: &mut Frame, x: i64, y: i64, text: &str, scale: u32, rgb: [u8; 3]) {
    let s = scale.max(1) as i64;
    for (i, ch) in text.chars().enumerate() {
        let code = if ch.is_ascii() { ch as usize } else { '?' as usize };
        let glyph = BASIC_LEGACY[code];
        let gx = x + i as i64 * GLYPH as i64 * s;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits >> col & 1 == 1 {
                    let px = gx + col as i64 * s;
                    let py = y + row as i64 * s;
                    fill_rect(frame, px, py, px + s, py + s, rgb);
                }
            }
        }
    }
}

/// Truncates `text` with `...` so it fits in `max_width` pixels.
pub fn fit_text(text: &str, max_width: u32, scale: u32) -> String {
    let cell = GLYPH * scale.max(1);
    let max_chars = (max_width / cell) as usize;
    let n = text.chars().count();
    if n <= max_chars {
        return text.to_string();
    }
    if max_chars < 3 {
        return text.chars().take(max_chars).collect();
    }
    let mut out: String = text.chars().take(max_chars - 3).collect();
    out.push_str("...");
    out
}

/// Integer pixel bounds `(x0, y0, x1, y1)` (exclusive end) of a float box, clipped.
fn pixel_bounds<S: Scalar>(b: &crate::adapters::BoxRect<S>, w: u32, h: u32) -> (i64, i64, i64, i64) {
    let x0 = b.x.floor().to_i64().unwrap_or(0).max(0);
    let y0 = b.y.floor().to_i64().unwrap_or(0).max(0);
    let x1 = (b.x + b.w).ceil().to_i64().unwrap_or(0).min(w as i64);
    let y1 = (b.y + b.h).ceil().to_i64().unwrap_or(0).min(h as i64);
    (x0, y0, x1, y1)
}

/// Pixel rectangle `(x0, y0, x1, y1)` used for a detection's score label.
pub fn label_rect<S: Scalar>(
    det: &crate::adapters::Detection<S>,
    frame: (u32, u32),
    style: &OverlayStyle<S>,
) -> (i64, i64, i64, i64) {
    let (x0, y0, _, y1) = pixel_bounds(&det.bbox, frame.0, frame.1);
    let lh = (GLYPH * style.font_scale) as i64;
    let lw = text_width("0.00", style.font_scale) as i64;
    let ly = if y0 - lh > 0 { y0 - lh - 1 } else { y1 + 1 };
    (x0, ly, x0 + lw, ly + lh)
}

pub fn render_detections<S: Scalar>(
    frame: &Frame,
    result: &DetectionResult<S>,
    style: &OverlayStyle<S>,
) -> Frame {
    let mut out = frame.clone();
    let t = style.box_thickness.max(1) as i64;
    for bd in &result.detections {
        let color = style.band_color(bd.band);
        let (x0, y0, x1, y1) = pixel_bounds(&bd.detection.bbox, out.width(), out.height());
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        fill_rect(&mut out, x0, y0, x1, (y0 + t).min(y1), color);
        fill_rect(&mut out, x0, (y1 - t).max(y0), x1, y1, color);
        fill_rect(&mut out, x0, y0, (x0 + t).min(x1), y1, color);
        fill_rect(&mut out, (x1 - t).max(x0), y0, x1, y1, color);
        let (lx, ly, _, _) = label_rect(&bd.detection, out.dims(), style);
        let text = format!("{:.2}", bd.detection.score.to_f64().unwrap_or(0.0));
        draw_text(&mut out, lx, ly, &text, style.font_scale, color);
    }
    out
}

/// `out = alpha * color + (1 - alpha) * src`, rounded half-up per channel.
pub fn blend<S: Scalar>(src: [u8; 3], color: [u8; 3], alpha: S) -> [u8; 3] {
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = alpha * S::from_u8(color[c]).expect("u8")
            + (S::one() - alpha) * S::from_u8(src[c]).expect("u8");
        out[c] = to_channel(v);
    }
    out
}

pub fn render_masks<S: Scalar>(frame: &Frame, result: &Ki67Result<S>, style: &OverlayStyle<S>) -> Frame {
    let mut out = frame.clone();
    let alpha = style.mask_alpha.max(S::zero()).min(S::one());
    for m in &result.stitched_masks {
        let color = match m.label {
            MaskLabel::Ki67Positive => style.positive,
            MaskLabel::Ki67Negative => style.negative,
        };
        for (x, y) in m.pixels() {
            if x < out.width() && y < out.height() {
                let src = out.rgb_at(x, y);
                out.set_rgb(x, y, blend(src, color, alpha));
            }
        }
    }
    out
}

/// Banner text for a classification, e.g. `Glial histology: 0.9970`.
pub fn banner_text<S: Scalar>(result: &ClassificationResult<S>) -> String {
    let name = result.predicted_name();
    let conf = result.confidence().to_f64().unwrap_or(0.0);
    if name.trim().is_empty() {
        format!("class {}: {conf:.4}", result.predicted)
    } else {
        format!("{name}: {conf:.4}")
    }
}

pub fn render_classification_banner<S: Scalar>(
    frame: &Frame,
    result: &ClassificationResult<S>,
    style: &OverlayStyle<S>,
) -> Frame {
    let mut out = frame.clone();
    let scale = style.font_scale.max(1);
    let pad = 2u32;
    let text = fit_text(&banner_text(result), out.width().saturating_sub(2 * pad), scale);
    let strip = (GLYPH * scale + 2 * pad) as i64;
    let width = out.width() as i64;
    fill_rect(&mut out, 0, 0, width, strip, [0, 0, 0]);
    draw_text(&mut out, pad as i64, pad as i64, &text, scale, [255, 255, 255]);
    out
}

pub fn render_result<S: Scalar>(
    frame: &Frame,
    result: &InferenceResult<S>,
    style: &OverlayStyle<S>,
) -> Frame {
    match result {
        InferenceResult::Classification(r) => render_classification_banner(frame, r, style),
        InferenceResult::Detection(r) => render_detections(frame, r, style),
        InferenceResult::Segmentation(r) => render_masks(frame, r, style),
    }
}
