//! Messages pushed on the `/stream` websocket.
//!
//! Text messages are JSON objects tagged by `type`. Each `result` event is
//! followed by one binary message carrying the annotated frame: a 16-byte
//! header (`SLF1`, then width, height and pixel format code as little-endian
//! `u32`) and a PNG payload.

use serde_json::{json, Value};

use scopeloop_core::pipelines::nms::ConfidenceBand;
use scopeloop_core::{Frame, InferenceResult};

use crate::metrics::LatencySnapshot;
use crate::worker::{ErrorEvent, ResultEvent};

pub const FRAME_MAGIC: [u8; 4] = *b"SLF1";
pub const FRAME_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub width: u32,
    pub height: u32,
    pub format: u32,
}

impl FrameHeader {
    pub fn encode(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut out = [0u8; FRAME_HEADER_LEN];
        out[..4].copy_from_slice(&FRAME_MAGIC);
        out[4..8].copy_from_slice(&self.width.to_le_bytes());
        out[8..12].copy_from_slice(&self.height.to_le_bytes());
        out[12..16].copy_from_slice(&self.format.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<FrameHeader> {
        if bytes.len() < FRAME_HEADER_LEN || bytes[..4] != FRAME_MAGIC {
            return None;
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        Some(FrameHeader {
            width: word(4),
            height: word(8),
            format: word(12),
        })
    }
}

/// Header plus PNG of `frame`.
pub fn frame_message(frame: &Frame) -> Result<Vec<u8>, String> {
    let png = frame.encode_png().map_err(|e| e.to_string())?;
    let header = FrameHeader {
        width: frame.width(),
        height: frame.height(),
        format: frame.format().code(),
    };
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + png.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(&png);
    Ok(out)
}

fn band_name(b: ConfidenceBand) -> &'static str {
    match b {
        ConfidenceBand::High => "high",
        ConfidenceBand::Medium => "medium",
        ConfidenceBand::Low => "low",
    }
}

/// Compact, UI-oriented view of a result.
pub fn result_summary(result: &InferenceResult) -> Value {
    match result {
        InferenceResult::Classification(r) => json!({
            "predicted": r.predicted_name(),
            "predicted_index": r.predicted,
            "confidence": r.confidence(),
            "classes": r.mean_probs.class_names(),
            "probs": r.mean_probs.probs(),
            "tile_count": r.tile_count,
        }),
        InferenceResult::Detection(r) => json!({
            "count": r.count(),
            "raw_count": r.raw_count,
            "survivors": r.survivors.len(),
            "threshold": r.threshold_applied,
            "tile_count": r.tile_count,
            "detections": r.detections.iter().map(|d| json!({
                "x": d.detection.bbox.x,
                "y": d.detection.bbox.y,
                "w": d.detection.bbox.w,
                "h": d.detection.bbox.h,
                "score": d.detection.score,
                "band": band_name(d.band),
            })).collect::<Vec<_>>(),
        }),
        InferenceResult::Segmentation(r) => json!({
            "positive": r.positive,
            "negative": r.negative,
            "index": r.index,
            "tile_count": r.tile_count,
        }),
    }
}

pub fn result_json(ev: &ResultEvent, latency: &LatencySnapshot) -> Value {
    json!({
        "type": "result",
        "seq": ev.seq,
        "task": ev.result.task().export_name(),
        "model_id": ev.model_id,
        "source_id": ev.source_id,
        "frame_timestamp_ns": ev.frame_timestamp_ns,
        "width": ev.annotated.width(),
        "height": ev.annotated.height(),
        "cycle_ms": ev.cycle_ms,
        "adapter_ms": ev.timing.adapter_ms,
        "overhead_ms": ev.timing.overhead_ms(),
        "threshold": ev.threshold,
        "counters": ev.counters,
        "latency": latency,
        "summary": result_summary(&ev.result),
    })
}

pub fn error_json(ev: &ErrorEvent) -> Value {
    json!({
        "type": "error",
        "code": "CycleFailed",
        "message": ev.message,
        "error_chain": ev.error_chain,
        "crash_log": ev.crash_log,
    })
}
