//! Multi-FOV aggregation with operator validation, reference-box
//! calibration and session export.
//!
//! Each accepted field of view becomes a [`SessionEntry`]. Totals are updated
//! incrementally on commit and always equal a fold over the entries.

pub mod export;

use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use export::{export_session, parse_export, ExportManifest, ExportTotals, ParsedExport};

use crate::adapters::Task;
use crate::frame::Frame;
use crate::pipelines::{argmax, InferenceResult};
use crate::scalar::Scalar;

/// Total FOV area over reference-box area (box is 1/3 x 1/3 of the ROI).
pub const FOV_TO_REFERENCE_RATIO: f64 = 9.0;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("no inference result to validate")]
    NoCurrentResult,
    #[error("count override is only allowed for mitosis entries")]
    OverrideOnNonCountTask,
    #[error("override count {0} is negative")]
    NegativeOverride(i64),
    #[error("reference area must be positive, got {0}")]
    NonPositiveArea(f64),
    #[error("ROI is {now:?} but calibration was done at {calibrated:?}; recalibrate")]
    RoiDimsChangedSinceCalibration {
        calibrated: (u32, u32),
        now: (u32, u32),
    },
    #[error("session is not calibrated")]
    Uncalibrated,
    #[error("session has no calibrated mitosis entries")]
    EmptySession,
    #[error("export failed: {0}")]
    IoFailure(String),
    #[error("malformed export: {0}")]
    MalformedExport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState<S> {
    pub reference_area_mm2: S,
    pub roi_dims: (u32, u32),
    pub fov_area_mm2: S,
}

/// Calibration from the measured area of the centered reference box.
pub fn calibrate<S: Scalar>(
    reference_area_mm2: S,
    roi_dims: (u32, u32),
) -> Result<CalibrationState<S>, AggregateError> {
    if !(reference_area_mm2 > S::zero()) || !reference_area_mm2.is_finite() {
        return Err(AggregateError::NonPositiveArea(
            reference_area_mm2.to_f64().unwrap_or(f64::NAN),
        ));
    }
    Ok(CalibrationState {
        reference_area_mm2,
        roi_dims,
        fov_area_mm2: S::lit(FOV_TO_REFERENCE_RATIO) * reference_area_mm2,
    })
}

/// Centered reference box `(x, y, w, h)` covering one ninth of the view.
pub fn reference_box(view: (u32, u32)) -> (u32, u32, u32, u32) {
    let (w, h) = (view.0 / 3, view.1 / 3);
    ((view.0 - w) / 2, (view.1 - h) / 2, w, h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntryMetrics<S> {
    Classification {
        class_names: Vec<String>,
        probs: Vec<S>,
        predicted: usize,
    },
    Mitosis {
        model_count: u64,
        final_count: u64,
    },
    Ki67 {
        positive: u64,
        negative: u64,
        index: Option<S>,
    },
}

impl<S: Scalar> EntryMetrics<S> {
    pub fn from_result(result: &InferenceResult<S>) -> Self {
        match result {
            InferenceResult::Classification(r) => EntryMetrics::Classification {
                class_names: r.mean_probs.class_names().to_vec(),
                probs: r.mean_probs.probs().to_vec(),
                predicted: r.predicted,
            },
            InferenceResult::Detection(r) => EntryMetrics::Mitosis {
                model_count: r.count() as u64,
                final_count: r.count() as u64,
            },
            InferenceResult::Segmentation(r) => EntryMetrics::Ki67 {
                positive: r.positive as u64,
                negative: r.negative as u64,
                index: r.index,
            },
        }
    }
}

/// What the operator sees when asked to validate a field of view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationPrompt<S> {
    Classification { predicted: String, confidence: S },
    Mitosis { model_count: u64, editable: bool },
    Ki67 { positive: u64, negative: u64, index: Option<S> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingEntry<S> {
    pub prompt: ValidationPrompt<S>,
    pub task: Task,
    pub model_id: String,
    pub tile_count: u64,
    pub metrics: EntryMetrics<S>,
    pub raw_frame: Arc<Frame>,
    pub annotated_frame: Arc<Frame>,
    pub roi_dims: (u32, u32),
    pub timestamp_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionEntry<S> {
    pub entry_id: u64,
    pub task: Task,
    pub model_id: String,
    pub tile_count: u64,
    pub raw_frame: Arc<Frame>,
    pub annotated_frame: Arc<Frame>,
    pub metrics: EntryMetrics<S>,
    pub area_mm2: Option<S>,
    pub timestamp_ns: u64,
}

/// Cumulative statistics over accepted entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals<S> {
    pub entries: u64,
    pub tile_count: u64,
    pub area_mm2: S,
    pub classification_entries: u64,
    /// Summed probabilities per class, in first-seen class order.
    pub class_prob_sums: Vec<(String, S)>,
    pub mitosis_entries: u64,
    pub mitosis_model_count: u64,
    pub mitosis_final_count: u64,
    /// Final counts and area of mitosis entries that carry an area.
    pub mitosis_calibrated_count: u64,
    pub mitosis_area_mm2: S,
    pub ki67_entries: u64,
    pub ki67_positive: u64,
    pub ki67_negative: u64,
}

impl<S: Scalar> Default for Totals<S> {
    fn default() -> Self {
        Totals {
            entries: 0,
            tile_count: 0,
            area_mm2: S::zero(),
            classification_entries: 0,
            class_prob_sums: Vec::new(),
            mitosis_entries: 0,
            mitosis_model_count: 0,
            mitosis_final_count: 0,
            mitosis_calibrated_count: 0,
            mitosis_area_mm2: S::zero(),
            ki67_entries: 0,
            ki67_positive: 0,
            ki67_negative: 0,
        }
    }
}

impl<S: Scalar> Totals<S> {
    pub fn add(&mut self, e: &SessionEntry<S>) {
        self.entries += 1;
        self.tile_count += e.tile_count;
        if let Some(a) = e.area_mm2 {
            self.area_mm2 = self.area_mm2 + a;
        }
        match &e.metrics {
            EntryMetrics::Classification {
                class_names, probs, ..
            } => {
                self.classification_entries += 1;
                for (name, &p) in class_names.iter().zip(probs) {
                    match self.class_prob_sums.iter_mut().find(|(n, _)| n == name) {
                        Some((_, sum)) => *sum = *sum + p,
                        None => self.class_prob_sums.push((name.clone(), p)),
                    }
                }
            }
            EntryMetrics::Mitosis {
                model_count,
                final_count,
            } => {
                self.mitosis_entries += 1;
                self.mitosis_model_count += model_count;
                self.mitosis_final_count += final_count;
                if let Some(a) = e.area_mm2 {
                    self.mitosis_calibrated_count += final_count;
                    self.mitosis_area_mm2 = self.mitosis_area_mm2 + a;
                }
            }
            EntryMetrics::Ki67 {
                positive, negative, ..
            } => {
                self.ki67_entries += 1;
                self.ki67_positive += positive;
                self.ki67_negative += negative;
            }
        }
    }

    pub fn fold<'a, I: IntoIterator<Item = &'a SessionEntry<S>>>(entries: I) -> Self {
        let mut t = Totals::default();
        for e in entries {
            t.add(e);
        }
        t
    }

    /// Count-weighted index `sum(pos) / sum(pos + neg)` across entries.
    pub fn aggregate_ki67_index(&self) -> Option<S> {
        crate::pipelines::ki67_index(
            self.ki67_positive as usize,
            self.ki67_negative as usize,
        )
    }

    /// Class with the largest summed probability.
    pub fn predicted_class(&self) -> Option<&str> {
        let sums: Vec<S> = self.class_prob_sums.iter().map(|(_, s)| *s).collect();
        argmax(&sums).map(|i| self.class_prob_sums[i].0.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSession<S> {
    started: DateTime<Utc>,
    entries: Vec<SessionEntry<S>>,
    totals: Totals<S>,
    calibration: Option<CalibrationState<S>>,
    next_id: u64,
}

impl<S: Scalar> Default for AggregateSession<S> {
    fn default() -> Self {
        Self::new(Utc::now())
    }
}

impl<S: Scalar> AggregateSession<S> {
    pub fn new(started: DateTime<Utc>) -> Self {
        AggregateSession {
            started,
            entries: Vec::new(),
            totals: Totals::default(),
            calibration: None,
            next_id: 1,
        }
    }

    pub fn started(&self) -> DateTime<Utc> {
        self.started
    }

    pub fn entries(&self) -> &[SessionEntry<S>] {
        &self.entries
    }

    pub fn totals(&self) -> &Totals<S> {
        &self.totals
    }

    pub fn calibration(&self) -> Option<&CalibrationState<S>> {
        self.calibration.as_ref()
    }

    pub fn recompute_totals(&self) -> Totals<S> {
        Totals::fold(&self.entries)
    }

    /// Builds the validation prompt for the latest result.
    pub fn propose(
        &self,
        raw_frame: Arc<Frame>,
        annotated_frame: Arc<Frame>,
        result: Option<&InferenceResult<S>>,
        model_id: &str,
    ) -> Result<PendingEntry<S>, AggregateError> {
        let result = result.ok_or(AggregateError::NoCurrentResult)?;
        let prompt = match result {
            InferenceResult::Classification(r) => ValidationPrompt::Classification {
                predicted: r.predicted_name().to_string(),
                confidence: r.confidence(),
            },
            InferenceResult::Detection(r) => ValidationPrompt::Mitosis {
                model_count: r.count() as u64,
                editable: true,
            },
            InferenceResult::Segmentation(r) => ValidationPrompt::Ki67 {
                positive: r.positive as u64,
                negative: r.negative as u64,
                index: r.index,
            },
        };
        Ok(PendingEntry {
            prompt,
            task: result.task(),
            model_id: model_id.to_string(),
            tile_count: result.tile_count() as u64,
            metrics: EntryMetrics::from_result(result),
            roi_dims: raw_frame.dims(),
            timestamp_ns: raw_frame.timestamp_ns,
            raw_frame,
            annotated_frame,
        })
    }

    /// Applies the operator's decision. Returns the new entry id on accept.
    pub fn commit(
        &mut self,
        pending: PendingEntry<S>,
        decision: Decision,
        override_count: Option<i64>,
    ) -> Result<Option<u64>, AggregateError> {
        if let Some(o) = override_count {
            if pending.task != Task::Detection {
                return Err(AggregateError::OverrideOnNonCountTask);
            }
            if o < 0 {
                return Err(AggregateError::NegativeOverride(o));
            }
        }
        if decision == Decision::Reject {
            return Ok(None);
        }
        let area_mm2 = match &self.calibration {
            Some(c) if c.roi_dims != pending.roi_dims => {
                return Err(AggregateError::RoiDimsChangedSinceCalibration {
                    calibrated: c.roi_dims,
                    now: pending.roi_dims,
                })
            }
            Some(c) => Some(c.fov_area_mm2),
            None => None,
        };
        let mut metrics = pending.metrics;
        if let (EntryMetrics::Mitosis { final_count, .. }, Some(o)) = (&mut metrics, override_count) {
            *final_count = o as u64;
        }
        let entry = SessionEntry {
            entry_id: self.next_id,
            task: pending.task,
            model_id: pending.model_id,
            tile_count: pending.tile_count,
            raw_frame: pending.raw_frame,
            annotated_frame: pending.annotated_frame,
            metrics,
            area_mm2,
            timestamp_ns: pending.timestamp_ns,
        };
        self.next_id += 1;
        self.totals.add(&entry);
        self.entries.push(entry);
        Ok(Some(self.next_id - 1))
    }

    pub fn calibrate(
        &mut self,
        reference_area_mm2: S,
        roi_dims: (u32, u32),
    ) -> Result<CalibrationState<S>, AggregateError> {
        let c = calibrate(reference_area_mm2, roi_dims)?;
        self.calibration = Some(c);
        Ok(c)
    }

    /// Whether a capture of `roi_dims` would need recalibration.
    pub fn needs_recalibration(&self, roi_dims: (u32, u32)) -> bool {
        self.calibration.is_some_and(|c| c.roi_dims != roi_dims)
    }

    /// Accepted mitoses per mm² over calibrated mitosis entries.
    pub fn density(&self) -> Result<S, AggregateError> {
        if self.calibration.is_none() {
            return Err(AggregateError::Uncalibrated);
        }
        mitotic_density(&self.totals).ok_or(AggregateError::EmptySession)
    }
}

pub(crate) fn mitotic_density<S: Scalar>(t: &Totals<S>) -> Option<S> {
    (t.mitosis_area_mm2 > S::zero()).then(|| {
        S::from_u64(t.mitosis_calibrated_count).expect("count fits") / t.mitosis_area_mm2
    })
}
