//! Live analysis of a captured screen region: frame sources, task-specific
//! tiling, pluggable model adapters, result merging, operator-validated
//! aggregation and overlays.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the service and CLI use.

pub mod adapters;
pub mod aggregate;
pub mod frame;
pub mod overlay;
pub mod pipelines;
pub mod scalar;
pub mod tiling;

pub use frame::{CaptureRegion, Frame, FrameSource, FrameSourceKind, PixelFormat};
pub use scalar::Scalar;
pub use tiling::{Scale, TilePlan, TileRect};

pub type SoftmaxVector = adapters::SoftmaxVector<f64>;
pub type Detection = adapters::Detection<f64>;
pub type DynBackend = dyn adapters::Backend<f64>;
pub type NmsConfig = pipelines::NmsConfig<f64>;
pub type ClassificationResult = pipelines::ClassificationResult<f64>;
pub type DetectionResult = pipelines::DetectionResult<f64>;
pub type Ki67Result = pipelines::Ki67Result<f64>;
pub type InferenceResult = pipelines::InferenceResult<f64>;
pub type OverlayStyle = overlay::OverlayStyle<f64>;
pub type AggregateSession = aggregate::AggregateSession<f64>;
pub type CalibrationState = aggregate::CalibrationState<f64>;
pub type PendingEntry = aggregate::PendingEntry<f64>;

pub type DetectionF32 = adapters::Detection<f32>;
pub type NmsConfigF32 = pipelines::NmsConfig<f32>;
pub type InferenceResultF32 = pipelines::InferenceResult<f32>;
pub type AggregateSessionF32 = aggregate::AggregateSession<f32>;
