use serde::{Deserialize, Serialize};
use thiserror::Error;

use scopeloop_core::adapters::registry::ModelRegistry;
use scopeloop_core::adapters::Task;
use scopeloop_core::{CaptureRegion, FrameSourceKind, NmsConfig, OverlayStyle};

use crate::worker::CycleSettings;

pub const PORT_ENV: &str = "SCOPELOOP_PORT";
pub const DEFAULT_PORT: u16 = 8737;

/// `$SCOPELOOP_PORT` when set and valid, else the default.
pub fn port_from_env() -> u16 {
    std::env::var(PORT_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_PORT)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("model {model} performs {model_task:?}, not {requested:?}")]
    TaskMismatch {
        model: String,
        model_task: Task,
        requested: Task,
    },
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("mask alpha {0} is outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("overlap {overlap} must be below the tile size {tile}")]
    InvalidOverlap { overlap: u32, tile: u32 },
    #[error("invalid source: {0}")]
    InvalidSource(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub source: FrameSourceKind,
    pub model_id: String,
    pub task: Task,
    pub threshold: f64,
    pub overlap: u32,
    pub mask_alpha: f64,
    pub aggregate_mode: bool,
    pub port: u16,
    /// Pause between captures on the producer side.
    pub capture_interval_ms: u64,
}

impl PipelineConfig {
    /// A config for `model_id` with its task filled in from the registry.
    pub fn for_model(
        registry: &ModelRegistry,
        source: FrameSourceKind,
        model_id: &str,
    ) -> Result<Self, ConfigError> {
        let desc = registry
            .get(model_id)
            .map_err(|_| ConfigError::UnknownModel(model_id.to_string()))?;
        Ok(PipelineConfig {
            source,
            model_id: model_id.to_string(),
            task: desc.task,
            threshold: 0.5,
            overlap: 64.min(desc.tile_size.saturating_sub(1)),
            mask_alpha: 0.5,
            aggregate_mode: true,
            port: port_from_env(),
            capture_interval_ms: 20,
        })
    }

    pub fn validate(&self, registry: &ModelRegistry) -> Result<(), ConfigError> {
        let desc = registry
            .get(&self.model_id)
            .map_err(|_| ConfigError::UnknownModel(self.model_id.clone()))?;
        if desc.task != self.task {
            return Err(ConfigError::TaskMismatch {
                model: self.model_id.clone(),
                model_task: desc.task,
                requested: self.task,
            });
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ConfigError::InvalidThreshold(self.threshold));
        }
        if !(0.0..=1.0).contains(&self.mask_alpha) {
            return Err(ConfigError::InvalidAlpha(self.mask_alpha));
        }
        if desc.task == Task::Detection && self.overlap >= desc.tile_size {
            return Err(ConfigError::InvalidOverlap {
                overlap: self.overlap,
                tile: desc.tile_size,
            });
        }
        Ok(())
    }

    pub fn cycle_settings(&self) -> CycleSettings {
        CycleSettings {
            threshold: self.threshold,
            overlap: self.overlap,
            style: OverlayStyle::with_alpha(self.mask_alpha).unwrap_or_default(),
            nms: NmsConfig::default(),
        }
    }

    /// Applies `patch` and validates the result; `self` is untouched on error.
    pub fn patched(&self, patch: &ConfigPatch, registry: &ModelRegistry) -> Result<Self, ConfigError> {
        let mut next = self.clone();
        if let Some(model) = &patch.model {
            let desc = registry
                .get(model)
                .map_err(|_| ConfigError::UnknownModel(model.clone()))?;
            next.model_id = model.clone();
            next.task = desc.task;
            if desc.task == Task::Detection && next.overlap >= desc.tile_size {
                next.overlap = 64.min(desc.tile_size - 1);
            }
        }
        if let Some(task) = patch.task {
            next.task = task;
        }
        if let Some(t) = patch.threshold {
            next.threshold = t;
        }
        if let Some(o) = patch.overlap {
            next.overlap = o;
        }
        if let Some(a) = patch.alpha {
            next.mask_alpha = a;
        }
        if let Some(a) = patch.aggregate_mode {
            next.aggregate_mode = a;
        }
        if let Some(src) = &patch.source {
            next.source = src
                .parse()
                .map_err(|e: scopeloop_core::frame::SourceError| ConfigError::InvalidSource(e.to_string()))?;
        }
        next.validate(registry)?;
        Ok(next)
    }

    /// Whether going from `self` to `next` needs a fresh worker rather than a
    /// settings update at the next cycle boundary.
    pub fn needs_restart(&self, next: &PipelineConfig) -> bool {
        self.model_id != next.model_id
            || self.source != next.source
            || self.capture_interval_ms != next.capture_interval_ms
    }

    /// The capture rectangle when the source is the screen.
    pub fn region(&self) -> Option<CaptureRegion> {
        match &self.source {
            FrameSourceKind::Screen { region } => Some(*region),
            _ => None,
        }
    }
}

/// Partial update accepted by `POST /config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub overlap: Option<u32>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub aggregate_mode: Option<bool>,
    /// Source as written on the command line.
    #[serde(default)]
    pub source: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> (ModelRegistry, PipelineConfig) {
        let reg = ModelRegistry::builtin();
        let cfg = PipelineConfig::for_model(&reg, "synthetic:1x64x64".parse().unwrap(), "marker-detector")
            .unwrap();
        (reg, cfg)
    }

    #[test]
    fn task_follows_the_model() {
        let (reg, cfg) = base();
        assert_eq!(cfg.task, Task::Detection);
        let next = cfg
            .patched(
                &ConfigPatch {
                    model: Some("quadrant-classifier".into()),
                    ..Default::default()
                },
                &reg,
            )
            .unwrap();
        assert_eq!(next.task, Task::Classification);
        assert!(cfg.needs_restart(&next));
    }

    #[test]
    fn mismatched_task_is_rejected() {
        let (reg, cfg) = base();
        let err = cfg
            .patched(
                &ConfigPatch {
                    task: Some(Task::Segmentation),
                    ..Default::default()
                },
                &reg,
            )
            .unwrap_err();
        assert!(matches!(err, ConfigError::TaskMismatch { .. }));
    }

    #[test]
    fn ranges_are_checked() {
        let (reg, cfg) = base();
        let bad = |p: ConfigPatch| cfg.patched(&p, &reg).unwrap_err();
        assert_eq!(
            bad(ConfigPatch {
                threshold: Some(1.5),
                ..Default::default()
            }),
            ConfigError::InvalidThreshold(1.5)
        );
        assert_eq!(
            bad(ConfigPatch {
                alpha: Some(-0.1),
                ..Default::default()
            }),
            ConfigError::InvalidAlpha(-0.1)
        );
        assert!(matches!(
            bad(ConfigPatch {
                overlap: Some(512),
                ..Default::default()
            }),
            ConfigError::InvalidOverlap { .. }
        ));
        assert!(matches!(
            bad(ConfigPatch {
                model: Some("nope".into()),
                ..Default::default()
            }),
            ConfigError::UnknownModel(_)
        ));
    }

    #[test]
    fn threshold_change_is_applied_in_place() {
        let (reg, cfg) = base();
        let next = cfg
            .patched(
                &ConfigPatch {
                    threshold: Some(0.8),
                    ..Default::default()
                },
                &reg,
            )
            .unwrap();
        assert!(!cfg.needs_restart(&next));
        assert_eq!(next.cycle_settings().threshold, 0.8);
    }
}
