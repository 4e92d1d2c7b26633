//! Runtime around `scopeloop-core`: a worker plane that captures and infers,
//! a control plane served over local HTTP and a websocket, an out-of-process
//! chat bridge, crash logging and the `scopeloop` command line.

pub mod api;
pub mod chat;
pub mod cli;
pub mod config;
pub mod crash;
pub mod metrics;
pub mod stream;
pub mod worker;

pub use config::PipelineConfig;
pub use metrics::LatencyStats;
pub use worker::{process_frame, spawn_worker, CycleSettings, WorkerEvent, WorkerHandle};
