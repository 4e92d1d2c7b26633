//! The worker plane: a capture thread feeding a one-slot mailbox and an
//! inference thread that always takes the newest frame.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::Serialize;
use tokio::sync::mpsc::UnboundedSender;

use scopeloop_core::frame::{convert_format, SourceError};
use scopeloop_core::overlay::render_result;
use scopeloop_core::pipelines::{run_task, PipelineError, Timing};
use scopeloop_core::tiling::upscale_if_undersized;
use scopeloop_core::{DynBackend, Frame, FrameSource, InferenceResult, NmsConfig, OverlayStyle, PixelFormat};

use crate::crash::{log_crash, log_crash_in, CrashReport};

/// Settings the worker picks up at the start of each cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleSettings {
    pub threshold: f64,
    pub overlap: u32,
    pub style: OverlayStyle,
    pub nms: NmsConfig,
}

impl Default for CycleSettings {
    fn default() -> Self {
        CycleSettings {
            threshold: 0.5,
            overlap: 64,
            style: OverlayStyle::default(),
            nms: NmsConfig::default(),
        }
    }
}

pub struct CycleOutput {
    pub raw: Arc<Frame>,
    pub annotated: Arc<Frame>,
    pub result: InferenceResult,
    pub cycle_ms: f64,
    pub timing: Timing,
}

/// One full cycle on `frame`: upscale, tile, infer, merge, render.
pub fn process_frame(
    frame: Frame,
    backend: &DynBackend,
    settings: &CycleSettings,
) -> Result<CycleOutput, PipelineError> {
    let start = Instant::now();
    let tile = backend.descriptor().tile_size;
    let (work, _) = upscale_if_undersized(&frame, tile)?;
    let result = run_task(&work, backend, settings.overlap, settings.threshold, &settings.nms)?;
    let view = convert_format(&work, PixelFormat::Rgb);
    let annotated = render_result(&view, &result, &settings.style);
    let timing = result.timing();
    Ok(CycleOutput {
        raw: Arc::new(frame),
        annotated: Arc::new(annotated),
        result,
        cycle_ms: start.elapsed().as_secs_f64() * 1e3,
        timing,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FrameCounters {
    pub produced: u64,
    pub processed: u64,
    pub dropped: u64,
}

enum Slot {
    Frame(Frame),
    Empty,
    Closed(String),
}

/// Single-slot mailbox: a new frame overwrites an unconsumed one.
#[derive(Default)]
pub struct FrameSlot {
    state: Mutex<(Option<Frame>, Option<String>)>,
    ready: Condvar,
    produced: AtomicU64,
    processed: AtomicU64,
    dropped: AtomicU64,
}

impl FrameSlot {
    pub fn put(&self, frame: Frame) {
        let mut s = self.state.lock().unwrap();
        if s.0.replace(frame).is_some() {
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        self.produced.fetch_add(1, Ordering::Relaxed);
        self.ready.notify_one();
    }

    pub fn close(&self, reason: String) {
        let mut s = self.state.lock().unwrap();
        s.1.get_or_insert(reason);
        self.ready.notify_all();
    }

    fn take(&self, timeout: Duration) -> Slot {
        let guard = self.state.lock().unwrap();
        let (mut s, _) = self
            .ready
            .wait_timeout_while(guard, timeout, |s| s.0.is_none() && s.1.is_none())
            .unwrap();
        if let Some(f) = s.0.take() {
            self.processed.fetch_add(1, Ordering::Relaxed);
            return Slot::Frame(f);
        }
        match &s.1 {
            Some(r) => Slot::Closed(r.clone()),
            None => Slot::Empty,
        }
    }

    pub fn counters(&self) -> FrameCounters {
        FrameCounters {
            produced: self.produced.load(Ordering::Relaxed),
            processed: self.processed.load(Ordering::Relaxed),
            dropped: self.dropped.load(Ordering::Relaxed),
        }
    }
}

/// Published once per successful cycle. Never mutated after sending.
#[derive(Debug)]
pub struct ResultEvent {
    pub seq: u64,
    pub model_id: String,
    pub source_id: String,
    pub frame_timestamp_ns: u64,
    pub raw: Arc<Frame>,
    pub annotated: Arc<Frame>,
    pub result: InferenceResult,
    pub cycle_ms: f64,
    pub timing: Timing,
    pub threshold: f64,
    pub counters: FrameCounters,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorEvent {
    pub message: String,
    pub error_chain: Vec<String>,
    pub crash_log: PathBuf,
}

#[derive(Debug, Clone)]
pub enum WorkerEvent {
    Result(Arc<ResultEvent>),
    Error(Arc<ErrorEvent>),
    Stopped,
}

pub struct WorkerSpec {
    pub source: Box<dyn FrameSource>,
    pub backend: Arc<DynBackend>,
    pub settings: CycleSettings,
    pub capture_interval: Duration,
    /// Serialized configuration recorded with crash reports.
    pub config_snapshot: serde_json::Value,
    /// Crash log directory; the platform default when `None`.
    pub log_dir: Option<PathBuf>,
}

pub struct WorkerHandle {
    stop: Arc<AtomicBool>,
    settings: mpsc::Sender<CycleSettings>,
    slot: Arc<FrameSlot>,
    threads: Vec<JoinHandle<()>>,
}

impl WorkerHandle {
    /// Queues new settings; they apply from the next cycle.
    pub fn update(&self, settings: CycleSettings) {
        let _ = self.settings.send(settings);
    }

    pub fn counters(&self) -> FrameCounters {
        self.slot.counters()
    }

    /// Asks both threads to finish. The running cycle completes but is not
    /// published.
    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
        self.slot.close("stopped".into());
    }

    pub fn is_finished(&self) -> bool {
        self.threads.iter().all(|t| t.is_finished())
    }

    pub fn join(mut self) {
        self.request_stop();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.slot.close("dropped".into());
    }
}

const SOURCE_WAIT: Duration = Duration::from_millis(250);
const SLOT_WAIT: Duration = Duration::from_millis(50);

fn capture_loop(
    mut source: Box<dyn FrameSource>,
    slot: Arc<FrameSlot>,
    stop: Arc<AtomicBool>,
    interval: Duration,
) {
    while !stop.load(Ordering::SeqCst) {
        match source.next_frame(SOURCE_WAIT) {
            Ok(f) => slot.put(f),
            Err(SourceError::Timeout(_)) => continue,
            Err(e) => {
                slot.close(format!("frame source failed: {e}"));
                break;
            }
        }
        if !interval.is_zero() {
            std::thread::sleep(interval);
        }
    }
    source.close();
}

#[derive(Debug, thiserror::Error)]
enum HaltReason {
    #[error("inference cycle failed")]
    Cycle(#[source] PipelineError),
    #[error("{0}")]
    Source(String),
}

struct WorkerLoop {
    backend: Arc<DynBackend>,
    settings: CycleSettings,
    updates: mpsc::Receiver<CycleSettings>,
    slot: Arc<FrameSlot>,
    stop: Arc<AtomicBool>,
    events: UnboundedSender<WorkerEvent>,
    config_snapshot: serde_json::Value,
    log_dir: Option<PathBuf>,
}

impl WorkerLoop {
    fn run(mut self) {
        let model_id = self.backend.descriptor().id.clone();
        let mut seq = 0u64;
        let mut last_event: Option<&'static str> = None;
        loop {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            while let Ok(s) = self.updates.try_recv() {
                self.settings = s;
            }
            let frame = match self.slot.take(SLOT_WAIT) {
                Slot::Frame(f) => f,
                Slot::Empty => continue,
                Slot::Closed(reason) => {
                    if !self.stop.load(Ordering::SeqCst) {
                        self.fail(HaltReason::Source(reason), last_event);
                    }
                    break;
                }
            };
            let source_id = frame.source_id.clone();
            let ts = frame.timestamp_ns;
            match process_frame(frame, self.backend.as_ref(), &self.settings) {
                Ok(out) => {
                    if self.stop.load(Ordering::SeqCst) {
                        break;
                    }
                    seq += 1;
                    let ev = ResultEvent {
                        seq,
                        model_id: model_id.clone(),
                        source_id,
                        frame_timestamp_ns: ts,
                        raw: out.raw,
                        annotated: out.annotated,
                        result: out.result,
                        cycle_ms: out.cycle_ms,
                        timing: out.timing,
                        threshold: self.settings.threshold,
                        counters: self.slot.counters(),
                    };
                    if self.events.send(WorkerEvent::Result(Arc::new(ev))).is_err() {
                        break;
                    }
                    last_event = Some("result");
                }
                Err(e) => {
                    self.fail(HaltReason::Cycle(e), last_event);
                    break;
                }
            }
        }
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.events.send(WorkerEvent::Stopped);
    }

    fn fail(&self, reason: HaltReason, last_event: Option<&str>) {
        let report = CrashReport::from_error(&reason, self.config_snapshot.clone(), last_event);
        let path = match &self.log_dir {
            Some(d) => log_crash_in(d, &report, chrono::Utc::now()),
            None => log_crash(&report),
        };
        log::error!("worker halted: {} (crash log {})", report.error_chain.join(": "), path.display());
        let _ = self.events.send(WorkerEvent::Error(Arc::new(ErrorEvent {
            message: report.error_chain.join(": "),
            error_chain: report.error_chain,
            crash_log: path,
        })));
    }
}

/// Starts the capture and inference threads.
pub fn spawn_worker(spec: WorkerSpec, events: UnboundedSender<WorkerEvent>) -> WorkerHandle {
    let slot = Arc::new(FrameSlot::default());
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    let capture = {
        let (slot, stop) = (slot.clone(), stop.clone());
        let (source, interval) = (spec.source, spec.capture_interval);
        std::thread::Builder::new()
            .name("scopeloop-capture".into())
            .spawn(move || capture_loop(source, slot, stop, interval))
            .expect("spawn capture thread")
    };
    let worker = WorkerLoop {
        backend: spec.backend,
        settings: spec.settings,
        updates: rx,
        slot: slot.clone(),
        stop: stop.clone(),
        events,
        config_snapshot: spec.config_snapshot,
        log_dir: spec.log_dir,
    };
    let infer = std::thread::Builder::new()
        .name("scopeloop-worker".into())
        .spawn(move || worker.run())
        .expect("spawn worker thread");
    WorkerHandle {
        stop,
        settings: tx,
        slot,
        threads: vec![capture, infer],
    }
}
