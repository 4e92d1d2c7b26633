//! The `scopeloop` command line.
//!
//! `run` drives the pipeline headlessly over a source, auto-accepting every
//! result into a session that can be exported. `serve` starts the control
//! service. `chat-worker` is the child process behind the chat bridge.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use scopeloop_core::adapters::registry::{default_cache_dir, ModelRegistry};
use scopeloop_core::adapters::Task;
use scopeloop_core::aggregate::export::export_session;
use scopeloop_core::aggregate::Decision;
use scopeloop_core::frame::{open_source, SourceError};
use scopeloop_core::{AggregateSession, FrameSourceKind};

use crate::api::{AppState, ServiceOptions};
use crate::chat::child::{run_chat_worker, MOCK_MODEL};
use crate::chat::ChatCommand;
use crate::config::{ConfigPatch, PipelineConfig, DEFAULT_PORT, PORT_ENV};
use crate::metrics::summarize;
use crate::worker::process_frame;

#[derive(Parser, Debug)]
#[command(name = "scopeloop", version, about = "Live model inference over a captured screen region")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Process frames from a source headlessly and optionally export the session.
    Run(RunArgs),
    /// Start the local control service.
    Serve(ServeArgs),
    /// List the models in the registry.
    Models {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    #[command(hide = true)]
    ChatWorker {
        #[arg(long, default_value = MOCK_MODEL)]
        model: String,
        #[arg(long, default_value_t = 0)]
        token_delay_ms: u64,
    },
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// `screen`, `replay:<dir>` or `synthetic:<seed>x<W>x<H>`.
    #[arg(long)]
    pub source: FrameSourceKind,
    #[arg(long)]
    pub model: String,
    /// Fails unless the model performs this task.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long, default_value_t = 1)]
    pub frames: u64,
    /// Directory to export the auto-accepted session into.
    #[arg(long)]
    pub export: Option<PathBuf>,
    /// Print per-cycle latency statistics.
    #[arg(long)]
    pub bench: bool,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub overlap: Option<u32>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Reference area in mm² for the first frame's view.
    #[arg(long)]
    pub calibrate: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, env = PORT_ENV, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value = "screen")]
    pub source: FrameSourceKind,
    #[arg(long, default_value = "quadrant-classifier")]
    pub model: String,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "scopeloop-exports")]
    pub export_dir: PathBuf,
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "classification" => Ok(Task::Classification),
        "detection" | "mitosis" => Ok(Task::Detection),
        "segmentation" | "ki67" => Ok(Task::Segmentation),
        _ => Err(format!("unknown task {s:?} (classification, detection, segmentation)")),
    }
}

fn registry(manifest: Option<&PathBuf>) -> Result<ModelRegistry, String> {
    match manifest {
        Some(p) => ModelRegistry::from_manifest_file(p, default_cache_dir())
            .map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(ModelRegistry::builtin()),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::Serve(a) => serve(a),
        Command::Models { manifest } => models(manifest),
        Command::ChatWorker {
            model,
            token_delay_ms,
        } => run_chat_worker(
            &model,
            std::io::stdin().lock(),
            std::io::stdout().lock(),
            Duration::from_millis(token_delay_ms),
        )
        .map_err(|e| e.to_string()),
    };
    match outcome {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("scopeloop: {msg}");
            1
        }
    }
}

fn models(manifest: Option<PathBuf>) -> Result<(), String> {
    let reg = registry(manifest.as_ref())?;
    for m in reg.models() {
        println!(
            "{}\t{}\ttile={}\t{:?}",
            m.id,
            m.task.export_name(),
            m.tile_size,
            m.input_format
        );
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<(), String> {
    let reg = registry(a.manifest.as_ref())?;
    let base = PipelineConfig::for_model(&reg, a.source.clone(), &a.model).map_err(|e| e.to_string())?;
    let config = base
        .patched(
            &ConfigPatch {
                task: a.task,
                threshold: a.threshold,
                overlap: a.overlap,
                alpha: a.alpha,
                ..ConfigPatch::default()
            },
            &reg,
        )
        .map_err(|e| e.to_string())?;
    let backend = reg.resolve_id::<f64>(&config.model_id).map_err(|e| e.to_string())?;
    let mut source = open_source(&config.source).map_err(|e| e.to_string())?;
    let settings = config.cycle_settings();

    let mut session = AggregateSession::default();
    let mut cycles = Vec::new();
    let mut overheads = Vec::new();
    let mut adapter = Vec::new();
    for i in 0..a.frames {
        let frame = match source.next_frame(Duration::from_secs(5)) {
            Ok(f) => f,
            Err(SourceError::SourceClosed) => {
                eprintln!("scopeloop: source closed after {i} frames");
                break;
            }
            Err(e) => return Err(e.to_string()),
        };
        let out = process_frame(frame, backend.as_ref(), &settings).map_err(|e| e.to_string())?;
        if i == 0 {
            if let Some(area) = a.calibrate {
                session
                    .calibrate(area, out.raw.dims())
                    .map_err(|e| e.to_string())?;
            }
        }
        cycles.push(out.cycle_ms);
        adapter.push(out.timing.adapter_ms);
        overheads.push((out.cycle_ms - out.timing.adapter_ms).max(0.0));
        let pending = session
            .propose(out.raw.clone(), out.annotated.clone(), Some(&out.result), &config.model_id)
            .map_err(|e| e.to_string())?;
        let id = session
            .commit(pending, Decision::Accept, None)
            .map_err(|e| e.to_string())?
            .unwrap_or_default();
        println!(
            "frame {i}: entry {id} {} {:.1} ms",
            crate::stream::result_summary(&out.result),
            out.cycle_ms
        );
    }
    source.close();

    let totals = session.totals();
    println!("entries: {}", session.entries().len());
    match totals.predicted_class() {
        Some(c) => println!("aggregate predicted class: {c}"),
        None if totals.mitosis_entries > 0 => {
            println!("aggregate mitotic count: {}", totals.mitosis_final_count)
        }
        None => {}
    }
    if let Some(idx) = totals.aggregate_ki67_index() {
        println!("aggregate ki67 index: {:.4}", idx);
    }
    if let Ok(d) = session.density() {
        println!("density per mm2: {d:.4}");
    }
    if a.bench {
        for (name, xs) in [("cycle", &cycles), ("adapter", &adapter), ("overhead", &overheads)] {
            match summarize(xs.iter().copied()) {
                Some((mean, sd)) => println!(
                    "bench {name}_ms: n={} mean={mean:.3} stddev={}",
                    xs.len(),
                    sd.map_or("n/a".to_string(), |s| format!("{s:.3}"))
                ),
                None => println!("bench {name}_ms: n=0"),
            }
        }
    }
    if let Some(dir) = a.export {
        let m = export_session(&session, &dir).map_err(|e| e.to_string())?;
        println!("exported {} images to {}", m.images.len(), m.dir.display());
        println!("csv: {}", m.csv.display());
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), String> {
    let reg = registry(a.manifest.as_ref())?;
    let mut config = PipelineConfig::for_model(&reg, a.source, &a.model).map_err(|e| e.to_string())?;
    config.port = a.port;
    let chat = ChatCommand::current_exe().map_err(|e| e.to_string())?;
    let state = AppState::new(ServiceOptions {
        registry: reg,
        config,
        export_dir: a.export_dir,
        chat,
        log_dir: a.log_dir,
    })
    .map_err(|e| e.to_string())?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    let addr = format!("{}:{}", a.host, a.port);
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| format!("bind {addr}: {e}"))?;
        log::info!("listening on http://{addr}");
        eprintln!("scopeloop: listening on http://{addr}");
        let app = crate::api::router(state.clone());
        let served = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await;
        let st: Arc<AppState> = state;
        let _ = tokio::task::spawn_blocking(move || st.shutdown()).await;
        served.map_err(|e| e.to_string())
    })
}
