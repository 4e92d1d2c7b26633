#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use scopeloop::api::{router, AppState, ServiceOptions};
use scopeloop::chat::ChatCommand;
use scopeloop::PipelineConfig;
use scopeloop_core::adapters::registry::{ModelRegistry, BUILTIN_MANIFEST};
use scopeloop_core::FrameSourceKind;
use serde_json::Value;

pub const EXTRA_MODELS: &str = r#"
[[model]]
id = "slow-classifier"
task = "classification"
tile_size = 1024
input_format = "rgb"
source = { kind = "builtin_mock", name = "constant", delay_ms = 1000 }

[[model]]
id = "failing-detector"
task = "detection"
tile_size = 256
input_format = "rgb"
source = { kind = "builtin_mock", name = "failing" }
"#;

pub fn registry(cache: &Path) -> ModelRegistry {
    ModelRegistry::from_manifest_str(&format!("{BUILTIN_MANIFEST}\n{EXTRA_MODELS}"), cache.into()).unwrap()
}

pub fn chat_command() -> ChatCommand {
    ChatCommand::new(PathBuf::from(env!("CARGO_BIN_EXE_scopeloop")), vec!["chat-worker".into()])
}

pub struct Service {
    pub base: String,
    pub port: u16,
    pub state: Arc<AppState>,
    pub dir: tempfile::TempDir,
    pub rt: tokio::runtime::Runtime,
}

impl Service {
    pub fn start(model: &str, source: FrameSourceKind) -> Service {
        let dir = tempfile::tempdir().unwrap();
        let reg = registry(&dir.path().join("cache"));
        let mut config = PipelineConfig::for_model(&reg, source, model).unwrap();
        config.capture_interval_ms = 10;
        let state = AppState::new(ServiceOptions {
            registry: reg,
            config,
            export_dir: dir.path().join("exports"),
            chat: chat_command(),
            log_dir: Some(dir.path().join("logs")),
        })
        .unwrap();
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()
            .unwrap();
        let listener = rt
            .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
            .unwrap();
        let port = listener.local_addr().unwrap().port();
        let app = router(state.clone());
        rt.spawn(async move { axum::serve(listener, app).await });
        Service {
            base: format!("http://127.0.0.1:{port}"),
            port,
            state,
            dir,
            rt,
        }
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        reply(ureq::get(&format!("{}{path}", self.base)).call())
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        reply(ureq::post(&format!("{}{path}", self.base)).send_json(body))
    }

    /// Polls `/metrics` until `cycles` reaches `n`.
    pub fn wait_cycles(&self, n: u64, limit: Duration) -> Value {
        let t = Instant::now();
        loop {
            let (_, m) = self.get("/metrics");
            if m["cycles"].as_u64().unwrap_or(0) >= n {
                return m;
            }
            assert!(t.elapsed() < limit, "no progress: {m}");
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.state.shutdown();
    }
}

fn reply(r: Result<ureq::Response, ureq::Error>) -> (u16, Value) {
    let resp = match r {
        Ok(r) => r,
        Err(ureq::Error::Status(_, r)) => r,
        Err(e) => panic!("transport error: {e}"),
    };
    let status = resp.status();
    let text = resp.into_string().unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

pub fn error_code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("")
}

pub fn synthetic(w: u32, h: u32) -> FrameSourceKind {
    FrameSourceKind::Synthetic {
        seed: 7,
        width: w,
        height: h,
    }
}
