//! Append-only crash log, one file per UTC day.

use std::error::Error;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::Serialize;

pub const LOG_DIR_ENV: &str = "SCOPELOOP_LOG_DIR";

#[derive(Debug, Clone, Serialize)]
pub struct CrashReport {
    /// Outermost error first.
    pub error_chain: Vec<String>,
    pub config: serde_json::Value,
    pub last_event: Option<String>,
}

impl CrashReport {
    pub fn from_error(
        err: &(dyn Error + 'static),
        config: serde_json::Value,
        last_event: Option<&str>,
    ) -> Self {
        let mut chain = vec![err.to_string()];
        let mut cur = err.source();
        while let Some(e) = cur {
            chain.push(e.to_string());
            cur = e.source();
        }
        CrashReport {
            error_chain: chain,
            config,
            last_event: last_event.map(str::to_string),
        }
    }
}

/// `<base>/scopeloop/logs`, where base is `$SCOPELOOP_LOG_DIR` or the
/// platform's local data directory.
pub fn log_dir() -> PathBuf {
    let base = std::env::var_os(LOG_DIR_ENV)
        .map(PathBuf::from)
        .or_else(dirs::data_local_dir)
        .unwrap_or_else(std::env::temp_dir);
    base.join("scopeloop").join("logs")
}

fn fallback_dir() -> PathBuf {
    std::env::temp_dir().join("scopeloop").join("logs")
}

pub fn log_file_name(now: DateTime<Utc>) -> String {
    format!("crash-{}.log", now.format("%Y-%m-%d"))
}

fn render(report: &CrashReport, now: DateTime<Utc>) -> String {
    let mut s = format!("=== {} ===\n", now.to_rfc3339_opts(chrono::SecondsFormat::Millis, true));
    for (i, e) in report.error_chain.iter().enumerate() {
        let label = if i == 0 { "error" } else { "caused by" };
        s.push_str(&format!("{label}: {e}\n"));
    }
    s.push_str(&format!(
        "last_event: {}\n",
        report.last_event.as_deref().unwrap_or("none")
    ));
    s.push_str(&format!("config: {}\n\n", report.config));
    s
}

fn append(dir: &Path, name: &str, text: &str) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    f.write_all(text.as_bytes())?;
    Ok(path)
}

/// Appends `report` to today's log under [`log_dir`] and returns the file.
pub fn log_crash(report: &CrashReport) -> PathBuf {
    log_crash_in(&log_dir(), report, Utc::now())
}

/// Appends to `dir/crash-<date>.log`, falling back to the temp directory when
/// `dir` is unusable.
pub fn log_crash_in(dir: &Path, report: &CrashReport, now: DateTime<Utc>) -> PathBuf {
    let name = log_file_name(now);
    let text = render(report, now);
    match append(dir, &name, &text) {
        Ok(p) => p,
        Err(e) => {
            let fb = fallback_dir();
            eprintln!(
                "scopeloop: cannot write crash log in {} ({e}); using {}",
                dir.display(),
                fb.display()
            );
            match append(&fb, &name, &text) {
                Ok(p) => p,
                Err(e2) => {
                    eprintln!("scopeloop: crash log unavailable ({e2}):\n{text}");
                    fb.join(name)
                }
            }
        }
    }
}
