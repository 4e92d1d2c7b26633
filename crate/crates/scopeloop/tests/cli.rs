use std::path::Path;
use std::process::{Command, Output};

use scopeloop_core::adapters::mock::{paint_square, MAGENTA, MARKER_SIZE};
use scopeloop_core::aggregate::export::parse_export;
use scopeloop_core::{Frame, PixelFormat};

fn scopeloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scopeloop"))
        .args(args)
        .output()
        .unwrap()
}

fn replay_dir(dir: &Path) {
    for (i, n) in [1u32, 2, 3].into_iter().enumerate() {
        let mut f = Frame::filled(600, 400, PixelFormat::Rgb, [235, 235, 235]);
        for k in 0..n {
            paint_square(&mut f, 50 + 120 * k as i64, 100, MARKER_SIZE, MAGENTA);
        }
        std::fs::write(dir.join(format!("frame_{i}.png")), f.encode_png().unwrap()).unwrap();
    }
}

#[test]
fn run_over_a_replay_directory_exports_every_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = tmp.path().join("frames");
    std::fs::create_dir(&frames).unwrap();
    replay_dir(&frames);
    let out_dir = tmp.path().join("out");
    let source = format!("replay:{}", frames.display());
    let out = scopeloop(&[
        "run",
        "--source",
        &source,
        "--model",
        "marker-detector",
        "--frames",
        "5",
        "--calibrate",
        "0.05",
        "--export",
        out_dir.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("entries: 5"), "{stdout}");
    // replay wraps around: 1, 2, 3, 1, 2 markers
    assert!(stdout.contains("aggregate mitotic count: 9"), "{stdout}");

    let csv = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().path().join("session.csv"))
        .find(|p| p.exists())
        .expect("export directory with a CSV");
    let parsed = parse_export::<f64>(&csv).unwrap();
    assert_eq!(parsed.rows.len(), 5);
    let counts: Vec<&str> = parsed.rows.iter().map(|r| r["final_count"].as_str()).collect();
    assert_eq!(counts, ["1", "2", "3", "1", "2"]);
}

#[test]
fn bench_prints_latency_statistics() {
    let out = scopeloop(&[
        "run",
        "--source",
        "synthetic:3x700x500",
        "--model",
        "quadrant-classifier",
        "--frames",
        "4",
        "--bench",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success());
    assert!(stdout.contains("bench cycle_ms: n=4 mean="), "{stdout}");
    assert!(stdout.contains("bench overhead_ms: n=4"), "{stdout}");
    assert!(stdout.contains("aggregate predicted class:"), "{stdout}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(scopeloop(&["run", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(
        scopeloop(&["run", "--source", "nowhere", "--model", "marker-detector"]).status.code(),
        Some(2)
    );
    assert_eq!(scopeloop(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let out = scopeloop(&["run", "--source", "synthetic:1x64x64", "--model", "missing-model"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing-model"));
    let out = scopeloop(&[
        "run",
        "--source",
        "synthetic:1x64x64",
        "--model",
        "marker-detector",
        "--task",
        "classification",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn models_lists_the_registry() {
    let out = scopeloop(&["models"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success());
    for id in ["quadrant-classifier", "marker-detector", "marker-segmenter"] {
        assert!(stdout.contains(id), "{stdout}");
    }
}
