use std::path::Path;
use std::time::Duration;

use proptest::prelude::*;
use scopeloop_core::frame::{
    convert_format, open_source, ReplaySource, ScreenSource, SyntheticSource, VirtualDisplay,
};
use scopeloop_core::{CaptureRegion, Frame, FrameSource, FrameSourceKind, PixelFormat};

const WAIT: Duration = Duration::from_millis(200);

fn write_png(dir: &Path, name: &str, rgb: [u8; 3]) {
    Frame::filled(4, 3, PixelFormat::Rgb, rgb)
        .to_rgb_image()
        .save(dir.join(name))
        .unwrap();
}

#[test]
fn replay_cycles_in_filename_order() {
    let dir = tempfile::tempdir().unwrap();
    // created out of order on purpose
    write_png(dir.path(), "b.png", [0, 255, 0]);
    write_png(dir.path(), "a.png", [255, 0, 0]);
    let mut src = ReplaySource::open(dir.path(), Duration::ZERO).unwrap();
    let seen: Vec<[u8; 3]> = (0..3)
        .map(|_| src.next_frame(WAIT).unwrap().rgb_at(0, 0))
        .collect();
    assert_eq!(seen, vec![[255, 0, 0], [0, 255, 0], [255, 0, 0]]);
}

#[test]
fn replay_skips_undecodable_files() {
    let dir = tempfile::tempdir().unwrap();
    write_png(dir.path(), "a.png", [1, 1, 1]);
    std::fs::write(dir.path().join("b.png"), b"definitely not a png").unwrap();
    write_png(dir.path(), "c.png", [3, 3, 3]);
    std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let mut src = ReplaySource::open(dir.path(), Duration::ZERO).unwrap();
    assert_eq!(src.files().len(), 3);
    let seen: Vec<u8> = (0..4)
        .map(|_| src.next_frame(WAIT).unwrap().rgb_at(0, 0)[0])
        .collect();
    assert_eq!(seen, vec![1, 3, 1, 3]);
}

#[test]
fn replay_of_an_empty_directory_fails_to_open() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ReplaySource::open(dir.path(), Duration::ZERO).is_err());
}

#[test]
fn replay_honours_its_interval() {
    let dir = tempfile::tempdir().unwrap();
    write_png(dir.path(), "a.png", [0, 0, 0]);
    let mut src = ReplaySource::open(dir.path(), Duration::from_millis(300)).unwrap();
    src.next_frame(WAIT).unwrap();
    assert!(src.next_frame(Duration::from_millis(10)).is_err());
}

fn assert_increasing(src: &mut dyn FrameSource) {
    let mut last = None;
    for _ in 0..1000 {
        let ts = src.next_frame(WAIT).unwrap().timestamp_ns;
        if let Some(prev) = last {
            assert!(ts > prev, "{ts} after {prev}");
        }
        last = Some(ts);
    }
}

#[test]
fn timestamps_strictly_increase_for_every_source_kind() {
    let dir = tempfile::tempdir().unwrap();
    write_png(dir.path(), "a.png", [0, 0, 0]);
    write_png(dir.path(), "b.png", [9, 9, 9]);
    let mut replay = open_source(&FrameSourceKind::Replay {
        dir: dir.path().to_path_buf(),
        interval_ms: 0,
    })
    .unwrap();
    assert_increasing(replay.as_mut());

    let mut synthetic = SyntheticSource::new(3, 16, 16);
    assert_increasing(&mut synthetic);

    let desktop = Frame::filled(64, 64, PixelFormat::Bgra, [5, 6, 7]);
    let region = CaptureRegion {
        left: 8,
        top: 8,
        right: 40,
        bottom: 24,
    };
    let mut screen = ScreenSource::new(region, Some(Box::new(VirtualDisplay::new(desktop))));
    assert_increasing(&mut screen);
}

#[test]
fn synthetic_content_is_a_function_of_its_parameters() {
    let a = SyntheticSource::new(7, 256, 256).next_frame(WAIT).unwrap();
    let b = SyntheticSource::new(7, 256, 256).next_frame(WAIT).unwrap();
    let c = SyntheticSource::new(8, 256, 256).next_frame(WAIT).unwrap();
    assert_eq!(a.dims(), (256, 256));
    assert_eq!(a.pixels(), b.pixels());
    assert_ne!(a.pixels(), c.pixels());
}

fn format_strategy() -> impl Strategy<Value = PixelFormat> {
    prop_oneof![Just(PixelFormat::Rgb), Just(PixelFormat::Bgr)]
}

proptest! {
    #[test]
    fn three_channel_round_trip_is_identity(
        w in 1u32..12,
        h in 1u32..12,
        from in format_strategy(),
        to in format_strategy(),
        seed in any::<u64>(),
    ) {
        let n = (w * h * 3) as usize;
        let mut bytes = vec![0u8; n];
        let mut s = seed;
        for b in &mut bytes {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *b = (s >> 56) as u8;
        }
        let f = Frame::new(w, h, from, bytes).unwrap();
        let back = convert_format(&convert_format(&f, to), from);
        prop_assert_eq!(back.pixels(), f.pixels());
    }

    #[test]
    fn leaving_bgra_keeps_every_colour_channel(w in 1u32..8, h in 1u32..8, seed in any::<u8>()) {
        let bytes: Vec<u8> = (0..w * h * 4).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let f = Frame::new(w, h, PixelFormat::Bgra, bytes).unwrap();
        let rgb = convert_format(&f, PixelFormat::Rgb);
        prop_assert_eq!(rgb.pixels().len(), (w * h * 3) as usize);
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(rgb.rgb_at(x, y), f.rgb_at(x, y));
            }
        }
        let bgra_again = convert_format(&convert_format(&rgb, PixelFormat::Bgr), PixelFormat::Rgb);
        prop_assert_eq!(bgra_again.pixels(), rgb.pixels());
    }
}
