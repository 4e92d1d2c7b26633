use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scopeloop_core::adapters::mock::{marker_color, paint_square, MarkerDetector, MAGENTA, MARKER_SIZE};
use scopeloop_core::pipelines::nms::ConfidenceBand;
use scopeloop_core::pipelines::run_detection;
use scopeloop_core::{Frame, NmsConfig, PixelFormat};

fn centre(x: u32, y: u32) -> (f64, f64) {
    let half = MARKER_SIZE as f64 / 2.0;
    (x as f64 + half, y as f64 + half)
}

#[test]
fn marker_across_a_tile_seam_is_counted_once() {
    let det = MarkerDetector::<f64>::with_tile_size(512);
    for overlap in [32u32, 64, 128] {
        // the second column of tiles starts at 512 - overlap; straddle that seam
        let seam = 512 - overlap;
        let mut frame = Frame::filled(1024, 512, PixelFormat::Bgra, [200, 200, 200]);
        paint_square(&mut frame, seam as i64 - 4, 200, MARKER_SIZE, MAGENTA);
        let r = run_detection(&frame, &det, overlap, 0.0, &NmsConfig::default()).unwrap();
        assert!(r.raw_count >= 2, "overlap {overlap}: raw {}", r.raw_count);
        assert_eq!(r.survivors.len(), 1, "overlap {overlap}");
        let c = r.survivors[0].centroid();
        assert_eq!(c, centre(seam - 4, 200));
        assert_eq!(r.survivors[0].score, 0.9);
    }
}

fn scatter(rng: &mut ChaCha8Rng, w: u32, h: u32, n: usize) -> Vec<(u32, u32)> {
    let mut placed: Vec<(u32, u32)> = Vec::new();
    while placed.len() < n {
        let p = (rng.gen_range(0..w - MARKER_SIZE), rng.gen_range(0..h - MARKER_SIZE));
        let far = placed.iter().all(|q| {
            let dx = p.0 as f64 - q.0 as f64;
            let dy = p.1 as f64 - q.1 as f64;
            dx * dx + dy * dy > 40.0 * 40.0
        });
        if far {
            placed.push(p);
        }
    }
    placed
}

#[test]
fn survivor_count_does_not_depend_on_overlap() {
    let det = MarkerDetector::<f64>::with_tile_size(256);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..5 {
        let (w, h) = (rng.gen_range(256..900), rng.gen_range(256..700));
        let markers = scatter(&mut rng, w, h, 12);
        let mut frame = Frame::filled(w, h, PixelFormat::Rgb, [230, 230, 230]);
        for &(x, y) in &markers {
            paint_square(&mut frame, x as i64, y as i64, MARKER_SIZE, MAGENTA);
        }
        for overlap in [32u32, 64, 128] {
            let r = run_detection(&frame, &det, overlap, 0.0, &NmsConfig::default()).unwrap();
            assert_eq!(r.survivors.len(), markers.len(), "{w}x{h} overlap {overlap}");
            let mut got: Vec<(f64, f64)> = r.survivors.iter().map(|d| d.centroid()).collect();
            let mut want: Vec<(f64, f64)> = markers.iter().map(|&(x, y)| centre(x, y)).collect();
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(got, want);
        }
    }
}

#[test]
fn threshold_and_bands_apply_to_survivors() {
    let det = MarkerDetector::<f64>::with_tile_size(128);
    let mut frame = Frame::filled(256, 128, PixelFormat::Rgb, [255, 255, 255]);
    for (i, pct) in [85u8, 70, 50, 40, 10].into_iter().enumerate() {
        paint_square(&mut frame, 10 + 45 * i as i64, 60, MARKER_SIZE, marker_color(pct));
    }
    let r = run_detection(&frame, &det, 32, 0.45, &NmsConfig::default()).unwrap();
    assert_eq!(r.survivors.len(), 5);
    let mut bands: Vec<(f64, ConfidenceBand)> =
        r.detections.iter().map(|b| (b.detection.score, b.band)).collect();
    bands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    assert_eq!(
        bands,
        vec![(0.85, ConfidenceBand::High), (0.7, ConfidenceBand::Medium), (0.5, ConfidenceBand::Medium)]
    );
}
