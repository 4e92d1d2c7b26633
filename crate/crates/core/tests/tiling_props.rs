use proptest::prelude::*;
use scopeloop_core::frame::convert_format;
use scopeloop_core::tiling::{
    excluded_area, plan_classification, plan_detection, plan_segmentation, upscale_if_undersized,
};
use scopeloop_core::{Frame, PixelFormat, TilePlan};

fn coverage(dims: (u32, u32), plan: &TilePlan) -> Vec<u16> {
    let (w, h) = dims;
    let mut hits = vec![0u16; (w * h) as usize];
    for t in &plan.tiles {
        assert!(t.x + t.w <= w && t.y + t.h <= h, "tile {t:?} leaves {dims:?}");
        for y in t.y..t.y + t.h {
            for x in t.x..t.x + t.w {
                hits[(y * w + x) as usize] += 1;
            }
        }
    }
    hits
}

/// Origins along one axis, recovered from the plan.
fn axis(plan: &TilePlan, pick: fn(&scopeloop_core::TileRect) -> u32) -> Vec<u32> {
    let mut v: Vec<u32> = plan.tiles.iter().map(pick).collect();
    v.sort_unstable();
    v.dedup();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn classification_covers_every_pixel(t in 4u32..24, fw in 1.0f64..4.0, fh in 1.0f64..4.0) {
        let dims = ((t as f64 * fw) as u32, (t as f64 * fh) as u32);
        let plan = plan_classification(dims, t).unwrap();
        prop_assert!(coverage(dims, &plan).iter().all(|&c| c >= 1));
    }

    #[test]
    fn detection_covers_every_pixel_and_every_overlap_square(
        t in 8u32..32,
        fw in 1.0f64..4.0,
        fh in 1.0f64..4.0,
        overlap_frac in 0.0f64..0.9,
    ) {
        let dims = ((t as f64 * fw) as u32, (t as f64 * fh) as u32);
        let overlap = ((t as f64 * overlap_frac) as u32).min(t - 1);
        let plan = plan_detection(dims, t, overlap).unwrap();
        prop_assert!(coverage(dims, &plan).iter().all(|&c| c >= 1));
        // any overlap-sized interval along an axis lies inside one tile span
        if overlap > 0 {
            for (origins, extent) in [(axis(&plan, |r| r.x), dims.0), (axis(&plan, |r| r.y), dims.1)] {
                for a in 0..=extent - overlap {
                    prop_assert!(
                        origins.iter().any(|&o| o <= a && a + overlap <= o + t),
                        "interval [{a}, {}) not inside any tile", a + overlap
                    );
                }
            }
        }
    }

    #[test]
    fn segmentation_is_disjoint_with_exact_residual(t in 4u32..24, fw in 1.0f64..4.0, fh in 1.0f64..4.0) {
        let (w, h) = ((t as f64 * fw) as u32, (t as f64 * fh) as u32);
        let plan = plan_segmentation((w, h), t).unwrap();
        let hits = coverage((w, h), &plan);
        prop_assert!(hits.iter().all(|&c| c <= 1));
        let uncovered = hits.iter().filter(|&&c| c == 0).count() as u64;
        let expected = (w * h - (w / t) * (h / t) * t * t) as u64;
        prop_assert_eq!(uncovered, expected);
        prop_assert_eq!(excluded_area((w, h), &plan), expected);
    }

    #[test]
    fn upscaling_reaches_the_tile_on_both_axes(w in 1u32..80, h in 1u32..80, t in 16u32..64) {
        let f = Frame::filled(w, h, PixelFormat::Rgb, [10, 20, 30]);
        let (up, scale) = upscale_if_undersized(&f, t).unwrap();
        prop_assert!(up.width() >= t && up.height() >= t);
        if w >= t && h >= t {
            prop_assert_eq!(up.dims(), (w, h));
            prop_assert_eq!(*scale.numer(), *scale.denom());
        } else {
            prop_assert_eq!(up.width().min(up.height()), t);
            // bilinear upscale of a flat colour stays flat
            prop_assert_eq!(convert_format(&up, PixelFormat::Rgb).rgb_at(up.width() - 1, 0), [10, 20, 30]);
        }
    }
}

#[test]
fn detection_at_realistic_sizes() {
    for overlap in [32, 64, 128] {
        let plan = plan_detection((1500, 1200), 512, overlap).unwrap();
        let hits = coverage((1500, 1200), &plan);
        assert!(hits.iter().all(|&c| c >= 1));
    }
}
