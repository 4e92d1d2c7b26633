//! Tile planning for the three inference tasks, plus upscaling of ROIs that
//! are smaller than a model's input.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb, Rgba};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::Frame;

/// Upscale factor; exactly 1 when no upscaling happened.
pub type Scale = Ratio<u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl TileRect {
    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn intersection_area(&self, other: &TileRect) -> u64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) as u64 * (y1 - y0) as u64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TilingStrategy {
    ClassificationEdgeShift,
    SegmentationStrict,
    DetectionOverlap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub strategy: TilingStrategy,
    /// Row-major.
    pub tiles: Vec<TileRect>,
    pub scale_applied: Scale,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TilingError {
    #[error("frame {width}x{height} is smaller than tile size {tile}")]
    FrameSmallerThanTile { width: u32, height: u32, tile: u32 },
    #[error("overlap {overlap} must be below tile size {tile}")]
    InvalidOverlap { overlap: u32, tile: u32 },
    #[error("frame is empty")]
    EmptyFrame,
    #[error("tile size must be positive")]
    ZeroTile,
}

/// Origins `0, stride, 2*stride, ...` with the last one shifted so the final
/// tile ends at `extent`. Deduplicated and ascending.
fn edge_shifted_origins(extent: u32, tile: u32, stride: u32) -> Vec<u32> {
    debug_assert!(extent >= tile && stride > 0);
    let last = extent - tile;
    let mut out = Vec::new();
    let mut o = 0u32;
    loop {
        let o_clamped = o.min(last);
        if out.last() != Some(&o_clamped) {
            out.push(o_clamped);
        }
        if o_clamped == last {
            break;
        }
        o += stride;
    }
    out
}

fn check_dims(width: u32, height: u32, tile: u32) -> Result<(), TilingError> {
    if tile == 0 {
        return Err(TilingError::ZeroTile);
    }
    if width < tile || height < tile {
        return Err(TilingError::FrameSmallerThanTile {
            width,
            height,
            tile,
        });
    }
    Ok(())
}

fn grid(xs: &[u32], ys: &[u32], tile: u32) -> Vec<TileRect> {
    ys.iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| TileRect {
                x,
                y,
                w: tile,
                h: tile,
            })
        })
        .collect()
}

/// Non-overlapping grid whose last row/column is shifted flush with the
/// bottom/right edge so every pixel is covered.
pub fn plan_classification(dims: (u32, u32), tile: u32) -> Result<TilePlan, TilingError> {
    let (w, h) = dims;
    check_dims(w, h, tile)?;
    let xs = edge_shifted_origins(w, tile, tile);
    let ys = edge_shifted_origins(h, tile, tile);
    Ok(TilePlan {
        strategy: TilingStrategy::ClassificationEdgeShift,
        tiles: grid(&xs, &ys, tile),
        scale_applied: Scale::from_integer(1),
    })
}

/// Strict `floor(W/T) x floor(H/T)` grid; residual strips are left out.
pub fn plan_segmentation(dims: (u32, u32), tile: u32) -> Result<TilePlan, TilingError> {
    let (w, h) = dims;
    check_dims(w, h, tile)?;
    let xs: Vec<u32> = (0..w / tile).map(|i| i * tile).collect();
    let ys: Vec<u32> = (0..h / tile).map(|i| i * tile).collect();
    Ok(TilePlan {
        strategy: TilingStrategy::SegmentationStrict,
        tiles: grid(&xs, &ys, tile),
        scale_applied: Scale::from_integer(1),
    })
}

/// Sliding window with stride `tile - overlap`, edge-shifted at the end.
pub fn plan_detection(dims: (u32, u32), tile: u32, overlap: u32) -> Result<TilePlan, TilingError> {
    let (w, h) = dims;
    if tile > 0 && overlap >= tile {
        return Err(TilingError::InvalidOverlap { overlap, tile });
    }
    check_dims(w, h, tile)?;
    let stride = tile - overlap;
    let xs = edge_shifted_origins(w, tile, stride);
    let ys = edge_shifted_origins(h, tile, stride);
    Ok(TilePlan {
        strategy: TilingStrategy::DetectionOverlap,
        tiles: grid(&xs, &ys, tile),
        scale_applied: Scale::from_integer(1),
    })
}

/// Pixels not covered by any tile of a segmentation plan.
pub fn excluded_area(dims: (u32, u32), plan: &TilePlan) -> u64 {
    let covered: u64 = plan.tiles.iter().map(|t| t.w as u64 * t.h as u64).sum();
    dims.0 as u64 * dims.1 as u64 - covered
}

fn ceil_mul(v: u32, scale: Scale) -> u32 {
    let num = v as u64 * *scale.numer() as u64;
    let den = *scale.denom() as u64;
    num.div_ceil(den) as u32
}

/// Bilinear uniform upscale so that both dimensions reach `min_dim`.
///
/// The shorter side lands exactly on `min_dim`; the longer one is rounded up.
pub fn upscale_if_undersized(frame: &Frame, min_dim: u32) -> Result<(Frame, Scale), TilingError> {
    let (w, h) = frame.dims();
    if w == 0 || h == 0 {
        return Err(TilingError::EmptyFrame);
    }
    if min_dim == 0 {
        return Err(TilingError::ZeroTile);
    }
    let short = w.min(h);
    if short >= min_dim {
        return Ok((frame.clone(), Scale::from_integer(1)));
    }
    let scale = Scale::new(min_dim, short);
    let (nw, nh) = (ceil_mul(w, scale), ceil_mul(h, scale));
    let raw = frame.pixels().to_vec();
    let pixels = match frame.format().bytes_per_pixel() {
        4 => {
            let img = ImageBuffer::<Rgba<u8>, _>::from_raw(w, h, raw).expect("packed");
            imageops::resize(&img, nw, nh, FilterType::Triangle).into_raw()
        }
        _ => {
            let img = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).expect("packed");
            imageops::resize(&img, nw, nh, FilterType::Triangle).into_raw()
        }
    };
    let out = Frame::new(nw, nh, frame.format(), pixels)
        .expect("resize output is packed")
        .with_meta(frame.timestamp_ns, frame.source_id.clone());
    Ok((out, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::PixelFormat;

    fn xs(plan: &TilePlan) -> Vec<u32> {
        let mut v: Vec<u32> = plan.tiles.iter().map(|t| t.x).collect();
        v.sort();
        v.dedup();
        v
    }

    fn ys(plan: &TilePlan) -> Vec<u32> {
        let mut v: Vec<u32> = plan.tiles.iter().map(|t| t.y).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Brute-force per-pixel coverage count.
    fn uncovered_pixels(dims: (u32, u32), plan: &TilePlan) -> u64 {
        let mut miss = 0;
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                if !plan.tiles.iter().any(|t| t.contains(x, y)) {
                    miss += 1;
                }
            }
        }
        miss
    }

    #[test]
    fn classification_edge_shift_1500x1200() {
        let p = plan_classification((1500, 1200), 1024).unwrap();
        assert_eq!(xs(&p), vec![0, 476]);
        assert_eq!(ys(&p), vec![0, 176]);
        assert_eq!(p.tiles.len(), 4);
        assert_eq!(uncovered_pixels((1500, 1200), &p), 0);
        // row-major
        assert_eq!(
            p.tiles.iter().map(|t| (t.x, t.y)).collect::<Vec<_>>(),
            vec![(0, 0), (476, 0), (0, 176), (476, 176)]
        );
    }

    #[test]
    fn classification_exact_multiple_has_no_overlap() {
        let p = plan_classification((2048, 1024), 1024).unwrap();
        assert_eq!(xs(&p), vec![0, 1024]);
        assert_eq!(ys(&p), vec![0]);
        assert_eq!(p.tiles[0].intersection_area(&p.tiles[1]), 0);
        let single = plan_classification((1024, 1024), 1024).unwrap();
        assert_eq!(single.tiles, vec![TileRect { x: 0, y: 0, w: 1024, h: 1024 }]);
    }

    #[test]
    fn classification_rejects_small_frames() {
        assert_eq!(
            plan_classification((1000, 2000), 1024),
            Err(TilingError::FrameSmallerThanTile {
                width: 1000,
                height: 2000,
                tile: 1024
            })
        );
    }

    #[test]
    fn segmentation_strict_grid_excludes_residuals() {
        let p = plan_segmentation((2100, 1100), 1024).unwrap();
        assert_eq!(xs(&p), vec![0, 1024]);
        assert_eq!(ys(&p), vec![0]);
        for (i, a) in p.tiles.iter().enumerate() {
            for b in &p.tiles[i + 1..] {
                assert_eq!(a.intersection_area(b), 0);
            }
        }
        assert_eq!(excluded_area((2100, 1100), &p), 2100 * 1100 - 2 * 1024 * 1024);

        let one = plan_segmentation((1024, 1024), 1024).unwrap();
        assert_eq!(one.tiles.len(), 1);
        assert_eq!(excluded_area((1024, 1024), &one), 0);

        let col = plan_segmentation((1025, 1024), 1024).unwrap();
        assert_eq!(col.tiles.len(), 1);
        assert_eq!(excluded_area((1025, 1024), &col), 1024);
    }

    #[test]
    fn detection_overlap_origins() {
        let p = plan_detection((1024, 512), 512, 64).unwrap();
        assert_eq!(xs(&p), vec![0, 448, 512]);
        assert_eq!(ys(&p), vec![0]);
        assert_eq!(uncovered_pixels((1024, 512), &p), 0);

        let single = plan_detection((512, 512), 512, 100).unwrap();
        assert_eq!(single.tiles.len(), 1);

        assert_eq!(
            plan_detection((1024, 1024), 512, 512),
            Err(TilingError::InvalidOverlap {
                overlap: 512,
                tile: 512
            })
        );
    }

    #[test]
    fn detection_adjacent_tiles_overlap_by_at_least_requested() {
        let p = plan_detection((1800, 1300), 512, 64).unwrap();
        let o = xs(&p);
        for w in o.windows(2) {
            assert!(w[0] + 512 - w[1] >= 64);
        }
    }

    #[test]
    fn upscale_small_square() {
        let f = Frame::filled(300, 300, PixelFormat::Rgb, [10, 20, 30]);
        let (up, s) = upscale_if_undersized(&f, 512).unwrap();
        assert_eq!(up.dims(), (512, 512));
        assert_eq!(s, Scale::new(512, 300));
        // constant image stays constant under bilinear interpolation
        assert_eq!(up.rgb_at(300, 17), [10, 20, 30]);
    }

    #[test]
    fn upscale_leaves_large_frames_alone() {
        let f = Frame::filled(1024, 768, PixelFormat::Bgra, [1, 2, 3]);
        let (same, s) = upscale_if_undersized(&f, 512).unwrap();
        assert_eq!(same, f);
        assert_eq!(s, Scale::from_integer(1));
    }

    #[test]
    fn upscale_is_uniform_on_the_short_side() {
        let f = Frame::filled(300, 600, PixelFormat::Bgr, [1, 2, 3]);
        let (up, s) = upscale_if_undersized(&f, 512).unwrap();
        assert_eq!(s, Scale::new(512, 300));
        assert_eq!(up.dims(), (512, 1024));
        assert_eq!(up.format(), PixelFormat::Bgr);

        let odd = Frame::filled(301, 457, PixelFormat::Rgb, [0, 0, 0]);
        let (up, _) = upscale_if_undersized(&odd, 512).unwrap();
        assert!(up.width() >= 512 && up.height() >= 512);
        assert_eq!(up.width(), 512);
    }

    #[test]
    fn upscale_rejects_empty() {
        let f = Frame::new(0, 5, PixelFormat::Rgb, vec![]).unwrap();
        assert_eq!(upscale_if_undersized(&f, 512), Err(TilingError::EmptyFrame));
    }
}
