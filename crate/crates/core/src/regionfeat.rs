//! Hand-crafted region descriptor.
//!
//! Layout of the 64-entry vector:
//!
//! | range   | block                                                   |
//! |---------|---------------------------------------------------------|
//! | 0..24   | RGB histogram, 8 bins per channel, each channel sums to 1 |
//! | 24..27  | mean RGB / 255                                          |
//! | 27..35  | gradient orientation histogram (Sobel on gray), sums to 1 |
//! | 35..42  | geometry: log-area ratio, box w, box h, aspect, center x, center y, fill ratio |
//! | 42..45  | mean absolute RGB contrast across the region border / 255 |
//! | 45..64  | zero padding                                            |

use std::f64::consts::PI;

use crate::error::{contract, Result};
use crate::imagecore::{BBox, Image};
use crate::nnet::Vector;
use crate::overseg::RegionGraph;

pub type FeatureVector = Vector;

pub const FEATURE_DIM: usize = 64;
pub const COLOR_BINS: usize = 8;
pub const ORIENTATION_BINS: usize = 8;
/// Entries actually populated before padding.
pub const USED_DIM: usize = 3 * COLOR_BINS + 3 + ORIENTATION_BINS + 7 + 3;

pub const COLOR_BLOCK: std::ops::Range<usize> = 0..24;
pub const MEAN_BLOCK: std::ops::Range<usize> = 24..27;
pub const TEXTURE_BLOCK: std::ops::Range<usize> = 27..35;
pub const GEOMETRY_BLOCK: std::ops::Range<usize> = 35..42;
pub const CONTRAST_BLOCK: std::ops::Range<usize> = 42..45;

fn gray(image: &Image, x: isize, y: isize) -> f64 {
    // Mirror-reflect coordinates that fall outside the raster.
    let reflect = |v: isize, n: usize| -> usize {
        let n = n as isize;
        let v = if v < 0 { -v - 1 } else if v >= n { 2 * n - v - 1 } else { v };
        v.clamp(0, n - 1) as usize
    };
    let p = image.pixel(reflect(x, image.width()), reflect(y, image.height()));
    (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0
}

fn sobel(image: &Image, x: usize, y: usize) -> (f64, f64) {
    let (x, y) = (x as isize, y as isize);
    let g = |dx: isize, dy: isize| gray(image, x + dx, y + dy);
    let gx = (g(1, -1) + 2.0 * g(1, 0) + g(1, 1)) - (g(-1, -1) + 2.0 * g(-1, 0) + g(-1, 1));
    let gy = (g(-1, 1) + 2.0 * g(0, 1) + g(1, 1)) - (g(-1, -1) + 2.0 * g(0, -1) + g(1, -1));
    (gx, gy)
}

/// Descriptor of one region given its ascending row-major pixel indices and
/// tight box. Padded with zeros to `dim`, which must be at least [`USED_DIM`].
pub fn extract_features_dim(image: &Image, pixels: &[u32], bbox: BBox, dim: usize) -> Result<FeatureVector> {
    if pixels.is_empty() {
        return contract("cannot describe an empty region");
    }
    if dim < USED_DIM {
        return contract(format!("feature dimension {dim} is below the {USED_DIM} populated entries"));
    }
    let (w, h) = (image.width(), image.height());
    let n = pixels.len() as f64;
    let mut f = vec![0.0; dim];

    let mut sum = [0.0f64; 3];
    let mut orient = [0.0f64; ORIENTATION_BINS];
    for &p in pixels {
        let p = p as usize;
        let rgb = image.pixel_at(p);
        for c in 0..3 {
            f[c * COLOR_BINS + rgb[c] as usize * COLOR_BINS / 256] += 1.0;
            sum[c] += rgb[c] as f64;
        }
        let (gx, gy) = sobel(image, p % w, p / w);
        let mag = gx.hypot(gy);
        if mag > 0.0 {
            let bin = (((gy.atan2(gx) + PI) / (2.0 * PI)) * ORIENTATION_BINS as f64) as usize;
            orient[bin.min(ORIENTATION_BINS - 1)] += mag;
        }
    }
    for v in &mut f[COLOR_BLOCK] {
        *v /= n;
    }
    for c in 0..3 {
        f[MEAN_BLOCK.start + c] = sum[c] / n / 255.0;
    }
    let total: f64 = orient.iter().sum();
    for (i, o) in orient.iter().enumerate() {
        // Flat regions get a uniform orientation histogram.
        f[TEXTURE_BLOCK.start + i] = if total > 0.0 { o / total } else { 1.0 / ORIENTATION_BINS as f64 };
    }

    let (bw, bh) = (bbox.width() as f64, bbox.height() as f64);
    let geo = [
        (n.ln_1p() / ((w * h) as f64).ln_1p()).min(1.0),
        bw / w as f64,
        bh / h as f64,
        (bw / bh).clamp(0.1, 10.0) / 10.0,
        (bbox.x0 + bbox.x1) as f64 / 2.0 / w as f64,
        (bbox.y0 + bbox.y1) as f64 / 2.0 / h as f64,
        n / bbox.area() as f64,
    ];
    f[GEOMETRY_BLOCK].copy_from_slice(&geo);

    let inside = |q: usize| pixels.binary_search(&(q as u32)).is_ok();
    let mut contrast = [0.0f64; 3];
    let mut pairs = 0usize;
    for &p in pixels {
        let p = p as usize;
        let (x, y) = (p % w, p / w);
        let mut neighbors = [None; 4];
        if x > 0 {
            neighbors[0] = Some(p - 1);
        }
        if x + 1 < w {
            neighbors[1] = Some(p + 1);
        }
        if y > 0 {
            neighbors[2] = Some(p - w);
        }
        if y + 1 < h {
            neighbors[3] = Some(p + w);
        }
        for q in neighbors.into_iter().flatten() {
            if !inside(q) {
                let (a, b) = (image.pixel_at(p), image.pixel_at(q));
                for c in 0..3 {
                    contrast[c] += (a[c] as f64 - b[c] as f64).abs();
                }
                pairs += 1;
            }
        }
    }
    if pairs > 0 {
        for c in 0..3 {
            f[CONTRAST_BLOCK.start + c] = contrast[c] / pairs as f64 / 255.0;
        }
    }
    Ok(Vector(f))
}

pub fn extract_features(image: &Image, pixels: &[u32], bbox: BBox) -> Result<FeatureVector> {
    extract_features_dim(image, pixels, bbox, FEATURE_DIM)
}

/// Descriptors for every region of a graph, in region order.
pub fn extract_all(image: &Image, graph: &RegionGraph, dim: usize) -> Result<Vec<FeatureVector>> {
    graph
        .nodes
        .iter()
        .map(|node| extract_features_dim(image, &node.pixels, node.bbox, dim))
        .collect()
}
