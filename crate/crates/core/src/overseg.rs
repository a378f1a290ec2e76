//! Graph-based over-segmentation (Felzenszwalb & Huttenlocher) and the
//! region adjacency graph built on top of it.

use std::collections::BTreeSet;

use crate::error::{contract, Result};
use crate::imagecore::{BBox, Image};

/// Per-pixel region ids, contiguous in `0..region_count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    pub width: usize,
    pub height: usize,
    pub region_of: Vec<u32>,
    pub region_count: usize,
}

impl Segmentation {
    /// Builds a segmentation from arbitrary labels, relabeling them to
    /// `0..n` in order of first appearance.
    pub fn from_labels(width: usize, height: usize, labels: &[u32]) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return contract("segmentation labels do not match dimensions");
        }
        let mut map = std::collections::HashMap::new();
        let region_of = labels
            .iter()
            .map(|l| {
                let next = map.len() as u32;
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Ok(Segmentation { width, height, region_of, region_count: map.len() })
    }

    /// Region id mod 256 per pixel, for eyeballing.
    pub fn debug_gray(&self) -> Vec<u8> {
        self.region_of.iter().map(|&r| (r.wrapping_mul(37) % 256) as u8).collect()
    }
}

/// `max(4, area / 500)`, the minimum component size used for small canvases.
pub fn default_min_size(area: usize) -> usize {
    (area / 500).max(4)
}

pub const DEFAULT_SIGMA: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegParams {
    pub k: f64,
    pub min_size: usize,
    pub sigma: f64,
}

struct DisjointSets {
    parent: Vec<u32>,
    size: Vec<u32>,
    internal: Vec<f64>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        DisjointSets { parent: (0..n as u32).collect(), size: vec![1; n], internal: vec![0.0; n] }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    /// Joins two roots; the merged component's internal difference becomes `weight`.
    fn join(&mut self, a: u32, b: u32, weight: f64) -> u32 {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] { (a, b) } else { (b, a) };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        self.internal[big as usize] = weight;
        big
    }
}

#[derive(Clone, Copy)]
struct Edge {
    w: f64,
    a: u32,
    b: u32,
}

fn sort_edges(edges: &mut [Edge]) {
    edges.sort_by(|p, q| p.w.total_cmp(&q.w).then(p.a.cmp(&q.a)).then(p.b.cmp(&q.b)));
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (4.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=half)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total = k[0] + 2.0 * k[1..].iter().sum::<f64>();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur per channel with replicated borders.
fn smooth(image: &Image, sigma: f64) -> Vec<[f64; 3]> {
    let (w, h) = (image.width(), image.height());
    let src: Vec<[f64; 3]> = (0..w * h).map(|i| image.pixel_at(i).map(f64::from)).collect();
    if sigma <= 0.0 {
        return src;
    }
    let kernel = gaussian_kernel(sigma);
    let pass = |input: &[[f64; 3]], horizontal: bool| -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (d, &kv) in kernel.iter().enumerate() {
                    let d = d as isize;
                    let taps: &[isize] = if d == 0 { &[0] } else { &[-d, d] };
                    for &t in taps {
                        let (sx, sy) = if horizontal {
                            ((x as isize + t).clamp(0, w as isize - 1) as usize, y)
                        } else {
                            (x, (y as isize + t).clamp(0, h as isize - 1) as usize)
                        };
                        let p = input[sy * w + sx];
                        for c in 0..3 {
                            acc[c] += kv * p[c];
                        }
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let tmp = pass(&src, true);
    pass(&tmp, false)
}

fn dist(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

/// Label 4-connected components of `labels`, numbering them by first
/// appearance in row-major order.
fn split_four_connected(width: usize, height: usize, labels: &[u32]) -> Vec<u32> {
    const UNSET: u32 = u32::MAX;
    let mut out = vec![UNSET; labels.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if out[start] != UNSET {
            continue;
        }
        out[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            let mut visit = |q: usize| {
                if out[q] == UNSET && labels[q] == labels[p] {
                    out[q] = next;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        next += 1;
    }
    out
}

/// Graph-based over-segmentation.
///
/// Pixels are joined over an 8-connected graph with Euclidean RGB weights on
/// the smoothed image; two components merge when the connecting weight does
/// not exceed `min(Int(C_i) + k/|C_i|, Int(C_j) + k/|C_j|)`. Components are
/// then split into 4-connected pieces and pieces smaller than `min_size`
/// are absorbed along their cheapest 4-adjacent boundary edge.
pub fn fh_segment(image: &Image, k: f64, min_size: usize, sigma: f64) -> Result<Segmentation> {
    if !(k > 0.0) || min_size < 1 || !(sigma >= 0.0) {
        return contract(format!("invalid segmentation parameters k={k} min_size={min_size} sigma={sigma}"));
    }
    let (w, h) = (image.width(), image.height());
    let smoothed = smooth(image, sigma);
    let idx = |x: usize, y: usize| (y * w + x) as u32;
    let edge = |a: u32, b: u32| Edge {
        w: dist(&smoothed[a as usize], &smoothed[b as usize]),
        a: a.min(b),
        b: a.max(b),
    };

    let mut edges = Vec::with_capacity(w * h * 4);
    let mut four_edges = Vec::with_capacity(w * h * 2);
    for y in 0..h {
        for x in 0..w {
            let p = idx(x, y);
            if x + 1 < w {
                four_edges.push(edge(p, idx(x + 1, y)));
            }
            if y + 1 < h {
                four_edges.push(edge(p, idx(x, y + 1)));
            }
            if x + 1 < w && y + 1 < h {
                edges.push(edge(p, idx(x + 1, y + 1)));
            }
            if x + 1 < w && y > 0 {
                edges.push(edge(p, idx(x + 1, y - 1)));
            }
        }
    }
    edges.extend_from_slice(&four_edges);
    sort_edges(&mut edges);
    sort_edges(&mut four_edges);

    let mut sets = DisjointSets::new(w * h);
    let mut threshold = vec![k; w * h];
    for e in &edges {
        let a = sets.find(e.a);
        let b = sets.find(e.b);
        if a != b && e.w <= threshold[a as usize] && e.w <= threshold[b as usize] {
            let r = sets.join(a, b, e.w);
            threshold[r as usize] = e.w + k / sets.size[r as usize] as f64;
        }
    }

    let coarse: Vec<u32> = (0..(w * h) as u32).map(|p| sets.find(p)).collect();
    let pieces = split_four_connected(w, h, &coarse);

    // Small-piece absorption runs over pieces, so it cannot reintroduce
    // diagonal-only connectivity.
    let piece_count = pieces.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut small = DisjointSets::new(piece_count);
    for &p in &pieces {
        small.size[p as usize] += 1;
    }
    small.size.iter_mut().for_each(|s| *s -= 1);
    for e in &four_edges {
        let a = small.find(pieces[e.a as usize]);
        let b = small.find(pieces[e.b as usize]);
        if a != b && (small.size[a as usize] < min_size as u32 || small.size[b as usize] < min_size as u32) {
            small.join(a, b, e.w);
        }
    }
    let merged: Vec<u32> = pieces.iter().map(|&p| small.find(p)).collect();
    Segmentation::from_labels(w, h, &merged)
}

pub fn fh_segment_with(image: &Image, params: &SegParams) -> Result<Segmentation> {
    fh_segment(image, params.k, params.min_size, params.sigma)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionNode {
    pub pixel_count: usize,
    pub bbox: BBox,
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionGraph {
    pub width: usize,
    pub height: usize,
    pub nodes: Vec<RegionNode>,
    /// Unordered pairs stored as `(min, max)`.
    pub edges: BTreeSet<(u32, u32)>,
}

impl RegionGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn neighbors(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        adj
    }

    /// A graph over abstract regions, for tests and toy problems: every
    /// region is a single pixel laid out on one row.
    pub fn from_edges(region_count: usize, edges: &[(u32, u32)]) -> Self {
        let nodes = (0..region_count as u32)
            .map(|i| RegionNode { pixel_count: 1, bbox: BBox::pixel(i, 0), pixels: vec![i] })
            .collect();
        let edges = edges
            .iter()
            .filter(|(a, b)| a != b)
            .map(|&(a, b)| (a.min(b), a.max(b)))
            .collect();
        RegionGraph { width: region_count.max(1), height: 1, nodes, edges }
    }
}

/// Region adjacency under 4-connectivity plus per-region statistics.
pub fn build_region_graph(seg: &Segmentation) -> RegionGraph {
    let (w, h) = (seg.width, seg.height);
    let mut nodes: Vec<RegionNode> = (0..seg.region_count)
        .map(|_| RegionNode { pixel_count: 0, bbox: BBox::new(u32::MAX, u32::MAX, 0, 0), pixels: Vec::new() })
        .collect();
    let mut edges = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let r = seg.region_of[p];
            let node = &mut nodes[r as usize];
            node.pixel_count += 1;
            node.pixels.push(p as u32);
            node.bbox = if node.pixel_count == 1 {
                BBox::pixel(x as u32, y as u32)
            } else {
                node.bbox.union(&BBox::pixel(x as u32, y as u32))
            };
            let mut link = |q: usize| {
                let s = seg.region_of[q];
                if s != r {
                    edges.insert((r.min(s), r.max(s)));
                }
            };
            if x + 1 < w {
                link(p + 1);
            }
            if y + 1 < h {
                link(p + w);
            }
        }
    }
    RegionGraph { width: w, height: h, nodes, edges }
}
