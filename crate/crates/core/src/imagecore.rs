//! Raster types, PPM/PGM codecs and the synthetic scene generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{contract, io_err, Error, Result};
use crate::rng::{rng_from, Rng};

/// Axis-aligned box in pixel coordinates, `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    /// Box of the single pixel `(x, y)`.
    pub fn pixel(x: u32, y: u32) -> Self {
        BBox::new(x, y, x + 1, y + 1)
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn include(&mut self, x: u32, y: u32) {
        *self = self.union(&BBox::pixel(x, y));
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w as u64 * h as u64
    }
}

/// 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return contract(format!("image dimensions must be positive, got {width}x{height}"));
        }
        if data.len() != width * height * 3 {
            return contract(format!(
                "image data length {} != {}x{}x3",
                data.len(),
                width,
                height
            ));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Image::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixel_at(&self, index: usize) -> [u8; 3] {
        let i = index * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Per-pixel instance ids, 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return contract(format!(
                "label mask {}x{} with {} labels",
                width,
                height,
                labels.len()
            ));
        }
        Ok(LabelMask { width, height, labels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Tight box of every nonzero label, indexed by `label - 1`.
    pub fn tight_boxes(&self) -> Vec<Option<BBox>> {
        let mut boxes = vec![None::<BBox>; self.max_label() as usize];
        for (i, &l) in self.labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let (x, y) = ((i % self.width) as u32, (i / self.width) as u32);
            match &mut boxes[l as usize - 1] {
                Some(b) => b.include(x, y),
                slot => *slot = Some(BBox::pixel(x, y)),
            }
        }
        boxes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtBox {
    pub id: u32,
    #[serde(flatten)]
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    pub boxes: Vec<GtBox>,
    pub mask: LabelMask,
}

impl GroundTruth {
    /// Derives one tight box per instance present in `mask`.
    pub fn from_mask(mask: LabelMask) -> Self {
        let boxes = mask
            .tight_boxes()
            .into_iter()
            .enumerate()
            .filter_map(|(i, b)| b.map(|bbox| GtBox { id: i as u32 + 1, bbox }))
            .collect();
        GroundTruth { boxes, mask }
    }

    pub fn bboxes(&self) -> Vec<BBox> {
        self.boxes.iter().map(|b| b.bbox).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct GtFile {
    boxes: Vec<GtBox>,
    mask: String,
}

/// Writes the ground truth as JSON; the mask goes to `mask_path` as PGM and
/// the JSON refers to it by file name relative to the JSON's directory.
pub fn write_ground_truth(gt: &GroundTruth, json_path: &Path, mask_path: &Path) -> Result<()> {
    write_mask(&gt.mask, mask_path)?;
    let rel = match (mask_path.parent(), json_path.parent()) {
        (Some(a), Some(b)) if a == b => mask_path.file_name().map(PathBuf::from),
        _ => None,
    }
    .unwrap_or_else(|| mask_path.to_path_buf());
    let file = GtFile {
        boxes: gt.boxes.clone(),
        mask: rel.to_string_lossy().into_owned(),
    };
    let text = serde_json::to_string(&file).expect("ground truth serializes");
    fs::write(json_path, text).map_err(io_err(json_path))
}

pub fn read_ground_truth(json_path: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(json_path).map_err(io_err(json_path))?;
    let file: GtFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: json_path.to_path_buf(),
        source,
    })?;
    let mask_path = json_path
        .parent()
        .map(|dir| dir.join(&file.mask))
        .unwrap_or_else(|| PathBuf::from(&file.mask));
    let mask = read_mask(&mask_path)?;
    Ok(GroundTruth { boxes: file.boxes, mask })
}

// ---------------------------------------------------------------------------
// PNM codecs

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Decode { offset: self.pos, message: message.into() })
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse::<usize>() {
            Ok(v) => Ok(v),
            Err(_) => Err(Error::Decode { offset: start, message: format!("{what} out of range") }),
        }
    }
}

/// Parses a binary PNM with the given magic and channel count.
fn decode_pnm<'a>(bytes: &'a [u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, &'a [u8])> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return cur.err(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space();
    let maxval_at = cur.pos;
    let maxval = cur.number("max value")?;
    if maxval != 255 {
        return Err(Error::Decode {
            offset: maxval_at,
            message: format!("unsupported max value {maxval}"),
        });
    }
    if width == 0 || height == 0 {
        return cur.err("zero image dimension");
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return cur.err("expected single whitespace before raster"),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Decode { offset: 0, message: "dimensions overflow".into() })?;
    let have = bytes.len() - cur.pos;
    if have < need {
        return Err(Error::Decode {
            offset: bytes.len(),
            message: format!("truncated data: expected {need} raster bytes, found {have}"),
        });
    }
    Ok((width, height, &bytes[cur.pos..cur.pos + need]))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (w, h, raster) = decode_pnm(bytes, b"P6", 3)?;
    Image::new(w, h, raster.to_vec())
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes)
}

pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(io_err(path))
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn write_pgm(width: usize, height: usize, gray: &[u8], path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(width, height, gray)).map_err(io_err(path))
}

/// Writes a label mask as PGM; labels must fit in one byte.
pub fn write_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    if mask.max_label() > 255 {
        return contract(format!("label {} does not fit a PGM byte", mask.max_label()));
    }
    let gray: Vec<u8> = mask.labels.iter().map(|&l| l as u8).collect();
    write_pgm(mask.width, mask.height, &gray, path)
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, raster) = decode_pnm(&bytes, b"P5", 1)?;
    LabelMask::new(w, h, raster.iter().map(|&v| v as u32).collect())
}

// ---------------------------------------------------------------------------
// Synthetic scenes

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rectangle,
    Ellipse,
    LShape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Background {
    /// Two-color checkerboard with square cells.
    Checker { cell: u32 },
    /// One base color plus per-pixel noise.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<Shape>,
    /// Object side length range as a fraction of the canvas side.
    pub min_size: f64,
    pub max_size: f64,
    /// Additive uniform noise amplitude on object pixels.
    pub noise_amplitude: u8,
    pub background: Background,
    pub background_noise: u8,
    /// Minimum Euclidean RGB distance between an object's base color and
    /// every background or earlier object color.
    pub min_color_distance: f64,
    pub occlusion_prob: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 64,
            min_objects: 2,
            max_objects: 4,
            shapes: vec![Shape::Rectangle, Shape::Ellipse, Shape::LShape],
            min_size: 0.2,
            max_size: 0.5,
            noise_amplitude: 12,
            background: Background::Checker { cell: 8 },
            background_noise: 12,
            min_color_distance: 90.0,
            occlusion_prob: 0.3,
            seed: 42,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return contract("scene canvas must be non-empty");
        }
        if self.min_objects > self.max_objects {
            return contract("object count range is empty");
        }
        if self.max_objects > 255 {
            return contract("at most 255 objects fit a PGM mask");
        }
        if self.shapes.is_empty() {
            return contract("shape palette is empty");
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return contract("object size range must satisfy 0 < min <= max <= 1");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return contract("occlusion probability outside [0, 1]");
        }
        if let Background::Checker { cell: 0 } = self.background {
            return contract("checker cell size must be positive");
        }
        Ok(())
    }

    /// Same configuration with the seed replaced; used to derive per-scene
    /// configs from one corpus seed.
    pub fn with_seed(&self, seed: u64) -> SceneConfig {
        SceneConfig { seed, ..self.clone() }
    }
}

const PLACEMENT_ATTEMPTS: usize = 100;
const MIN_VISIBLE_FRACTION: f64 = 0.005;
const COLOR_ATTEMPTS: usize = 200;

fn random_color(rng: &mut Rng) -> [u8; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn distinct_color(rng: &mut Rng, avoid: &[[u8; 3]], min_distance: f64) -> [u8; 3] {
    let mut best = random_color(rng);
    let mut best_d = avoid.iter().map(|&c| color_distance(best, c)).fold(f64::INFINITY, f64::min);
    for _ in 0..COLOR_ATTEMPTS {
        if best_d >= min_distance {
            break;
        }
        let c = random_color(rng);
        let d = avoid.iter().map(|&a| color_distance(c, a)).fold(f64::INFINITY, f64::min);
        if d > best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn shape_contains(shape: Shape, w: usize, h: usize, dx: usize, dy: usize) -> bool {
    match shape {
        Shape::Rectangle => true,
        Shape::Ellipse => {
            let rx = w as f64 / 2.0;
            let ry = h as f64 / 2.0;
            let u = (dx as f64 + 0.5 - rx) / rx;
            let v = (dy as f64 + 0.5 - ry) / ry;
            u * u + v * v <= 1.0
        }
        Shape::LShape => dx < w.div_ceil(2) || dy >= h / 2,
    }
}

fn add_noise(rng: &mut Rng, rgb: [u8; 3], amplitude: u8) -> [u8; 3] {
    if amplitude == 0 {
        return rgb;
    }
    let a = amplitude as i32;
    rgb.map(|c| (c as i32 + rng.gen_range(-a..=a)).clamp(0, 255) as u8)
}

/// Renders one synthetic scene. A pure function of `config`.
pub fn generate_scene(config: &SceneConfig) -> Result<(Image, GroundTruth)> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let mut rng = rng_from(config.seed, 0);

    let bg_a = random_color(&mut rng);
    let bg_b = match config.background {
        Background::Checker { .. } => distinct_color(&mut rng, &[bg_a], 40.0),
        Background::Noise => bg_a,
    };

    let target = rng.gen_range(config.min_objects..=config.max_objects);
    let min_visible = ((w * h) as f64 * MIN_VISIBLE_FRACTION).ceil() as usize;
    let mut labels = vec![0u32; w * h];
    let mut colors: Vec<[u8; 3]> = Vec::new();

    'objects: for _ in 0..target {
        let id = colors.len() as u32 + 1;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let shape = config.shapes[rng.gen_range(0..config.shapes.len())];
            let side = |rng: &mut Rng, extent: usize| {
                let lo = ((config.min_size * extent as f64).round() as usize).clamp(1, extent);
                let hi = ((config.max_size * extent as f64).round() as usize).clamp(lo, extent);
                rng.gen_range(lo..=hi)
            };
            let ow = side(&mut rng, w);
            let oh = side(&mut rng, h);
            let ox = rng.gen_range(0..=w - ow);
            let oy = rng.gen_range(0..=h - oh);
            let allow_overlap = rng.gen::<f64>() < config.occlusion_prob;

            let mut candidate = labels.clone();
            let mut overlaps = false;
            for dy in 0..oh {
                for dx in 0..ow {
                    if shape_contains(shape, ow, oh, dx, dy) {
                        let i = (oy + dy) * w + ox + dx;
                        overlaps |= candidate[i] != 0;
                        candidate[i] = id;
                    }
                }
            }
            if overlaps && !allow_overlap {
                continue;
            }
            let mut visible = vec![0usize; id as usize + 1];
            for &l in &candidate {
                visible[l as usize] += 1;
            }
            if visible[1..].iter().any(|&v| v < min_visible) {
                continue;
            }
            labels = candidate;
            let mut avoid = vec![bg_a, bg_b];
            avoid.extend_from_slice(&colors);
            colors.push(distinct_color(&mut rng, &avoid, config.min_color_distance));
            continue 'objects;
        }
        // Placement failed repeatedly; settle for fewer objects.
        break;
    }

    let mut image = Image::filled(w, h, bg_a)?;
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            let rgb = if l == 0 {
                let base = match config.background {
                    Background::Checker { cell } => {
                        let cell = cell as usize;
                        if (x / cell + y / cell) % 2 == 0 { bg_a } else { bg_b }
                    }
                    Background::Noise => bg_a,
                };
                add_noise(&mut rng, base, config.background_noise)
            } else {
                add_noise(&mut rng, colors[l as usize - 1], config.noise_amplitude)
            };
            image.set_pixel(x, y, rgb);
        }
    }

    let mask = LabelMask::new(w, h, labels)?;
    Ok((image, GroundTruth::from_mask(mask)))
}
