//! Grayscale radiograph preprocessing and the frozen-embedding file format.
//!
//! Preprocessing runs global histogram equalization, resizes so the short
//! side equals the target, then crops a square (random offset plus a random
//! in-plane rotation for training, centered for evaluation).
//!
//! Embedding file layout, all integers little-endian:
//!
//! ```text
//! b"ARFEMB1\0"  u32 record count  u32 width e
//! per record:   u16 id length  id bytes (UTF-8)  e x f32
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"ARFEMB1\0";
pub const DEFAULT_EMBEDDING_WIDTH: usize = 1024;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image {width}x{height} is smaller than the {target}x{target} crop")]
    TooSmall { width: usize, height: usize, target: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidImage("zero-sized image".into()));
        }
        if width.checked_mul(height) != Some(pixels.len()) {
            return Err(ImagingError::InvalidImage(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width.saturating_mul(height),
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels).expect("dimensions match")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Decodes a binary PGM (P5) with maxval 255.
pub fn decode_pgm(data: &[u8]) -> Result<GrayImage, ImagingError> {
    let fmt = |m: &str| ImagingError::Format(m.to_string());
    if data.len() < 2 || &data[..2] != b"P5" {
        return Err(fmt("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match data.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while data.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(fmt("truncated header")),
            }
        }
        let start = pos;
        while data.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(fmt("bad header number"));
        }
        *field = std::str::from_utf8(&data[start..pos]).unwrap().parse().map_err(|_| fmt("bad header number"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(ImagingError::Format(format!("maxval must be 255, got {maxval}")));
    }
    if !data.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fmt("missing whitespace after header"));
    }
    pos += 1;
    let n = width.checked_mul(height).ok_or_else(|| fmt("dimensions overflow"))?;
    let body = data.get(pos..).filter(|b| b.len() >= n).ok_or_else(|| fmt("truncated pixel data"))?;
    GrayImage::new(width, height, body[..n].to_vec())
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, ImagingError> {
    decode_pgm(&std::fs::read(path)?)
}

/// Global histogram equalization over the 256-bin intensity histogram.
pub fn histogram_equalize(img: &GrayImage) -> GrayImage {
    let mut hist = [0usize; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        acc += h;
        *c = acc;
    }
    let n = img.pixels.len();
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    let denom = (n - cdf_min) as f64;
    let lut: Vec<u8> = cdf
        .iter()
        .map(|&c| {
            if denom == 0.0 {
                0
            } else {
                ((c.saturating_sub(cdf_min)) as f64 / denom * 255.0).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    GrayImage { width: img.width, height: img.height, pixels: img.pixels.iter().map(|&p| lut[p as usize]).collect() }
}

/// `round(a * b / c)` with halves rounded up, in integers.
fn round_ratio(a: usize, b: usize, c: usize) -> usize {
    (2 * a * b + c) / (2 * c)
}

/// Output dimensions when the short side is scaled to `target`.
pub fn short_side_dims(width: usize, height: usize, target: usize) -> (usize, usize) {
    if width <= height {
        (target, round_ratio(target, height, width).max(1))
    } else {
        (round_ratio(target, width, height).max(1), target)
    }
}

fn bilinear_clamped(img: &GrayImage, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |xx, yy| img.get(xx, yy) as f64;
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize preserving aspect ratio so that `min(w, h) == target`.
pub fn resize_short_side(img: &GrayImage, target: usize) -> GrayImage {
    assert!(target >= 1, "resize target must be positive");
    let (nw, nh) = short_side_dims(img.width, img.height, target);
    if (nw, nh) == (img.width, img.height) {
        return img.clone();
    }
    let sx = img.width as f64 / nw as f64;
    let sy = img.height as f64 / nh as f64;
    GrayImage::from_fn(nw, nh, |x, y| {
        let v = bilinear_clamped(img, (x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5);
        v.round().clamp(0.0, 255.0) as u8
    })
}

pub fn crop(img: &GrayImage, x0: usize, y0: usize, side: usize) -> Result<GrayImage, ImagingError> {
    if x0 + side > img.width || y0 + side > img.height {
        return Err(ImagingError::TooSmall { width: img.width, height: img.height, target: side });
    }
    Ok(GrayImage::from_fn(side, side, |x, y| img.get(x0 + x, y0 + y)))
}

/// Rotates about the image center by `degrees` with bilinear sampling;
/// samples falling outside the source read as 0.
pub fn rotate(img: &GrayImage, degrees: f64) -> GrayImage {
    if degrees == 0.0 {
        return img.clone();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let px = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= img.width as i64 || y >= img.height as i64 {
            0.0
        } else {
            img.get(x as usize, y as usize) as f64
        }
    };
    GrayImage::from_fn(img.width, img.height, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let xs = c * dx + s * dy + cx;
        let ys = -s * dx + c * dy + cy;
        let (x0, y0) = (xs.floor(), ys.floor());
        let (fx, fy) = (xs - x0, ys - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
        let bottom = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
        (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CropMode {
    RandomTrain,
    CenterEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageConfig {
    pub target_side: usize,
    pub max_rotation_deg: f64,
    pub crop_mode: CropMode,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self { target_side: 512, max_rotation_deg: 15.0, crop_mode: CropMode::CenterEval }
    }
}

/// Square crop at a fixed offset followed by a rotation of `degrees`.
pub fn crop_rotate_at(img: &GrayImage, side: usize, x0: usize, y0: usize, degrees: f64) -> Result<GrayImage, ImagingError> {
    Ok(rotate(&crop(img, x0, y0, side)?, degrees))
}

pub fn crop_and_rotate<R: Rng + ?Sized>(img: &GrayImage, cfg: &ImageConfig, rng: &mut R) -> Result<GrayImage, ImagingError> {
    let t = cfg.target_side;
    if img.width < t || img.height < t {
        return Err(ImagingError::TooSmall { width: img.width, height: img.height, target: t });
    }
    match cfg.crop_mode {
        CropMode::CenterEval => crop(img, (img.width - t) / 2, (img.height - t) / 2, t),
        CropMode::RandomTrain => {
            let x0 = rng.gen_range(0..=img.width - t);
            let y0 = rng.gen_range(0..=img.height - t);
            let angle = if cfg.max_rotation_deg > 0.0 {
                rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
            } else {
                0.0
            };
            crop_rotate_at(img, t, x0, y0, angle)
        }
    }
}

/// Equalize, resize, crop (and rotate when training).
pub fn preprocess<R: Rng + ?Sized>(img: &GrayImage, cfg: &ImageConfig, rng: &mut R) -> Result<GrayImage, ImagingError> {
    let eq = histogram_equalize(img);
    let resized = resize_short_side(&eq, cfg.target_side);
    crop_and_rotate(&resized, cfg, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub study_image_id: String,
    pub vector: Vec<f64>,
}

/// Image id to embedding, all of one width. Iterates in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    width: usize,
    map: BTreeMap<String, ImageEmbedding>,
}

impl EmbeddingSet {
    pub fn new(width: usize) -> Self {
        Self { width, map: BTreeMap::new() }
    }

    pub fn from_records(records: Vec<ImageEmbedding>) -> Result<Self, ImagingError> {
        let width = records.first().map_or(0, |r| r.vector.len());
        let mut set = Self::new(width);
        for r in records {
            set.insert(r)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, emb: ImageEmbedding) -> Result<(), ImagingError> {
        if emb.vector.len() != self.width {
            return Err(ImagingError::Format(format!(
                "embedding `{}` has width {}, expected {}",
                emb.study_image_id,
                emb.vector.len(),
                self.width
            )));
        }
        if emb.vector.iter().any(|v| !v.is_finite()) {
            return Err(ImagingError::Format(format!("embedding `{}` has non-finite entries", emb.study_image_id)));
        }
        if self.map.contains_key(&emb.study_image_id) {
            return Err(ImagingError::Format(format!("duplicate embedding id `{}`", emb.study_image_id)));
        }
        self.map.insert(emb.study_image_id.clone(), emb);
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageEmbedding> {
        self.map.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageEmbedding> {
        self.map.values()
    }

    pub fn encode(&self) -> Result<Vec<u8>, ImagingError> {
        let count = u32::try_from(self.map.len()).map_err(|_| ImagingError::Format("too many records".into()))?;
        let width = u32::try_from(self.width).map_err(|_| ImagingError::Format("width too large".into()))?;
        let mut out = Vec::with_capacity(16 + self.map.len() * (2 + 16 + 4 * self.width));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&width.to_le_bytes());
        for emb in self.map.values() {
            let id = emb.study_image_id.as_bytes();
            let len = u16::try_from(id.len())
                .map_err(|_| ImagingError::Format(format!("id `{}` longer than 65535 bytes", emb.study_image_id)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id);
            for &v in &emb.vector {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(data: &[u8]) -> Result<Self, ImagingError> {
        let mut cur = Cursor { data, pos: 0 };
        if cur.take(8)? != EMBEDDING_MAGIC {
            return Err(ImagingError::Format("bad magic".into()));
        }
        let count = cur.u32()? as usize;
        let width = cur.u32()? as usize;
        if count > 0 && width == 0 {
            return Err(ImagingError::Format("zero-width embeddings".into()));
        }
        let mut set = Self::new(width);
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let id = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| ImagingError::Format("id is not UTF-8".into()))?
                .to_string();
            let raw = cur.take(width.checked_mul(4).ok_or_else(|| ImagingError::Format("width overflow".into()))?)?;
            let vector = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
            set.insert(ImageEmbedding { study_image_id: id, vector })?;
        }
        if cur.pos != data.len() {
            return Err(ImagingError::Format(format!("{} trailing bytes", data.len() - cur.pos)));
        }
        Ok(set)
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ImagingError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            ImagingError::Format(format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ImagingError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, ImagingError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet, ImagingError> {
    EmbeddingSet::decode(&std::fs::read(path)?)
}

/// Deterministic stand-in for the frozen backbone: mean intensities of a
/// `g x g` grid (`g = ceil(sqrt(e))`, row-major), first `e` cells, scaled to
/// `[0, 1]`.
pub fn stub_extract(id: &str, img: &GrayImage, e: usize) -> ImageEmbedding {
    let mut g = 1;
    while g * g < e {
        g += 1;
    }
    let span = |i: usize, n: usize| {
        let lo = i * n / g;
        (lo, ((i + 1) * n / g).max(lo + 1))
    };
    let mut vector = Vec::with_capacity(e);
    'outer: for row in 0..g {
        let (y0, y1) = span(row, img.height);
        for col in 0..g {
            if vector.len() == e {
                break 'outer;
            }
            let (x0, x1) = span(col, img.width);
            let mut sum = 0u64;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += img.get(x, y) as u64;
                }
            }
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            vector.push(sum as f64 / count / 255.0);
        }
    }
    ImageEmbedding { study_image_id: id.to_string(), vector }
}
