//! Evidence boxes, their canonical string form, and the crop operator.
//!
//! Boxes use half-open integer pixel coordinates: a box `[x1,y1,x2,y2]`
//! covers columns `x1..x2` and rows `y1..y2`. The only accepted wire form is
//! the compact JSON object `{"bbox":[x1,y1,x2,y2]}`.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::tokenizer;
use crate::error::{Error, Result};

/// Default padded token length of a serialized box.
pub const BOX_PAD_LEN: usize = 32;

/// Largest accepted image side. Keeps every in-bounds box string within
/// [`BOX_PAD_LEN`] characters.
pub const MAX_IMAGE_SIDE: u32 = 9999;

pub const WHITE: [u8; 3] = [255, 255, 255];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[u32; 4]", try_from = "[u32; 4]")]
pub struct BoundingBox {
    x1: u32,
    y1: u32,
    x2: u32,
    y2: u32,
}

impl BoundingBox {
    /// Builds a non-degenerate box (`x1 < x2`, `y1 < y2`).
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::DegenerateBox(b, x2, y2));
        }
        Ok(b)
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self { x1: 0, y1: 0, x2: width, y2: height }
    }

    pub fn x1(&self) -> u32 {
        self.x1
    }
    pub fn y1(&self) -> u32 {
        self.y1
    }
    pub fn x2(&self) -> u32 {
        self.x2
    }
    pub fn y2(&self) -> u32 {
        self.y2
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x1..self.x2).contains(&x) && (self.y1..self.y2).contains(&y)
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.x2 <= width && self.y2 <= height
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[u32; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [u32; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Clips raw coordinates into `[0,W]x[0,H]` and repairs degenerate spans.
///
/// Returns the box and whether any coordinate changed.
pub fn clip_and_repair(raw: [i64; 4], width: u32, height: u32) -> (BoundingBox, bool) {
    let (x1, x2) = repair_span(raw[0], raw[2], width);
    let (y1, y2) = repair_span(raw[1], raw[3], height);
    let b = BoundingBox { x1, y1, x2, y2 };
    let changed = [i64::from(x1), i64::from(y1), i64::from(x2), i64::from(y2)] != raw;
    (b, changed)
}

fn repair_span(lo: i64, hi: i64, limit: u32) -> (u32, u32) {
    let clamp = |v: i64| v.clamp(0, i64::from(limit)) as u32;
    let (mut lo, mut hi) = (clamp(lo), clamp(hi));
    if hi <= lo {
        hi = (lo + 1).min(limit);
        if hi <= lo {
            lo = hi - 1;
        }
    }
    (lo, hi)
}

/// Canonical serialized box together with its reference tokenization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxString {
    pub text: String,
    pub token_ids: Vec<u32>,
}

impl BoxString {
    /// Re-pads the tokenization to a different length.
    pub fn with_pad_len(&self, pad_len: usize) -> Result<Self> {
        Ok(Self { text: self.text.clone(), token_ids: tokenizer::encode_box_text(&self.text, pad_len)? })
    }
}

fn canonical_text(b: &BoundingBox) -> String {
    format!("{{\"bbox\":[{},{},{},{}]}}", b.x1, b.y1, b.x2, b.y2)
}

/// Serializes a box as `{"bbox":[x1,y1,x2,y2]}` padded to [`BOX_PAD_LEN`]
/// tokens. Coordinates above [`MAX_IMAGE_SIDE`] cannot be produced by an
/// in-bounds box and are not supported.
pub fn serialize_box(b: &BoundingBox) -> BoxString {
    let text = canonical_text(b);
    let token_ids = tokenizer::encode_box_text(&text, BOX_PAD_LEN)
        .expect("boxes within MAX_IMAGE_SIDE always fit the padded length");
    BoxString { text, token_ids }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseFlag {
    /// Well formed and already inside the image.
    Parsed,
    /// Well formed but clipped or repaired.
    Repaired,
    /// Malformed; replaced by the full-image box.
    Fallback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedBox {
    pub bbox: BoundingBox,
    pub flag: ParseFlag,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    bbox: [i64; 4],
}

/// Parses model output into an in-bounds box. Never fails: malformed text
/// yields the full-image box flagged [`ParseFlag::Fallback`].
pub fn parse_box_string(text: &str, width: u32, height: u32) -> ParsedBox {
    match serde_json::from_str::<RawBox>(text) {
        Ok(raw) => {
            let (bbox, changed) = clip_and_repair(raw.bbox, width, height);
            let flag = if changed { ParseFlag::Repaired } else { ParseFlag::Parsed };
            ParsedBox { bbox, flag }
        }
        Err(_) => ParsedBox { bbox: BoundingBox::full(width, height), flag: ParseFlag::Fallback },
    }
}

/// An 8-bit RGB image stored row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || width > MAX_IMAGE_SIDE || height > MAX_IMAGE_SIDE {
            return Err(Error::InvalidDimensions(format!(
                "image sides must be in 1..={MAX_IMAGE_SIDE}, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::InvalidDimensions(format!(
                "{width}x{height} RGB image needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self::new(width, height, data)
    }

    /// Deterministic pseudo-random image used by fixtures and tests.
    pub fn synthetic(seed: u64, width: u32, height: u32) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..width as usize * height as usize * 3).map(|_| rng.random::<u8>()).collect();
        Self::new(width, height, data)
    }

    /// Decodes a PNG or JPEG file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w, h, rgb.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length checked at construction");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Hex SHA-256 over the dimensions and pixel bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.data);
        hex::encode(h.finalize())
    }
}

/// Keeps the pixels inside `b` in place and paints everything else white.
pub fn whiten_outside(image: &Image, b: &BoundingBox) -> Result<Image> {
    if !b.fits(image.width, image.height) {
        return Err(Error::DegenerateBox(*b, image.width, image.height));
    }
    let w = image.width as usize;
    let mut data = WHITE.repeat(image.data.len() / 3);
    for y in b.y1 as usize..b.y2 as usize {
        let row = y * w * 3;
        let (s, e) = (row + b.x1 as usize * 3, row + b.x2 as usize * 3);
        data[s..e].copy_from_slice(&image.data[s..e]);
    }
    Ok(Image { width: image.width, height: image.height, data })
}

/// Nearest-neighbour resize sampling source pixel `floor((x + 0.5) * W / W')`.
pub fn resize_nearest(image: &Image, width: u32, height: u32) -> Result<Image> {
    if (width, height) == image.size() {
        return Ok(image.clone());
    }
    let mut data = Vec::with_capacity(width as usize * height as usize * 3);
    let src_index = |dst: u32, dst_len: u32, src_len: u32| {
        let s = (2 * u64::from(dst) + 1) * u64::from(src_len) / (2 * u64::from(dst_len));
        s.min(u64::from(src_len) - 1) as u32
    };
    for y in 0..height {
        let sy = src_index(y, height, image.height);
        for x in 0..width {
            let sx = src_index(x, width, image.width);
            data.extend_from_slice(&image.pixel(sx, sy));
        }
    }
    Image::new(width, height, data)
}

/// The evidence crop: whiten outside `b` on the original-size canvas, then
/// resize to `target`. `b` must already be clipped and non-degenerate.
pub fn crop_and_pad(image: &Image, b: &BoundingBox, target: (u32, u32)) -> Result<Image> {
    let padded = whiten_outside(image, b)?;
    resize_nearest(&padded, target.0, target.1)
}
