//! Image container and the geometry helpers shared by scenes, grounding and rendering.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SIDE: u32 = 16;

/// An RGB8 image with a stable identifier.
///
/// The identifier survives masking and rendering so that fixture-driven backends
/// can resolve which scene a derived image came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    id: String,
    pixels: RgbImage,
}

impl Image {
    pub fn new(id: impl Into<String>, pixels: RgbImage) -> Result<Self> {
        let (w, h) = pixels.dimensions();
        if w < MIN_SIDE || h < MIN_SIDE {
            return Err(Error::invalid(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {w}x{h}"
            )));
        }
        Ok(Self {
            id: id.into(),
            pixels,
        })
    }

    pub fn filled(id: impl Into<String>, width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        Self::new(id, RgbImage::from_pixel(width, height, Rgb(rgb)))
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let pixels = image::open(path)?.to_rgb8();
        Self::new(id, pixels)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    /// `(height, width)`, the shape of every per-pixel array derived from this image.
    pub fn shape(&self) -> (usize, usize) {
        (self.height() as usize, self.width() as usize)
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut RgbImage {
        &mut self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels.get_pixel(x, y).0
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        self.pixels.put_pixel(x, y, Rgb(rgb));
    }

    /// Same pixels under a new id.
    pub fn with_id(&self, id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            pixels: self.pixels.clone(),
        }
    }

    pub fn mean_color(&self) -> [u8; 3] {
        let mut acc = [0u64; 3];
        for p in self.pixels.pixels() {
            for (a, &v) in acc.iter_mut().zip(&p.0) {
                *a += u64::from(v);
            }
        }
        let n = u64::from(self.width()) * u64::from(self.height());
        acc.map(|s| ((s as f64 / n as f64).round()) as u8)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.pixels.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let pixels = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        Self::new(id, pixels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.pixels.save(path.as_ref())?;
        Ok(())
    }
}

/// Axis-aligned rectangle in normalized `[0,1]` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct NormBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl NormBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if !(inside(x0) && inside(y0) && inside(x1) && inside(y1)) {
            return Err(Error::invalid(format!(
                "box [{x0}, {y0}, {x1}, {y1}] leaves the unit square"
            )));
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid(format!(
                "box [{x0}, {y0}, {x1}, {y1}] is empty"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    /// Pixel footprint on a `width`×`height` raster, half-open, never empty.
    pub fn to_pixels(&self, width: u32, height: u32) -> PixelRect {
        let snap = |v: f64, n: u32| ((v * f64::from(n)).round() as u32).min(n);
        let mut x0 = snap(self.x0, width);
        let mut y0 = snap(self.y0, height);
        let mut x1 = snap(self.x1, width);
        let mut y1 = snap(self.y1, height);
        if x1 <= x0 {
            x0 = x0.min(width - 1);
            x1 = x0 + 1;
        }
        if y1 <= y0 {
            y0 = y0.min(height - 1);
            y1 = y0 + 1;
        }
        PixelRect { x0, y0, x1, y1 }
    }
}

impl TryFrom<[f64; 4]> for NormBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        NormBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<NormBox> for [f64; 4] {
    fn from(b: NormBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> u64 {
        u64::from(self.x1 - self.x0) * u64::from(self.y1 - self.y0)
    }

    /// Euclidean distance from pixel `(x, y)` to the nearest pixel of the rectangle.
    pub fn distance(&self, x: u32, y: u32) -> f64 {
        let gap = |v: u32, lo: u32, hi: u32| -> f64 {
            if v < lo {
                f64::from(lo - v)
            } else if v >= hi {
                f64::from(v + 1 - hi)
            } else {
                0.0
            }
        };
        gap(x, self.x0, self.x1).hypot(gap(y, self.y0, self.y1))
    }

    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| (x, y)))
    }
}

/// Row-major boolean mask over an image raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bitmask {
    pub width: u32,
    pub height: u32,
    bits: Vec<bool>,
}

impl Bitmask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "bitmask of {} bits does not match {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_rect(width: u32, height: u32, rect: PixelRect) -> Self {
        let mut m = Self::empty(width, height);
        for (x, y) in rect.pixels() {
            m.set(x, y, true);
        }
        m
    }

    fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[self.idx(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let i = self.idx(x, y);
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn union_with(&mut self, other: &Bitmask) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    /// Pixels of the mask lying within `width` px (Chebyshev) of a pixel outside it.
    /// Pixels beyond the raster edge count as outside.
    pub fn inner_band(&self, width: u32) -> Bitmask {
        let (w, h) = (self.width as i64, self.height as i64);
        let reach = i64::from(width.max(1)) - 1;
        // distance-to-outside via two-pass chessboard transform
        let inf = i64::MAX / 4;
        let mut dist = vec![inf; self.bits.len()];
        let at = |x: i64, y: i64| (y * w + x) as usize;
        for y in 0..h {
            for x in 0..w {
                if !self.bits[at(x, y)] {
                    dist[at(x, y)] = -1;
                    continue;
                }
                let mut d = x.min(y).min(w - 1 - x).min(h - 1 - y);
                for (dx, dy) in [(-1, 0), (0, -1), (-1, -1), (1, -1)] {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w {
                        d = d.min(dist[at(nx, ny)] + 1);
                    }
                }
                dist[at(x, y)] = d;
            }
        }
        for y in (0..h).rev() {
            for x in (0..w).rev() {
                if dist[at(x, y)] < 0 {
                    continue;
                }
                let mut d = dist[at(x, y)];
                for (dx, dy) in [(1, 0), (0, 1), (1, 1), (-1, 1)] {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny < h && nx < w {
                        d = d.min(dist[at(nx, ny)] + 1);
                    }
                }
                dist[at(x, y)] = d;
            }
        }
        let bits = dist.iter().map(|&d| d >= 0 && d <= reach).collect();
        Bitmask {
            width: self.width,
            height: self.height,
            bits,
        }
    }
}
