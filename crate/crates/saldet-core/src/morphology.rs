//! Grayscale morphology and the bottom-hat linearity map.
//!
//! Erosion and dilation slide a structuring element over the image taking
//! the neighborhood min/max; borders are handled by edge replication.
//! The linearity map |x - closing(x)| responds to thin dark structures.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{self, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeShape {
    Square,
    Disk,
}

/// Neighborhood footprint for the morphological operators. A square
/// element has side 2*radius+1; a disk keeps offsets with dx^2+dy^2 <= r^2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    pub shape: SeShape,
    pub radius: u32,
}

impl StructuringElement {
    pub fn new(shape: SeShape, radius: u32) -> Result<StructuringElement> {
        if radius < 1 {
            return Err(Error::invalid("structuring element radius must be >= 1"));
        }
        Ok(StructuringElement { shape, radius })
    }

    pub fn square(radius: u32) -> Result<StructuringElement> {
        StructuringElement::new(SeShape::Square, radius)
    }

    pub fn disk(radius: u32) -> Result<StructuringElement> {
        StructuringElement::new(SeShape::Disk, radius)
    }

    /// Member offsets relative to the center pixel.
    pub fn offsets(&self) -> Vec<(i64, i64)> {
        let r = self.radius as i64;
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let keep = match self.shape {
                    SeShape::Square => true,
                    SeShape::Disk => dx * dx + dy * dy <= r * r,
                };
                if keep {
                    out.push((dx, dy));
                }
            }
        }
        out
    }
}

/// Real-valued raster aligned with a source image.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl FloatMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<FloatMap> {
        if width < 1 || height < 1 {
            return Err(Error::invalid("map dimensions must be at least 1x1"));
        }
        if values.len() != width * height {
            return Err(Error::invalid(format!(
                "map has {} values, expected {}",
                values.len(),
                width * height
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("map contains non-finite value {v}")));
        }
        Ok(FloatMap {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> FloatMap {
        FloatMap {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Min-max normalize to [0,1]; a constant map normalizes to all zeros.
    pub fn normalized(&self) -> FloatMap {
        let (lo, hi) = self.min_max();
        let mut out = self.clone();
        if hi > lo {
            let scale = 1.0 / (hi - lo);
            for v in &mut out.values {
                *v = (*v - lo) * scale;
            }
        } else {
            out.values.fill(0.0);
        }
        out
    }

    /// 8-bit visualization: min-max normalized to [0,255] (lossy).
    pub fn to_image(&self) -> Image {
        let (lo, hi) = self.min_max();
        let px = if hi > lo {
            let scale = 255.0 / (hi - lo);
            self.values
                .iter()
                .map(|v| ((v - lo) * scale).round() as u8)
                .collect()
        } else {
            vec![0u8; self.values.len()]
        };
        Image::new(self.width, self.height, 1, px).expect("same dimensions")
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        imgio::save_image(&self.to_image(), path)
    }

    /// Exact persistence: u32le width, u32le height, then row-major f32le
    /// values.
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 + self.values.len() * 8);
        bytes.extend_from_slice(&(self.width as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.height as u32).to_le_bytes());
        for &v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        imgio::write_atomic(path, &bytes)
    }

    pub fn load_raw(path: &Path) -> Result<FloatMap> {
        let data = std::fs::read(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let ferr = |offset: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset,
            msg,
        };
        if data.len() < 8 {
            return Err(ferr(0, "missing 8-byte header".into()));
        }
        let width = u32::from_le_bytes(data[0..4].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
        if width < 1 || height < 1 {
            return Err(ferr(0, format!("bad dimensions {width}x{height}")));
        }
        let expect = 8 + width * height * 8;
        if data.len() != expect {
            return Err(ferr(
                data.len().min(expect),
                format!("payload has {} bytes, expected {expect}", data.len()),
            ));
        }
        let mut values = Vec::with_capacity(width * height);
        for (i, chunk) in data[8..].chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(ferr(8 + i * 8, format!("non-finite value {v}")));
            }
            values.push(v);
        }
        FloatMap::new(width, height, values)
    }
}

pub(crate) fn require_grayscale(img: &Image) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::invalid(format!(
            "morphology needs a single-channel image, got {} channels",
            img.channels()
        )));
    }
    Ok(())
}

/// Separable square min/max: a horizontal then a vertical 1-D pass, both
/// with clamped (edge-replicated) indices.
fn square_pass(img: &Image, radius: i64, take_max: bool) -> Image {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let src = img.pixels();
    let mut tmp = vec![0u8; src.len()];
    for y in 0..h {
        let row = &src[(y * w) as usize..((y + 1) * w) as usize];
        for x in 0..w {
            let mut best = row[x.clamp(0, w - 1) as usize];
            for dx in -radius..=radius {
                let v = row[(x + dx).clamp(0, w - 1) as usize];
                best = if take_max { best.max(v) } else { best.min(v) };
            }
            tmp[(y * w + x) as usize] = best;
        }
    }
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut best = tmp[(y.clamp(0, h - 1) * w + x) as usize];
            for dy in -radius..=radius {
                let v = tmp[((y + dy).clamp(0, h - 1) * w + x) as usize];
                best = if take_max { best.max(v) } else { best.min(v) };
            }
            out[(y * w + x) as usize] = best;
        }
    }
    Image::new(img.width(), img.height(), 1, out).expect("same dimensions")
}

fn disk_pass(img: &Image, se: &StructuringElement, take_max: bool) -> Image {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let src = img.pixels();
    let offs = se.offsets();
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut best = if take_max { 0u8 } else { 255u8 };
            for &(dx, dy) in &offs {
                let sx = (x + dx).clamp(0, w - 1);
                let sy = (y + dy).clamp(0, h - 1);
                let v = src[(sy * w + sx) as usize];
                best = if take_max { best.max(v) } else { best.min(v) };
            }
            out[(y * w + x) as usize] = best;
        }
    }
    Image::new(img.width(), img.height(), 1, out).expect("same dimensions")
}

/// Neighborhood minimum under the structuring element.
pub fn erode(img: &Image, se: &StructuringElement) -> Result<Image> {
    require_grayscale(img)?;
    Ok(match se.shape {
        SeShape::Square => square_pass(img, se.radius as i64, false),
        SeShape::Disk => disk_pass(img, se, false),
    })
}

/// Neighborhood maximum under the structuring element.
pub fn dilate(img: &Image, se: &StructuringElement) -> Result<Image> {
    require_grayscale(img)?;
    Ok(match se.shape {
        SeShape::Square => square_pass(img, se.radius as i64, true),
        SeShape::Disk => disk_pass(img, se, true),
    })
}

/// Morphological closing: dilation followed by erosion. Extensive
/// (pointwise >= input) and idempotent.
pub fn closing(img: &Image, se: &StructuringElement) -> Result<Image> {
    erode(&dilate(img, se)?, se)
}

/// Bottom-hat map |x - closing(x)| as reals in [0,255]; zero exactly where
/// the image equals its closing.
pub fn linearity_map(img: &Image, se: &StructuringElement) -> Result<FloatMap> {
    require_grayscale(img)?;
    let closed = closing(img, se)?;
    let values = img
        .pixels()
        .iter()
        .zip(closed.pixels())
        .map(|(&a, &b)| (b as f64 - a as f64).abs())
        .collect();
    FloatMap::new(img.width(), img.height(), values)
}
