//! Boxes, binary object masks, crop/scale/flip transforms and objectness.
//!
//! Coordinates are in pixels with the origin at the top-left corner. Pixel
//! `(i, j)` covers the cell `[i, i+1) x [j, j+1)`; a box covers pixel `(i, j)`
//! when the pixel centre lies inside the half-open box. Resampling is
//! nearest-neighbour on pixel centres so masks stay binary and grid-aligned
//! transforms are exact.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite box [{x}, {y}, {w}, {h}]"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid(format!(
                "box must have positive extent, got {w}x{h}"
            )));
        }
        Ok(BoundingBox { x, y, w, h })
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Overlap with positive area, if any.
    pub fn intersect(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 > x0 && y1 > y0 {
            Some(BoundingBox {
                x: x0,
                y: y0,
                w: x1 - x0,
                h: y1 - y0,
            })
        } else {
            None
        }
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        self.intersect(other).map_or(0.0, |b| b.area())
    }

    pub fn clamp_to(&self, frame: ImageFrame) -> Option<BoundingBox> {
        self.intersect(&frame.as_box())
    }

    /// `[x, y, w, h]`, the annotation-file order.
    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFrame {
    pub width: u32,
    pub height: u32,
}

impl ImageFrame {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("degenerate frame {width}x{height}")));
        }
        Ok(ImageFrame { width, height })
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }

    pub fn as_box(&self) -> BoundingBox {
        BoundingBox {
            x: 0.0,
            y: 0.0,
            w: self.width as f64,
            h: self.height as f64,
        }
    }
}

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "raster data has {} values, expected {width}x{height}",
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Raster {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn frame(&self) -> Result<ImageFrame> {
        ImageFrame::new(self.width as u32, self.height as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl ObjectMask {
    pub fn empty(width: usize, height: usize) -> Self {
        ObjectMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::invalid(format!(
                "mask has {} bits, expected {width}x{height}",
                bits.len()
            )));
        }
        Ok(ObjectMask {
            width,
            height,
            bits,
        })
    }

    /// Rasterise a box: a pixel is set when its centre lies inside the box.
    pub fn from_box(bbox: &BoundingBox, frame: ImageFrame) -> Self {
        let (w, h) = (frame.width as usize, frame.height as usize);
        let mut mask = ObjectMask::empty(w, h);
        let cols = covered_range(bbox.x, bbox.right(), w);
        let rows = covered_range(bbox.y, bbox.bottom(), h);
        for y in rows {
            for x in cols.clone() {
                mask.bits[y * w + x] = true;
            }
        }
        mask
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Smallest box containing every set pixel.
    pub fn tight_box(&self) -> Option<BoundingBox> {
        let mut x0 = usize::MAX;
        let mut y0 = usize::MAX;
        let mut x1 = 0;
        let mut y1 = 0;
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        any.then(|| BoundingBox {
            x: x0 as f64,
            y: y0 as f64,
            w: (x1 - x0) as f64,
            h: (y1 - y0) as f64,
        })
    }

    /// Pixelwise OR, used when a class has several annotated instances.
    pub fn union(&self, other: &ObjectMask) -> Result<ObjectMask> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::invalid(format!(
                "mask size mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a || b)
            .collect();
        Ok(ObjectMask {
            width: self.width,
            height: self.height,
            bits,
        })
    }
}

/// Pixel indices in `0..len` whose centres fall in `[lo, hi)`.
fn covered_range(lo: f64, hi: f64, len: usize) -> std::ops::Range<usize> {
    let start = (lo - 0.5).ceil().max(0.0);
    let end = (hi - 0.5).ceil().max(0.0);
    let start = (start as usize).min(len);
    let end = (end as usize).min(len);
    start..end.max(start)
}

/// A crop window in source coordinates, resampled to `output_size` and
/// optionally mirrored left-right. Applied identically to images and masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentTransform {
    pub crop: BoundingBox,
    pub output_size: (u32, u32),
    pub hflip: bool,
}

impl AugmentTransform {
    pub fn new(crop: BoundingBox, output_size: (u32, u32), hflip: bool) -> Result<Self> {
        if output_size.0 == 0 || output_size.1 == 0 {
            return Err(Error::invalid(format!(
                "output size must be positive, got {}x{}",
                output_size.0, output_size.1
            )));
        }
        Ok(AugmentTransform {
            crop,
            output_size,
            hflip,
        })
    }

    pub fn identity(frame: ImageFrame) -> Self {
        AugmentTransform {
            crop: frame.as_box(),
            output_size: (frame.width, frame.height),
            hflip: false,
        }
    }

    /// Centred crop keeping `side_fraction` of each side.
    pub fn center(frame: ImageFrame, side_fraction: f64, output_size: (u32, u32)) -> Result<Self> {
        if !(side_fraction > 0.0 && side_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "center crop fraction {side_fraction} outside (0, 1]"
            )));
        }
        let cw = (frame.width as f64 * side_fraction).round().max(1.0);
        let ch = (frame.height as f64 * side_fraction).round().max(1.0);
        let x = ((frame.width as f64 - cw) / 2.0).floor();
        let y = ((frame.height as f64 - ch) / 2.0).floor();
        AugmentTransform::new(BoundingBox::new(x, y, cw, ch)?, output_size, false)
    }

    /// Resample a row-major grid through this transform. Output pixels whose
    /// crop is empty after clamping are `fill`.
    pub fn resample<T: Copy>(&self, src: &[T], width: usize, height: usize, fill: T) -> Vec<T> {
        let (ow, oh) = (self.output_size.0 as usize, self.output_size.1 as usize);
        let frame = BoundingBox {
            x: 0.0,
            y: 0.0,
            w: width as f64,
            h: height as f64,
        };
        let Some(crop) = self.crop.intersect(&frame) else {
            return vec![fill; ow * oh];
        };
        let sx = sample_positions(crop.x, crop.w, ow, width);
        let sy = sample_positions(crop.y, crop.h, oh, height);
        let mut out = Vec::with_capacity(ow * oh);
        for &row in &sy {
            let base = row * width;
            if self.hflip {
                out.extend(sx.iter().rev().map(|&col| src[base + col]));
            } else {
                out.extend(sx.iter().map(|&col| src[base + col]));
            }
        }
        out
    }

    pub fn apply_raster(&self, image: &Raster) -> Raster {
        let data = self.resample(&image.data, image.width, image.height, 0.0);
        Raster {
            width: self.output_size.0 as usize,
            height: self.output_size.1 as usize,
            data,
        }
    }
}

/// Source index sampled by each of `n` output pixels over `[start, start+len)`.
fn sample_positions(start: f64, len: f64, n: usize, limit: usize) -> Vec<usize> {
    let step = len / n as f64;
    (0..n)
        .map(|i| {
            let s = (start + (i as f64 + 0.5) * step).floor();
            (s.max(0.0) as usize).min(limit - 1)
        })
        .collect()
}

/// Fraction of the frame covered by the box after clamping: `wh / WH`.
/// The smoothing factor is one minus this value.
pub fn objectness_analytic(bbox: &BoundingBox, frame: ImageFrame) -> Result<f64> {
    let frame = ImageFrame::new(frame.width, frame.height)?;
    let covered = bbox.intersection_area(&frame.as_box());
    Ok((covered / frame.area()).clamp(0.0, 1.0))
}

/// Crop, resize and flip a mask exactly as the paired image is transformed.
pub fn apply_transform(mask: &ObjectMask, t: &AugmentTransform) -> ObjectMask {
    let bits = t.resample(&mask.bits, mask.width, mask.height, false);
    ObjectMask {
        width: t.output_size.0 as usize,
        height: t.output_size.1 as usize,
        bits,
    }
}

/// Object proportion by counting set pixels.
pub fn objectness_pixels(mask: &ObjectMask) -> Result<f64> {
    let total = mask.width * mask.height;
    if total == 0 {
        return Err(Error::invalid("zero-area mask"));
    }
    Ok(mask.count() as f64 / total as f64)
}

/// Object proportion inside the crop window of `t`, computed from boxes.
/// Resizing and flipping leave the ratio unchanged, so only the clamped crop
/// matters.
pub fn transformed_objectness(
    bbox: &BoundingBox,
    frame: ImageFrame,
    t: &AugmentTransform,
) -> Result<f64> {
    let frame = ImageFrame::new(frame.width, frame.height)?;
    let crop = t
        .crop
        .clamp_to(frame)
        .ok_or_else(|| Error::invalid("crop does not intersect the frame"))?;
    let Some(object) = bbox.clamp_to(frame) else {
        return Ok(0.0);
    };
    Ok((object.intersection_area(&crop) / crop.area()).clamp(0.0, 1.0))
}
