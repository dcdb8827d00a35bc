//! Axis-aligned boxes, binary masks and their IoU.

use crate::error::{NidsError, Result};

/// `[x_min, y_min, x_max, y_max]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(NidsError::InvalidBox(self.x_min, self.y_min, self.x_max, self.y_max));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

pub fn iou_box(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    Ok(inter / (a.area() + b.area() - inter))
}

/// Binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(NidsError::InvalidShape(format!("mask has {} pixels, expected {width}x{height}", bits.len())));
        }
        Ok(Self { width, height, bits })
    }

    /// Mask covering the integer pixel rectangle spanned by `b`, clipped to the raster.
    pub fn from_box(width: usize, height: usize, b: &BBox) -> Self {
        let x0 = b.x_min.floor().max(0.0) as usize;
        let y0 = b.y_min.floor().max(0.0) as usize;
        let x1 = (b.x_max.ceil().max(0.0) as usize).min(width);
        let y1 = (b.y_max.ceil().max(0.0) as usize).min(height);
        let mut bits = vec![false; width * height];
        for y in y0..y1 {
            bits[y * width + x0..y * width + x1.max(x0)].iter_mut().for_each(|p| *p = true);
        }
        Self { width, height, bits }
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

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Whether every set pixel lies inside `b` (pixel `(x, y)` spans `[x, x+1) x [y, y+1)`).
    pub fn within(&self, b: &BBox) -> bool {
        self.bits.iter().enumerate().filter(|(_, &on)| on).all(|(i, _)| {
            let (x, y) = ((i % self.width) as f64, (i / self.width) as f64);
            x >= b.x_min.floor() && x + 1.0 <= b.x_max.ceil() && y >= b.y_min.floor() && y + 1.0 <= b.y_max.ceil()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| u8::from(b)).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b != 0).collect())
    }
}

pub fn iou_mask(a: &Mask, b: &Mask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(NidsError::InvalidShape(format!(
            "mask extents differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Err(NidsError::EmptyUnion);
    }
    Ok(inter as f64 / union as f64)
}
