//! Pixel grids, boxes and colour images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `width x height` raster. Pixels are indexed row-major, `i = y * width + x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelGrid {
    width: usize,
    height: usize,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!(
                "grid must contain at least one pixel, got {width}x{height}"
            )));
        }
        Ok(PixelGrid { width, height })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of pixels `N`.
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.width, i / self.width)
    }
}

impl std::fmt::Display for PixelGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BoundingBox { x0, y0, x1, y1 }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn contains_pixel(&self, grid: &PixelGrid, i: usize) -> bool {
        let (x, y) = grid.coords(i);
        self.contains(x, y)
    }

    /// Checks that the box is non-empty and lies inside `grid`.
    pub fn validate(&self, grid: &PixelGrid) -> Result<()> {
        if self.area() == 0 || self.x1 > grid.width() || self.y1 > grid.height() {
            return Err(Error::DegenerateBox {
                bbox: self.as_array(),
                width: grid.width(),
                height: grid.height(),
            });
        }
        Ok(())
    }

    /// Row-major pixel indices covered by the box.
    pub fn pixels<'a>(&'a self, grid: &'a PixelGrid) -> impl Iterator<Item = usize> + 'a {
        (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| grid.index(x, y)))
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    /// Box intersection-over-union; 0 when both boxes are empty.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// RGB image on the 0-255 intensity scale, used for bilateral features.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    grid: PixelGrid,
    pixels: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(grid: PixelGrid, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != grid.len() {
            return Err(Error::shape("image pixels", grid.len(), pixels.len()));
        }
        if let Some(index) = pixels.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite {
                what: "image",
                index,
            });
        }
        Ok(ColorImage { grid, pixels })
    }

    pub fn from_rgb8(grid: PixelGrid, raw: &[u8]) -> Result<Self> {
        if raw.len() != grid.len() * 3 {
            return Err(Error::shape("rgb8 buffer", grid.len() * 3, raw.len()));
        }
        let pixels = raw
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        Ok(ColorImage { grid, pixels })
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, i: usize) -> [f64; 3] {
        self.pixels[i]
    }
}
