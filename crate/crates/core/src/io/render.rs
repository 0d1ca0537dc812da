//! Color rendering of label maps as binary PPM (P6).
//!
//! Colors follow the PASCAL VOC bit-interleaved palette: index 0 is black
//! and each further index spreads its bits over the high bits of the three
//! channels, so small indices get well separated colors.

use std::path::Path;

use crate::error::{Error, Result};

/// Palette color of label `index`.
pub fn palette(index: usize) -> [u8; 3] {
    let mut c = [0u8; 3];
    let mut v = index;
    let mut shift = 7;
    while v > 0 && shift >= 0 {
        for (ch, bit) in c.iter_mut().zip(0..3) {
            *ch |= (((v >> bit) & 1) as u8) << shift;
        }
        v >>= 3;
        shift -= 1;
    }
    c
}

/// P6 image of `labels` (row-major, `width * height` entries).
pub fn render_ppm(width: usize, height: usize, labels: &[usize]) -> Result<Vec<u8>> {
    if labels.len() != width * height {
        return Err(Error::shape("rendered labels", width * height, labels.len()));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &l in labels {
        out.extend_from_slice(&palette(l));
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, labels: &[usize]) -> Result<()> {
    std::fs::write(path, render_ppm(width, height, labels)?).map_err(|e| Error::io(path, e))
}
