// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary netpbm rendering of erased components and feature maps.
//!
//! Maps are drawn with one image column per matrix row, so an `l x d`
//! component matrix becomes an image `l` pixels wide and `d` pixels tall and
//! every token occupies one column.

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const MAXVAL: u8 = 255;

/// Min-max normalize `|m|` to `0..=255`. A constant map renders black.
pub fn heatmap_pixels(m: &Mat) -> Result<Vec<u8>> {
    if !m.is_finite() {
        return Err(Error::NonFinite);
    }
    let (rows, cols) = m.shape();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for x in m.as_slice() {
        lo = lo.min(x.abs());
        hi = hi.max(x.abs());
    }
    let span = hi - lo;
    let mut px = vec![0u8; rows * cols];
    if rows == 0 || cols == 0 || span <= 0.0 {
        return Ok(px);
    }
    // column-major over the matrix: image row c, image column r
    for c in 0..cols {
        for r in 0..rows {
            let t = (m[(r, c)].abs() - lo) / span;
            px[c * rows + r] = (t * f64::from(MAXVAL)).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(px)
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n{MAXVAL}\n").into_bytes()
}

/// Grayscale P5 heatmap of `|m|`.
pub fn pgm(m: &Mat) -> Result<Vec<u8>> {
    let (rows, cols) = m.shape();
    let mut out = header("P5", rows, cols);
    out.extend(heatmap_pixels(m)?);
    Ok(out)
}

/// Color P6 image with `left` in the red channel and `right` in the green
/// channel, side by side with a one-pixel blue separator. Both maps share
/// one min-max normalization.
pub fn ppm_side_by_side(left: &Mat, right: &Mat) -> Result<Vec<u8>> {
    if left.shape() != right.shape() {
        return Err(Error::ShapeMismatch {
            left: left.shape(),
            right: right.shape(),
        });
    }
    let (rows, cols) = left.shape();
    // normalize jointly by stacking
    let mut stacked = left.as_slice().to_vec();
    stacked.extend_from_slice(right.as_slice());
    let joint = Mat::from_vec(2 * rows, cols, stacked)?;
    let px = heatmap_pixels(&joint)?;
    let width = 2 * rows + 1;
    let mut out = header("P6", width, cols);
    for c in 0..cols {
        let line = &px[c * 2 * rows..(c + 1) * 2 * rows];
        for &g in &line[..rows] {
            out.extend([g, 0, 0]);
        }
        out.extend([0, 0, MAXVAL]);
        for &g in &line[rows..] {
            out.extend([0, g, 0]);
        }
    }
    Ok(out)
}
