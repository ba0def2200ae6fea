//! Grayscale grid images: significance heatmaps and keep/drop masks, written as binary PGM.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pruning::PrunedSelection;
use crate::significance::SignificanceScores;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridImage {
    side: usize,
    pixels: Vec<u8>,
}

impl GridImage {
    pub fn side(&self) -> usize {
        self.side
    }

    /// Row-major pixels.
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.pixels[r * self.side..(r + 1) * self.side]
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn scaled(&self, factor: usize) -> Result<GridImage> {
        if factor == 0 {
            return Err(Error::Config("scale factor must be at least 1".into()));
        }
        let side = self.side * factor;
        let mut pixels = Vec::with_capacity(side * side);
        for r in 0..side {
            let src = self.row(r / factor);
            pixels.extend(src.iter().flat_map(|&p| std::iter::repeat_n(p, factor)));
        }
        Ok(GridImage { side, pixels })
    }

    /// Binary PGM (P5), maxval 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.side, self.side).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

fn check_side(n: usize, side: usize) -> Result<()> {
    if side.checked_mul(side) != Some(n) || side == 0 {
        return Err(Error::Grid(format!(
            "grid side {side} does not fit {n} tokens"
        )));
    }
    Ok(())
}

/// Min-max normalized heatmap; a constant score vector renders mid-gray (128).
pub fn heatmap(scores: &SignificanceScores, side: usize) -> Result<GridImage> {
    let values = &scores.scores;
    check_side(values.len(), side)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Value("cannot render non-finite scores".into()));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let pixels = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect();
    Ok(GridImage { side, pixels })
}

/// Kept tokens white (255), dropped black (0).
pub fn selection_mask(sel: &PrunedSelection, side: usize) -> Result<GridImage> {
    check_side(sel.n_original, side)?;
    let pixels = sel
        .mask()
        .into_iter()
        .map(|k| if k { 255 } else { 0 })
        .collect();
    Ok(GridImage { side, pixels })
}
