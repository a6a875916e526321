//! Serpentine scan planning over a rectangular region.
//!
//! Columns advance along x, rows along y; within a column tiles are visited
//! in y order, reversed on odd columns so every step between consecutive
//! tiles moves exactly one axis. y is the fast axis because autofocus frames
//! are exposed during y motion.

use serde::{Deserialize, Serialize};

use super::ScanError;

/// One planned tile pose. `index` is the serpentine visit order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanTile {
    pub index: usize,
    pub col: usize,
    pub row: usize,
    pub x_mm: f64,
    pub y_mm: f64,
}

/// Tile poses covering `bounds_mm` from `origin_mm`, in visit order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanPlan {
    pub tiles: Vec<PlanTile>,
    pub cols: usize,
    pub rows: usize,
    pub origin_mm: (f64, f64),
    pub bounds_mm: (f64, f64),
    pub fov_mm: (f64, f64),
    pub pitch_mm: (f64, f64),
    pub overlap: f64,
}

fn axis_centers(origin: f64, bound: f64, fov: f64, pitch: f64) -> Vec<f64> {
    if bound <= fov {
        return vec![origin + bound / 2.0];
    }
    let count = ((bound - fov) / pitch).ceil() as usize + 1;
    (0..count)
        .map(|i| {
            // The last pitch step may overshoot; clamp so the tile's far
            // edge lands exactly on the bound.
            (origin + fov / 2.0 + i as f64 * pitch).min(origin + bound - fov / 2.0)
        })
        .collect()
}

/// Plans a column-major serpentine scan. Tile pitch is `fov × (1 − overlap)`
/// per axis; the final row/column is pulled inward so the union of tiles
/// covers the bounds without overhanging them.
pub fn plan(
    origin_mm: (f64, f64),
    bounds_mm: (f64, f64),
    fov_mm: (f64, f64),
    overlap: f64,
) -> Result<ScanPlan, ScanError> {
    if !(bounds_mm.0 > 0.0 && bounds_mm.1 > 0.0) {
        return Err(ScanError::Plan(format!(
            "bounds must be positive, got {bounds_mm:?}"
        )));
    }
    if !(fov_mm.0 > 0.0 && fov_mm.1 > 0.0) {
        return Err(ScanError::Plan(format!(
            "field of view must be positive, got {fov_mm:?}"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(ScanError::Plan(format!(
            "overlap must be in [0, 1), got {overlap}"
        )));
    }
    let pitch = (fov_mm.0 * (1.0 - overlap), fov_mm.1 * (1.0 - overlap));
    let xs = axis_centers(origin_mm.0, bounds_mm.0, fov_mm.0, pitch.0);
    let ys = axis_centers(origin_mm.1, bounds_mm.1, fov_mm.1, pitch.1);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for (col, &x) in xs.iter().enumerate() {
        let rows: Vec<usize> = if col % 2 == 0 {
            (0..ys.len()).collect()
        } else {
            (0..ys.len()).rev().collect()
        };
        for row in rows {
            tiles.push(PlanTile {
                index: tiles.len(),
                col,
                row,
                x_mm: x,
                y_mm: ys[row],
            });
        }
    }
    Ok(ScanPlan {
        tiles,
        cols: xs.len(),
        rows: ys.len(),
        origin_mm,
        bounds_mm,
        fov_mm,
        pitch_mm: pitch,
        overlap,
    })
}
