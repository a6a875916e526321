//! Tile registration and blending: turns a directory of corrected tiles
//! plus their stage coordinates into one seamless image.
//!
//! Stage coordinates give each tile a nominal canvas position (mm scaled by
//! magnification over pixel pitch). Refinement phase-correlates every
//! overlapping pair and solves for global positions by confidence-weighted
//! averaging of the pairwise constraints, with the nominal position as a
//! weak prior; pairs whose overlap carries no texture report near-zero
//! confidence and drop out, so featureless tiles keep their stage-derived
//! placement. Blending feathers overlaps with separable tent weights, which
//! keeps every output pixel a convex combination of source samples and
//! therefore inside the contributing tiles' intensity range.
//!
//! Canvases above a configurable pixel cap are refused: whole-slide scans
//! at full resolution do not fit in memory, and the caller then emits the
//! per-tile layout instead of a single image.

use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::imaging::{sample_bilinear, Image, ImagingError};
use crate::optics::Optics;
use crate::scanner::run::{tile_filename, FocusMap};
use crate::scanner::ScanError;

#[derive(Debug, thiserror::Error)]
pub enum MosaicError {
    #[error("no tiles to stitch")]
    EmptyInput,
    #[error("tile images must share one size; found {0}x{1} and {2}x{3}")]
    MixedTileSizes(usize, usize, usize, usize),
    #[error("canvas needs {need_px} px, cap is {cap_px} px")]
    CanvasTooLarge { need_px: usize, cap_px: usize },
    #[error("missing tile file {0}")]
    MissingTile(String),
    #[error("scan output: {0}")]
    Scan(#[from] ScanError),
    #[error("imaging: {0}")]
    Imaging(#[from] ImagingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// One tile's placement. Offsets are the canvas position of the tile's
/// (0,0) pixel, in pixels; `refined_px` starts equal to `nominal_px` and
/// stays within a quarter tile of it after refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePose {
    pub col: usize,
    pub row: usize,
    pub nominal_px: (f64, f64),
    pub refined_px: (f64, f64),
    /// Mean phase-correlation confidence of the constraints touching this
    /// tile, in [0, 1]; 0 when every neighbor overlap was featureless.
    pub confidence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MosaicConfig {
    /// Minimum nominal overlap, px, for a pair to be correlated.
    pub min_overlap_px: usize,
    /// Border band, px, excluded from overlap correlation. Tile edges are
    /// the least trustworthy pixels: distortion correction back-fills them
    /// by replication where the warp pushed content off the sensor.
    pub edge_inset_px: usize,
    /// Pairs below this phase-correlation confidence are discarded.
    pub confidence_floor: f64,
    /// Weight of the nominal-position prior in the global solve, relative
    /// to the per-pair confidences.
    pub prior_weight: f64,
    /// Gauss-Seidel sweeps of the global position solve.
    pub solve_iterations: usize,
    /// Measure-solve rounds. Later rounds crop at the refined positions,
    /// which removes the bias thin overlap strips pick up when the first
    /// crops are misaligned by several pixels.
    pub measure_rounds: usize,
    /// Largest single-image canvas, px; beyond it `blend` refuses and the
    /// caller falls back to per-tile layout output.
    pub canvas_cap_px: usize,
}

impl Default for MosaicConfig {
    fn default() -> Self {
        MosaicConfig {
            min_overlap_px: 8,
            edge_inset_px: 8,
            confidence_floor: 0.03,
            prior_weight: 0.05,
            solve_iterations: 60,
            measure_rounds: 2,
            canvas_cap_px: 1 << 27,
        }
    }
}

/// Canvas positions implied by the stage coordinates alone: millimeters
/// scaled by magnification over camera pixel pitch (equivalently, object
/// micrometers over the object-plane pitch), centered per tile. Also
/// returns the canvas origin in absolute object-plane pixels, the anchor
/// for comparing a blend against specimen ground truth.
pub fn nominal_poses(
    map: &FocusMap,
    tile_px: (usize, usize),
    optics: &Optics,
) -> (Vec<TilePose>, (f64, f64)) {
    let scale = 1000.0 / optics.pixel_pitch_obj_um();
    let half = ((tile_px.0 as f64 - 1.0) / 2.0, (tile_px.1 as f64 - 1.0) / 2.0);
    let mut poses: Vec<TilePose> = map
        .entries
        .iter()
        .map(|e| {
            let p = (e.stage_x_mm * scale - half.0, e.stage_y_mm * scale - half.1);
            TilePose {
                col: e.col,
                row: e.row,
                nominal_px: p,
                refined_px: p,
                confidence: 0.0,
            }
        })
        .collect();
    let min_x = poses.iter().map(|p| p.nominal_px.0).fold(f64::MAX, f64::min);
    let min_y = poses.iter().map(|p| p.nominal_px.1).fold(f64::MAX, f64::min);
    for p in &mut poses {
        p.nominal_px = (p.nominal_px.0 - min_x, p.nominal_px.1 - min_y);
        p.refined_px = p.nominal_px;
    }
    (poses, (min_x, min_y))
}

/// Measured displacement between two same-sized views of one scene, px,
/// with the confidence of the correlation peak. `(dx, dy)` is where `b`'s
/// view of the scene starts relative to `a`'s: `b(x) = a(x + dx)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseShift {
    pub dx: f64,
    pub dy: f64,
    pub confidence: f64,
}

/// FFT length for an image axis of `n` px: at least double, so the
/// correlation of non-cyclic content cannot wrap onto itself.
fn fft_len(n: usize) -> usize {
    (2 * n).next_power_of_two().max(16)
}

/// 2-D FFT over a row-major complex buffer, in place, one axis at a time.
fn fft_2d(buf: &mut [Complex<f64>], w: usize, h: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex::default(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Mean-free, Hann-windowed luminance of `img` zero-padded into a `w`×`h`
/// complex buffer.
fn windowed_plane(img: &Image, w: usize, h: usize) -> Vec<Complex<f64>> {
    let (iw, ih) = (img.width(), img.height());
    let lum: Vec<f64> = (0..iw * ih)
        .map(|i| {
            if img.channels() >= 3 {
                0.299 * img.plane(0)[i] as f64
                    + 0.587 * img.plane(1)[i] as f64
                    + 0.114 * img.plane(2)[i] as f64
            } else {
                img.plane(0)[i] as f64
            }
        })
        .collect();
    let mean = lum.iter().sum::<f64>() / lum.len() as f64;
    let hann = |i: usize, n: usize| -> f64 {
        if n < 2 {
            1.0
        } else {
            let t = std::f64::consts::PI * i as f64 / (n as f64 - 1.0);
            t.sin().powi(2)
        }
    };
    let wx: Vec<f64> = (0..iw).map(|i| hann(i, iw)).collect();
    let wy: Vec<f64> = (0..ih).map(|j| hann(j, ih)).collect();
    let mut buf = vec![Complex::default(); w * h];
    for j in 0..ih {
        for i in 0..iw {
            buf[j * w + i] = Complex::new((lum[j * iw + i] - mean) * wx[i] * wy[j], 0.0);
        }
    }
    buf
}

/// Per-axis sub-bin peak refinement: parabola through the peak and its two
/// cyclic neighbors.
fn parabolic(lo: f64, mid: f64, hi: f64) -> f64 {
    let denom = lo - 2.0 * mid + hi;
    if denom.abs() < 1e-12 {
        0.0
    } else {
        (0.5 * (lo - hi) / denom).clamp(-0.5, 0.5)
    }
}

/// Phase correlation of two equally sized images. A unit peak means a
/// perfect cyclic translation; windowing and non-cyclic content lower it,
/// and featureless inputs drive it to zero, so the peak height doubles as
/// the confidence. Shifts beyond half the padded size alias; callers keep
/// expected shifts small relative to the overlap.
pub fn phase_correlate(a: &Image, b: &Image) -> Result<PhaseShift, MosaicError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(MosaicError::MixedTileSizes(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    let (w, h) = (fft_len(a.width()), fft_len(a.height()));
    let mut planner = FftPlanner::new();
    let mut fa = windowed_plane(a, w, h);
    let mut fb = windowed_plane(b, w, h);
    fft_2d(&mut fa, w, h, &mut planner, false);
    fft_2d(&mut fb, w, h, &mut planner, false);
    // Cross-power spectrum, normalized bin-wise to unit magnitude.
    let mut r: Vec<Complex<f64>> = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| {
            let c = x * y.conj();
            let m = c.norm();
            if m > 1e-12 {
                c / m
            } else {
                Complex::default()
            }
        })
        .collect();
    fft_2d(&mut r, w, h, &mut planner, true);
    let n = (w * h) as f64;
    let surface: Vec<f64> = r.iter().map(|c| c.re / n).collect();
    let peak = surface
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let (px, py) = (peak % w, peak / w);
    let at = |x: usize, y: usize| surface[(y % h) * w + (x % w)];
    let fx = parabolic(at(px + w - 1, py), at(px, py), at(px + 1, py));
    let fy = parabolic(at(px, py + h - 1), at(px, py), at(px, py + 1));
    // The shift theorem puts the peak at bin d for b(x) = a(x + d);
    // indices above the midpoint alias to negative shifts.
    let wrap = |p: usize, f: f64, n: usize| -> f64 {
        let v = p as f64 + f;
        if v > n as f64 / 2.0 {
            v - n as f64
        } else {
            v
        }
    };
    Ok(PhaseShift {
        dx: wrap(px, fx, w),
        dy: wrap(py, fy, h),
        confidence: surface[peak].clamp(0.0, 1.0),
    })
}

/// One pairwise constraint: tile `j`'s pose minus tile `i`'s, measured.
struct PairMeasure {
    i: usize,
    j: usize,
    d: (f64, f64),
    confidence: f64,
}

/// Phase-correlates the overlap of pair `(i, j)` implied by the position
/// estimates `est`. Crops are taken at integer offsets; the rounding
/// enters the constraint exactly, so no quantization leaks into the solve.
fn measure_pair(
    tiles: &[Image],
    est: &[(f64, f64)],
    i: usize,
    j: usize,
    cfg: &MosaicConfig,
) -> Option<PairMeasure> {
    let (tw, th) = (tiles[i].width() as f64, tiles[i].height() as f64);
    let (ni, nj) = (est[i], est[j]);
    let inset = cfg.edge_inset_px as f64;
    let x0 = ni.0.max(nj.0).ceil() + inset;
    let y0 = ni.1.max(nj.1).ceil() + inset;
    let x1 = (ni.0 + tw).min(nj.0 + tw).floor() - inset;
    let y1 = (ni.1 + th).min(nj.1 + th).floor() - inset;
    let (ow, oh) = ((x1 - x0) as isize, (y1 - y0) as isize);
    if ow < cfg.min_overlap_px as isize || oh < cfg.min_overlap_px as isize {
        return None;
    }
    let (mut ow, mut oh) = (ow as usize, oh as usize);
    let mut ci = ((x0 - ni.0).round(), (y0 - ni.1).round());
    let mut cj = ((x0 - nj.0).round(), (y0 - nj.1).round());
    // A centered sub-window caps the FFT cost on full-frame overlaps; the
    // same shift applies to both crops, so the constraint is unchanged.
    const MAX_CORR_PX: usize = 512;
    let sub_x = ((ow.saturating_sub(MAX_CORR_PX)) / 2) as f64;
    let sub_y = ((oh.saturating_sub(MAX_CORR_PX)) / 2) as f64;
    ow = ow.min(MAX_CORR_PX);
    oh = oh.min(MAX_CORR_PX);
    ci = (ci.0 + sub_x, ci.1 + sub_y);
    cj = (cj.0 + sub_x, cj.1 + sub_y);
    let crop_i = tiles[i].crop(ci.0 as usize, ci.1 as usize, ow, oh);
    let crop_j = tiles[j].crop(cj.0 as usize, cj.1 as usize, ow, oh);
    let shift = phase_correlate(&crop_i, &crop_j).ok()?;
    if shift.confidence < cfg.confidence_floor {
        return None;
    }
    // The correlation reads s = (p_j + c_j) - (p_i + c_i), so the pose
    // constraint is p_j - p_i = s + c_i - c_j.
    Some(PairMeasure {
        i,
        j,
        d: (shift.dx + ci.0 - cj.0, shift.dy + ci.1 - cj.1),
        confidence: shift.confidence,
    })
}

/// Refines tile positions from pairwise overlap correlations. Global
/// positions come from Gauss-Seidel sweeps of the confidence-weighted
/// constraint average with the nominal pose as a weak prior; tiles with no
/// confident constraint therefore stay at nominal with confidence 0, and
/// every result is clamped to a quarter tile of its nominal position.
pub fn refine_offsets(
    tiles: &[Image],
    poses: &[TilePose],
    cfg: &MosaicConfig,
) -> Result<Vec<TilePose>, MosaicError> {
    if tiles.is_empty() || tiles.len() != poses.len() {
        return Err(MosaicError::EmptyInput);
    }
    let (tw, th) = (tiles[0].width(), tiles[0].height());
    for t in tiles {
        if t.width() != tw || t.height() != th {
            return Err(MosaicError::MixedTileSizes(tw, th, t.width(), t.height()));
        }
    }
    let mut candidates = Vec::new();
    for i in 0..tiles.len() {
        for j in i + 1..tiles.len() {
            candidates.push((i, j));
        }
    }
    let clamp = (tw as f64 * 0.25, th as f64 * 0.25);
    let mut est: Vec<(f64, f64)> = poses.iter().map(|t| t.nominal_px).collect();
    let mut conf = vec![0.0f64; tiles.len()];
    for _ in 0..cfg.measure_rounds.max(1) {
        let measures: Vec<PairMeasure> = candidates
            .par_iter()
            .filter_map(|&(i, j)| measure_pair(tiles, &est, i, j, cfg))
            .collect();
        let mut incident: Vec<Vec<(usize, (f64, f64), f64)>> = vec![Vec::new(); tiles.len()];
        for m in &measures {
            incident[m.i].push((m.j, (-m.d.0, -m.d.1), m.confidence));
            incident[m.j].push((m.i, m.d, m.confidence));
        }
        let mut p = est.clone();
        for _ in 0..cfg.solve_iterations {
            for i in 0..p.len() {
                let n = poses[i].nominal_px;
                let mut wsum = cfg.prior_weight;
                let mut acc = (cfg.prior_weight * n.0, cfg.prior_weight * n.1);
                // Each incident entry states p_i = p_neighbor + d.
                for &(nb, d, c) in &incident[i] {
                    wsum += c;
                    acc.0 += c * (p[nb].0 + d.0);
                    acc.1 += c * (p[nb].1 + d.1);
                }
                p[i] = (acc.0 / wsum, acc.1 / wsum);
            }
        }
        for (i, t) in poses.iter().enumerate() {
            let n = t.nominal_px;
            est[i] = (
                p[i].0.clamp(n.0 - clamp.0, n.0 + clamp.0),
                p[i].1.clamp(n.1 - clamp.1, n.1 + clamp.1),
            );
            conf[i] = if incident[i].is_empty() {
                0.0
            } else {
                incident[i].iter().map(|m| m.2).sum::<f64>() / incident[i].len() as f64
            };
        }
    }
    let refined = poses
        .iter()
        .enumerate()
        .map(|(i, t)| TilePose {
            refined_px: est[i],
            confidence: conf[i],
            ..t.clone()
        })
        .collect();
    Ok(refined)
}

/// Mean absolute disagreement, px, between each grid-adjacent pair's
/// measured relative offset and the one implied by the poses currently in
/// use; the seam-quality number a correction pass is judged by.
pub fn seam_misalignment(
    tiles: &[Image],
    poses: &[TilePose],
    cfg: &MosaicConfig,
) -> Result<f64, MosaicError> {
    if tiles.is_empty() || tiles.len() != poses.len() {
        return Err(MosaicError::EmptyInput);
    }
    // Seams run between grid-adjacent tiles; corner-diagonal patches are a
    // few dozen pixels of weak texture and measure noise, not seams.
    let mut candidates = Vec::new();
    for i in 0..tiles.len() {
        for j in i + 1..tiles.len() {
            let dc = poses[i].col.abs_diff(poses[j].col);
            let dr = poses[i].row.abs_diff(poses[j].row);
            if dc + dr == 1 {
                candidates.push((i, j));
            }
        }
    }
    let nominal: Vec<(f64, f64)> = poses.iter().map(|p| p.nominal_px).collect();
    let residuals: Vec<f64> = candidates
        .par_iter()
        .filter_map(|&(i, j)| {
            let m = measure_pair(tiles, &nominal, i, j, cfg)?;
            let rel = (nominal[j].0 - nominal[i].0, nominal[j].1 - nominal[i].1);
            Some(((m.d.0 - rel.0).powi(2) + (m.d.1 - rel.1).powi(2)).sqrt())
        })
        .collect();
    if residuals.is_empty() {
        return Err(MosaicError::EmptyInput);
    }
    Ok(residuals.iter().sum::<f64>() / residuals.len() as f64)
}

/// Feathers `tiles` at their refined poses onto one canvas. Every covered
/// pixel is a tent-weighted convex combination of bilinear tile samples,
/// so output intensities never leave the contributing tiles' range;
/// uncovered pixels are 0. Refuses canvases above the configured cap.
pub fn blend(
    tiles: &[Image],
    poses: &[TilePose],
    cfg: &MosaicConfig,
) -> Result<Image, MosaicError> {
    if tiles.is_empty() || tiles.len() != poses.len() {
        return Err(MosaicError::EmptyInput);
    }
    let (tw, th) = (tiles[0].width(), tiles[0].height());
    for t in tiles {
        if t.width() != tw || t.height() != th {
            return Err(MosaicError::MixedTileSizes(tw, th, t.width(), t.height()));
        }
    }
    let channels = tiles[0].channels();
    let max_x = poses
        .iter()
        .map(|p| p.refined_px.0 + tw as f64)
        .fold(f64::MIN, f64::max);
    let max_y = poses
        .iter()
        .map(|p| p.refined_px.1 + th as f64)
        .fold(f64::MIN, f64::max);
    let (cw, ch) = (max_x.ceil() as usize, max_y.ceil() as usize);
    if cw * ch > cfg.canvas_cap_px {
        return Err(MosaicError::CanvasTooLarge {
            need_px: cw * ch,
            cap_px: cfg.canvas_cap_px,
        });
    }

    // Tent feather across each axis, floored so a lone tile's edge pixels
    // still carry weight.
    let tent = |v: f64, n: usize| -> f64 {
        let half = (n as f64 - 1.0) / 2.0;
        (1.0 - (v - half).abs() / (half + 1.0)).max(1e-4)
    };
    let spans: Vec<(usize, usize, usize, usize)> = poses
        .iter()
        .map(|p| {
            let x0 = p.refined_px.0.floor().max(0.0) as usize;
            let y0 = p.refined_px.1.floor().max(0.0) as usize;
            let x1 = ((p.refined_px.0 + tw as f64).ceil() as usize).min(cw);
            let y1 = ((p.refined_px.1 + th as f64).ceil() as usize).min(ch);
            (x0, y0, x1, y1)
        })
        .collect();

    let mut weight = vec![0.0f32; cw * ch];
    weight.par_chunks_mut(cw).enumerate().for_each(|(y, wrow)| {
        for (t, s) in spans.iter().enumerate() {
            if y < s.1 || y >= s.3 {
                continue;
            }
            let py = y as f64 - poses[t].refined_px.1;
            if !(0.0..=(th as f64 - 1.0)).contains(&py) {
                continue;
            }
            let wy = tent(py, th);
            for (x, wv) in wrow.iter_mut().enumerate().take(s.2).skip(s.0) {
                let px = x as f64 - poses[t].refined_px.0;
                if (0.0..=(tw as f64 - 1.0)).contains(&px) {
                    *wv += (wy * tent(px, tw)) as f32;
                }
            }
        }
    });

    let mut out = Image::new(cw, ch, channels);
    for c in 0..channels {
        let planes: Vec<&[f32]> = tiles.iter().map(|t| t.plane(c)).collect();
        out.plane_mut(c)
            .par_chunks_mut(cw)
            .enumerate()
            .for_each(|(y, row)| {
                for (t, s) in spans.iter().enumerate() {
                    if y < s.1 || y >= s.3 {
                        continue;
                    }
                    let py = y as f64 - poses[t].refined_px.1;
                    if !(0.0..=(th as f64 - 1.0)).contains(&py) {
                        continue;
                    }
                    let wy = tent(py, th);
                    for (x, v) in row.iter_mut().enumerate().take(s.2).skip(s.0) {
                        let px = x as f64 - poses[t].refined_px.0;
                        if (0.0..=(tw as f64 - 1.0)).contains(&px) {
                            let w = (wy * tent(px, tw)) as f32;
                            *v += w * sample_bilinear(planes[t], tw, th, px as f32, py as f32);
                        }
                    }
                }
                let wrow = &weight[y * cw..(y + 1) * cw];
                for (v, &w) in row.iter_mut().zip(wrow) {
                    if w > 0.0 {
                        *v /= w;
                    }
                }
            });
    }
    Ok(out)
}

/// One row of `layout.json`: where a tile landed and how confidently.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub col: usize,
    pub row: usize,
    pub x_px: f64,
    pub y_px: f64,
    pub confidence: f64,
}

pub fn write_layout(poses: &[TilePose], path: &Path) -> Result<(), MosaicError> {
    let entries: Vec<LayoutEntry> = poses
        .iter()
        .map(|p| LayoutEntry {
            col: p.col,
            row: p.row,
            x_px: crate::calibration::sig9(p.refined_px.0),
            y_px: crate::calibration::sig9(p.refined_px.1),
            confidence: crate::calibration::sig9(p.confidence),
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&entries)? + "\n")?;
    Ok(())
}

/// What a stitch produced: a blended image, or layout-only when the canvas
/// exceeded the memory cap and the positioned tiles stand in for it.
pub struct StitchOutput {
    pub poses: Vec<TilePose>,
    pub mosaic: Option<Image>,
    /// Canvas (0,0) in absolute object-plane pixels.
    pub origin_obj_px: (f64, f64),
}

/// Full stitch of a scan output directory: loads `focusmap.csv` and every
/// tile it names, refines the stage-derived positions, and blends. On a
/// canvas above the cap the blend is skipped and the caller ships the tile
/// files with the layout instead.
pub fn stitch_scan(dir: &Path, optics: &Optics, cfg: &MosaicConfig) -> Result<StitchOutput, MosaicError> {
    let map = FocusMap::read_csv(&dir.join("focusmap.csv"))?;
    if map.entries.is_empty() {
        return Err(MosaicError::EmptyInput);
    }
    let tiles: Vec<Image> = map
        .entries
        .iter()
        .map(|e| {
            let path = dir.join(tile_filename(e.col, e.row));
            if !path.exists() {
                return Err(MosaicError::MissingTile(path.display().to_string()));
            }
            Ok(crate::imaging::io::read_raster(&path)?)
        })
        .collect::<Result<_, _>>()?;
    let (nominal, origin) = nominal_poses(&map, (tiles[0].width(), tiles[0].height()), optics);
    let poses = refine_offsets(&tiles, &nominal, cfg)?;
    match blend(&tiles, &poses, cfg) {
        Ok(mosaic) => Ok(StitchOutput {
            poses,
            mosaic: Some(mosaic),
            origin_obj_px: origin,
        }),
        Err(MosaicError::CanvasTooLarge { .. }) => Ok(StitchOutput {
            poses,
            mosaic: None,
            origin_obj_px: origin,
        }),
        Err(e) => Err(e),
    }
}

/// Mean absolute error between a blended mosaic and the specimen texture
/// it imaged, per channel sample. `origin_obj_px` is the canvas (0,0)
/// position in object-plane pixels, as produced by [`nominal_poses`]
/// before origin shifting; the caller passes the minimum it subtracted.
pub fn mosaic_vs_texture_mae(
    mosaic: &Image,
    origin_obj_px: (f64, f64),
    specimen: &crate::simscope::Specimen,
    optics: &Optics,
) -> f64 {
    let tex = &specimen.texture;
    let ratio = optics.pixel_pitch_obj_um() / specimen.texture_pitch_um;
    let (tw, th) = (tex.width(), tex.height());
    let sums: Vec<f64> = (0..mosaic.height())
        .into_par_iter()
        .map(|y| {
            let mut s = 0.0;
            for x in 0..mosaic.width() {
                let tx = ((origin_obj_px.0 + x as f64) * ratio - 0.5) as f32;
                let ty = ((origin_obj_px.1 + y as f64) * ratio - 0.5) as f32;
                for c in 0..mosaic.channels() {
                    let t = sample_bilinear(tex.plane(c.min(tex.channels() - 1)), tw, th, tx, ty);
                    s += (mosaic.get(x, y, c) - t).abs() as f64;
                }
            }
            s
        })
        .collect();
    sums.iter().sum::<f64>() / (mosaic.width() * mosaic.height() * mosaic.channels()) as f64
}
