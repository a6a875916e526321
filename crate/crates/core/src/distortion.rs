//! Pincushion distortion: measurement from a hole-array mask and remap-based
//! correction of captured frames.
//!
//! The mapping is a two-term radial polynomial about a fitted center:
//! `r_ideal = scale * r_dist * (1 + k1*r_dist^2 + k2*r_dist^4)`. Fitting
//! works in radii normalized by the frame half-diagonal (the raw-pixel normal
//! equations mix magnitudes across ~15 orders and collapse numerically); the
//! reported model is converted back to pixel units. Correction inverse-maps
//! every output pixel through the model via a precomputed radial lookup
//! table, so repeated frames of one geometry pay the table cost once.

use serde::{Deserialize, Serialize};

use crate::calibration::sig9;
use crate::imaging::{sample_bilinear, Image, ImagingError};

#[derive(Debug, thiserror::Error)]
pub enum DistortionError {
    #[error("need at least {need} grid points, got {got}")]
    TooFewPoints { got: usize, need: usize },
    #[error("grid detection failed: {0}")]
    NoGrid(String),
    #[error("fit rejected: residual rms {rms:.3} px exceeds {limit} px")]
    FitRejected { rms: f64, limit: f64 },
    #[error("model is not invertible over the frame")]
    NonInvertible,
    #[error("image: {0}")]
    Imaging(#[from] ImagingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Radial mapping from distorted to ideal pixel coordinates.
/// `k1` is px^-2 and `k2` px^-4; `scale` is dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionModel {
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub scale: f64,
    pub residual_rms_px: f64,
}

impl DistortionModel {
    pub fn identity(width: usize, height: usize) -> Self {
        DistortionModel {
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            k1: 0.0,
            k2: 0.0,
            scale: 1.0,
            residual_rms_px: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.scale == 1.0
    }

    /// Ideal radius for a distorted radius, px.
    pub fn map_radius(&self, r_dist: f64) -> f64 {
        self.scale * r_dist * (1.0 + self.k1 * r_dist.powi(2) + self.k2 * r_dist.powi(4))
    }

    /// Maps a distorted point to its ideal position.
    pub fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (ux, uy) = (x - self.cx, y - self.cy);
        let r = (ux * ux + uy * uy).sqrt();
        if r == 0.0 {
            return (self.cx, self.cy);
        }
        let g = self.map_radius(r) / r;
        (self.cx + ux * g, self.cy + uy * g)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DistortionError> {
        let q = DistortionModel {
            cx: sig9(self.cx),
            cy: sig9(self.cy),
            k1: sig9(self.k1),
            k2: sig9(self.k2),
            scale: sig9(self.scale),
            residual_rms_px: sig9(self.residual_rms_px),
        };
        let mut text = serde_json::to_string_pretty(&q)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DistortionError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Grid centroids detected in a mask image, with lattice assignment.
#[derive(Debug, Clone)]
pub struct GridDetection {
    pub centroids: Vec<(f64, f64)>,
    /// (row, col) per centroid; injective over detections.
    pub grid_assignment: Vec<(usize, usize)>,
    pub pitch_px: f64,
    pub frame_px: (usize, usize),
}

impl GridDetection {
    /// Ideal lattice target per detection: a rigid grid of `pitch_px`
    /// anchored at the detection nearest the frame center, where distortion
    /// is negligible.
    pub fn ideal_positions(&self) -> Vec<(f64, f64)> {
        let cx = (self.frame_px.0 as f64 - 1.0) / 2.0;
        let cy = (self.frame_px.1 as f64 - 1.0) / 2.0;
        let anchor = (0..self.centroids.len())
            .min_by(|&a, &b| {
                let da = (self.centroids[a].0 - cx).hypot(self.centroids[a].1 - cy);
                let db = (self.centroids[b].0 - cx).hypot(self.centroids[b].1 - cy);
                da.total_cmp(&db)
            })
            .expect("non-empty detection");
        let (ax, ay) = self.centroids[anchor];
        let (arow, acol) = self.grid_assignment[anchor];
        self.grid_assignment
            .iter()
            .map(|&(row, col)| {
                (
                    ax + (col as f64 - acol as f64) * self.pitch_px,
                    ay + (row as f64 - arow as f64) * self.pitch_px,
                )
            })
            .collect()
    }
}

fn otsu_threshold(plane: &[f32]) -> f32 {
    let mut hist = [0u64; 256];
    for &v in plane {
        hist[((v * 255.0).round() as usize).min(255)] += 1;
    }
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let (mut w0, mut sum0) = (0f64, 0f64);
    let (mut best_t, mut best_var) = (127usize, -1.0f64);
    for t in 0..255 {
        w0 += hist[t] as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total as f64 - w0;
        if w1 == 0.0 {
            break;
        }
        sum0 += t as f64 * hist[t] as f64;
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best_t = t;
        }
    }
    (best_t as f32 + 0.5) / 255.0
}

/// Minimum pixels for a component to count as a dot.
const MIN_DOT_AREA: usize = 9;

struct Component {
    centroid: (f64, f64),
    touches_border: bool,
}

fn connected_components(plane: &[f32], width: usize, height: usize, thresh: f32) -> Vec<Component> {
    let mut visited = vec![false; plane.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..plane.len() {
        if visited[start] || plane[start] < thresh {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let (mut wsum, mut xsum, mut ysum) = (0f64, 0f64, 0f64);
        let mut area = 0usize;
        let mut touches_border = false;
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % width, idx / width);
            if x == 0 || y == 0 || x == width - 1 || y == height - 1 {
                touches_border = true;
            }
            // Weight by height above threshold so the centroid tracks the
            // dot profile, not the binarization boundary.
            let w = (plane[idx] - thresh) as f64;
            wsum += w;
            xsum += w * x as f64;
            ysum += w * y as f64;
            area += 1;
            let mut visit = |n: usize| {
                if !visited[n] && plane[n] >= thresh {
                    visited[n] = true;
                    stack.push(n);
                }
            };
            if x > 0 {
                visit(idx - 1);
            }
            if x + 1 < width {
                visit(idx + 1);
            }
            if y > 0 {
                visit(idx - width);
            }
            if y + 1 < height {
                visit(idx + width);
            }
        }
        if area >= MIN_DOT_AREA && wsum > 0.0 {
            out.push(Component {
                centroid: (xsum / wsum, ysum / wsum),
                touches_border,
            });
        }
    }
    out
}

/// Splits sorted scalar coordinates into clusters at gaps wider than half
/// the lattice pitch, returning the cluster index per input order.
fn cluster_axis(values: &[f64], pitch: f64) -> (Vec<usize>, usize) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut labels = vec![0usize; values.len()];
    let mut cluster = 0usize;
    for w in 0..order.len() {
        if w > 0 && values[order[w]] - values[order[w - 1]] > pitch * 0.5 {
            cluster += 1;
        }
        labels[order[w]] = cluster;
    }
    (labels, cluster + 1)
}

/// Detects a dot grid: Otsu threshold, connected components,
/// intensity-weighted centroids, then per-axis clustering that assigns each
/// dot the (row, col) of its nearest ideal lattice cell. Dots touching the
/// frame border are discarded (their centroids are clipped).
pub fn detect_grid(mask_img: &Image) -> Result<GridDetection, DistortionError> {
    let plane = if mask_img.channels() == 1 {
        mask_img.plane(0).to_vec()
    } else {
        // Luminance is enough; mask dots are neutral.
        let (r, g, b) = (mask_img.plane(0), mask_img.plane(1), mask_img.plane(2));
        (0..r.len())
            .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
            .collect()
    };
    let (width, height) = (mask_img.width(), mask_img.height());
    let thresh = otsu_threshold(&plane);
    let comps = connected_components(&plane, width, height, thresh);
    let centroids: Vec<(f64, f64)> = comps
        .iter()
        .filter(|c| !c.touches_border)
        .map(|c| c.centroid)
        .collect();
    if centroids.len() < 4 {
        return Err(DistortionError::NoGrid(format!(
            "found {} dots, need at least 4",
            centroids.len()
        )));
    }
    // Provisional pitch from nearest-neighbor spacing; distortion perturbs
    // it by a few percent at most, which the half-pitch cluster gap absorbs.
    let mut nn = Vec::with_capacity(centroids.len());
    for (i, &(xi, yi)) in centroids.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, &(xj, yj)) in centroids.iter().enumerate() {
            if i != j {
                best = best.min((xi - xj).hypot(yi - yj));
            }
        }
        nn.push(best);
    }
    nn.sort_by(f64::total_cmp);
    let pitch_nn = nn[nn.len() / 2];
    let xs: Vec<f64> = centroids.iter().map(|c| c.0).collect();
    let ys: Vec<f64> = centroids.iter().map(|c| c.1).collect();
    let (col_of, n_cols) = cluster_axis(&xs, pitch_nn);
    let (row_of, n_rows) = cluster_axis(&ys, pitch_nn);
    let grid_assignment: Vec<(usize, usize)> = (0..centroids.len())
        .map(|i| (row_of[i], col_of[i]))
        .collect();
    let mut seen = std::collections::HashSet::new();
    for &cell in &grid_assignment {
        if !seen.insert(cell) {
            return Err(DistortionError::NoGrid(format!(
                "ambiguous lattice: two dots in cell {cell:?}"
            )));
        }
    }
    let expected = n_cols * n_rows;
    if centroids.len() * 10 < expected * 8 {
        return Err(DistortionError::NoGrid(format!(
            "detected {} of {} lattice cells (< 80%)",
            centroids.len(),
            expected
        )));
    }
    Ok(GridDetection {
        centroids,
        grid_assignment,
        pitch_px: pitch_nn,
        frame_px: (width, height),
    })
}

/// Minimum matched points for a stable 5-parameter fit.
pub const MIN_FIT_POINTS: usize = 20;
/// Fits with residual RMS above this are rejected.
pub const FIT_RMS_LIMIT_PX: f64 = 1.0;

/// Least squares for (scale, scale*k1, scale*k2) at a fixed center, radii
/// pre-normalized. Returns (coeffs, sum of squared residuals in normalized
/// units).
fn solve_radial(pairs: &[((f64, f64), (f64, f64))], cx: f64, cy: f64, inv_r: f64) -> ([f64; 3], f64) {
    // Basis per point: u_d, u_d*r^2, u_d*r^4 (2-vector each); target u_i.
    let mut a = [[0f64; 3]; 3];
    let mut b = [0f64; 3];
    for &((dx, dy), (ix, iy)) in pairs {
        let (udx, udy) = ((dx - cx) * inv_r, (dy - cy) * inv_r);
        let (uix, uiy) = ((ix - cx) * inv_r, (iy - cy) * inv_r);
        let r2 = udx * udx + udy * udy;
        let pw = [1.0, r2, r2 * r2];
        let dd = udx * udx + udy * udy;
        let di = udx * uix + udy * uiy;
        for j in 0..3 {
            for k in 0..3 {
                a[j][k] += dd * pw[j] * pw[k];
            }
            b[j] += di * pw[j];
        }
    }
    let beta = solve3(a, b);
    let mut ss = 0.0;
    for &((dx, dy), (ix, iy)) in pairs {
        let (udx, udy) = ((dx - cx) * inv_r, (dy - cy) * inv_r);
        let (uix, uiy) = ((ix - cx) * inv_r, (iy - cy) * inv_r);
        let r2 = udx * udx + udy * udy;
        let g = beta[0] + beta[1] * r2 + beta[2] * r2 * r2;
        ss += (udx * g - uix).powi(2) + (udy * g - uiy).powi(2);
    }
    (beta, ss)
}

/// Gaussian elimination with partial pivoting for a 3x3 system.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        if d == 0.0 {
            return [f64::NAN; 3];
        }
        for row in col + 1..3 {
            let f = a[row][col] / d;
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0f64; 3];
    for row in (0..3).rev() {
        let mut v = b[row];
        for k in row + 1..3 {
            v -= a[row][k] * x[k];
        }
        x[row] = v / a[row][row];
    }
    x
}

/// Fits the radial mapping to (distorted, ideal) point pairs. The center is
/// found by pattern search (the residual is smooth and single-welled for
/// radial warps); the polynomial is linear least squares at each center.
pub fn fit_mapping(
    pairs: &[((f64, f64), (f64, f64))],
    frame_px: (usize, usize),
) -> Result<DistortionModel, DistortionError> {
    if pairs.len() < MIN_FIT_POINTS {
        return Err(DistortionError::TooFewPoints {
            got: pairs.len(),
            need: MIN_FIT_POINTS,
        });
    }
    let half_diag = ((frame_px.0 as f64).powi(2) + (frame_px.1 as f64).powi(2)).sqrt() / 2.0;
    let inv_r = 1.0 / half_diag;
    let mut cx = (frame_px.0 as f64 - 1.0) / 2.0;
    let mut cy = (frame_px.1 as f64 - 1.0) / 2.0;
    let (mut beta, mut ss) = solve_radial(pairs, cx, cy, inv_r);
    let mut step = frame_px.0.max(frame_px.1) as f64 / 64.0;
    while step > 0.01 {
        let mut moved = false;
        for (dx, dy) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let (nb, ns) = solve_radial(pairs, cx + dx, cy + dy, inv_r);
            if ns < ss {
                (cx, cy, beta, ss) = (cx + dx, cy + dy, nb, ns);
                moved = true;
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    if !beta.iter().all(|v| v.is_finite()) || beta[0] <= 0.0 {
        return Err(DistortionError::NonInvertible);
    }
    let scale = beta[0];
    let model = DistortionModel {
        cx,
        cy,
        k1: beta[1] / scale * inv_r * inv_r,
        k2: beta[2] / scale * inv_r.powi(4),
        scale,
        residual_rms_px: (ss / pairs.len() as f64).sqrt() * half_diag,
    };
    if model.residual_rms_px > FIT_RMS_LIMIT_PX {
        return Err(DistortionError::FitRejected {
            rms: model.residual_rms_px,
            limit: FIT_RMS_LIMIT_PX,
        });
    }
    Ok(model)
}

/// Fits the mapping from a grid detection in two passes. The provisional
/// ideal lattice uses the measured pitch, which distortion inflates by a few
/// percent; that error only rescales `scale`, leaving k1/k2 unbiased, so the
/// first fit's shape is used to rectify the grid at unit center
/// magnification, the true pitch is re-read off the now-rigid grid, and the
/// final fit runs against that lattice (bringing `scale` back to ~1).
pub fn fit_distortion(det: &GridDetection) -> Result<DistortionModel, DistortionError> {
    let pairs: Vec<_> = det
        .centroids
        .iter()
        .copied()
        .zip(det.ideal_positions())
        .collect();
    let first = fit_mapping(&pairs, det.frame_px)?;
    let gauge = DistortionModel {
        scale: 1.0,
        ..first
    };
    let rect: Vec<(f64, f64)> = det
        .centroids
        .iter()
        .map(|&(x, y)| gauge.map_point(x, y))
        .collect();
    let n = rect.len() as f64;
    let cbar = det.grid_assignment.iter().map(|a| a.1 as f64).sum::<f64>() / n;
    let rbar = det.grid_assignment.iter().map(|a| a.0 as f64).sum::<f64>() / n;
    let xbar = rect.iter().map(|p| p.0).sum::<f64>() / n;
    let ybar = rect.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut num, mut den) = (0f64, 0f64);
    for (&(x, y), &(row, col)) in rect.iter().zip(&det.grid_assignment) {
        num += (col as f64 - cbar) * (x - xbar) + (row as f64 - rbar) * (y - ybar);
        den += (col as f64 - cbar).powi(2) + (row as f64 - rbar).powi(2);
    }
    let pitch = num / den;
    if !(pitch.is_finite() && pitch > 0.0) {
        return Ok(first);
    }
    let pairs2: Vec<_> = det
        .centroids
        .iter()
        .copied()
        .zip(det.grid_assignment.iter().map(|&(row, col)| {
            (
                xbar + pitch * (col as f64 - cbar),
                ybar + pitch * (row as f64 - rbar),
            )
        }))
        .collect();
    fit_mapping(&pairs2, det.frame_px)
}

/// Radial LUT sampling density, px of output radius per entry.
const LUT_STEP_PX: f64 = 0.5;

/// Precomputed inverse remap for one (model, frame size) pairing. Building
/// it costs one Newton solve per LUT entry; applying it is pure resampling.
pub struct Corrector {
    model: DistortionModel,
    width: usize,
    height: usize,
    /// Distorted (source) radius per output-radius bin.
    lut: Vec<f32>,
}

impl Corrector {
    pub fn new(
        model: &DistortionModel,
        width: usize,
        height: usize,
    ) -> Result<Self, DistortionError> {
        if !(model.scale.is_finite() && model.k1.is_finite() && model.k2.is_finite())
            || model.scale <= 0.0
        {
            return Err(DistortionError::NonInvertible);
        }
        // Farthest output corner from the center bounds the radii needed.
        let corners = [
            (0.0, 0.0),
            (width as f64 - 1.0, 0.0),
            (0.0, height as f64 - 1.0),
            (width as f64 - 1.0, height as f64 - 1.0),
        ];
        let r_max = corners
            .iter()
            .map(|&(x, y)| (x - model.cx).hypot(y - model.cy))
            .fold(0.0f64, f64::max);
        let n = (r_max / LUT_STEP_PX).ceil() as usize + 2;
        let mut lut = Vec::with_capacity(n);
        let mut r_src = 0.0f64;
        for i in 0..n {
            let target = i as f64 * LUT_STEP_PX;
            // Newton from the previous bin's solution; the mapping is near
            // identity so this converges in a few steps.
            let mut r = if i == 0 { 0.0 } else { r_src.max(target / model.scale) };
            for _ in 0..32 {
                let r2 = r * r;
                let f = model.scale * r * (1.0 + model.k1 * r2 + model.k2 * r2 * r2) - target;
                let d = model.scale * (1.0 + 3.0 * model.k1 * r2 + 5.0 * model.k2 * r2 * r2);
                if d <= 0.0 {
                    return Err(DistortionError::NonInvertible);
                }
                let next = r - f / d;
                if (next - r).abs() < 1e-9 {
                    r = next;
                    break;
                }
                r = next;
            }
            if !r.is_finite() || r < 0.0 || (i > 0 && r <= r_src) {
                return Err(DistortionError::NonInvertible);
            }
            r_src = r;
            lut.push(r as f32);
        }
        Ok(Corrector {
            model: *model,
            width,
            height,
            lut,
        })
    }

    pub fn model(&self) -> &DistortionModel {
        &self.model
    }

    /// Distorted-frame source position for an output pixel.
    pub fn source_of(&self, x: f64, y: f64) -> (f64, f64) {
        let (ux, uy) = (x - self.model.cx, y - self.model.cy);
        let r_out = (ux * ux + uy * uy).sqrt();
        if r_out == 0.0 {
            return (x, y);
        }
        let pos = r_out / LUT_STEP_PX;
        let i = (pos as usize).min(self.lut.len() - 2);
        let t = pos - i as f64;
        let r_src = self.lut[i] as f64 * (1.0 - t) + self.lut[i + 1] as f64 * t;
        let g = r_src / r_out;
        (self.model.cx + ux * g, self.model.cy + uy * g)
    }

    /// Resamples a distorted frame into ideal coordinates. Dimensions are
    /// preserved; out-of-frame sources replicate the edge.
    pub fn apply(&self, img: &Image) -> Result<Image, DistortionError> {
        if img.width() != self.width || img.height() != self.height {
            return Err(ImagingError::DimensionMismatch {
                width: self.width,
                height: self.height,
                channels: img.channels(),
                len: img.width() * img.height() * img.channels(),
            }
            .into());
        }
        if self.model.is_identity() {
            return Ok(img.clone());
        }
        use rayon::prelude::*;
        let (w, h, c) = (self.width, self.height, img.channels());
        // Source coordinates are channel-independent; compute once per pixel.
        let coords: Vec<(f32, f32)> = (0..h)
            .into_par_iter()
            .flat_map_iter(|y| {
                (0..w).map(move |x| {
                    let (sx, sy) = self.source_of(x as f64, y as f64);
                    (sx as f32, sy as f32)
                })
            })
            .collect();
        let mut data = vec![0f32; w * h * c];
        for ch in 0..c {
            let src = img.plane(ch);
            let dst = &mut data[ch * w * h..(ch + 1) * w * h];
            dst.par_chunks_mut(w)
                .enumerate()
                .for_each(|(y, row)| {
                    let crow = &coords[y * w..(y + 1) * w];
                    for x in 0..w {
                        let (sx, sy) = crow[x];
                        row[x] = sample_bilinear(src, w, h, sx, sy);
                    }
                });
        }
        let mut out = Image::from_data(w, h, c, data)?;
        out.pixel_pitch_obj = img.pixel_pitch_obj;
        Ok(out)
    }
}

/// One-shot correction; builds the remap table each call. Callers with many
/// frames of one geometry should hold a [`Corrector`] instead.
pub fn correct(img: &Image, model: &DistortionModel) -> Result<Image, DistortionError> {
    Corrector::new(model, img.width(), img.height())?.apply(img)
}

/// Renders a bright dot lattice on a dark background, dots anti-aliased
/// analytically. Returns the image and the true dot centers. The lattice is
/// centered in the frame: `n x n` dots at `pitch_px` spacing.
pub fn synthesize_dot_grid(
    width: usize,
    height: usize,
    n: usize,
    pitch_px: f64,
    dot_radius_px: f64,
) -> (Image, Vec<(f64, f64)>) {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let half = (n as f64 - 1.0) / 2.0;
    let centers: Vec<(f64, f64)> = (0..n * n)
        .map(|i| {
            let (row, col) = (i / n, i % n);
            (
                cx + (col as f64 - half) * pitch_px,
                cy + (row as f64 - half) * pitch_px,
            )
        })
        .collect();
    let bg = 0.05f32;
    let fg = 0.95f32;
    let img = Image::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        // Only the nearest lattice cell can contain a covering dot.
        let col = ((xf - cx) / pitch_px + half).round().clamp(0.0, n as f64 - 1.0) as usize;
        let row = ((yf - cy) / pitch_px + half).round().clamp(0.0, n as f64 - 1.0) as usize;
        let (dx, dy) = centers[row * n + col];
        let d = (xf - dx).hypot(yf - dy);
        let cover = (dot_radius_px + 0.5 - d).clamp(0.0, 1.0) as f32;
        bg + (fg - bg) * cover
    });
    (img, centers)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Forward pincushion warp of an image: content at ideal radius r moves
    /// out to r*(1 + k1*r^2). This is exactly `correct` run with +k1, since
    /// correction with positive k1 pulls sources inward.
    fn warp_outward(img: &Image, k1: f64) -> Image {
        let model = DistortionModel {
            k1,
            ..DistortionModel::identity(img.width(), img.height())
        };
        correct(img, &model).unwrap()
    }

    /// (distorted, ideal) pairs generated forward through the model family:
    /// distorted points on a lattice, ideal = model-mapped.
    fn model_pairs(k1: f64, frame: (usize, usize)) -> Vec<((f64, f64), (f64, f64))> {
        let model = DistortionModel {
            k1,
            ..DistortionModel::identity(frame.0, frame.1)
        };
        let mut pairs = Vec::new();
        for row in 0..11 {
            for col in 0..15 {
                let d = (150.0 + col as f64 * 370.0, 120.0 + row as f64 * 340.0);
                pairs.push((d, model.map_point(d.0, d.1)));
            }
        }
        pairs
    }

    fn detection_map(det: &GridDetection) -> std::collections::HashMap<(usize, usize), (f64, f64)> {
        det.grid_assignment
            .iter()
            .copied()
            .zip(det.centroids.iter().copied())
            .collect()
    }

    #[test]
    fn detects_undistorted_grid_to_a_tenth_pixel() {
        let (img, truth) = synthesize_dot_grid(3460, 3460, 11, 300.0, 7.0);
        let det = detect_grid(&img).unwrap();
        assert_eq!(det.centroids.len(), 121);
        assert!((det.pitch_px - 300.0).abs() < 1.0);
        let by_cell = detection_map(&det);
        assert_eq!(by_cell.len(), 121);
        for (i, &(tx, ty)) in truth.iter().enumerate() {
            let (row, col) = (i / 11, i % 11);
            let &(dx, dy) = by_cell.get(&(row, col)).expect("cell detected");
            let err = (dx - tx).hypot(dy - ty);
            assert!(err < 0.1, "dot ({row},{col}) centroid off by {err:.3} px");
        }
    }

    #[test]
    fn warped_corner_dot_moves_radially_outward() {
        let (img, truth) = synthesize_dot_grid(3460, 3460, 11, 300.0, 7.0);
        let k1 = 5e-9;
        let warped = warp_outward(&img, k1);
        let det = detect_grid(&warped).unwrap();
        let by_cell = detection_map(&det);
        let c = (img.width() as f64 - 1.0) / 2.0;
        let corner_truth = truth[0]; // (row 0, col 0)
        let r_ideal = (corner_truth.0 - c).hypot(corner_truth.1 - c);
        let &(dx, dy) = by_cell.get(&(0, 0)).expect("corner detected");
        let r_detected = (dx - c).hypot(dy - c);
        let expected_shift = k1 * r_ideal.powi(3);
        assert!(
            r_detected - r_ideal > 0.8 * expected_shift,
            "corner moved {:.2} px outward, expected about {:.2}",
            r_detected - r_ideal,
            expected_shift
        );
    }

    #[test]
    fn blank_image_fails_detection() {
        let img = Image::from_fn(256, 256, |_, _| 0.3);
        assert!(matches!(
            detect_grid(&img),
            Err(DistortionError::NoGrid(_))
        ));
    }

    #[test]
    fn fit_recovers_known_model_from_noisy_point_pairs() {
        use rand::{Rng, SeedableRng};
        let frame = (5472usize, 3648usize);
        let k1 = 5e-9;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pairs: Vec<_> = model_pairs(k1, frame)
            .into_iter()
            .map(|(d, i)| {
                // Detection-grade centroid noise on the distorted side.
                let nx: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.05;
                let ny: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.05;
                ((d.0 + nx, d.1 + ny), i)
            })
            .collect();
        let model = fit_mapping(&pairs, frame).unwrap();
        assert!(
            model.residual_rms_px <= 0.1,
            "rms {:.4}",
            model.residual_rms_px
        );
        assert!(
            (model.k1 / k1 - 1.0).abs() < 0.05,
            "k1 {:.3e} not within 5% of {:.3e}",
            model.k1,
            k1
        );
        assert!((model.scale - 1.0).abs() < 1e-3);
        assert!((model.cx - 2735.5).abs() < 30.0 && (model.cy - 1823.5).abs() < 30.0);
    }

    #[test]
    fn fit_on_undistorted_points_is_near_identity() {
        let frame = (2000usize, 1500usize);
        let mut pairs = Vec::new();
        for row in 0..8 {
            for col in 0..10 {
                let p = (100.0 + col as f64 * 190.0, 80.0 + row as f64 * 185.0);
                pairs.push((p, p));
            }
        }
        let model = fit_mapping(&pairs, frame).unwrap();
        let half_diag = 1250.0;
        assert!((model.scale - 1.0).abs() < 1e-6);
        assert!(model.k1.abs() * half_diag * half_diag < 1e-4);
        assert!(model.residual_rms_px < 1e-6);
    }

    #[test]
    fn too_few_points_is_a_precondition_error() {
        let pairs: Vec<_> = (0..5)
            .map(|i| {
                let p = (i as f64 * 100.0, i as f64 * 50.0);
                (p, p)
            })
            .collect();
        assert!(matches!(
            fit_mapping(&pairs, (1000, 1000)),
            Err(DistortionError::TooFewPoints { got: 5, need: 20 })
        ));
    }

    #[test]
    fn roundtrip_residual_stays_under_half_pixel_across_k1_range() {
        let frame = (5472usize, 3648usize);
        for &k1 in &[1e-9, 2e-9, 5e-9, 8e-9, 1e-8] {
            let pairs = model_pairs(k1, frame);
            let model = fit_mapping(&pairs, frame).unwrap();
            let max_resid = pairs
                .iter()
                .map(|&(d, i)| {
                    let m = model.map_point(d.0, d.1);
                    (m.0 - i.0).hypot(m.1 - i.1)
                })
                .fold(0.0f64, f64::max);
            assert!(
                max_resid <= 0.5,
                "k1 {k1:.1e}: max residual {max_resid:.3} px"
            );
        }
    }

    #[test]
    fn identity_model_is_a_no_op() {
        let (img, _) = synthesize_dot_grid(400, 300, 4, 80.0, 5.0);
        let model = DistortionModel::identity(400, 300);
        let out = correct(&img, &model).unwrap();
        assert_eq!(out.plane(0), img.plane(0));
        // Idempotence follows from exact equality, but assert it directly.
        let again = correct(&out, &model).unwrap();
        assert_eq!(again.plane(0), out.plane(0));
    }

    #[test]
    fn center_pixel_is_a_fixed_point() {
        let model = DistortionModel {
            cx: 211.0,
            cy: 157.0,
            k1: -4e-7,
            k2: 1e-14,
            scale: 1.001,
            residual_rms_px: 0.0,
        };
        let c = Corrector::new(&model, 400, 300).unwrap();
        let (sx, sy) = c.source_of(211.0, 157.0);
        assert_eq!((sx, sy), (211.0, 157.0));
        // Displacement grows from zero with radius.
        let (nx, _) = c.source_of(212.0, 157.0);
        assert!((nx - 212.0).abs() < 0.1);
    }

    #[test]
    fn warp_then_fit_then_correct_restores_the_lattice() {
        let (img, truth) = synthesize_dot_grid(1600, 1200, 9, 140.0, 5.0);
        let k1 = 5e-8;
        let warped = warp_outward(&img, k1);
        let det = detect_grid(&warped).unwrap();
        let model = fit_distortion(&det).unwrap();
        assert!(model.k1 < 0.0, "correction of pincushion pulls inward");
        let corrected = correct(&warped, &model).unwrap();
        let redet = detect_grid(&corrected).unwrap();
        let by_cell = detection_map(&redet);
        let mut max_err = 0.0f64;
        for (i, &(tx, ty)) in truth.iter().enumerate() {
            let (row, col) = (i / 9, i % 9);
            let &(dx, dy) = by_cell.get(&(row, col)).expect("cell detected after correction");
            max_err = max_err.max((dx - tx).hypot(dy - ty));
        }
        assert!(
            max_err <= 0.3,
            "corrected centroids off ideal lattice by up to {max_err:.3} px"
        );
    }

    #[test]
    fn non_invertible_model_is_rejected() {
        // Strongly negative k1 folds radii over within the frame.
        let model = DistortionModel {
            k1: -2e-5,
            ..DistortionModel::identity(1000, 800)
        };
        assert!(matches!(
            Corrector::new(&model, 1000, 800),
            Err(DistortionError::NonInvertible)
        ));
    }

    #[test]
    fn model_json_roundtrips_and_uses_stable_field_names() {
        let model = DistortionModel {
            cx: 2735.5,
            cy: 1823.5,
            k1: -4.987e-9,
            k2: 1.2e-18,
            scale: 0.99991,
            residual_rms_px: 0.032,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("distortion.json");
        model.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for key in ["\"cx\"", "\"cy\"", "\"k1\"", "\"k2\"", "\"scale\"", "\"residual_rms_px\""] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
        let loaded = DistortionModel::load(&path).unwrap();
        loaded.save(&path).unwrap();
        assert_eq!(text, std::fs::read_to_string(&path).unwrap());
    }
}
