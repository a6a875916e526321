//! Single-frame defocus estimation from one dual-illumination capture.
//!
//! Under angled red/green illumination a defocused specimen images as two
//! laterally separated copies, one per color, and the separation grows
//! linearly with defocus. Recovering that separation from the red and green
//! channels of a single frame is an image-registration problem along the
//! LED axis (x); this module solves it by maximizing the mutual information
//! between the channels over a trial shift, then converts the result to a
//! defocus distance and a focus-ring correction through the calibration
//! model.
//!
//! Registration runs in two stages: a bounded integer-shift scan locates
//! the global MI peak (the landscape is non-convex, so an ascent alone
//! could lock onto a side lobe), then a central-difference ascent with step
//! halving refines the peak to subpixel resolution. MI is estimated from a
//! fixed random subsample of pixels via a Parzen-smoothed joint histogram;
//! the same sample set serves every trial shift so the landscape is
//! consistent across one estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationModel;
use crate::imaging::{Image, ImagingError};

/// Coarse-scan MI spread (peak minus floor) below which a frame is treated
/// as featureless. The estimator's own sampling bias is below 0.05 nats;
/// a genuine alignment peak clears this severalfold.
const LOW_CONFIDENCE_SPREAD_NATS: f64 = 0.1;

/// Rows averaged (edge-replicated boxcar) in both channels before sampling.
/// The sought displacement is purely along x, so y resolution is
/// expendable; averaging suppresses per-pixel sensor noise and with it the
/// 1 px period ripple that noise imprints on the MI landscape (fractional
/// shifts interpolate, and thereby denoise, the probe channel while integer
/// shifts read it raw), without widening the x response.
const Y_WINDOW_ROWS: usize = 15;

#[derive(Debug, thiserror::Error)]
pub enum AfError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error(
        "flat mutual-information landscape (spread {spread:.4} nats); \
         no reliable separation"
    )]
    LowConfidence { spread: f64 },
    #[error("shift {shift:.1} px outside searchable range ±{max:.1} px")]
    ShiftOutOfRange { shift: f64, max: f64 },
    #[error("calibration unusable: {0}")]
    Uncalibrated(String),
    #[error("image: {0}")]
    Imaging(#[from] ImagingError),
}

/// Estimator tuning. Defaults reproduce the reference configuration:
/// ~10k sampled pixels, a ±80 px coarse search, and a 5-10 iteration
/// subpixel refinement.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AfConfig {
    /// Pixels subsampled per estimate.
    pub sample_count: usize,
    /// Refinement iteration bounds.
    pub max_iters: u32,
    pub min_iters: u32,
    /// Coarse integer scan covers shifts in ±this.
    pub coarse_range_px: u32,
    /// Joint histogram size per axis.
    pub histogram_bins: usize,
    /// Gaussian smoothing applied to the histogram, in bins.
    pub parzen_sigma_bins: f64,
    /// Initial refinement step.
    pub step_init_px: f64,
    /// Refinement stops once the step falls below this (after min_iters).
    pub converge_tol_px: f64,
    /// Seed for the pixel subsample; estimates are deterministic given it.
    pub rng_seed: u64,
}

impl Default for AfConfig {
    fn default() -> Self {
        AfConfig {
            sample_count: 10_000,
            max_iters: 10,
            min_iters: 5,
            coarse_range_px: 80,
            histogram_bins: 64,
            parzen_sigma_bins: 1.0,
            step_init_px: 1.0,
            converge_tol_px: 0.05,
            rng_seed: 1,
        }
    }
}

impl AfConfig {
    fn validate(&self) -> Result<(), AfError> {
        if self.min_iters > self.max_iters {
            return Err(AfError::BadConfig(format!(
                "min_iters {} > max_iters {}",
                self.min_iters, self.max_iters
            )));
        }
        if self.sample_count < 16 {
            return Err(AfError::BadConfig("sample_count < 16".into()));
        }
        if !(8..=1024).contains(&self.histogram_bins) {
            return Err(AfError::BadConfig("histogram_bins outside 8..=1024".into()));
        }
        if self.coarse_range_px == 0 {
            return Err(AfError::BadConfig("coarse_range_px must be positive".into()));
        }
        if !(self.step_init_px > 0.0) || !(self.converge_tol_px > 0.0) {
            return Err(AfError::BadConfig("steps must be positive".into()));
        }
        Ok(())
    }

    /// Largest |shift| any stage may request: the refinement is confined to
    /// ±2 px around the coarse peak.
    fn max_shift(&self) -> f64 {
        self.coarse_range_px as f64 + 2.0
    }

    /// Interior margin keeping every shifted bilinear read in bounds.
    fn sample_margin(&self) -> usize {
        self.coarse_range_px as usize + 4
    }
}

/// One autofocus result.
#[derive(Debug, Clone, Serialize)]
pub struct DefocusEstimate {
    /// Red-to-green displacement along x, px (positive = green content
    /// sits at larger x).
    pub separation_px: f64,
    /// Filled once converted through a calibration model.
    pub defocus_um: Option<f64>,
    /// MI at the returned separation, nats.
    pub mi_final: f64,
    /// Refinement iterations used.
    pub iterations: u32,
    /// Integer coarse-scan peak; the final separation lies within ±2 px.
    pub coarse_peak_px: i32,
}

/// Pixel subsample with per-sample red values pre-binned; shared by every
/// trial shift of one estimate. Holds y-averaged copies of both planes.
struct MiSampler {
    b: Vec<f32>,
    width: usize,
    xs: Vec<u32>,
    ys: Vec<u32>,
    /// Histogram bin of a's value at each sample.
    ia: Vec<u16>,
    bins: usize,
    taps: Vec<f64>,
}

fn bin_of(v: f32, bins: usize) -> u16 {
    let t = (v.clamp(0.0, 1.0) as f64 * bins as f64) as usize;
    t.min(bins - 1) as u16
}

/// Normalized Gaussian taps truncated at 3 sigma.
fn parzen_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// y-averaged copy of a plane; window clamped to an odd count within the
/// image height.
fn y_average(plane: &[f32], width: usize, height: usize) -> Vec<f32> {
    let win = Y_WINDOW_ROWS.min(if height % 2 == 0 { height - 1 } else { height });
    let mut out = vec![0.0f32; plane.len()];
    crate::imaging::box_blur_plane_into(plane, width, height, win, crate::imaging::Axis::Y, &mut out);
    out
}

impl MiSampler {
    /// Draws the subsample. `a` is the reference plane (never shifted),
    /// `b` the plane probed at `x + shift`.
    fn new(a: &[f32], b: &[f32], width: usize, height: usize, cfg: &AfConfig) -> Result<Self, AfError> {
        let margin = cfg.sample_margin();
        if width < 2 * margin + 8 {
            return Err(AfError::DegenerateInput(format!(
                "frame width {width} px cannot host a ±{} px search (needs {})",
                cfg.coarse_range_px,
                2 * margin + 8
            )));
        }
        let a = y_average(a, width, height);
        let b = y_average(b, width, height);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let n = cfg.sample_count;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        let mut ia = Vec::with_capacity(n);
        for _ in 0..n {
            let x = rng.random_range(margin..width - margin) as u32;
            let y = rng.random_range(0..height) as u32;
            xs.push(x);
            ys.push(y);
            ia.push(bin_of(a[y as usize * width + x as usize], cfg.histogram_bins));
        }
        Ok(MiSampler {
            b,
            width,
            xs,
            ys,
            ia,
            bins: cfg.histogram_bins,
            taps: parzen_taps(cfg.parzen_sigma_bins),
        })
    }

    fn a_is_constant(&self) -> bool {
        self.ia.windows(2).all(|w| w[0] == w[1])
    }

    fn b_is_constant_at(&self, shift: f64) -> bool {
        let first = self.b_value(0, shift);
        (1..self.xs.len()).all(|i| self.b_value(i, shift) == first)
    }

    /// b at (x_i + shift, y_i), linearly interpolated along x.
    fn b_value(&self, i: usize, shift: f64) -> f32 {
        let xf = self.xs[i] as f64 + shift;
        let x0 = xf.floor();
        let t = (xf - x0) as f32;
        let row = self.ys[i] as usize * self.width;
        let x0 = x0 as usize;
        let v0 = self.b[row + x0];
        if t == 0.0 {
            v0
        } else {
            v0 + (self.b[row + x0 + 1] - v0) * t
        }
    }

    /// MI of (a, b shifted) over the sample set, in nats.
    fn mi(&self, shift: f64) -> f64 {
        let bins = self.bins;
        let mut joint = vec![0.0f64; bins * bins];
        for i in 0..self.xs.len() {
            let j = bin_of(self.b_value(i, shift), bins);
            joint[self.ia[i] as usize * bins + j as usize] += 1.0;
        }
        smoothed_mi(&mut joint, bins, &self.taps)
    }
}

/// Smooths a joint histogram with separable Gaussian taps (truncated at the
/// edges), normalizes, and returns the mutual information of the result
/// against the product of its own marginals. Nonnegative by construction.
fn smoothed_mi(joint: &mut [f64], bins: usize, taps: &[f64]) -> f64 {
    let r = taps.len() / 2;
    if r > 0 {
        let mut tmp = vec![0.0f64; bins * bins];
        // Rows (first index).
        for (k, &t) in taps.iter().enumerate() {
            let d = k as i64 - r as i64;
            let (lo, hi) = (0.max(-d) as usize, bins.min((bins as i64 - d) as usize));
            for i in lo..hi {
                let src = ((i as i64 + d) as usize) * bins;
                let dst = i * bins;
                for j in 0..bins {
                    tmp[dst + j] += t * joint[src + j];
                }
            }
        }
        // Columns (second index).
        joint.iter_mut().for_each(|v| *v = 0.0);
        for (k, &t) in taps.iter().enumerate() {
            let d = k as i64 - r as i64;
            let (lo, hi) = (0.max(-d) as usize, bins.min((bins as i64 - d) as usize));
            for i in 0..bins {
                let row = i * bins;
                for j in lo..hi {
                    joint[row + j] += t * tmp[row + (j as i64 + d) as usize];
                }
            }
        }
    }
    let total: f64 = joint.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut px = vec![0.0f64; bins];
    let mut py = vec![0.0f64; bins];
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            px[i] += c;
            py[j] += c;
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        if px[i] <= 0.0 {
            continue;
        }
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0.0 {
                mi += c / total * (c * total / (px[i] * py[j])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// MI between two single-channel images at one trial shift, using a fresh
/// subsample drawn from `cfg.rng_seed`. Sampling positions depend only on
/// the seed and geometry, so calls with equal seeds share a sample set and
/// their results are comparable across shifts.
pub fn mutual_information(a: &Image, b: &Image, shift_px: f64, cfg: &AfConfig) -> Result<f64, AfError> {
    cfg.validate()?;
    if a.channels() != 1 || b.channels() != 1 {
        return Err(ImagingError::ChannelMismatch {
            expected: 1,
            actual: a.channels().max(b.channels()),
        }
        .into());
    }
    if a.width() != b.width() || a.height() != b.height() {
        return Err(ImagingError::DimensionMismatch {
            width: a.width(),
            height: a.height(),
            channels: 1,
            len: b.plane(0).len(),
        }
        .into());
    }
    if shift_px.abs() > cfg.max_shift() {
        return Err(AfError::ShiftOutOfRange {
            shift: shift_px,
            max: cfg.max_shift(),
        });
    }
    let s = MiSampler::new(a.plane(0), b.plane(0), a.width(), a.height(), cfg)?;
    if s.a_is_constant() {
        return Err(AfError::DegenerateInput("first channel is constant".into()));
    }
    if s.b_is_constant_at(shift_px) {
        return Err(AfError::DegenerateInput("second channel is constant".into()));
    }
    Ok(s.mi(shift_px))
}

/// Recovers the red-to-green separation of a dual-illumination frame.
///
/// Coarse stage: MI at every integer shift in ±`coarse_range_px`, largest
/// MI wins, ties broken toward the smallest |shift| (the in-focus
/// hypothesis). Fine stage: from the coarse peak, probe one step to either
/// side and move to the better neighbor, halving the step when neither
/// improves; the step's final size bounds the resolution. The refinement
/// never leaves ±2 px around the coarse peak.
pub fn estimate_separation(frame: &Image, cfg: &AfConfig) -> Result<DefocusEstimate, AfError> {
    cfg.validate()?;
    if frame.channels() != 3 {
        return Err(ImagingError::ChannelMismatch {
            expected: 3,
            actual: frame.channels(),
        }
        .into());
    }
    let sampler = MiSampler::new(frame.plane(0), frame.plane(1), frame.width(), frame.height(), cfg)?;
    if sampler.a_is_constant() {
        return Err(AfError::DegenerateInput("red channel is constant".into()));
    }
    if sampler.b_is_constant_at(0.0) {
        return Err(AfError::DegenerateInput("green channel is constant".into()));
    }

    // Coarse scan, |shift| ascending so a strict-improvement rule implements
    // the smallest-|shift| tie-break.
    let range = cfg.coarse_range_px as i64;
    let mut shifts = Vec::with_capacity(2 * range as usize + 1);
    shifts.push(0i64);
    for u in 1..=range {
        shifts.push(u);
        shifts.push(-u);
    }
    let mis: Vec<f64> = shifts.par_iter().map(|&u| sampler.mi(u as f64)).collect();
    let (mut peak_u, mut peak_mi) = (0i64, f64::NEG_INFINITY);
    let mut floor_mi = f64::INFINITY;
    for (&u, &m) in shifts.iter().zip(&mis) {
        if m > peak_mi {
            peak_u = u;
            peak_mi = m;
        }
        floor_mi = floor_mi.min(m);
    }
    let spread = peak_mi - floor_mi;
    if spread < LOW_CONFIDENCE_SPREAD_NATS {
        return Err(AfError::LowConfidence { spread });
    }

    // Fine stage.
    let (lo, hi) = (peak_u as f64 - 2.0, peak_u as f64 + 2.0);
    let mut x = peak_u as f64;
    let mut m = peak_mi;
    let mut step = cfg.step_init_px;
    let mut iters = 0u32;
    while iters < cfg.max_iters {
        if iters >= cfg.min_iters && step < cfg.converge_tol_px {
            break;
        }
        iters += 1;
        let xm = (x - step).clamp(lo, hi);
        let xp = (x + step).clamp(lo, hi);
        let mm = sampler.mi(xm);
        let mp = sampler.mi(xp);
        let (cand_x, cand_m) = if mp >= mm { (xp, mp) } else { (xm, mm) };
        if cand_m > m {
            x = cand_x;
            m = cand_m;
        } else {
            step *= 0.5;
        }
    }

    Ok(DefocusEstimate {
        separation_px: x,
        defocus_um: None,
        mi_final: m,
        iterations: iters,
        coarse_peak_px: peak_u as i32,
    })
}

/// Converts a separation reading to object-plane defocus, µm. Positive
/// defocus means the specimen lies beyond the focal plane.
pub fn defocus_from_separation(separation_px: f64, cal: &CalibrationModel) -> Result<f64, AfError> {
    let slope = cal.sep_slope_px_per_um;
    if !slope.is_finite() || slope == 0.0 {
        return Err(AfError::Uncalibrated(format!(
            "separation slope {slope} px/um cannot be inverted"
        )));
    }
    Ok((separation_px - cal.sep_offset_px) / slope)
}

/// A ring move, possibly clamped to the actuator's travel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingCorrection {
    pub steps: i64,
    pub clamped: bool,
}

/// Ring steps that drive `defocus_um` to zero: the focal plane follows the
/// ring at `object_um_per_step`, so the correction is the defocus divided
/// by that constant, rounded to whole steps and clamped to ±`travel_steps`.
pub fn ring_correction(
    defocus_um: f64,
    cal: &CalibrationModel,
    travel_steps: i64,
) -> Result<RingCorrection, AfError> {
    let per = cal.object_um_per_step;
    if !per.is_finite() || per <= 0.0 {
        return Err(AfError::Uncalibrated(format!(
            "object step constant {per} um/step cannot be inverted"
        )));
    }
    let raw = (defocus_um / per).round() as i64;
    let steps = raw.clamp(-travel_steps, travel_steps);
    Ok(RingCorrection {
        steps,
        clamped: steps != raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::CalSource;
    use crate::imaging::{box_blur_axis, translate, Axis};
    use crate::optics::Optics;
    use crate::simscope::{render, CaptureState, FocalSurface, SimParams, Specimen, SpecimenParams};
    use crate::scanner::wire::LedMode;

    /// Smooth full-range test texture: blurred uniform noise, renormalized.
    fn textured(width: usize, height: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f32> = (0..width * height).map(|_| rng.random::<f32>()).collect();
        let img = Image::from_data(width, height, 1, noise).unwrap();
        let img = box_blur_axis(&img, 5, Axis::X).unwrap();
        let img = box_blur_axis(&img, 5, Axis::Y).unwrap();
        let (lo, hi) = img
            .plane(0)
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        Image::from_fn(width, height, |x, y| (img.get(x, y, 0) - lo) / (hi - lo))
    }

    /// Builds an rg frame whose green plane is the red plane translated by
    /// `sep` px along x.
    fn frame_with_separation(tex: &Image, sep: f64) -> Image {
        let green = translate(tex, sep as f32, 0.0).unwrap();
        let blank = Image::new(tex.width(), tex.height(), 1);
        Image::from_planes([tex.clone(), green, blank]).unwrap()
    }

    fn cal(slope: f64, offset: f64) -> CalibrationModel {
        CalibrationModel {
            image_um_per_step: 8.0,
            object_um_per_step: 0.08,
            sep_slope_px_per_um: slope,
            sep_offset_px: offset,
            fit_residual_rms: 0.0,
            source: CalSource::Fitted,
            timestamp: "2026-08-22T00:00:00Z".into(),
        }
    }

    /// Brute-force MI oracle: floor-binned joint histogram, full 2D Gaussian
    /// convolution, direct MI sum. Independent of the library path.
    fn oracle_mi(av: &[f32], bv: &[f32], bins: usize, sigma: f64) -> f64 {
        let mut joint = vec![vec![0.0f64; bins]; bins];
        for (&a, &b) in av.iter().zip(bv) {
            let ia = ((a as f64 * bins as f64) as usize).min(bins - 1);
            let ib = ((b as f64 * bins as f64) as usize).min(bins - 1);
            joint[ia][ib] += 1.0;
        }
        let r = (3.0 * sigma).ceil() as i64;
        let g: Vec<f64> = (-r..=r)
            .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
            .collect();
        let gs: f64 = g.iter().sum();
        let mut sm = vec![vec![0.0f64; bins]; bins];
        for i in 0..bins as i64 {
            for j in 0..bins as i64 {
                let mut acc = 0.0;
                for di in -r..=r {
                    for dj in -r..=r {
                        let (si, sj) = (i + di, j + dj);
                        if si >= 0 && si < bins as i64 && sj >= 0 && sj < bins as i64 {
                            acc += g[(di + r) as usize] / gs * g[(dj + r) as usize] / gs
                                * joint[si as usize][sj as usize];
                        }
                    }
                }
                sm[i as usize][j as usize] = acc;
            }
        }
        let total: f64 = sm.iter().flatten().sum();
        let px: Vec<f64> = sm.iter().map(|row| row.iter().sum::<f64>()).collect();
        let mut py = vec![0.0f64; bins];
        for row in &sm {
            for (j, &c) in row.iter().enumerate() {
                py[j] += c;
            }
        }
        let mut mi = 0.0;
        for i in 0..bins {
            for j in 0..bins {
                let c = sm[i][j];
                if c > 0.0 {
                    mi += c / total * (c * total / (px[i] * py[j])).ln();
                }
            }
        }
        mi
    }

    /// The estimator's y pre-average, reproduced by direct window sums.
    fn oracle_y_average(img: &Image) -> Vec<f32> {
        let (w, h) = (img.width(), img.height());
        let win = Y_WINDOW_ROWS.min(if h % 2 == 0 { h - 1 } else { h }) as i64;
        let r = win / 2;
        let inv = 1.0 / win as f64;
        let mut out = vec![0.0f32; w * h];
        for y in 0..h as i64 {
            for x in 0..w {
                let mut acc = 0.0f64;
                for dy in -r..=r {
                    let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                    acc += img.get(x, yy, 0) as f64;
                }
                out[y as usize * w + x] = (acc * inv) as f32;
            }
        }
        out
    }

    /// The sample positions the library draws for a given config; reproduced
    /// here so the oracle sees the identical sample values.
    fn sample_values(a: &Image, b: &Image, shift: f64, cfg: &AfConfig) -> (Vec<f32>, Vec<f32>) {
        let margin = cfg.coarse_range_px as usize + 4;
        let (w, h) = (a.width(), a.height());
        let fa = oracle_y_average(a);
        let fb = oracle_y_average(b);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut av = Vec::new();
        let mut bv = Vec::new();
        for _ in 0..cfg.sample_count {
            let x = rng.random_range(margin..w - margin);
            let y = rng.random_range(0..h);
            av.push(fa[y * w + x]);
            let xf = x as f64 + shift;
            let x0 = xf.floor() as usize;
            let t = (xf - xf.floor()) as f32;
            let v0 = fb[y * w + x0];
            bv.push(if t == 0.0 {
                v0
            } else {
                v0 + (fb[y * w + x0 + 1] - v0) * t
            });
        }
        (av, bv)
    }

    #[test]
    fn mi_matches_brute_force_oracle() {
        let cfg = AfConfig { sample_count: 2000, coarse_range_px: 20, rng_seed: 3, ..AfConfig::default() };
        let a = textured(256, 128, 7);
        let b = textured(256, 128, 8);
        for shift in [0.0, 4.0, -7.5] {
            let lib = mutual_information(&a, &b, shift, &cfg).unwrap();
            let (av, bv) = sample_values(&a, &b, shift, &cfg);
            let want = oracle_mi(&av, &bv, cfg.histogram_bins, cfg.parzen_sigma_bins);
            assert!(
                (lib - want).abs() < 1e-9,
                "shift {shift}: lib {lib} oracle {want}"
            );
        }
    }

    #[test]
    fn self_mi_is_maximal_at_zero_and_bounded_by_entropy() {
        let cfg = AfConfig { sample_count: 5000, coarse_range_px: 12, rng_seed: 5, ..AfConfig::default() };
        let a = textured(256, 128, 1);
        let at_zero = mutual_information(&a, &a, 0.0, &cfg).unwrap();
        for shift in [-10.0, -3.0, 1.0, 2.0, 6.0, 10.0] {
            let off = mutual_information(&a, &a, shift, &cfg).unwrap();
            assert!(
                at_zero > off,
                "MI({shift}) = {off} not below MI(0) = {at_zero}"
            );
        }
        // Histogram smoothing leaks probability off the diagonal, so self-MI
        // sits below the marginal entropy rather than equal to it.
        let (av, _) = sample_values(&a, &a, 0.0, &cfg);
        let bins = cfg.histogram_bins;
        let mut hist = vec![0.0f64; bins];
        for &v in &av {
            hist[((v as f64 * bins as f64) as usize).min(bins - 1)] += 1.0;
        }
        let n: f64 = hist.iter().sum();
        let entropy: f64 = hist
            .iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| -(c / n) * (c / n).ln())
            .sum();
        assert!(at_zero <= entropy + 1e-9, "self MI {at_zero} above marginal entropy {entropy}");
        assert!(
            at_zero > 0.25 * entropy && at_zero > 0.5,
            "self MI implausibly small: {at_zero} vs H {entropy}"
        );
    }

    #[test]
    fn aligned_shift_beats_misaligned() {
        let cfg = AfConfig { coarse_range_px: 10, rng_seed: 2, ..AfConfig::default() };
        let a = textured(300, 150, 4);
        let b = translate(&a, 5.0, 0.0).unwrap();
        let at5 = mutual_information(&a, &b, 5.0, &cfg).unwrap();
        let at0 = mutual_information(&a, &b, 0.0, &cfg).unwrap();
        assert!(at5 > at0, "MI(5) = {at5} must exceed MI(0) = {at0}");
    }

    #[test]
    fn independent_noise_mi_stays_below_bias_bound() {
        let cfg = AfConfig { coarse_range_px: 10, rng_seed: 9, ..AfConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let mk = |r: &mut ChaCha8Rng| {
            Image::from_data(300, 120, 1, (0..300 * 120).map(|_| r.random::<f32>()).collect()).unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        for shift in [-10.0, -2.5, 0.0, 3.0, 10.0] {
            let mi = mutual_information(&a, &b, shift, &cfg).unwrap();
            assert!(mi <= 0.05, "independence bias {mi} nats at shift {shift}");
        }
    }

    #[test]
    fn rejects_constant_channel_and_bad_dims() {
        let cfg = AfConfig { coarse_range_px: 8, ..AfConfig::default() };
        let a = textured(128, 64, 1);
        let flat = Image::new(128, 64, 1);
        assert!(matches!(
            mutual_information(&a, &flat, 0.0, &cfg),
            Err(AfError::DegenerateInput(_))
        ));
        assert!(matches!(
            mutual_information(&flat, &a, 0.0, &cfg),
            Err(AfError::DegenerateInput(_))
        ));
        let small = textured(64, 64, 2);
        assert!(matches!(
            mutual_information(&a, &small, 0.0, &cfg),
            Err(AfError::Imaging(_))
        ));
        assert!(matches!(
            mutual_information(&a, &a, 30.0, &cfg),
            Err(AfError::ShiftOutOfRange { .. })
        ));
    }

    #[test]
    fn identical_channels_estimate_zero() {
        let tex = textured(512, 200, 11);
        let frame = frame_with_separation(&tex, 0.0);
        let est = estimate_separation(&frame, &AfConfig::default()).unwrap();
        assert!(
            est.separation_px.abs() <= 0.05,
            "got {} px for identical channels",
            est.separation_px
        );
        assert_eq!(est.coarse_peak_px, 0);
    }

    #[test]
    fn recovers_integer_translation() {
        let tex = textured(512, 200, 12);
        let frame = frame_with_separation(&tex, 5.0);
        // Exhaustive integer oracle: the MI argmax over whole shifts must
        // bracket the truth before trusting the estimator's refinement.
        let cfg = AfConfig::default();
        let sampler_best = (-20i64..=20)
            .map(|u| {
                let mi = mutual_information(
                    &tex,
                    &Image::from_data(512, 200, 1, frame.plane(1).to_vec()).unwrap(),
                    u as f64,
                    &cfg,
                )
                .unwrap();
                (u, mi)
            })
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        assert_eq!(sampler_best.0, 5, "integer MI oracle must peak at 5");

        let est = estimate_separation(&frame, &cfg).unwrap();
        assert!(
            (est.separation_px - 5.0).abs() <= 0.1,
            "got {} px, want 5.0 ± 0.1",
            est.separation_px
        );
        assert_eq!(est.coarse_peak_px, 5);
        assert!(est.iterations >= cfg.min_iters && est.iterations <= cfg.max_iters);
    }

    #[test]
    fn recovers_fractional_translation() {
        let tex = textured(512, 200, 13);
        let frame = frame_with_separation(&tex, 12.3);
        let cfg = AfConfig::default();

        // Oracle: integer scan plus parabolic refinement of the peak triple.
        let g = Image::from_data(512, 200, 1, frame.plane(1).to_vec()).unwrap();
        let mi_at = |u: f64| mutual_information(&tex, &g, u, &cfg).unwrap();
        let peak = (8i64..=16)
            .map(|u| (u, mi_at(u as f64)))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap()
            .0;
        assert_eq!(peak, 12, "integer oracle peak");
        let (m0, m1, m2) = (mi_at(peak as f64 - 1.0), mi_at(peak as f64), mi_at(peak as f64 + 1.0));
        let vertex = peak as f64 + 0.5 * (m0 - m2) / (m0 - 2.0 * m1 + m2);
        assert!(
            (vertex - 12.3).abs() < 0.35,
            "parabolic oracle vertex {vertex} should bracket 12.3"
        );

        let est = estimate_separation(&frame, &cfg).unwrap();
        assert!(
            (est.separation_px - 12.3).abs() <= 0.2,
            "got {} px, want 12.3 ± 0.2 (oracle vertex {vertex})",
            est.separation_px
        );
    }

    #[test]
    fn channel_swap_negates_separation() {
        let tex = textured(512, 200, 14);
        let frame = frame_with_separation(&tex, 7.4);
        let plane_img = |c: usize| Image::from_data(512, 200, 1, frame.plane(c).to_vec()).unwrap();
        let swapped = Image::from_planes([plane_img(1), plane_img(0), plane_img(2)]).unwrap();
        let cfg = AfConfig::default();
        let fwd = estimate_separation(&frame, &cfg).unwrap().separation_px;
        let rev = estimate_separation(&swapped, &cfg).unwrap().separation_px;
        assert!(
            (fwd + rev).abs() <= 0.1,
            "swap must negate: {fwd} vs {rev}"
        );
    }

    #[test]
    fn featureless_frame_reports_low_confidence() {
        // Pure sensor noise: no alignment peak anywhere.
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut mk = || {
            let data: Vec<f32> = (0..512 * 120)
                .map(|_| 0.5 + 0.005 * rng.sample::<f32, _>(rand_distr::StandardNormal))
                .collect();
            Image::from_data(512, 120, 1, data).unwrap()
        };
        let frame = Image::from_planes([mk(), mk(), Image::new(512, 120, 1)]).unwrap();
        match estimate_separation(&frame, &AfConfig::default()) {
            Err(AfError::LowConfidence { spread }) => {
                assert!(spread < LOW_CONFIDENCE_SPREAD_NATS)
            }
            other => panic!("expected low confidence, got {other:?}"),
        }
    }

    #[test]
    fn defocus_conversion_follows_calibration_line() {
        let m = cal(3.64, 0.0);
        assert_eq!(defocus_from_separation(0.0, &m).unwrap(), 0.0);
        let d = defocus_from_separation(36.4, &m).unwrap();
        assert!((d - 10.0).abs() < 1e-12, "36.4 px / 3.64 px/um = 10 um, got {d}");
        let d = defocus_from_separation(-18.2, &m).unwrap();
        assert!((d + 5.0).abs() < 1e-12);
        // Offset shifts the zero.
        let m2 = cal(3.64, 1.2);
        assert_eq!(defocus_from_separation(1.2, &m2).unwrap(), 0.0);
        // Zero slope is unusable.
        assert!(matches!(
            defocus_from_separation(1.0, &cal(0.0, 0.0)),
            Err(AfError::Uncalibrated(_))
        ));
    }

    #[test]
    fn ring_correction_rounds_and_clamps() {
        let m = cal(3.64, 0.0);
        assert_eq!(ring_correction(0.0, &m, 2500).unwrap().steps, 0);
        let rc = ring_correction(10.0, &m, 2500).unwrap();
        assert_eq!(rc.steps, 125);
        assert!(!rc.clamped);
        assert_eq!(ring_correction(0.033, &m, 2500).unwrap().steps, 0);
        assert_eq!(ring_correction(-10.0, &m, 2500).unwrap().steps, -125);
        let rc = ring_correction(500.0, &m, 2500).unwrap();
        assert_eq!(rc.steps, 2500);
        assert!(rc.clamped);
    }

    #[test]
    fn round_trip_separation_to_defocus_is_exact() {
        let m = cal(3.636_964_8, -0.04);
        for z in [-15.0, -3.2, 0.0, 0.7, 14.9] {
            let sep = m.sep_slope_px_per_um * z + m.sep_offset_px;
            let back = defocus_from_separation(sep, &m).unwrap();
            assert!(
                (back - z).abs() <= 1e-6 * z.abs().max(1.0),
                "z {z} -> sep {sep} -> {back}"
            );
        }
    }

    // Simulator-grounded checks below: the estimator against rendered
    // physics rather than synthetic translations.

    fn sim_frame(defocus_um: f64, velocity_mm_s: f64) -> Image {
        let spec = Specimen::generate(&SpecimenParams {
            extent_mm: (0.4, 0.3),
            amplitude_um: 0.0,
            seed: 21,
            ..SpecimenParams::default()
        })
        .unwrap();
        let mut p = SimParams::default();
        p.optics.frame_width = 512;
        p.optics.frame_height = 342;
        let mut st = CaptureState::at(0.2, 0.15);
        st.stage_z_um = -defocus_um;
        st.led_mode = LedMode::RgDual;
        if velocity_mm_s > 0.0 {
            st.y_velocity_mm_s = velocity_mm_s;
        }
        let spec = Specimen {
            surface: FocalSurface::flat(),
            ..spec
        };
        render(&spec, &st, &p).unwrap()
    }

    #[test]
    fn separation_tracks_simulated_defocus_linearly() {
        // Sweep the simulator over ±15 um: estimates must be monotone in the
        // true defocus and fit the optical slope to a sub-half-pixel
        // residual.
        let optics = Optics::default();
        let cfg = AfConfig::default();
        let mut pts = Vec::new();
        for z in [-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0] {
            let est = estimate_separation(&sim_frame(z, 0.0), &cfg).unwrap();
            pts.push((z, est.separation_px));
        }
        for w in pts.windows(2) {
            assert!(
                w[1].1 > w[0].1,
                "separation not monotone: {:?} -> {:?}",
                w[0],
                w[1]
            );
        }
        let fit = crate::calibration::fit_line(&pts).unwrap();
        assert!(
            (fit.slope - optics.separation_slope()).abs() / optics.separation_slope() < 0.05,
            "slope {} vs optical {}",
            fit.slope,
            optics.separation_slope()
        );
        assert!(fit.residual_rms <= 0.5, "residual {} px", fit.residual_rms);
    }

    #[test]
    fn y_motion_blur_barely_moves_the_estimate() {
        // Blur lengths of ~100 px (12 mm/s) and ~500 px (60 mm/s) along y
        // must leave the x-separation estimate within a pixel of the static
        // one.
        let cfg = AfConfig::default();
        let stat = estimate_separation(&sim_frame(6.0, 0.0), &cfg).unwrap();
        for v in [12.0, 60.0] {
            let moving = estimate_separation(&sim_frame(6.0, v), &cfg).unwrap();
            assert!(
                (moving.separation_px - stat.separation_px).abs() <= 1.0,
                "velocity {v} mm/s moved estimate {} -> {}",
                stat.separation_px,
                moving.separation_px
            );
        }
    }
}
