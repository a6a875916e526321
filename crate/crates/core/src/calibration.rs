//! The three linear relationships the instrument runs on, fitted and
//! persisted: ring steps to image-plane shift, ring steps to object-plane
//! defocus, and channel separation to defocus.
//!
//! Both focus curves are affine in the actuator position over the travel
//! used here, so each calibration is a least-squares line with a recorded
//! residual; a residual gate turns a bad sweep into an error instead of a
//! silently wrong model. Nominal fallback constants let the system run
//! before any calibration has been performed, flagged `source: nominal`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autofocus::{estimate_separation, AfConfig, AfError};
use crate::imaging::gradient_energy;
use crate::optics::Optics;
use crate::scanner::client::{Transport, WireClient};
use crate::scanner::wire::LedMode;

#[derive(Debug, thiserror::Error)]
pub enum CalError {
    #[error("need at least {need} points, got {got}")]
    InsufficientData { got: usize, need: usize },
    #[error("fit is rank-deficient (abscissa has no spread)")]
    RankDeficient,
    #[error("sweep response is not monotone in actuator position")]
    NonMonotone,
    #[error("fit residual {rms:.3} exceeds limit {limit:.3}")]
    ResidualTooLarge { rms: f64, limit: f64 },
    #[error("axial ratio {ratio:.2} outside {expected:.0} ± {tol_pct:.0}%")]
    AxialRatioMismatch {
        ratio: f64,
        expected: f64,
        tol_pct: f64,
    },
    #[error("autofocus: {0}")]
    Autofocus(#[from] AfError),
    #[error("device: {0}")]
    Device(#[from] crate::scanner::ScanError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalSource {
    Nominal,
    Fitted,
}

/// Fitted instrument constants. Field names match the on-disk JSON schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    /// Image-plane focal shift per ring step, µm (nominal 8.0).
    pub image_um_per_step: f64,
    /// Object-plane focal shift per ring step, µm (nominal 0.08).
    pub object_um_per_step: f64,
    /// Channel-separation slope, px per µm of defocus.
    pub sep_slope_px_per_um: f64,
    /// Separation reading at true focus, px.
    pub sep_offset_px: f64,
    /// RMS residual of the worst constituent fit, in that fit's units.
    pub fit_residual_rms: f64,
    pub source: CalSource,
    /// ISO-8601 creation time.
    pub timestamp: String,
}

impl CalibrationModel {
    /// Factory constants for an uncalibrated instrument.
    pub fn nominal(optics: &Optics) -> Self {
        CalibrationModel {
            image_um_per_step: optics.ring_step_image_um(),
            object_um_per_step: optics.ring_step_image_um() / optics.axial_magnification(),
            sep_slope_px_per_um: optics.separation_slope(),
            sep_offset_px: 0.0,
            fit_residual_rms: 0.0,
            source: CalSource::Nominal,
            timestamp: iso_now(),
        }
    }

    /// Image-to-object axial ratio; must equal the axial magnification.
    pub fn axial_ratio(&self) -> f64 {
        self.image_um_per_step / self.object_um_per_step
    }

    /// Rejects a model whose axial ratio disagrees with the optics by more
    /// than 1%, the symptom of a hand-edited or corrupted file.
    pub fn validate(&self, optics: &Optics) -> Result<(), CalError> {
        let expected = optics.axial_magnification();
        let ratio = self.axial_ratio();
        if !ratio.is_finite() || (ratio - expected).abs() / expected > 0.01 {
            return Err(CalError::AxialRatioMismatch {
                ratio,
                expected,
                tol_pct: 1.0,
            });
        }
        Ok(())
    }

    /// Writes the model as JSON, floats quantized to 9 significant digits so
    /// that a load/save cycle reproduces the file byte for byte.
    pub fn save(&self, path: &Path) -> Result<(), CalError> {
        let q = CalibrationModel {
            image_um_per_step: sig9(self.image_um_per_step),
            object_um_per_step: sig9(self.object_um_per_step),
            sep_slope_px_per_um: sig9(self.sep_slope_px_per_um),
            sep_offset_px: sig9(self.sep_offset_px),
            fit_residual_rms: sig9(self.fit_residual_rms),
            ..self.clone()
        };
        std::fs::write(path, serde_json::to_string_pretty(&q)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Rounds to 9 significant decimal digits.
pub(crate) fn sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float reparses")
}

pub(crate) fn iso_now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual_rms: f64,
}

/// Ordinary least-squares line through `points` as (x, y) pairs.
pub fn fit_line(points: &[(f64, f64)]) -> Result<LineFit, CalError> {
    if points.len() < 3 {
        return Err(CalError::InsufficientData {
            got: points.len(),
            need: 3,
        });
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    if sxx <= 0.0 {
        return Err(CalError::RankDeficient);
    }
    let sxy = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss = points
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum::<f64>();
    Ok(LineFit {
        slope,
        intercept,
        residual_rms: (ss / n).sqrt(),
    })
}

/// Requires the sweep response to be strictly monotone in actuator
/// position. A fold-back or a repeated position means the stage or the
/// ring lost steps mid-sweep, and a line through such data would be
/// silently wrong.
fn ensure_monotone(points: &[(f64, f64)]) -> Result<(), CalError> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(CalError::NonMonotone);
    }
    let rising = sorted.windows(2).all(|w| w[1].1 > w[0].1);
    let falling = sorted.windows(2).all(|w| w[1].1 < w[0].1);
    if rising || falling {
        Ok(())
    } else {
        Err(CalError::NonMonotone)
    }
}

/// Sweep geometry for the ring calibration. Stage targets are kept at whole
/// micrometers because the wire protocol carries millimeters with three
/// decimals; the ring side supplies the sub-micrometer resolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RingCalConfig {
    /// Half-range of the stage-z sweep, µm.
    pub z_range_um: f64,
    /// Stage-z increment between sweep points, µm (rounded to at least 1).
    pub z_step_um: f64,
    /// Half-width of the ring search around the predicted compensation, steps.
    pub search_halfspan_steps: i64,
    /// Stride of the coarse sharpness pass, steps.
    pub coarse_stride_steps: i64,
    /// Settle time after each stage move, s.
    pub settle_s: f64,
}

impl Default for RingCalConfig {
    fn default() -> Self {
        RingCalConfig {
            z_range_um: 10.0,
            z_step_um: 2.0,
            search_halfspan_steps: 40,
            coarse_stride_steps: 5,
            settle_s: 0.2,
        }
    }
}

/// Ring sweep geometry for the separation calibration. The defocus span
/// follows from the ring constant: 125 steps is about 10 µm.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SepCalConfig {
    /// Half-range of the ring sweep, steps.
    pub ring_span_steps: i64,
    /// Ring increment between sweep points, steps.
    pub ring_stride_steps: i64,
    /// Half-width of the sharpness search that anchors true focus, steps.
    pub focus_halfspan_steps: i64,
    /// Stride of the coarse sharpness pass, steps.
    pub coarse_stride_steps: i64,
}

impl Default for SepCalConfig {
    fn default() -> Self {
        SepCalConfig {
            ring_span_steps: 125,
            ring_stride_steps: 25,
            focus_halfspan_steps: 60,
            coarse_stride_steps: 5,
        }
    }
}

/// Maximum separation-fit residual before the calibration is rejected, px.
pub const SEP_RESIDUAL_LIMIT_PX: f64 = 1.0;

/// Moves the ring across `center ± halfspan` and returns the absolute
/// position with the sharpest brightfield frame: a coarse strided pass,
/// then a unit-stride refinement around its peak. The caller selects the
/// illumination; sharpness is the summed squared intensity gradient.
fn sharpest_ring<T: Transport>(
    client: &mut WireClient<T>,
    center: i64,
    halfspan: i64,
    coarse_stride: i64,
) -> Result<i64, CalError> {
    let stride = coarse_stride.max(1);
    let probe = |client: &mut WireClient<T>, targets: &[i64]| -> Result<i64, CalError> {
        let mut best = (f64::NEG_INFINITY, targets[0]);
        for &target in targets {
            client.ring_move(target - client.ring_position())?;
            let energy = gradient_energy(&client.capture()?);
            if energy > best.0 {
                best = (energy, target);
            }
        }
        Ok(best.1)
    };
    let coarse: Vec<i64> = (-halfspan..=halfspan)
        .step_by(stride as usize)
        .map(|d| center + d)
        .collect();
    let peak = probe(client, &coarse)?;
    let fine: Vec<i64> = (peak - stride + 1..peak + stride).collect();
    probe(client, &fine)
}

/// Sub-step location of the sharpness peak. The defocus response is flat
/// within a fraction of a pixel of true focus, so the argmax alone carries
/// a quantization error of a step or two; this probes `peak ± halfwin` at
/// unit stride and returns the midpoint of the energy curve's two
/// half-depth crossings, which is unbiased because defocus blur depends on
/// |z| only. Falls back to the argmax when a crossing is missing.
fn sharpness_center<T: Transport>(
    client: &mut WireClient<T>,
    peak: i64,
    halfwin: i64,
) -> Result<f64, CalError> {
    let mut energies = Vec::with_capacity((2 * halfwin + 1) as usize);
    for target in peak - halfwin..=peak + halfwin {
        client.ring_move(target - client.ring_position())?;
        energies.push(gradient_energy(&client.capture()?));
    }
    let hi = energies.iter().cloned().fold(f64::MIN, f64::max);
    let lo = energies.iter().cloned().fold(f64::MAX, f64::min);
    let t = 0.5 * (hi + lo);
    let cross = |i: usize| i as f64 + (t - energies[i]) / (energies[i + 1] - energies[i]);
    let left = (0..energies.len() - 1).find(|&i| energies[i] < t && energies[i + 1] >= t);
    let right = (0..energies.len() - 1)
        .rev()
        .find(|&i| energies[i] >= t && energies[i + 1] < t);
    match (left, right) {
        (Some(l), Some(r)) if l < r => {
            Ok((peak - halfwin) as f64 + 0.5 * (cross(l) + cross(r)))
        }
        _ => Ok(peak as f64),
    }
}

/// Measures the object-plane focal shift per ring step. The stage sweeps
/// through known z offsets; at each, a sharpness search finds the ring
/// position that restores focus, so the compensating ring travel is linear
/// in the stage offset with slope magnitude `object_um_per_step`. The
/// image-plane constant follows through the axial magnification, which the
/// sweep cannot resolve independently. Sub-fit residuals are in µm.
///
/// Separation constants are carried over from the analytic optics until
/// `calibrate_separation` replaces them. The device is restored to its
/// original z and ring position before returning; an error may leave it
/// mid-sweep.
pub fn calibrate_ring<T: Transport>(
    client: &mut WireClient<T>,
    cfg: &RingCalConfig,
    optics: &Optics,
) -> Result<CalibrationModel, CalError> {
    let step_um = cfg.z_step_um.round().max(1.0);
    let n = (cfg.z_range_um / step_um).floor() as i64;
    let nominal_per_step = optics.ring_step_image_um() / optics.axial_magnification();
    let (_, _, z0_mm) = client.pose_mm();
    client.set_led(LedMode::Brightfield)?;
    let mut points = Vec::with_capacity((2 * n + 1) as usize);
    for k in -n..=n {
        let z_um = k as f64 * step_um;
        client.move_to(None, None, Some(z0_mm + z_um * 1e-3))?;
        client.wait_settled(cfg.settle_s)?;
        // Raising the stage raises the focal plane, so the compensating
        // ring travel has the opposite sign.
        let predicted = (-z_um / nominal_per_step).round() as i64;
        let ring = sharpest_ring(
            client,
            predicted,
            cfg.search_halfspan_steps,
            cfg.coarse_stride_steps,
        )?;
        points.push((ring as f64, z_um));
    }
    client.ring_move(-client.ring_position())?;
    client.move_to(None, None, Some(z0_mm))?;
    client.wait_settled(cfg.settle_s)?;
    ensure_monotone(&points)?;
    let fit = fit_line(&points)?;
    let object_um_per_step = fit.slope.abs();
    Ok(CalibrationModel {
        image_um_per_step: object_um_per_step * optics.axial_magnification(),
        object_um_per_step,
        sep_slope_px_per_um: optics.separation_slope(),
        sep_offset_px: 0.0,
        fit_residual_rms: fit.residual_rms,
        source: CalSource::Fitted,
        timestamp: iso_now(),
    })
}

/// Measures the separation-to-defocus line. True focus is first anchored by
/// an independent brightfield sharpness search, so the fitted offset checks
/// that the estimator reads zero at focus instead of restating the fit.
/// The ring then steps through defocus offsets known from `base`'s ring
/// constant, with one separation estimate per point.
///
/// Featureless fields surface as an autofocus error from the first
/// estimate; a residual RMS above 1 px rejects the whole calibration.
/// `fit_residual_rms` keeps the worst sub-fit (here in px, against `base`'s
/// µm); the ring is left at the focus anchor.
pub fn calibrate_separation<T: Transport>(
    client: &mut WireClient<T>,
    cfg: &SepCalConfig,
    af: &AfConfig,
    base: &CalibrationModel,
) -> Result<CalibrationModel, CalError> {
    client.set_led(LedMode::Brightfield)?;
    let peak = sharpest_ring(
        client,
        client.ring_position(),
        cfg.focus_halfspan_steps,
        cfg.coarse_stride_steps,
    )?;
    let center = sharpness_center(client, peak, 12)?;
    let focus = center.round() as i64;
    client.set_led(LedMode::RgDual)?;
    let stride = cfg.ring_stride_steps.max(1);
    let mut points = Vec::new();
    let mut target = focus - cfg.ring_span_steps;
    while target <= focus + cfg.ring_span_steps {
        client.ring_move(target - client.ring_position())?;
        let est = estimate_separation(&client.capture()?, af)?;
        // A positive ring offset raises the focal plane, lowering defocus.
        let defocus_um = -(target as f64 - center) * base.object_um_per_step;
        points.push((defocus_um, est.separation_px));
        target += stride;
    }
    client.ring_move(focus - client.ring_position())?;
    let fit = fit_line(&points)?;
    if fit.residual_rms > SEP_RESIDUAL_LIMIT_PX {
        return Err(CalError::ResidualTooLarge {
            rms: fit.residual_rms,
            limit: SEP_RESIDUAL_LIMIT_PX,
        });
    }
    Ok(CalibrationModel {
        sep_slope_px_per_um: fit.slope,
        sep_offset_px: fit.intercept,
        fit_residual_rms: fit.residual_rms.max(base.fit_residual_rms),
        source: CalSource::Fitted,
        timestamp: iso_now(),
        ..base.clone()
    })
}
