//! Optical geometry shared by the autofocus, calibration, and simulator
//! modules: magnification, object-space pixel pitch, and the mapping between
//! defocus and the lateral red/green channel separation.

use serde::{Deserialize, Serialize};

/// Physical description of the imaging path.
///
/// Defaults model the reference instrument: 20X/0.75 objective designed for a
/// 200 mm tube lens but mounted on a 100 mm photographic lens (halving the
/// magnification to 10X), a 2.4 µm-pitch 20 MP sensor, and dual-LED
/// illumination entering at NA 0.4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Optics {
    /// Objective magnification at its design tube length.
    pub objective_mag: f64,
    /// Objective numerical aperture.
    pub objective_na: f64,
    /// Tube lens focal length actually installed, mm.
    pub tube_focal_mm: f64,
    /// Tube length the objective was designed for, mm.
    pub nominal_tube_focal_mm: f64,
    /// Numerical aperture of each oblique LED beam.
    pub illum_na: f64,
    /// Center wavelength for depth-of-field estimates, µm.
    pub wavelength_um: f64,
    /// Sensor pixel pitch, µm.
    pub sensor_pitch_um: f64,
    /// Sensor width, px.
    pub frame_width: usize,
    /// Sensor height, px.
    pub frame_height: usize,
    /// Focus-ring travel per step at the sample plane, µm.
    pub ring_step_obj_um: f64,
}

impl Default for Optics {
    fn default() -> Self {
        Optics {
            objective_mag: 20.0,
            objective_na: 0.75,
            tube_focal_mm: 100.0,
            nominal_tube_focal_mm: 200.0,
            illum_na: 0.4,
            wavelength_um: 0.55,
            sensor_pitch_um: 2.4,
            frame_width: 5472,
            frame_height: 3648,
            ring_step_obj_um: 0.08,
        }
    }
}

impl Optics {
    /// Lateral magnification: objective power scaled by the installed tube
    /// lens relative to its design tube length.
    pub fn magnification(&self) -> f64 {
        self.objective_mag * self.tube_focal_mm / self.nominal_tube_focal_mm
    }

    /// Object-space sampling pitch, µm per pixel.
    pub fn pixel_pitch_obj_um(&self) -> f64 {
        self.sensor_pitch_um / self.magnification()
    }

    /// Lateral red/green separation in pixels produced by `defocus_um` of
    /// defocus, signed as the red-to-green displacement along x. Each LED
    /// beam crosses the focal plane at angle `asin(illum_na)` from the axis,
    /// on opposite sides, so the two copies walk apart by `2 tan(theta)` per
    /// unit defocus.
    pub fn channel_separation_px(&self, defocus_um: f64) -> f64 {
        2.0 * beam_tangent(self.illum_na) * defocus_um / self.pixel_pitch_obj_um()
    }

    /// Separation-per-defocus slope, px/µm.
    pub fn separation_slope(&self) -> f64 {
        self.channel_separation_px(1.0)
    }

    /// Defocus recovered from a measured separation, µm.
    pub fn defocus_from_separation_um(&self, separation_px: f64) -> f64 {
        separation_px / self.separation_slope()
    }

    /// Axial magnification (lateral magnification squared): image-side focus
    /// travel needed per unit of sample-side defocus.
    pub fn axial_magnification(&self) -> f64 {
        let m = self.magnification();
        m * m
    }

    /// Focus-ring travel per step at the image plane, µm.
    pub fn ring_step_image_um(&self) -> f64 {
        self.ring_step_obj_um * self.axial_magnification()
    }

    /// Depth of field, µm (`lambda / NA^2`).
    pub fn depth_of_field_um(&self) -> f64 {
        self.wavelength_um / (self.objective_na * self.objective_na)
    }

    /// Field of view at the sample, mm (width, height).
    pub fn fov_mm(&self) -> (f64, f64) {
        let p = self.pixel_pitch_obj_um() * 1e-3;
        (self.frame_width as f64 * p, self.frame_height as f64 * p)
    }

    /// Defocus-blur radius at the sample for `defocus_um` of defocus, px.
    /// Geometric circle-of-confusion radius of an NA-limited cone.
    pub fn blur_radius_px(&self, defocus_um: f64) -> f64 {
        defocus_um.abs() * self.objective_na / self.pixel_pitch_obj_um()
    }
}

/// Tangent of the marginal-ray angle for a beam of numerical aperture `na`
/// in air: `tan(asin(na))`.
pub fn beam_tangent(na: f64) -> f64 {
    let s = na.clamp(0.0, 0.999_999);
    s / (1.0 - s * s).sqrt()
}
