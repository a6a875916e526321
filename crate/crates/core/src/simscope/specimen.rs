//! Synthetic slide: a stained-tissue-like texture raster plus a smooth focal
//! surface describing how the in-focus height varies across the slide.

use std::f64::consts::TAU;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imaging::{self, Image};
use crate::optics::Optics;

use super::{fnv1a, SimError};

/// One plane-wave component of the focal surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceWave {
    pub amp_um: f64,
    pub fx_cyc_per_mm: f64,
    pub fy_cyc_per_mm: f64,
    pub phase_rad: f64,
}

/// Band-limited height field `z(x, y)` in µm over slide coordinates in mm.
/// The sum of |amplitudes| bounds |z| exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalSurface {
    pub waves: Vec<SurfaceWave>,
}

impl FocalSurface {
    pub fn flat() -> Self {
        FocalSurface { waves: Vec::new() }
    }

    /// Uniform height offset (used by tests that need a known constant
    /// defocus everywhere).
    pub fn constant(z_um: f64) -> Self {
        FocalSurface {
            waves: vec![SurfaceWave {
                amp_um: z_um,
                fx_cyc_per_mm: 0.0,
                fy_cyc_per_mm: 0.0,
                phase_rad: 0.0,
            }],
        }
    }

    pub fn z_um(&self, x_mm: f64, y_mm: f64) -> f64 {
        self.waves
            .iter()
            .map(|w| {
                w.amp_um * (TAU * (w.fx_cyc_per_mm * x_mm + w.fy_cyc_per_mm * y_mm) + w.phase_rad).cos()
            })
            .sum()
    }

    /// Hard bound on |z| anywhere.
    pub fn max_abs_um(&self) -> f64 {
        self.waves.iter().map(|w| w.amp_um.abs()).sum()
    }

    /// Hard bound on |grad z| anywhere, µm per mm of travel.
    pub fn max_slope_um_per_mm(&self) -> f64 {
        self.waves
            .iter()
            .map(|w| w.amp_um.abs() * TAU * w.fx_cyc_per_mm.hypot(w.fy_cyc_per_mm))
            .sum()
    }
}

/// Generation parameters for [`Specimen::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecimenParams {
    /// Slide extent, mm (width, height).
    pub extent_mm: (f64, f64),
    /// Focal-surface amplitude: max |z| in µm (0 gives a flat surface).
    pub amplitude_um: f64,
    /// Texture sampling pitch, µm per texture pixel. Defaults to the
    /// object-space camera pitch so an in-focus render is an exact crop.
    pub texture_pitch_um: f64,
    pub seed: u64,
}

impl Default for SpecimenParams {
    fn default() -> Self {
        SpecimenParams {
            extent_mm: (0.8, 0.6),
            amplitude_um: 10.0,
            texture_pitch_um: Optics::default().pixel_pitch_obj_um(),
            seed: 1,
        }
    }
}

/// Ground-truth slide: what a perfectly focused, undistorted, noise-free
/// camera would see, plus where "perfectly focused" sits in z.
#[derive(Debug, Clone)]
pub struct Specimen {
    pub texture: Image,
    pub texture_pitch_um: f64,
    pub extent_mm: (f64, f64),
    pub surface: FocalSurface,
    pub seed: u64,
    pub amplitude_um: f64,
}

/// Sidecar metadata persisted next to the texture raster.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpecimenSidecar {
    extent_mm: (f64, f64),
    texture_pitch_um: f64,
    amplitude_um: f64,
    seed: u64,
    surface: FocalSurface,
}

// Texture synthesis constants, in texture pixels. The finest octave sits at
// ~1 µm so defocus blur has structure to destroy; the coarsest at ~30 µm so
// heavily blurred frames still register.
const OCTAVE_BASE_PX: f64 = 128.0;
const OCTAVES: u32 = 6;
const NUCLEUS_CELL_PX: i64 = 96;

fn hash_unit(seed: u64, words: &[u64]) -> f64 {
    let mut h = fnv1a(seed, words);
    // xorshift finisher decorrelates consecutive lattice points.
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    (h >> 40) as f64 / (1u64 << 24) as f64
}

fn fade(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in [0, 1), evaluated at texture-pixel coords.
fn octave_noise(seed: u64, x: f64, y: f64) -> f64 {
    let mut total = 0.0;
    let mut norm = 0.0;
    let mut amp = 1.0;
    for oct in 0..OCTAVES {
        let lambda = OCTAVE_BASE_PX / (1 << oct) as f64;
        let u = x / lambda;
        let v = y / lambda;
        let (i, j) = (u.floor() as i64, v.floor() as i64);
        let (fu, fv) = (fade(u - i as f64), fade(v - j as f64));
        let lat = |di: i64, dj: i64| {
            hash_unit(seed, &[oct as u64 + 1, (i + di) as u64, (j + dj) as u64])
        };
        let n = lat(0, 0) * (1.0 - fu) * (1.0 - fv)
            + lat(1, 0) * fu * (1.0 - fv)
            + lat(0, 1) * (1.0 - fu) * fv
            + lat(1, 1) * fu * fv;
        total += amp * n;
        norm += amp;
        amp *= 0.55;
    }
    total / norm
}

/// Soft coverage of the nucleus field at a texture pixel: 0 outside, 1 well
/// inside a nucleus, smooth 3 px shoulder.
fn nucleus_mask(seed: u64, x: f64, y: f64) -> f64 {
    let ci = (x / NUCLEUS_CELL_PX as f64).floor() as i64;
    let cj = (y / NUCLEUS_CELL_PX as f64).floor() as i64;
    let mut mask: f64 = 0.0;
    for dj in -1..=1 {
        for di in -1..=1 {
            let (gi, gj) = (ci + di, cj + dj);
            let cell = [0xA0, gi as u64, gj as u64];
            if hash_unit(seed, &cell) > 0.55 {
                continue;
            }
            let jx = hash_unit(seed, &[0xA1, gi as u64, gj as u64]);
            let jy = hash_unit(seed, &[0xA2, gi as u64, gj as u64]);
            let rr = hash_unit(seed, &[0xA3, gi as u64, gj as u64]);
            let cx = (gi as f64 + 0.2 + 0.6 * jx) * NUCLEUS_CELL_PX as f64;
            let cy = (gj as f64 + 0.2 + 0.6 * jy) * NUCLEUS_CELL_PX as f64;
            let radius = 9.0 + 6.0 * rr;
            let d = (x - cx).hypot(y - cy);
            let t = ((radius + 1.5 - d) / 3.0).clamp(0.0, 1.0);
            mask = mask.max(fade(t));
        }
    }
    mask
}

impl Specimen {
    /// Deterministic synthesis from a seed: eosin-pink background with
    /// darker nuclei, all channels driven by shared fields so the R and G
    /// planes are dependent but not affine copies.
    pub fn generate(p: &SpecimenParams) -> Result<Specimen, SimError> {
        if p.extent_mm.0 <= 0.0 || p.extent_mm.1 <= 0.0 || p.texture_pitch_um <= 0.0 {
            return Err(SimError::BadConfig("specimen extent and pitch must be positive".into()));
        }
        let w = (p.extent_mm.0 * 1000.0 / p.texture_pitch_um).round() as usize;
        let h = (p.extent_mm.1 * 1000.0 / p.texture_pitch_um).round() as usize;
        if w < 8 || h < 8 {
            return Err(SimError::BadConfig("specimen smaller than 8x8 texture pixels".into()));
        }
        if w * h > 64_000_000 {
            return Err(SimError::BadConfig(format!(
                "texture {w}x{h} exceeds the 64 Mpx synthesis cap; use a coarser texture_pitch_um"
            )));
        }

        let mut rows: Vec<Vec<[f32; 3]>> = Vec::with_capacity(h);
        (0..h)
            .into_par_iter()
            .map(|j| {
                let mut row = Vec::with_capacity(w);
                for i in 0..w {
                    let (x, y) = (i as f64, j as f64);
                    let n = octave_noise(p.seed, x, y);
                    let shade = octave_noise(p.seed ^ 0x5EED_F00D, x * 0.5, y * 0.5);
                    let m = nucleus_mask(p.seed, x, y);
                    let bg = [
                        0.90 * (0.70 + 0.30 * n),
                        0.78 * (0.62 + 0.38 * n * n),
                        0.86 * (0.68 + 0.32 * (0.4 * n + 0.6 * shade)),
                    ];
                    let nuc = [
                        0.42 * (0.75 + 0.25 * shade),
                        0.30 * (0.70 + 0.30 * n),
                        0.58 * (0.78 + 0.22 * n),
                    ];
                    let mut px = [0.0f32; 3];
                    for c in 0..3 {
                        px[c] = (bg[c] * (1.0 - m) + nuc[c] * m) as f32;
                    }
                    row.push(px);
                }
                row
            })
            .collect_into_vec(&mut rows);

        let mut texture = Image::new(w, h, 3);
        for (j, row) in rows.iter().enumerate() {
            for (i, px) in row.iter().enumerate() {
                for c in 0..3 {
                    texture.set(i, j, c, px[c]);
                }
            }
        }
        texture.pixel_pitch_obj = Some(p.texture_pitch_um);

        Ok(Specimen {
            texture,
            texture_pitch_um: p.texture_pitch_um,
            extent_mm: p.extent_mm,
            surface: synthesize_surface(p.seed, p.amplitude_um),
            seed: p.seed,
            amplitude_um: p.amplitude_um,
        })
    }

    /// Builds a specimen around an explicit texture (tests use engineered
    /// patterns, e.g. an isolated dot). The renderer samples three planes,
    /// so the texture must be RGB.
    pub fn from_texture(
        texture: Image,
        texture_pitch_um: f64,
        surface: FocalSurface,
    ) -> Specimen {
        assert_eq!(texture.channels(), 3, "specimen texture must be RGB");
        let extent_mm = (
            texture.width() as f64 * texture_pitch_um / 1000.0,
            texture.height() as f64 * texture_pitch_um / 1000.0,
        );
        Specimen {
            texture,
            texture_pitch_um,
            extent_mm,
            surface,
            seed: 0,
            amplitude_um: 0.0,
        }
    }

    pub fn surface_z_um(&self, x_mm: f64, y_mm: f64) -> f64 {
        self.surface.z_um(x_mm, y_mm)
    }

    /// Persists `texture.png` (16-bit) and `specimen.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        imaging::io::write_raster(
            &self.texture,
            &dir.join("texture.png"),
            imaging::io::BitDepth::Sixteen,
        )?;
        let sidecar = SpecimenSidecar {
            extent_mm: self.extent_mm,
            texture_pitch_um: self.texture_pitch_um,
            amplitude_um: self.amplitude_um,
            seed: self.seed,
            surface: self.surface.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(dir.join("specimen.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Specimen, SimError> {
        let json = std::fs::read_to_string(dir.join("specimen.json"))?;
        let sidecar: SpecimenSidecar = serde_json::from_str(&json)?;
        let mut texture = imaging::io::read_raster(&dir.join("texture.png"))?;
        texture.pixel_pitch_obj = Some(sidecar.texture_pitch_um);
        Ok(Specimen {
            texture,
            texture_pitch_um: sidecar.texture_pitch_um,
            extent_mm: sidecar.extent_mm,
            surface: sidecar.surface,
            seed: sidecar.seed,
            amplitude_um: sidecar.amplitude_um,
        })
    }
}

/// Focal surface as a sum of 4 long-wavelength plane waves whose amplitude
/// magnitudes total exactly `amplitude_um`. Wavelengths stay above ~11 mm so
/// the slope bound keeps adjacent-tile focus changes inside one depth of
/// field for default tile pitches.
fn synthesize_surface(seed: u64, amplitude_um: f64) -> FocalSurface {
    if amplitude_um == 0.0 {
        return FocalSurface::flat();
    }
    let k = 4;
    let raw: Vec<f64> = (0..k)
        .map(|i| 0.35 + hash_unit(seed, &[0xB0, i as u64]))
        .collect();
    let total: f64 = raw.iter().sum();
    let waves = (0..k)
        .map(|i| {
            let f = 0.04 + 0.05 * hash_unit(seed, &[0xB1, i as u64]);
            let theta = TAU * hash_unit(seed, &[0xB2, i as u64]);
            SurfaceWave {
                amp_um: amplitude_um * raw[i] / total,
                fx_cyc_per_mm: f * theta.cos(),
                fy_cyc_per_mm: f * theta.sin(),
                phase_rad: TAU * hash_unit(seed, &[0xB3, i as u64]),
            }
        })
        .collect();
    FocalSurface { waves }
}
