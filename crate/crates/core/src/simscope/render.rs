//! Frame synthesis: what the camera sees for a given instrument state.
//!
//! Pipeline, in physical order:
//! 1. sample the specimen texture over the field of view (plus working
//!    margin) at the object-space pixel pitch;
//! 2. defocus: anti-aliased uniform disk blur, radius |z_net|·NA/p_obj px;
//! 3. dual-LED mode only: split the image into a red and a green copy
//!    laterally separated by s px along x (green content at +s/2, red at
//!    −s/2), s = channel separation for z_net;
//! 4. motion: box blur along y, length velocity·exposure/p_obj px;
//! 5. vibration: line blur along a per-move random direction while the
//!    decaying amplitude is at least half a pixel;
//! 6. pincushion warp about the frame center;
//! 7. Gaussian read noise, clamp to [0, 1].
//!
//! Defocus is evaluated at the field-of-view center (blur is treated as
//! space-invariant across one frame; the depth of field is micrometers while
//! focal surfaces vary over millimeters).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::imaging::{sample_bilinear, Image};
use crate::scanner::wire::LedMode;

use super::{fnv1a, SimError, SimParams, Specimen};

/// Vibration residuals below this leave no trace in the image; the envelope
/// crossing of this level defines "settled".
pub const VIBRATION_VISIBLE_PX: f64 = 0.5;

/// Everything the renderer needs about the instant of exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureState {
    pub stage_x_mm: f64,
    pub stage_y_mm: f64,
    /// Coarse focus axis, µm (wire z is mm; 3 wire decimals quantize this
    /// to 1 µm).
    pub stage_z_um: f64,
    pub ring_steps: i64,
    pub led_mode: LedMode,
    /// Stage y speed during an exposure on the fly; 0 when static.
    pub y_velocity_mm_s: f64,
    /// Seconds since the last stage move finished; negative while moving.
    pub time_since_move_s: f64,
    pub isolation_pad: bool,
    /// Identity of the last stage move, fixing the vibration direction.
    pub move_seq: u64,
}

impl CaptureState {
    /// Static capture at a pose, long after any motion. Tests build most
    /// states from this.
    pub fn at(x_mm: f64, y_mm: f64) -> Self {
        CaptureState {
            stage_x_mm: x_mm,
            stage_y_mm: y_mm,
            stage_z_um: 0.0,
            ring_steps: 0,
            led_mode: LedMode::Brightfield,
            y_velocity_mm_s: 0.0,
            time_since_move_s: 1e9,
            isolation_pad: true,
            move_seq: 0,
        }
    }
}

pub fn render(spec: &Specimen, st: &CaptureState, p: &SimParams) -> Result<Image, SimError> {
    let o = &p.optics;
    let (w, h) = (o.frame_width, o.frame_height);
    let p_obj = o.pixel_pitch_obj_um();

    // Bounds: the field of view proper must sit on the slide.
    let cx_um = st.stage_x_mm * 1000.0;
    let cy_um = st.stage_y_mm * 1000.0;
    let half_w_um = w as f64 * p_obj / 2.0;
    let half_h_um = h as f64 * p_obj / 2.0;
    if cx_um - half_w_um < -1e-6
        || cy_um - half_h_um < -1e-6
        || cx_um + half_w_um > spec.extent_mm.0 * 1000.0 + 1e-6
        || cy_um + half_h_um > spec.extent_mm.1 * 1000.0 + 1e-6
    {
        return Err(SimError::OutOfBounds {
            x_mm: st.stage_x_mm,
            y_mm: st.stage_y_mm,
        });
    }

    let z_net = spec.surface_z_um(st.stage_x_mm, st.stage_y_mm)
        - (st.stage_z_um + st.ring_steps as f64 * o.ring_step_obj_um);
    let sep_px = o.channel_separation_px(z_net);
    let blur_r = o.blur_radius_px(z_net);

    let motion_len = motion_blur_len_px(st.y_velocity_mm_s, p.exposure_s, p_obj);
    let vib_amp = if st.time_since_move_s >= 0.0 {
        p.vibration_amp_px(st.time_since_move_s)
    } else {
        0.0
    };
    let vib_visible = vib_amp >= VIBRATION_VISIBLE_PX;

    let margin = (blur_r + sep_px.abs() / 2.0 + motion_len as f64 / 2.0 + vib_amp).ceil() as usize + 4;
    let (pw, ph) = (w + 2 * margin, h + 2 * margin);

    // Ideal-image patch sampler: patch pixel -> object µm -> texture px.
    let tex = &spec.texture;
    let (tw, th) = (tex.width(), tex.height());
    let pitch = spec.texture_pitch_um;
    let sample_patch = |plane: &[f32], i: usize, j: usize| -> f32 {
        let px = i as f64 - margin as f64;
        let py = j as f64 - margin as f64;
        let ux = cx_um + (px - (w as f64 - 1.0) / 2.0) * p_obj;
        let uy = cy_um + (py - (h as f64 - 1.0) / 2.0) * p_obj;
        let tx = ux / pitch - 0.5;
        let ty = uy / pitch - 0.5;
        sample_bilinear(plane, tw, th, tx as f32, ty as f32)
    };

    // Base content per output channel. Under dual-LED light both copies see
    // the same scene (the sample's transmission under narrowband red/green
    // is modeled as its luminance), which is what makes the red and green
    // planes exact translates of each other.
    let fill = |plane_src: PatchSource| -> Vec<f32> {
        let mut buf = vec![0.0f32; pw * ph];
        buf.par_chunks_mut(pw).enumerate().for_each(|(j, row)| {
            for (i, v) in row.iter_mut().enumerate() {
                *v = match plane_src {
                    PatchSource::Plane(c) => sample_patch(tex.plane(c), i, j),
                    PatchSource::Luminance => {
                        0.299 * sample_patch(tex.plane(0), i, j)
                            + 0.587 * sample_patch(tex.plane(1), i, j)
                            + 0.114 * sample_patch(tex.plane(2), i, j)
                    }
                };
            }
        });
        buf
    };

    let mut planes: [Vec<f32>; 3] = match st.led_mode {
        LedMode::Brightfield => [
            fill(PatchSource::Plane(0)),
            fill(PatchSource::Plane(1)),
            fill(PatchSource::Plane(2)),
        ],
        LedMode::RgDual => {
            let base = fill(PatchSource::Luminance);
            // Defocus blur commutes with translation, so blur once.
            let blurred = if blur_r > 0.25 {
                disk_blur(&base, pw, ph, blur_r)
            } else {
                base
            };
            let red = translate_plane(&blurred, pw, ph, (-sep_px / 2.0) as f32, 0.0);
            let green = translate_plane(&blurred, pw, ph, (sep_px / 2.0) as f32, 0.0);
            let dark = vec![0.0f32; pw * ph];
            [red, green, dark]
        }
    };

    if st.led_mode == LedMode::Brightfield && blur_r > 0.25 {
        for plane in &mut planes {
            *plane = disk_blur(plane, pw, ph, blur_r);
        }
    }

    if motion_len >= 3 {
        for plane in &mut planes {
            *plane = box_blur_y(plane, pw, ph, motion_len);
        }
    }

    if vib_visible {
        let dir =
            fnv1a(p.seed, &[0x0B1B, st.move_seq]) as f64 / u64::MAX as f64 * std::f64::consts::TAU;
        for plane in &mut planes {
            *plane = line_blur(plane, pw, ph, vib_amp, dir);
        }
    }

    // Warp + crop back to the frame. The warp pushes content outward
    // (pincushion), so an output pixel samples the ideal image inward of
    // itself; inversion of the outward push is a few Newton steps.
    let mut out = Image::new(w, h, 3);
    out.pixel_pitch_obj = Some(p_obj);
    let (ccx, ccy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let warp_on = p.warp_k1 != 0.0 || p.warp_k2 != 0.0;
    for (c, plane) in planes.iter().enumerate() {
        let dst = out.plane_mut(c);
        dst.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, v) in row.iter_mut().enumerate() {
                let (mut sx, mut sy) = (x as f64, y as f64);
                if warp_on {
                    let dx = sx - ccx;
                    let dy = sy - ccy;
                    let rd = dx.hypot(dy);
                    if rd > 1e-12 {
                        let ri = invert_outward_radius(rd, p.warp_k1, p.warp_k2);
                        let f = ri / rd;
                        sx = ccx + dx * f;
                        sy = ccy + dy * f;
                    }
                }
                *v = sample_bilinear(
                    plane,
                    pw,
                    ph,
                    (sx + margin as f64) as f32,
                    (sy + margin as f64) as f32,
                );
            }
        });
    }

    if p.noise_sigma > 0.0 {
        let seed = frame_noise_seed(p.seed, st);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = p.noise_sigma as f32;
        for c in 0..3 {
            for v in out.plane_mut(c) {
                let n: f32 = rng.sample(StandardNormal);
                *v += sigma * n;
            }
        }
    }
    out.clamp_unit();
    Ok(out)
}

enum PatchSource {
    Plane(usize),
    Luminance,
}

/// Motion-blur kernel length in px, forced odd (1 = no blur).
pub fn motion_blur_len_px(y_velocity_mm_s: f64, exposure_s: f64, p_obj_um: f64) -> usize {
    let len = y_velocity_mm_s * 1000.0 * exposure_s / p_obj_um;
    if !len.is_finite() || len < 1.5 {
        return 1;
    }
    let n = len.round() as usize;
    if n % 2 == 1 {
        n
    } else {
        n + 1
    }
}

/// Deterministic per-frame noise stream identity: global seed plus every
/// state field that changes the scene, quantized the way the wire protocol
/// quantizes it. Wall time is deliberately absent.
fn frame_noise_seed(seed: u64, st: &CaptureState) -> u64 {
    fnv1a(
        seed,
        &[
            (st.stage_x_mm * 1000.0).round() as i64 as u64,
            (st.stage_y_mm * 1000.0).round() as i64 as u64,
            st.stage_z_um.round() as i64 as u64,
            st.ring_steps as u64,
            match st.led_mode {
                LedMode::Brightfield => 0,
                LedMode::RgDual => 1,
            },
            if st.time_since_move_s < 0.0 { 1 } else { 0 },
            st.move_seq,
        ],
    )
}

fn translate_plane(src: &[f32], w: usize, h: usize, dx: f32, dy: f32) -> Vec<f32> {
    let mut dst = vec![0.0f32; w * h];
    crate::imaging::translate_plane_into(src, w, h, dx, dy, &mut dst);
    dst
}

fn box_blur_y(src: &[f32], w: usize, h: usize, len: usize) -> Vec<f32> {
    let mut dst = vec![0.0f32; w * h];
    crate::imaging::box_blur_plane_into(src, w, h, len, crate::imaging::Axis::Y, &mut dst);
    dst
}

/// Anti-aliased uniform disk blur of radius `r` px. The kernel weight at
/// offset d is clamp(r + 0.5 − |d|, 0, 1): unity inside, a one-pixel soft
/// rim, zero outside, so sub-pixel radius growth changes the output
/// smoothly. Evaluated per kernel row as an interior run (via row prefix
/// sums) plus explicit rim taps, O(W·H·(2r+1)).
pub fn disk_blur(src: &[f32], w: usize, h: usize, r: f64) -> Vec<f32> {
    assert!(r > 0.0);
    let rr = (r + 0.5).ceil() as i64;
    // Per kernel row dy: taps over dx in [-rr, rr]; interior run where the
    // weight is exactly 1.
    struct KRow {
        dy: i64,
        full_lo: i64, // inclusive; full_lo > full_hi means no interior run
        full_hi: i64,
        rim: Vec<(i64, f64)>,
    }
    let mut rows: Vec<KRow> = Vec::new();
    let mut total = 0.0f64;
    for dy in -rr..=rr {
        let mut rim = Vec::new();
        let mut full_lo = i64::MAX;
        let mut full_hi = i64::MIN;
        let mut any = false;
        for dx in -rr..=rr {
            let d = ((dx * dx + dy * dy) as f64).sqrt();
            let wgt = (r + 0.5 - d).clamp(0.0, 1.0);
            if wgt <= 0.0 {
                continue;
            }
            any = true;
            total += wgt;
            if wgt >= 1.0 {
                full_lo = full_lo.min(dx);
                full_hi = full_hi.max(dx);
            } else {
                rim.push((dx, wgt));
            }
        }
        if any {
            rows.push(KRow {
                dy,
                full_lo,
                full_hi,
                rim,
            });
        }
    }
    let inv_total = 1.0 / total;

    // Row prefix sums with edge-replicated virtual indexing.
    let mut prefix = vec![0.0f64; (w + 1) * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let p = &mut prefix[y * (w + 1)..(y + 1) * (w + 1)];
        let mut acc = 0.0f64;
        for x in 0..w {
            acc += row[x] as f64;
            p[x + 1] = acc;
        }
    }
    // Sum over [lo, hi] with clamp-to-edge semantics.
    let span_sum = |y: usize, lo: i64, hi: i64| -> f64 {
        let row = &src[y * w..(y + 1) * w];
        let p = &prefix[y * (w + 1)..(y + 1) * (w + 1)];
        let mut s = 0.0f64;
        let (clo, chi) = (lo.clamp(0, w as i64 - 1), hi.clamp(0, w as i64 - 1));
        if lo < 0 {
            s += (clo - lo) as f64 * row[0] as f64;
        }
        if hi > w as i64 - 1 {
            s += (hi - chi) as f64 * row[w - 1] as f64;
        }
        s + p[(chi + 1) as usize] - p[clo as usize]
    };

    let mut dst = vec![0.0f32; w * h];
    dst.par_chunks_mut(w).enumerate().for_each(|(y, out_row)| {
        for krow in &rows {
            let sy = (y as i64 + krow.dy).clamp(0, h as i64 - 1) as usize;
            let row = &src[sy * w..(sy + 1) * w];
            for (x, v) in out_row.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                if krow.full_lo <= krow.full_hi {
                    acc += span_sum(sy, x as i64 + krow.full_lo, x as i64 + krow.full_hi);
                }
                for &(dx, wgt) in &krow.rim {
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    acc += wgt * row[sx] as f64;
                }
                *v += (acc * inv_total) as f32;
            }
        }
    });
    dst
}

/// Uniform blur along a line segment of total length `len` px at angle
/// `theta`, centered: models the camera smearing over the residual
/// vibration stroke during the exposure.
fn line_blur(src: &[f32], w: usize, h: usize, len: f64, theta: f64) -> Vec<f32> {
    let taps = ((2.0 * len).ceil() as usize).max(3) | 1;
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut dst = vec![0.0f32; w * h];
    let inv = 1.0 / taps as f32;
    dst.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, v) in row.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for k in 0..taps {
                let t = (k as f64 / (taps - 1) as f64 - 0.5) * len;
                acc += sample_bilinear(
                    src,
                    w,
                    h,
                    (x as f64 + t * dx) as f32,
                    (y as f64 + t * dy) as f32,
                );
            }
            *v = acc * inv;
        }
    });
    dst
}

/// Solves r_d = r_i · (1 + k1·r_i² + k2·r_i⁴) for r_i (the outward
/// pincushion push, inverted). Newton from the first-order guess; the
/// relative distortion is a few percent, so convergence is immediate.
pub fn invert_outward_radius(rd: f64, k1: f64, k2: f64) -> f64 {
    let mut ri = rd * (1.0 - k1 * rd * rd);
    for _ in 0..8 {
        let r2 = ri * ri;
        let f = ri * (1.0 + k1 * r2 + k2 * r2 * r2) - rd;
        let df = 1.0 + 3.0 * k1 * r2 + 5.0 * k2 * r2 * r2;
        let step = f / df;
        ri -= step;
        if step.abs() < 1e-10 {
            break;
        }
    }
    ri
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{extract_channel, Channel};
    use crate::optics::Optics;
    use crate::simscope::{FocalSurface, SpecimenParams};

    fn small_params(w: usize, h: usize) -> SimParams {
        let mut p = SimParams::default();
        p.optics.frame_width = w;
        p.optics.frame_height = h;
        p.noise_sigma = 0.0;
        p.warp_k1 = 0.0;
        p
    }

    fn flat_specimen(seed: u64) -> Specimen {
        Specimen::generate(&SpecimenParams {
            extent_mm: (0.4, 0.4),
            amplitude_um: 0.0,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn in_focus_brightfield_is_exact_texture_crop() {
        // With texture pitch equal to the camera pitch and the stage on a
        // texel-aligned pose, the in-focus render must reproduce texels
        // exactly (no warp, no noise).
        let spec = flat_specimen(21);
        let p = small_params(64, 48);
        let p_obj = p.optics.pixel_pitch_obj_um();
        // Texel alignment: FOV center at p_obj * (W/2 + k).
        let k = 400i64;
        let st = CaptureState::at(
            p_obj * (64.0 / 2.0 + k as f64) / 1000.0,
            p_obj * (48.0 / 2.0 + 300.0) / 1000.0,
        );
        let img = render(&spec, &st, &p).unwrap();
        for c in 0..3 {
            for y in 0..48 {
                for x in 0..64 {
                    let t = spec.texture.get(x + k as usize, y + 300, c);
                    let v = img.get(x, y, c);
                    assert!(
                        (v - t).abs() < 1e-5,
                        "mismatch at {x},{y},{c}: {v} vs {t}"
                    );
                }
            }
        }
    }

    #[test]
    fn rg_dual_at_focus_has_identical_channels() {
        let spec = flat_specimen(8);
        let p = small_params(96, 64);
        let mut st = CaptureState::at(0.2, 0.2);
        st.led_mode = LedMode::RgDual;
        let img = render(&spec, &st, &p).unwrap();
        let r = extract_channel(&img, Channel::Red).unwrap();
        let g = extract_channel(&img, Channel::Green).unwrap();
        assert_eq!(r.plane(0), g.plane(0));
        // Blue LEDs are off.
        let b = extract_channel(&img, Channel::Blue).unwrap();
        assert!(b.plane(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dot_separation_matches_channel_shift_oracle() {
        // An isolated bright dot on black: under 10 um defocus the
        // red-to-green centroid displacement must equal the geometric
        // separation (~36.4 px). Centroid of a symmetric blurred dot is
        // shift-invariant, so the disk blur does not bias this oracle.
        let mut tex = Image::new(512, 96, 3);
        let pitch = Optics::default().pixel_pitch_obj_um();
        for c in 0..3 {
            tex.set(256, 48, c, 1.0);
        }
        let spec = Specimen::from_texture(tex, pitch, FocalSurface::constant(10.0));
        let p = small_params(384, 80);
        let mut st = CaptureState::at(
            256.5 * pitch / 1000.0,
            48.5 * pitch / 1000.0,
        );
        st.led_mode = LedMode::RgDual;
        let img = render(&spec, &st, &p).unwrap();

        let centroid_x = |c: usize| -> f64 {
            let mut sw = 0.0f64;
            let mut sx = 0.0f64;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let v = img.get(x, y, c) as f64;
                    sw += v;
                    sx += v * x as f64;
                }
            }
            sx / sw
        };
        let sep = centroid_x(1) - centroid_x(0);
        let expect = Optics::default().channel_separation_px(10.0);
        assert!(
            (sep - expect).abs() < 0.1,
            "measured {sep:.3} px, expected {expect:.3} px"
        );
    }

    #[test]
    fn separation_sign_flips_with_defocus_sign() {
        let mut tex = Image::new(512, 96, 3);
        let pitch = Optics::default().pixel_pitch_obj_um();
        for c in 0..3 {
            tex.set(256, 48, c, 1.0);
        }
        let spec = Specimen::from_texture(tex, pitch, FocalSurface::constant(-6.0));
        let p = small_params(384, 80);
        let mut st = CaptureState::at(256.5 * pitch / 1000.0, 48.5 * pitch / 1000.0);
        st.led_mode = LedMode::RgDual;
        let img = render(&spec, &st, &p).unwrap();
        let centroid_x = |c: usize| -> f64 {
            let (mut sw, mut sx) = (0.0f64, 0.0f64);
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let v = img.get(x, y, c) as f64;
                    sw += v;
                    sx += v * x as f64;
                }
            }
            sx / sw
        };
        let sep = centroid_x(1) - centroid_x(0);
        let expect = Optics::default().channel_separation_px(-6.0);
        assert!((sep - expect).abs() < 0.1, "measured {sep:.3}, expected {expect:.3}");
    }

    #[test]
    fn ring_steps_compensate_stage_defocus() {
        // Surface at +10 um, ring at +125 steps of 80 nm: z_net = 0, so the
        // render equals the in-focus render.
        let spec = Specimen::generate(&SpecimenParams {
            extent_mm: (0.4, 0.4),
            amplitude_um: 0.0,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let hi = Specimen {
            surface: FocalSurface::constant(10.0),
            ..spec.clone()
        };
        let p = small_params(96, 64);
        let mut st = CaptureState::at(0.2, 0.2);
        st.ring_steps = 125;
        let focused = render(&hi, &st, &p).unwrap();
        let mut st0 = CaptureState::at(0.2, 0.2);
        st0.led_mode = LedMode::Brightfield;
        let reference = render(&spec, &st0, &p).unwrap();
        for (a, b) in focused.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn defocus_blurs_brightfield() {
        let spec = flat_specimen(13);
        let p = small_params(96, 64);
        let sharp = render(&spec, &CaptureState::at(0.2, 0.2), &p).unwrap();
        let mut st = CaptureState::at(0.2, 0.2);
        st.stage_z_um = -8.0; // focus plane 8 um below the sample surface
        let soft = render(&spec, &st, &p).unwrap();
        let es = crate::imaging::gradient_energy(&sharp);
        let eb = crate::imaging::gradient_energy(&soft);
        assert!(
            eb < es * 0.25,
            "8 um defocus should destroy gradients: {eb} vs {es}"
        );
    }

    #[test]
    fn motion_blur_length_rounds_to_odd() {
        assert_eq!(motion_blur_len_px(0.0, 0.002, 0.24), 1);
        // 12 mm/s x 2 ms = 24 um = 100 px at 0.24 um/px.
        assert_eq!(motion_blur_len_px(12.0, 0.002, 0.24), 101);
        // 60 mm/s -> 500 px.
        assert_eq!(motion_blur_len_px(60.0, 0.002, 0.24), 501);
    }

    #[test]
    fn vibration_blur_appears_only_before_settle() {
        let spec = flat_specimen(17);
        let mut p = small_params(96, 64);
        p.isolation_pad = false;
        let mut st = CaptureState::at(0.2, 0.2);
        st.isolation_pad = false;
        st.move_seq = 5;
        st.time_since_move_s = 0.1; // amp = 1.89 * exp(-1/3) ~ 1.35 px
        let shaken = render(&spec, &st, &p).unwrap();
        st.time_since_move_s = 0.45; // settled
        let still = render(&spec, &st, &p).unwrap();
        let e_shaken = crate::imaging::gradient_energy(&shaken);
        let e_still = crate::imaging::gradient_energy(&still);
        assert!(
            e_shaken < e_still * 0.9,
            "vibration at 0.1 s must blur: {e_shaken} vs {e_still}"
        );
        // And a settled frame is bit-identical to one taken much later:
        // sub-threshold residuals leave no trace.
        st.time_since_move_s = 9.0;
        let much_later = render(&spec, &st, &p).unwrap();
        assert_eq!(still.data(), much_later.data());
    }

    #[test]
    fn pad_contrast_at_100ms() {
        // Same capture 0.1 s after a move: blurred without the pad, sharp
        // (and identical to fully settled) with it.
        let spec = flat_specimen(19);
        let mut st = CaptureState::at(0.2, 0.2);
        st.move_seq = 2;
        st.time_since_move_s = 0.1;

        let mut p_pad = small_params(96, 64);
        p_pad.isolation_pad = true;
        st.isolation_pad = true;
        let padded = render(&spec, &st, &p_pad).unwrap();
        let mut st_late = st.clone();
        st_late.time_since_move_s = 10.0;
        let settled = render(&spec, &st_late, &p_pad).unwrap();
        assert_eq!(padded.data(), settled.data());

        let mut p_raw = small_params(96, 64);
        p_raw.isolation_pad = false;
        st.isolation_pad = false;
        let raw = render(&spec, &st, &p_raw).unwrap();
        assert!(
            crate::imaging::gradient_energy(&raw) < crate::imaging::gradient_energy(&settled) * 0.9
        );
    }

    #[test]
    fn warp_moves_corners_outward() {
        // A dot rendered near the corner with pincushion warp on lands
        // farther from the center than without.
        let pitch = Optics::default().pixel_pitch_obj_um();
        let mut tex = Image::new(512, 384, 3);
        for c in 0..3 {
            tex.set(100, 80, c, 1.0);
        }
        let spec = Specimen::from_texture(tex, pitch, FocalSurface::flat());
        let mut p = small_params(384, 288);
        let center = CaptureState::at(256.0 * pitch / 1000.0, 192.0 * pitch / 1000.0);
        let plain = render(&spec, &center, &p).unwrap();
        p.warp_k1 = 2e-6; // strong at this small frame scale
        let warped = render(&spec, &center, &p).unwrap();
        let centroid = |img: &Image| -> (f64, f64) {
            let (mut sw, mut sx, mut sy) = (0.0f64, 0.0, 0.0);
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let v = img.get(x, y, 0) as f64;
                    sw += v;
                    sx += v * x as f64;
                    sy += v * y as f64;
                }
            }
            (sx / sw, sy / sw)
        };
        let (ccx, ccy) = (383.0 / 2.0, 287.0 / 2.0);
        let (x0, y0) = centroid(&plain);
        let (x1, y1) = centroid(&warped);
        let r0 = (x0 - ccx).hypot(y0 - ccy);
        let r1 = (x1 - ccx).hypot(y1 - ccy);
        assert!(
            r1 > r0 + 1.0,
            "pincushion must push outward: r {r0:.2} -> {r1:.2}"
        );
    }

    #[test]
    fn frames_are_deterministic_with_noise() {
        let spec = flat_specimen(23);
        let mut p = small_params(64, 48);
        p.noise_sigma = 0.005;
        p.warp_k1 = 5e-9;
        let mut st = CaptureState::at(0.2, 0.2);
        st.move_seq = 3;
        let a = render(&spec, &st, &p).unwrap();
        let b = render(&spec, &st, &p).unwrap();
        assert_eq!(a.data(), b.data());
        // Different pose -> different noise stream.
        let st2 = CaptureState::at(0.201, 0.2);
        let c = render(&spec, &st2, &p).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn disk_blur_preserves_mean_and_flattens_impulse() {
        let w = 41;
        let h = 41;
        let mut src = vec![0.0f32; w * h];
        src[20 * w + 20] = 1.0;
        let r = 5.3;
        let out = disk_blur(&src, w, h, r);
        let sum: f64 = out.iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-5, "mass not preserved: {sum}");
        // Direct-summation oracle for a handful of taps.
        let kernel = |dx: i64, dy: i64| -> f64 {
            (r + 0.5 - ((dx * dx + dy * dy) as f64).sqrt()).clamp(0.0, 1.0)
        };
        let total: f64 = (-7..=7)
            .flat_map(|dy| (-7..=7).map(move |dx| kernel(dx, dy)))
            .sum();
        for (dx, dy) in [(0i64, 0i64), (3, 0), (0, 5), (4, 3), (5, 2)] {
            let want = kernel(dx, dy) / total;
            let got = out[((20 + dy) * w as i64 + 20 + dx) as usize] as f64;
            assert!(
                (got - want).abs() < 1e-6,
                "kernel tap ({dx},{dy}): {got} vs {want}"
            );
        }
    }

    #[test]
    fn invert_outward_radius_roundtrips() {
        for &k1 in &[1e-9f64, 5e-9, 1e-8] {
            for &ri in &[100.0f64, 1000.0, 3000.0] {
                let rd = ri * (1.0 + k1 * ri * ri);
                let back = invert_outward_radius(rd, k1, 0.0);
                assert!((back - ri).abs() < 1e-6, "k1={k1} ri={ri} back={back}");
            }
        }
    }
}
