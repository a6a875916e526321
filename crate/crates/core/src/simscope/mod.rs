//! Virtual microscope.
//!
//! [`SimScope`] is the instrument-side state machine: a 3-axis stage with
//! finite velocities, a stepper focus ring, switchable LED illumination, and
//! a camera. It executes wire-protocol commands and answers captures with
//! frames from [`render`], which models the optics end to end: defocus disk
//! blur, the dual-LED red/green copy separation, motion blur, post-move
//! vibration, pincushion warp, and read noise.
//!
//! Time comes from a [`Clock`](crate::clock::Clock) handle so tests can run
//! on a virtual timeline; frames are bit-reproducible given the same seed,
//! pose, and timeline.

pub mod render;
pub mod serve;
pub mod specimen;

pub use render::{render, CaptureState};
pub use serve::{duplex, serve_tcp, serve_tcp_once, spawn_sim, ByteRx, ByteTx, DuplexPipe};
pub use specimen::{FocalSurface, Specimen, SpecimenParams, SurfaceWave};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SharedClock;
use crate::imaging::ImagingError;
use crate::optics::Optics;
use crate::scanner::wire::{self, LedMode, WireCommand, WireReply};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("field of view outside specimen extent at ({x_mm:.3}, {y_mm:.3}) mm")]
    OutOfBounds { x_mm: f64, y_mm: f64 },
    #[error("invalid simulator config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("specimen metadata: {0}")]
    Sidecar(#[from] serde_json::Error),
}

/// Instrument behavior knobs. Everything the reference hardware does not
/// pin down (exposure, stage speed, vibration strength) lives here with
/// documented defaults; optics geometry lives in [`Optics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub optics: Optics,
    /// Stage speed in x/y, mm/s.
    pub xy_velocity_mm_s: f64,
    /// Stage speed in z, mm/s.
    pub z_velocity_mm_s: f64,
    /// Camera exposure, s. With the default stage speed this produces
    /// motion-blur lengths in the hundreds of pixels during captures on the
    /// fly, matching the regime the estimator must tolerate.
    pub exposure_s: f64,
    /// Whether the instrument sits on a vibration isolation pad.
    pub isolation_pad: bool,
    /// Initial vibration amplitude right after a stage move, px, with pad.
    /// Decays as exp(-t/tau); residuals under 0.5 px leave no trace in the
    /// image, so "settled" is crossed at ~0.08 s (pad) and ~0.40 s (no pad).
    pub vib_amp_pad_px: f64,
    /// Initial vibration amplitude without the pad, px.
    pub vib_amp_nopad_px: f64,
    /// Vibration decay time constant with pad, s.
    pub vib_tau_pad_s: f64,
    /// Vibration decay time constant without pad, s.
    pub vib_tau_nopad_s: f64,
    /// Gaussian read-noise sigma on the unit intensity scale.
    pub noise_sigma: f64,
    /// Pincushion warp strength, px^-2: dots move radially outward by
    /// k1 * r^2 (relative), about the frame center. 0 disables.
    pub warp_k1: f64,
    /// Quartic warp term, px^-4.
    pub warp_k2: f64,
    pub seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            optics: Optics::default(),
            xy_velocity_mm_s: 25.0,
            z_velocity_mm_s: 2.5,
            exposure_s: 0.002,
            isolation_pad: true,
            vib_amp_pad_px: 1.0,
            vib_amp_nopad_px: 1.89,
            vib_tau_pad_s: 0.12,
            vib_tau_nopad_s: 0.30,
            noise_sigma: 0.005,
            warp_k1: 5e-9,
            warp_k2: 0.0,
            seed: 0,
        }
    }
}

impl SimParams {
    /// Vibration amplitude in px remaining `t_s` after a move completes.
    pub fn vibration_amp_px(&self, t_s: f64) -> f64 {
        let (a, tau) = if self.isolation_pad {
            (self.vib_amp_pad_px, self.vib_tau_pad_s)
        } else {
            (self.vib_amp_nopad_px, self.vib_tau_nopad_s)
        };
        if t_s < 0.0 {
            return 0.0;
        }
        a * (-t_s / tau).exp()
    }

    /// Time after a move end at which vibration no longer marks the image
    /// (amplitude below half a pixel).
    pub fn settle_time_s(&self) -> f64 {
        let (a, tau) = if self.isolation_pad {
            (self.vib_amp_pad_px, self.vib_tau_pad_s)
        } else {
            (self.vib_amp_nopad_px, self.vib_tau_nopad_s)
        };
        if a <= render::VIBRATION_VISIBLE_PX {
            return 0.0;
        }
        tau * (a / render::VIBRATION_VISIBLE_PX).ln()
    }
}

/// FNV-1a over little-endian u64 words, seeded. All simulator randomness
/// (noise streams, vibration directions) derives from this so frames depend
/// only on (seed, state), never on wall time.
pub fn fnv1a(seed: u64, words: &[u64]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

#[derive(Debug, Clone, Copy)]
struct MoveState {
    from: (f64, f64, f64),
    target: (f64, f64, f64),
    start_s: f64,
    duration_s: f64,
}

/// The simulated instrument. One instance is one device; command execution
/// is strictly sequential (the serve loop enforces arrival order).
pub struct SimScope {
    params: SimParams,
    specimen: Arc<Specimen>,
    clock: SharedClock,
    mv: MoveState,
    /// Monotone count of completed stage moves; identifies the vibration
    /// event a capture decays from.
    move_seq: u64,
    ring_steps: i64,
    led: LedMode,
}

impl SimScope {
    pub fn new(specimen: Arc<Specimen>, params: SimParams, clock: SharedClock) -> Self {
        SimScope {
            params,
            specimen,
            clock,
            mv: MoveState {
                from: (0.0, 0.0, 0.0),
                target: (0.0, 0.0, 0.0),
                start_s: -1e9, // "moved long ago": vibration fully decayed
                duration_s: 0.0,
            },
            move_seq: 0,
            ring_steps: 0,
            led: LedMode::Brightfield,
        }
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn specimen(&self) -> &Arc<Specimen> {
        &self.specimen
    }

    fn move_end_s(&self) -> f64 {
        self.mv.start_s + self.mv.duration_s
    }

    fn pose_at(&self, now: f64) -> (f64, f64, f64) {
        if now >= self.move_end_s() || self.mv.duration_s <= 0.0 {
            self.mv.target
        } else {
            let f = ((now - self.mv.start_s) / self.mv.duration_s).clamp(0.0, 1.0);
            let lerp = |a: f64, b: f64| a + (b - a) * f;
            (
                lerp(self.mv.from.0, self.mv.target.0),
                lerp(self.mv.from.1, self.mv.target.1),
                lerp(self.mv.from.2, self.mv.target.2),
            )
        }
    }

    /// Executes one command. Capture replies carry the encoded payload that
    /// must follow the header line on the wire.
    pub fn execute(&mut self, cmd: &WireCommand) -> (WireReply, Option<Vec<u8>>) {
        match cmd {
            WireCommand::Move { x_mm, y_mm, z_mm } => {
                let now = self.clock.now();
                // Protocol discipline says no move is commanded while one
                // runs; if it happens anyway, the old move completes at its
                // target before the new one starts.
                let from = self.pose_at(now);
                let target = (
                    x_mm.unwrap_or(from.0),
                    y_mm.unwrap_or(from.1),
                    z_mm.unwrap_or(from.2),
                );
                let dxy = (target.0 - from.0).hypot(target.1 - from.1);
                let dz = (target.2 - from.2).abs();
                let duration = (dxy / self.params.xy_velocity_mm_s)
                    .max(dz / self.params.z_velocity_mm_s);
                self.mv = MoveState {
                    from,
                    target,
                    start_s: now,
                    duration_s: duration,
                };
                self.move_seq += 1;
                (WireReply::Ok, None)
            }
            WireCommand::Status => {
                let now = self.clock.now();
                let run = now < self.move_end_s();
                let (x_mm, y_mm, z_mm) = self.pose_at(now);
                (
                    WireReply::Status {
                        run,
                        x_mm,
                        y_mm,
                        z_mm,
                    },
                    None,
                )
            }
            WireCommand::Ring(n) => {
                // Ring motion is treated as instantaneous and excites no
                // vibration: the actuator moves grams, not the stage mass.
                self.ring_steps += n;
                (WireReply::Ok, None)
            }
            WireCommand::Led(mode) => {
                self.led = *mode;
                (WireReply::Ok, None)
            }
            WireCommand::Capture => {
                let st = self.capture_state();
                match render(&self.specimen, &st, &self.params) {
                    Ok(img) => {
                        let payload = wire::encode_payload(&img);
                        (
                            WireReply::ImageHeader {
                                width: img.width(),
                                height: img.height(),
                                channels: img.channels(),
                            },
                            Some(payload),
                        )
                    }
                    Err(SimError::OutOfBounds { .. }) => {
                        (WireReply::Error(wire::ERR_OUT_OF_BOUNDS), None)
                    }
                    Err(_) => (WireReply::Error(wire::ERR_MALFORMED), None),
                }
            }
        }
    }

    /// Snapshot of everything the renderer needs right now. A capture during
    /// motion exposes from the move's start pose (the frame content the
    /// camera integrated when triggered) with the motion's y-velocity as
    /// blur; a static capture exposes at the target with vibration decay
    /// clocked from the move end.
    pub fn capture_state(&self) -> CaptureState {
        let now = self.clock.now();
        let running = now < self.move_end_s();
        let (pose, y_velocity_mm_s, time_since_move_s) = if running {
            let vy = if self.mv.duration_s > 0.0 {
                (self.mv.target.1 - self.mv.from.1).abs() / self.mv.duration_s
            } else {
                0.0
            };
            (self.mv.from, vy, -1.0)
        } else {
            (self.mv.target, 0.0, now - self.move_end_s())
        };
        CaptureState {
            stage_x_mm: pose.0,
            stage_y_mm: pose.1,
            stage_z_um: pose.2 * 1000.0,
            ring_steps: self.ring_steps,
            led_mode: self.led,
            y_velocity_mm_s,
            time_since_move_s,
            isolation_pad: self.params.isolation_pad,
            move_seq: self.move_seq,
        }
    }
}
