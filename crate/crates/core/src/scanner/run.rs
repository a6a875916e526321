//! The acquisition state machine: drives a device through a scan plan,
//! interleaving autofocus-during-motion with static brightfield captures,
//! and streams frames through a concurrent correction/write pool.
//!
//! Focus tracking runs with a one-tile lag: the autofocus frame for tile N
//! is exposed right after the move from tile N-1 starts, so it measures the
//! surface near tile N-1 with the current ring position. The resulting ring
//! correction lands before tile N's static capture, leaving a residual of at
//! most one tile pitch of surface slope, which stays inside one depth of
//! field on smooth specimens. Tile 0 has no prior motion and autofocuses
//! statically to anchor the loop.
//!
//! Failed focus estimates (featureless fields, low confidence) keep the
//! previous ring position and flag the tile instead of aborting; device
//! errors abort the scan after flushing every completed tile and the partial
//! focus map.

use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autofocus::{
    defocus_from_separation, estimate_separation, ring_correction, AfConfig, AfError,
};
use crate::calibration::CalibrationModel;
use crate::distortion::Corrector;
use crate::imaging::io::{self as imgio, BitDepth};
use crate::imaging::Image;

use super::client::{Transport, WireClient};
use super::plan::{plan, PlanTile, ScanPlan};
use super::wire::LedMode;
use super::ScanError;

/// One focus-map row. `separation_px`/`defocus_um` are NaN when the tile's
/// estimate was rejected (then `low_confidence` is set and the ring held).
#[derive(Debug, Clone, PartialEq)]
pub struct FocusEntry {
    pub tile_index: usize,
    pub col: usize,
    pub row: usize,
    pub stage_x_mm: f64,
    pub stage_y_mm: f64,
    pub separation_px: f64,
    pub defocus_um: f64,
    pub ring_steps_after: i64,
    pub low_confidence: bool,
    pub clamped: bool,
}

impl FocusEntry {
    fn flags_string(&self) -> String {
        let mut flags = Vec::new();
        if self.low_confidence {
            flags.push("low_confidence");
        }
        if self.clamped {
            flags.push("clamped");
        }
        flags.join("|")
    }
}

/// Per-tile focus log for one scan, in tile order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FocusMap {
    pub entries: Vec<FocusEntry>,
}

impl FocusMap {
    pub fn write_csv(&self, path: &Path) -> Result<(), ScanError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "tile_index",
            "col",
            "row",
            "stage_x_mm",
            "stage_y_mm",
            "separation_px",
            "defocus_um",
            "ring_steps_after",
            "flags",
        ])?;
        for e in &self.entries {
            w.write_record([
                e.tile_index.to_string(),
                e.col.to_string(),
                e.row.to_string(),
                format!("{:.3}", e.stage_x_mm),
                format!("{:.3}", e.stage_y_mm),
                format!("{:.3}", e.separation_px),
                format!("{:.3}", e.defocus_um),
                e.ring_steps_after.to_string(),
                e.flags_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, ScanError> {
        let mut r = csv::Reader::from_path(path)?;
        let mut entries = Vec::new();
        for record in r.records() {
            let record = record?;
            let field = |i: usize| -> Result<&str, ScanError> {
                record
                    .get(i)
                    .ok_or_else(|| ScanError::Protocol(format!("focus map row too short: {record:?}")))
            };
            let bad =
                |what: &str| ScanError::Protocol(format!("focus map field {what}: {record:?}"));
            let flags = field(8)?;
            entries.push(FocusEntry {
                tile_index: field(0)?.parse().map_err(|_| bad("tile_index"))?,
                col: field(1)?.parse().map_err(|_| bad("col"))?,
                row: field(2)?.parse().map_err(|_| bad("row"))?,
                stage_x_mm: field(3)?.parse().map_err(|_| bad("stage_x_mm"))?,
                stage_y_mm: field(4)?.parse().map_err(|_| bad("stage_y_mm"))?,
                separation_px: field(5)?.parse().map_err(|_| bad("separation_px"))?,
                defocus_um: field(6)?.parse().map_err(|_| bad("defocus_um"))?,
                ring_steps_after: field(7)?.parse().map_err(|_| bad("ring_steps_after"))?,
                low_confidence: flags.split('|').any(|f| f == "low_confidence"),
                clamped: flags.split('|').any(|f| f == "clamped"),
            });
        }
        Ok(FocusMap { entries })
    }
}

/// Scan-run configuration. `settle_s` must match the stage's vibration
/// decay (0.2 s with isolation padding, 0.4 s without).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunParams {
    pub settle_s: f64,
    pub af: AfConfig,
    /// Off holds the ring where it is and skips the defocus measurement;
    /// focus-map rows then carry NaN separation/defocus. Baseline runs.
    pub autofocus: bool,
    /// Overlap correction/IO with the next tile's motion; sequential mode
    /// corrects everything after the device loop finishes.
    pub pipelined: bool,
    pub workers: usize,
    pub out_dir: std::path::PathBuf,
}

impl RunParams {
    pub fn new(out_dir: impl Into<std::path::PathBuf>) -> Self {
        RunParams {
            settle_s: 0.2,
            af: AfConfig::default(),
            autofocus: true,
            pipelined: true,
            workers: 2,
            out_dir: out_dir.into(),
        }
    }
}

/// Per-tile phase durations, seconds. Motion and settle are timeline
/// durations (virtual under a virtual clock); autofocus compute is always
/// host CPU time, since compute does not advance a virtual timeline.
#[derive(Debug, Clone, Copy, Default)]
pub struct TileTiming {
    pub move_s: f64,
    pub af_compute_s: f64,
    pub settle_s: f64,
    pub capture_s: f64,
}

pub fn tile_filename(col: usize, row: usize) -> String {
    format!("tile_{col}_{row}.png")
}

/// Runs the per-tile state machine. With `static_af` (tile 0) the stage
/// settles before a stationary autofocus capture; otherwise the autofocus
/// frame is captured in motion right after the move command.
pub fn acquire_tile<T: Transport>(
    client: &mut WireClient<T>,
    tile: &PlanTile,
    params: &RunParams,
    cal: &CalibrationModel,
    static_af: bool,
) -> Result<(Image, FocusEntry, TileTiming), ScanError> {
    let clock = client.clock().clone();
    let mut timing = TileTiming {
        settle_s: params.settle_s,
        ..TileTiming::default()
    };
    let (separation_px, defocus_um, low_confidence, clamped);
    if params.autofocus {
        client.set_led(LedMode::RgDual)?;
        timing.move_s = client.move_to(Some(tile.x_mm), Some(tile.y_mm), None)?;
        if static_af {
            client.wait_settled(params.settle_s)?;
        }
        let t = clock.now();
        let af_frame = client.capture()?;
        timing.capture_s += clock.now() - t;

        let t = Instant::now();
        let estimate = estimate_separation(&af_frame, &params.af);
        drop(af_frame);
        let mut was_clamped = false;
        (separation_px, defocus_um, low_confidence) = match estimate {
            Ok(est) => {
                let defocus = defocus_from_separation(est.separation_px, cal)
                    .map_err(|e| ScanError::Autofocus(e.to_string()))?;
                (est.separation_px, defocus, false)
            }
            // Unusable field of view: hold focus and flag rather than abort.
            Err(AfError::LowConfidence { .. }) | Err(AfError::DegenerateInput(_)) => {
                (f64::NAN, f64::NAN, true)
            }
            Err(e) => return Err(ScanError::Autofocus(e.to_string())),
        };
        timing.af_compute_s = t.elapsed().as_secs_f64();

        if !low_confidence {
            let correction = ring_correction(defocus_um, cal, client.config().ring_travel_steps)
                .map_err(|e| ScanError::Autofocus(e.to_string()))?;
            let moved = client.ring_move(correction.steps)?;
            was_clamped = correction.clamped || moved.clamped;
        }
        clamped = was_clamped;
    } else {
        timing.move_s = client.move_to(Some(tile.x_mm), Some(tile.y_mm), None)?;
        (separation_px, defocus_um, low_confidence, clamped) = (f64::NAN, f64::NAN, false, false);
    }
    client.wait_settled(params.settle_s)?;
    client.set_led(LedMode::Brightfield)?;
    let t = clock.now();
    let frame = client.capture()?;
    timing.capture_s += clock.now() - t;

    let entry = FocusEntry {
        tile_index: tile.index,
        col: tile.col,
        row: tile.row,
        stage_x_mm: tile.x_mm,
        stage_y_mm: tile.y_mm,
        separation_px,
        defocus_um,
        ring_steps_after: client.ring_position(),
        low_confidence,
        clamped,
    };
    Ok((frame, entry, timing))
}

/// Mean per-tile phase durations over a run, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMeans {
    pub move_s: f64,
    pub af_compute_s: f64,
    pub settle_s: f64,
    pub capture_s: f64,
    pub correct_s: f64,
}

/// Where a scan's time went, plus an extrapolation to a full slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub tiles: usize,
    pub wall_s: f64,
    pub per_tile: PhaseMeans,
    pub extrapolated_tiles_15x15_mm: usize,
    pub extrapolated_wall_s_15x15_mm: f64,
}

impl std::fmt::Display for ThroughputReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "tiles: {}", self.tiles)?;
        writeln!(
            f,
            "wall: {:.3} s ({:.3} s/tile)",
            self.wall_s,
            self.wall_s / self.tiles.max(1) as f64
        )?;
        writeln!(
            f,
            "per-tile mean phases: move {:.3} s, af-compute {:.3} s, settle {:.3} s, capture {:.3} s, correct {:.3} s",
            self.per_tile.move_s,
            self.per_tile.af_compute_s,
            self.per_tile.settle_s,
            self.per_tile.capture_s,
            self.per_tile.correct_s
        )?;
        write!(
            f,
            "15x15 mm extrapolation: {} tiles, {:.3} s",
            self.extrapolated_tiles_15x15_mm, self.extrapolated_wall_s_15x15_mm
        )
    }
}

/// A completed (or aborted) scan: the focus map and where the time went.
#[derive(Debug)]
pub struct RunOutput {
    pub focus_map: FocusMap,
    pub report: ThroughputReport,
}

fn correct_and_write(
    frame: &Image,
    tile: &PlanTile,
    corrector: Option<&Corrector>,
    out_dir: &Path,
) -> Result<f64, ScanError> {
    let t = Instant::now();
    let corrected = match corrector {
        Some(c) => c
            .apply(frame)
            .map_err(|e| ScanError::Distortion(e.to_string()))?,
        None => frame.clone(),
    };
    // Temp-then-rename so a crash never leaves a partly written tile
    // under its final name.
    let name = tile_filename(tile.col, tile.row);
    let tmp = out_dir.join(format!(".{}.tmp.png", name.trim_end_matches(".png")));
    let final_path = out_dir.join(name);
    imgio::write_raster(&corrected, &tmp, BitDepth::Sixteen)?;
    std::fs::rename(&tmp, &final_path)?;
    Ok(t.elapsed().as_secs_f64())
}

/// Executes the plan. Corrected tiles land in `params.out_dir` as
/// `tile_<col>_<row>.png` plus a `focusmap.csv`; the focus map is written
/// even when a device error aborts the run partway.
pub fn run_scan<T: Transport>(
    client: &mut WireClient<T>,
    scan: &ScanPlan,
    params: &RunParams,
    cal: &CalibrationModel,
    corrector: Option<&Corrector>,
) -> Result<RunOutput, ScanError> {
    std::fs::create_dir_all(&params.out_dir)?;
    let clock = client.clock().clone();
    let t0 = clock.now();
    let mut entries: Vec<FocusEntry> = Vec::with_capacity(scan.tiles.len());
    let mut timings: Vec<TileTiming> = Vec::with_capacity(scan.tiles.len());
    let correct_times: Mutex<Vec<f64>> = Mutex::new(Vec::new());
    let worker_err: Mutex<Option<ScanError>> = Mutex::new(None);
    let mut device_err: Option<ScanError> = None;

    if params.pipelined {
        std::thread::scope(|s| {
            let (tx, rx) =
                crossbeam_channel::bounded::<(PlanTile, Image)>(params.workers.max(1) * 2);
            for _ in 0..params.workers.max(1) {
                let rx = rx.clone();
                let (correct_times, worker_err) = (&correct_times, &worker_err);
                s.spawn(move || {
                    while let Ok((tile, frame)) = rx.recv() {
                        if worker_err.lock().unwrap().is_some() {
                            continue; // drain so the sender never blocks
                        }
                        match correct_and_write(&frame, &tile, corrector, &params.out_dir) {
                            Ok(secs) => correct_times.lock().unwrap().push(secs),
                            Err(e) => *worker_err.lock().unwrap() = Some(e),
                        }
                    }
                });
            }
            drop(rx);
            for tile in &scan.tiles {
                match acquire_tile(client, tile, params, cal, tile.index == 0) {
                    Ok((frame, entry, timing)) => {
                        entries.push(entry);
                        timings.push(timing);
                        if tx.send((*tile, frame)).is_err() {
                            break; // all workers gone; their error surfaces below
                        }
                    }
                    Err(e) => {
                        device_err = Some(e);
                        break;
                    }
                }
            }
            drop(tx);
        });
    } else {
        let mut frames: Vec<(PlanTile, Image)> = Vec::with_capacity(scan.tiles.len());
        for tile in &scan.tiles {
            match acquire_tile(client, tile, params, cal, tile.index == 0) {
                Ok((frame, entry, timing)) => {
                    entries.push(entry);
                    timings.push(timing);
                    frames.push((*tile, frame));
                }
                Err(e) => {
                    device_err = Some(e);
                    break;
                }
            }
        }
        for (tile, frame) in &frames {
            match correct_and_write(frame, tile, corrector, &params.out_dir) {
                Ok(secs) => correct_times.lock().unwrap().push(secs),
                Err(e) => {
                    *worker_err.lock().unwrap() = Some(e);
                    break;
                }
            }
        }
    }

    let focus_map = FocusMap { entries };
    focus_map.write_csv(&params.out_dir.join("focusmap.csv"))?;
    if let Some(e) = device_err {
        return Err(e);
    }
    if let Some(e) = worker_err.into_inner().unwrap() {
        return Err(e);
    }

    let wall_s = clock.now() - t0;
    let n = focus_map.entries.len();
    let mean = |f: fn(&TileTiming) -> f64| {
        timings.iter().map(f).sum::<f64>() / timings.len().max(1) as f64
    };
    let correct_times = correct_times.into_inner().unwrap();
    let per_tile = PhaseMeans {
        move_s: mean(|t| t.move_s),
        af_compute_s: mean(|t| t.af_compute_s),
        settle_s: mean(|t| t.settle_s),
        capture_s: mean(|t| t.capture_s),
        correct_s: correct_times.iter().sum::<f64>() / correct_times.len().max(1) as f64,
    };
    let full_slide = plan((0.0, 0.0), (15.0, 15.0), scan.fov_mm, scan.overlap)?;
    let report = ThroughputReport {
        tiles: n,
        wall_s,
        per_tile,
        extrapolated_tiles_15x15_mm: full_slide.tiles.len(),
        extrapolated_wall_s_15x15_mm: wall_s / n.max(1) as f64 * full_slide.tiles.len() as f64,
    };
    Ok(RunOutput { focus_map, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::imaging::gradient_energy;
    use crate::optics::Optics;
    use crate::scanner::client::{pipe_transport, ClientConfig};
    use crate::simscope::{
        spawn_sim, FocalSurface, SimParams, Specimen, SpecimenParams,
    };
    use std::sync::Arc;
    use std::time::Duration;

    fn small_sim_params() -> SimParams {
        let mut p = SimParams::default();
        p.optics.frame_width = 512;
        p.optics.frame_height = 342;
        p.warp_k1 = 0.0;
        p
    }

    fn connect(
        specimen: Arc<Specimen>,
        params: SimParams,
    ) -> (WireClient<impl Transport>, Arc<VirtualClock>) {
        let clock = Arc::new(VirtualClock::new());
        let pipe = spawn_sim(specimen, params, clock.clone());
        let transport = pipe_transport(pipe, Some(Duration::from_secs(30)));
        let client =
            WireClient::connect(transport, clock.clone(), ClientConfig::default()).unwrap();
        (client, clock)
    }

    fn wavy_specimen(amplitude_um: f64, seed: u64) -> Arc<Specimen> {
        Arc::new(
            Specimen::generate(&SpecimenParams {
                extent_mm: (0.8, 0.6),
                amplitude_um,
                seed,
                ..SpecimenParams::default()
            })
            .unwrap(),
        )
    }

    fn five_by_five(optics: &Optics) -> ScanPlan {
        let fov = optics.fov_mm();
        // 3.95 pitches keeps ceil() at 4 against float round-up.
        plan((0.1, 0.1), (3.95 * fov.0 * 0.85 + fov.0, 3.95 * fov.1 * 0.85 + fov.1), fov, 0.15)
            .unwrap()
    }

    #[test]
    fn five_by_five_scan_completes_map_and_tiles() {
        let sim = small_sim_params();
        let scan = five_by_five(&sim.optics);
        assert_eq!((scan.cols, scan.rows), (5, 5));
        let (mut client, _clock) = connect(wavy_specimen(10.0, 11), sim.clone());
        let cal = CalibrationModel::nominal(&sim.optics);
        let dir = tempfile::tempdir().unwrap();
        let params = RunParams::new(dir.path());
        let out = run_scan(&mut client, &scan, &params, &cal, None).unwrap();
        assert_eq!(out.focus_map.entries.len(), 25);
        for (i, e) in out.focus_map.entries.iter().enumerate() {
            assert_eq!(e.tile_index, i);
            assert!(!e.low_confidence, "tile {i} unexpectedly low-confidence");
            assert!(
                dir.path().join(tile_filename(e.col, e.row)).exists(),
                "missing tile file for {i}"
            );
        }
        assert!(dir.path().join("focusmap.csv").exists());
        let read = FocusMap::read_csv(&dir.path().join("focusmap.csv")).unwrap();
        assert_eq!(read.entries.len(), 25);
        for (a, b) in read.entries.iter().zip(&out.focus_map.entries) {
            assert_eq!(
                (a.tile_index, a.col, a.row, a.ring_steps_after),
                (b.tile_index, b.col, b.row, b.ring_steps_after)
            );
            // CSV stores three decimals.
            assert!((a.separation_px - b.separation_px).abs() < 5.1e-4);
            assert!((a.defocus_um - b.defocus_um).abs() < 5.1e-4);
        }
        assert!(out.report.tiles == 25 && out.report.wall_s > 0.0);
    }

    #[test]
    fn residual_defocus_stays_within_one_depth_of_field() {
        let sim = small_sim_params();
        let scan = five_by_five(&sim.optics);
        let specimen = wavy_specimen(10.0, 11);
        let (mut client, _clock) = connect(specimen.clone(), sim.clone());
        let cal = CalibrationModel::nominal(&sim.optics);
        let dir = tempfile::tempdir().unwrap();
        let params = RunParams::new(dir.path());
        let out = run_scan(&mut client, &scan, &params, &cal, None).unwrap();
        let step = sim.optics.ring_step_image_um() / sim.optics.axial_magnification();
        for e in &out.focus_map.entries {
            let surface = specimen.surface_z_um(e.stage_x_mm, e.stage_y_mm);
            let residual = surface - e.ring_steps_after as f64 * step;
            assert!(
                residual.abs() <= 1.0,
                "tile {} residual {residual:.3} um exceeds one depth of field",
                e.tile_index
            );
        }
    }

    #[test]
    fn ring_positions_track_the_surface_continuously() {
        let sim = small_sim_params();
        let scan = five_by_five(&sim.optics);
        let specimen = wavy_specimen(10.0, 11);
        let (mut client, _clock) = connect(specimen.clone(), sim.clone());
        let cal = CalibrationModel::nominal(&sim.optics);
        let dir = tempfile::tempdir().unwrap();
        let out = run_scan(&mut client, &scan, &RunParams::new(dir.path()), &cal, None).unwrap();
        let slope = specimen.surface.max_slope_um_per_mm();
        let pitch = scan.pitch_mm.0.max(scan.pitch_mm.1);
        // One-pitch surface change in steps, plus rounding and estimator
        // noise headroom.
        let bound = (slope * pitch / 0.08).ceil() as i64 + 4;
        for w in out.focus_map.entries.windows(2) {
            let d = (w[1].ring_steps_after - w[0].ring_steps_after).abs();
            assert!(
                d <= bound,
                "ring jumped {d} steps between tiles {} and {} (bound {bound})",
                w[0].tile_index,
                w[1].tile_index
            );
        }
    }

    #[test]
    fn featureless_specimen_flags_low_confidence_and_holds_ring() {
        let sim = small_sim_params();
        let blank = Image::from_data(2400, 2000, 3, vec![0.5; 2400 * 2000 * 3]).unwrap();
        let specimen = Arc::new(Specimen::from_texture(
            blank,
            SpecimenParams::default().texture_pitch_um,
            FocalSurface::constant(5.0),
        ));
        let fov = sim.optics.fov_mm();
        let scan = plan((0.1, 0.1), (fov.0 * 1.8, fov.1), fov, 0.15).unwrap();
        assert_eq!(scan.tiles.len(), 2);
        let (mut client, _clock) = connect(specimen, sim.clone());
        let cal = CalibrationModel::nominal(&sim.optics);
        let dir = tempfile::tempdir().unwrap();
        let out = run_scan(&mut client, &scan, &RunParams::new(dir.path()), &cal, None).unwrap();
        for e in &out.focus_map.entries {
            assert!(e.low_confidence, "tile {} should be low-confidence", e.tile_index);
            assert!(e.separation_px.is_nan() && e.defocus_um.is_nan());
            assert_eq!(e.ring_steps_after, 0, "ring must hold on low confidence");
        }
        // Tiles are still captured and written.
        assert!(dir.path().join(tile_filename(0, 0)).exists());
        assert!(dir.path().join(tile_filename(1, 0)).exists());
    }

    #[test]
    fn short_settle_without_padding_blurs_tiles() {
        let mut sim = small_sim_params();
        sim.isolation_pad = false;
        let specimen = wavy_specimen(0.0, 11);
        let fov = sim.optics.fov_mm();
        let scan = plan((0.1, 0.1), (fov.0 * 1.9, fov.1 * 1.9), fov, 0.15).unwrap();
        let cal = CalibrationModel::nominal(&sim.optics);

        let mut energies = Vec::new();
        for settle_s in [0.4, 0.05] {
            let (mut client, _clock) = connect(specimen.clone(), sim.clone());
            let dir = tempfile::tempdir().unwrap();
            let mut params = RunParams::new(dir.path());
            params.settle_s = settle_s;
            let out = run_scan(&mut client, &scan, &params, &cal, None).unwrap();
            let mut energy = 0.0;
            for e in &out.focus_map.entries {
                let img = imgio::read_raster(&dir.path().join(tile_filename(e.col, e.row))).unwrap();
                energy += gradient_energy(&img);
            }
            energies.push(energy / out.focus_map.entries.len() as f64);
        }
        assert!(
            energies[1] < 0.9 * energies[0],
            "0.05 s settle should blur: sharpness {:.4} vs {:.4}",
            energies[1],
            energies[0]
        );
    }

    #[test]
    fn device_error_aborts_after_flushing_completed_tiles() {
        let sim = small_sim_params();
        // Specimen too small for the plan: column 2 captures out of bounds.
        let texture_px = (0.3 * 1000.0 / 0.24) as usize;
        let texture_py = (0.4 * 1000.0 / 0.24) as usize;
        let specimen = Arc::new(
            Specimen::generate(&SpecimenParams {
                extent_mm: (0.3, 0.4),
                amplitude_um: 0.0,
                seed: 3,
                ..SpecimenParams::default()
            })
            .unwrap(),
        );
        assert!(specimen.texture.width() >= texture_px && specimen.texture.height() >= texture_py);
        let fov = sim.optics.fov_mm();
        let scan = plan((0.05, 0.05), (0.5, 0.35), fov, 0.15).unwrap();
        assert!(scan.cols >= 3, "plan must reach out-of-bounds columns");
        let (mut client, _clock) = connect(specimen, sim.clone());
        let cal = CalibrationModel::nominal(&sim.optics);
        let dir = tempfile::tempdir().unwrap();
        let err = run_scan(&mut client, &scan, &RunParams::new(dir.path()), &cal, None)
            .expect_err("scan must abort out of bounds");
        assert!(matches!(err, ScanError::Device(2)), "got {err:?}");
        let map = FocusMap::read_csv(&dir.path().join("focusmap.csv")).unwrap();
        assert!(!map.entries.is_empty() && map.entries.len() < scan.tiles.len());
        for e in &map.entries {
            assert!(
                dir.path().join(tile_filename(e.col, e.row)).exists(),
                "completed tile {} must be flushed",
                e.tile_index
            );
        }
    }

    #[test]
    fn throughput_report_renders_a_stable_format() {
        let report = ThroughputReport {
            tiles: 25,
            wall_s: 14.25,
            per_tile: PhaseMeans {
                move_s: 0.18,
                af_compute_s: 0.052,
                settle_s: 0.2,
                capture_s: 0.08,
                correct_s: 0.041,
            },
            extrapolated_tiles_15x15_mm: 204,
            extrapolated_wall_s_15x15_mm: 116.28,
        };
        let expected = "tiles: 25\n\
                        wall: 14.250 s (0.570 s/tile)\n\
                        per-tile mean phases: move 0.180 s, af-compute 0.052 s, settle 0.200 s, capture 0.080 s, correct 0.041 s\n\
                        15x15 mm extrapolation: 204 tiles, 116.280 s";
        assert_eq!(report.to_string(), expected);
    }

    #[test]
    fn focus_map_csv_roundtrips_nan_and_flags() {
        let map = FocusMap {
            entries: vec![
                FocusEntry {
                    tile_index: 0,
                    col: 0,
                    row: 0,
                    stage_x_mm: 0.161,
                    stage_y_mm: 0.141,
                    separation_px: -12.345,
                    defocus_um: -3.394,
                    ring_steps_after: -42,
                    low_confidence: false,
                    clamped: true,
                },
                FocusEntry {
                    tile_index: 1,
                    col: 0,
                    row: 1,
                    stage_x_mm: 0.161,
                    stage_y_mm: 0.215,
                    separation_px: f64::NAN,
                    defocus_um: f64::NAN,
                    ring_steps_after: -42,
                    low_confidence: true,
                    clamped: false,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("focusmap.csv");
        map.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "tile_index,col,row,stage_x_mm,stage_y_mm,separation_px,defocus_um,ring_steps_after,flags\n"
        ));
        assert!(text.contains("clamped"));
        let read = FocusMap::read_csv(&path).unwrap();
        assert_eq!(read.entries.len(), 2);
        assert_eq!(read.entries[0], map.entries[0]);
        let e1 = &read.entries[1];
        assert!(e1.separation_px.is_nan() && e1.defocus_um.is_nan());
        assert!(e1.low_confidence && !e1.clamped);
    }
}
