//! Acquisition engine for a motorized slide-scanning microscope.
//!
//! The hardware model is a 3-axis stage plus a camera whose objective carries
//! a stepper-driven focus ring; illumination switches between brightfield and
//! a dual-LED mode whose red and green sources sit on opposite sides of the
//! condenser pupil. Under dual-LED light a defocused sample produces laterally
//! separated red/green copies of the same scene, and that separation is a
//! signed, linear measure of defocus. Everything else builds on that:
//!
//! - [`autofocus`] estimates the separation from one frame and maps it to a
//!   focus-ring correction.
//! - [`calibration`] fits the ring step size and the separation-to-defocus
//!   slope against the live instrument.
//! - [`scanner`] plans serpentine tile grids and runs the capture loop with
//!   focus tracking pipelined into stage motion.
//! - [`distortion`] measures and removes radial lens distortion.
//! - [`mosaic`] registers and blends the corrected tiles.
//! - [`simscope`] is a full virtual instrument (stage, ring, optics, sensor)
//!   used by the test suite and the `sim` backend.

pub mod autofocus;
pub mod calibration;
pub mod clock;
pub mod distortion;
pub mod imaging;
pub mod mosaic;
pub mod optics;
pub mod scanner;
pub mod simscope;
