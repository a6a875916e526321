//! Instrument control: wire protocol, device client, scan planning, and the
//! acquisition state machine.

pub mod client;
pub mod plan;
pub mod run;
pub mod wire;

/// Errors from talking to a device or running a scan.
#[derive(Debug, thiserror::Error)]
pub enum ScanError {
    #[error("device replied error:{0}")]
    Device(u32),
    #[error("invalid scan plan: {0}")]
    Plan(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("timed out waiting for device reply")]
    Timeout,
    #[error("autofocus: {0}")]
    Autofocus(String),
    #[error("distortion: {0}")]
    Distortion(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("focus map: {0}")]
    Csv(#[from] csv::Error),
    #[error("image: {0}")]
    Imaging(#[from] crate::imaging::ImagingError),
}
