//! Wire-protocol client: the host-side handle on an instrument.
//!
//! The client enforces strict lockstep: one command, one reply, never a
//! second command in flight. Motion is asynchronous on the device, so the
//! client mirrors the commanded pose and the device's published velocities,
//! computes when a move must be done, sleeps through that window plus the
//! configured settle time, and only then issues a single status query. This
//! keeps transcripts reproducible (no polling loops whose iteration count
//! depends on timing) and makes every exchange attributable to one state
//! transition.
//!
//! Transports carry framed ASCII lines plus raw capture payloads over an
//! in-process pipe, TCP, or a serial character device. Wrappers provide
//! transcript recording for conformance goldens and fault injection for
//! robustness tests.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::clock::SharedClock;
use crate::imaging::Image;
use crate::simscope::DuplexPipe;

use super::wire::{
    decode_payload, format_command, parse_reply, LedMode, WireCommand, WireReply,
};
use super::ScanError;

/// Line-plus-payload byte channel to a device.
pub trait Transport: Send {
    fn send_line(&mut self, line: &str) -> Result<(), ScanError>;
    fn recv_line(&mut self) -> Result<String, ScanError>;
    fn recv_exact(&mut self, buf: &mut [u8]) -> Result<(), ScanError>;
}

fn map_io(e: std::io::Error) -> ScanError {
    match e.kind() {
        std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => ScanError::Timeout,
        _ => ScanError::Io(e),
    }
}

/// Transport over any split byte stream.
pub struct StreamTransport<R: Read + Send, W: Write + Send> {
    reader: BufReader<R>,
    writer: W,
}

impl<R: Read + Send, W: Write + Send> StreamTransport<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        StreamTransport {
            reader: BufReader::new(reader),
            writer,
        }
    }
}

impl<R: Read + Send, W: Write + Send> Transport for StreamTransport<R, W> {
    fn send_line(&mut self, line: &str) -> Result<(), ScanError> {
        self.writer.write_all(line.as_bytes()).map_err(map_io)?;
        self.writer.write_all(b"\n").map_err(map_io)?;
        self.writer.flush().map_err(map_io)
    }

    fn recv_line(&mut self) -> Result<String, ScanError> {
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).map_err(map_io)?;
        if n == 0 {
            return Err(ScanError::Protocol("connection closed by device".into()));
        }
        while line.ends_with('\n') || line.ends_with('\r') {
            line.pop();
        }
        Ok(line)
    }

    fn recv_exact(&mut self, buf: &mut [u8]) -> Result<(), ScanError> {
        self.reader.read_exact(buf).map_err(map_io)
    }
}

/// Transport over an in-process simulator pipe. `timeout` bounds every read
/// so a silent peer surfaces as an error instead of a hang.
pub fn pipe_transport(
    mut pipe: DuplexPipe,
    timeout: Option<Duration>,
) -> StreamTransport<crate::simscope::ByteRx, crate::simscope::ByteTx> {
    pipe.reader.timeout = timeout;
    StreamTransport::new(pipe.reader, pipe.writer)
}

/// Connects over TCP with a read timeout on replies.
pub fn tcp_transport(
    addr: impl ToSocketAddrs,
    timeout: Option<Duration>,
) -> std::io::Result<StreamTransport<TcpStream, TcpStream>> {
    let stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(timeout)?;
    stream.set_nodelay(true)?;
    Ok(StreamTransport::new(stream.try_clone()?, stream))
}

/// Opens a serial character device (assumed pre-configured, e.g. via stty).
pub fn serial_transport(
    path: &std::path::Path,
) -> std::io::Result<StreamTransport<std::fs::File, std::fs::File>> {
    let reader = std::fs::OpenOptions::new().read(true).open(path)?;
    let writer = std::fs::OpenOptions::new().write(true).open(path)?;
    Ok(StreamTransport::new(reader, writer))
}

/// One protocol exchange as seen on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TranscriptEvent {
    Sent(String),
    Received(String),
    /// Binary capture payload, by length only.
    Payload(usize),
}

pub type TranscriptLog = Arc<Mutex<Vec<TranscriptEvent>>>;

/// Renders a transcript in the stable text form used by golden files.
pub fn render_transcript(events: &[TranscriptEvent]) -> String {
    let mut out = String::new();
    for e in events {
        match e {
            TranscriptEvent::Sent(l) => {
                out.push_str("> ");
                out.push_str(l);
            }
            TranscriptEvent::Received(l) => {
                out.push_str("< ");
                out.push_str(l);
            }
            TranscriptEvent::Payload(n) => {
                out.push_str(&format!("< [payload {n} bytes]"));
            }
        }
        out.push('\n');
    }
    out
}

/// Records every exchange passing through an inner transport.
pub struct RecordingTransport<T: Transport> {
    inner: T,
    log: TranscriptLog,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> (Self, TranscriptLog) {
        let log: TranscriptLog = Arc::new(Mutex::new(Vec::new()));
        (
            RecordingTransport {
                inner,
                log: log.clone(),
            },
            log,
        )
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send_line(&mut self, line: &str) -> Result<(), ScanError> {
        self.inner.send_line(line)?;
        self.log
            .lock()
            .unwrap()
            .push(TranscriptEvent::Sent(line.to_string()));
        Ok(())
    }

    fn recv_line(&mut self) -> Result<String, ScanError> {
        let line = self.inner.recv_line()?;
        self.log
            .lock()
            .unwrap()
            .push(TranscriptEvent::Received(line.clone()));
        Ok(line)
    }

    fn recv_exact(&mut self, buf: &mut [u8]) -> Result<(), ScanError> {
        self.inner.recv_exact(buf)?;
        self.log
            .lock()
            .unwrap()
            .push(TranscriptEvent::Payload(buf.len()));
        Ok(())
    }
}

/// Fault-injecting transport for robustness tests: can garble or swallow
/// selected reply lines (0-indexed over received lines). A swallowed reply
/// leaves the client waiting for a line the device will never resend, so
/// the underlying transport must carry a read timeout.
pub struct FaultTransport<T: Transport> {
    inner: T,
    received: usize,
    pub garble_at: Option<usize>,
    pub drop_at: Option<usize>,
}

impl<T: Transport> FaultTransport<T> {
    pub fn new(inner: T) -> Self {
        FaultTransport {
            inner,
            received: 0,
            garble_at: None,
            drop_at: None,
        }
    }
}

impl<T: Transport> Transport for FaultTransport<T> {
    fn send_line(&mut self, line: &str) -> Result<(), ScanError> {
        self.inner.send_line(line)
    }

    fn recv_line(&mut self) -> Result<String, ScanError> {
        let line = self.inner.recv_line()?;
        let n = self.received;
        self.received += 1;
        if self.drop_at == Some(n) {
            // The reply vanishes; the next read waits for traffic that is
            // not coming and must time out rather than hang.
            return self.inner.recv_line();
        }
        if self.garble_at == Some(n) {
            return Ok(format!("\u{1}{line}\u{1}garbled"));
        }
        Ok(line)
    }

    fn recv_exact(&mut self, buf: &mut [u8]) -> Result<(), ScanError> {
        self.inner.recv_exact(buf)
    }
}

/// Client-side kinematics and limits; must mirror the device's actual
/// motion constants for the sleep-then-query settle strategy to be valid.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub xy_velocity_mm_s: f64,
    pub z_velocity_mm_s: f64,
    /// Absolute ring travel bound, steps from the connect-time position.
    pub ring_travel_steps: i64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            xy_velocity_mm_s: 25.0,
            z_velocity_mm_s: 2.5,
            ring_travel_steps: 2500,
        }
    }
}

/// Device status as parsed from a `?` reply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceStatus {
    pub running: bool,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
}

/// Outcome of a ring move after travel clamping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingMove {
    /// Steps actually commanded.
    pub applied: i64,
    pub clamped: bool,
}

/// Stateful protocol client. Tracks the commanded pose (quantized to the
/// wire's 3 decimals), the accumulated ring position, and the end time of
/// the last commanded move.
pub struct WireClient<T: Transport> {
    transport: T,
    clock: SharedClock,
    cfg: ClientConfig,
    pose_mm: (f64, f64, f64),
    ring_pos: i64,
    move_end_s: f64,
}

fn quantize_mm(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

impl<T: Transport> WireClient<T> {
    /// Handshakes with one status query to learn the device pose.
    pub fn connect(transport: T, clock: SharedClock, cfg: ClientConfig) -> Result<Self, ScanError> {
        let mut c = WireClient {
            transport,
            clock,
            cfg,
            pose_mm: (0.0, 0.0, 0.0),
            ring_pos: 0,
            move_end_s: f64::NEG_INFINITY,
        };
        let st = c.status()?;
        c.pose_mm = (st.x_mm, st.y_mm, st.z_mm);
        Ok(c)
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn ring_position(&self) -> i64 {
        self.ring_pos
    }

    pub fn pose_mm(&self) -> (f64, f64, f64) {
        self.pose_mm
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    fn exchange(&mut self, cmd: &WireCommand) -> Result<WireReply, ScanError> {
        self.transport.send_line(&format_command(cmd))?;
        let line = self.transport.recv_line()?;
        let reply = parse_reply(&line)
            .ok_or_else(|| ScanError::Protocol(format!("unparseable reply {line:?}")))?;
        if let WireReply::Error(code) = reply {
            return Err(ScanError::Device(code));
        }
        Ok(reply)
    }

    fn expect_ok(&mut self, cmd: &WireCommand) -> Result<(), ScanError> {
        match self.exchange(cmd)? {
            WireReply::Ok => Ok(()),
            other => Err(ScanError::Protocol(format!(
                "expected ok, got {:?}",
                other
            ))),
        }
    }

    /// Starts a move and returns its expected duration in seconds. Does not
    /// wait: follow with `wait_settled` before a static capture.
    pub fn move_to(
        &mut self,
        x_mm: Option<f64>,
        y_mm: Option<f64>,
        z_mm: Option<f64>,
    ) -> Result<f64, ScanError> {
        if x_mm.is_none() && y_mm.is_none() && z_mm.is_none() {
            return Err(ScanError::Protocol("move with no axes".into()));
        }
        let target = (
            quantize_mm(x_mm.unwrap_or(self.pose_mm.0)),
            quantize_mm(y_mm.unwrap_or(self.pose_mm.1)),
            quantize_mm(z_mm.unwrap_or(self.pose_mm.2)),
        );
        let cmd = WireCommand::Move {
            x_mm: x_mm.map(quantize_mm),
            y_mm: y_mm.map(quantize_mm),
            z_mm: z_mm.map(quantize_mm),
        };
        self.expect_ok(&cmd)?;
        let dxy = ((target.0 - self.pose_mm.0).powi(2) + (target.1 - self.pose_mm.1).powi(2)).sqrt();
        let dz = (target.2 - self.pose_mm.2).abs();
        let duration = (dxy / self.cfg.xy_velocity_mm_s).max(dz / self.cfg.z_velocity_mm_s);
        self.pose_mm = target;
        self.move_end_s = self.clock.now() + duration;
        Ok(duration)
    }

    pub fn status(&mut self) -> Result<DeviceStatus, ScanError> {
        match self.exchange(&WireCommand::Status)? {
            WireReply::Status {
                run,
                x_mm,
                y_mm,
                z_mm,
            } => Ok(DeviceStatus {
                running: run,
                x_mm,
                y_mm,
                z_mm,
            }),
            other => Err(ScanError::Protocol(format!(
                "expected status, got {other:?}"
            ))),
        }
    }

    /// Sleeps until the last commanded move plus `settle_s` has elapsed,
    /// then verifies with a single status query that the device is idle at
    /// the commanded pose.
    pub fn wait_settled(&mut self, settle_s: f64) -> Result<DeviceStatus, ScanError> {
        let wait = self.move_end_s + settle_s - self.clock.now();
        if wait > 0.0 {
            self.clock.sleep(wait);
        }
        let st = self.status()?;
        if st.running {
            return Err(ScanError::Protocol(
                "device still moving after settle window".into(),
            ));
        }
        let err = (st.x_mm - self.pose_mm.0)
            .abs()
            .max((st.y_mm - self.pose_mm.1).abs())
            .max((st.z_mm - self.pose_mm.2).abs());
        if err > 1e-6 {
            return Err(ScanError::Protocol(format!(
                "device settled at ({}, {}, {}), commanded {:?}",
                st.x_mm, st.y_mm, st.z_mm, self.pose_mm
            )));
        }
        Ok(st)
    }

    /// Relative ring move, clamped so the accumulated position stays within
    /// the configured travel.
    pub fn ring_move(&mut self, steps: i64) -> Result<RingMove, ScanError> {
        let limit = self.cfg.ring_travel_steps;
        let target = (self.ring_pos + steps).clamp(-limit, limit);
        let applied = target - self.ring_pos;
        if applied != 0 {
            self.expect_ok(&WireCommand::Ring(applied))?;
            self.ring_pos = target;
        }
        Ok(RingMove {
            applied,
            clamped: applied != steps,
        })
    }

    pub fn set_led(&mut self, mode: LedMode) -> Result<(), ScanError> {
        self.expect_ok(&WireCommand::Led(mode))
    }

    /// Requests a frame and reads its binary payload.
    pub fn capture(&mut self) -> Result<Image, ScanError> {
        match self.exchange(&WireCommand::Capture)? {
            WireReply::ImageHeader {
                width,
                height,
                channels,
            } => {
                let mut buf = vec![0u8; width * height * channels * 2];
                self.transport.recv_exact(&mut buf)?;
                decode_payload(&buf, width, height, channels).ok_or_else(|| {
                    ScanError::Protocol("capture payload failed to decode".into())
                })
            }
            other => Err(ScanError::Protocol(format!(
                "expected image header, got {other:?}"
            ))),
        }
    }
}
