//! Line-oriented ASCII wire protocol between the acquisition host and the
//! motion/camera controller.
//!
//! Grammar (one command per LF-terminated line, one reply per command):
//!
//! ```text
//! "G0 X<f> Y<f> Z<f>\n"  -> "ok\n"        motion start; f in mm, 3 decimals;
//!                                          any nonempty subset of axes
//! "?\n"                  -> "<Idle|Run>,MPos:<x>,<y>,<z>\n"
//! "R<signed int>\n"      -> "ok\n"        ring relative move, steps
//! "L BF\n" | "L RG\n"    -> "ok\n"        LED mode
//! "C\n"                  -> "IMG <w> <h> <c>\n" + w*h*c little-endian u16
//! malformed line         -> "error:1\n"
//! capture out of bounds  -> "error:2\n"
//! ```
//!
//! Formatting is canonical: the byte sequences produced here are the
//! protocol, and golden-transcript tests compare them exactly.

use serde::{Deserialize, Serialize};

use crate::imaging::Image;

/// Error code for a malformed command line.
pub const ERR_MALFORMED: u32 = 1;
/// Error code for a capture whose field of view leaves the specimen.
pub const ERR_OUT_OF_BOUNDS: u32 = 2;

/// Illumination mode. `Brightfield` is the white-light capture mode;
/// `RgDual` drives the two oblique LEDs whose red/green copies separate
/// under defocus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LedMode {
    Brightfield,
    RgDual,
}

impl LedMode {
    pub fn token(self) -> &'static str {
        match self {
            LedMode::Brightfield => "BF",
            LedMode::RgDual => "RG",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireCommand {
    /// Start a move; omitted axes keep their position.
    Move {
        x_mm: Option<f64>,
        y_mm: Option<f64>,
        z_mm: Option<f64>,
    },
    Status,
    Ring(i64),
    Led(LedMode),
    Capture,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireReply {
    Ok,
    Error(u32),
    Status {
        run: bool,
        x_mm: f64,
        y_mm: f64,
        z_mm: f64,
    },
    /// Header line preceding the binary payload.
    ImageHeader {
        width: usize,
        height: usize,
        channels: usize,
    },
}

/// Canonical command line, without the trailing newline.
pub fn format_command(cmd: &WireCommand) -> String {
    match cmd {
        WireCommand::Move { x_mm, y_mm, z_mm } => {
            let mut s = String::from("G0");
            if let Some(x) = x_mm {
                s.push_str(&format!(" X{x:.3}"));
            }
            if let Some(y) = y_mm {
                s.push_str(&format!(" Y{y:.3}"));
            }
            if let Some(z) = z_mm {
                s.push_str(&format!(" Z{z:.3}"));
            }
            s
        }
        WireCommand::Status => "?".into(),
        WireCommand::Ring(n) => format!("R{n}"),
        WireCommand::Led(m) => format!("L {}", m.token()),
        WireCommand::Capture => "C".into(),
    }
}

/// Canonical reply line, without the trailing newline.
pub fn format_reply(reply: &WireReply) -> String {
    match reply {
        WireReply::Ok => "ok".into(),
        WireReply::Error(code) => format!("error:{code}"),
        WireReply::Status {
            run,
            x_mm,
            y_mm,
            z_mm,
        } => {
            let state = if *run { "Run" } else { "Idle" };
            format!("{state},MPos:{x_mm:.3},{y_mm:.3},{z_mm:.3}")
        }
        WireReply::ImageHeader {
            width,
            height,
            channels,
        } => format!("IMG {width} {height} {channels}"),
    }
}

fn parse_axis_f64(token: &str, axis: char) -> Option<f64> {
    let rest = token.strip_prefix(axis)?;
    let v: f64 = rest.parse().ok()?;
    v.is_finite().then_some(v)
}

/// Parses one command line (no newline). `None` means malformed.
pub fn parse_command(line: &str) -> Option<WireCommand> {
    let line = line.trim_end_matches('\r');
    if line == "?" {
        return Some(WireCommand::Status);
    }
    if line == "C" {
        return Some(WireCommand::Capture);
    }
    if let Some(rest) = line.strip_prefix("R") {
        // Reject "R" alone and non-integer arguments.
        let n: i64 = rest.parse().ok()?;
        return Some(WireCommand::Ring(n));
    }
    if let Some(rest) = line.strip_prefix("L ") {
        return match rest {
            "BF" => Some(WireCommand::Led(LedMode::Brightfield)),
            "RG" => Some(WireCommand::Led(LedMode::RgDual)),
            _ => None,
        };
    }
    if let Some(rest) = line.strip_prefix("G0") {
        let mut x_mm = None;
        let mut y_mm = None;
        let mut z_mm = None;
        let mut any = false;
        for token in rest.split_whitespace() {
            let (slot, axis) = match token.chars().next()? {
                'X' => (&mut x_mm, 'X'),
                'Y' => (&mut y_mm, 'Y'),
                'Z' => (&mut z_mm, 'Z'),
                _ => return None,
            };
            if slot.is_some() {
                return None;
            }
            *slot = Some(parse_axis_f64(token, axis)?);
            any = true;
        }
        if !any {
            return None;
        }
        return Some(WireCommand::Move { x_mm, y_mm, z_mm });
    }
    None
}

/// Parses one reply line (no newline). `None` means the line is not a valid
/// reply, which the client treats as a device fault.
pub fn parse_reply(line: &str) -> Option<WireReply> {
    let line = line.trim_end_matches('\r');
    if line == "ok" {
        return Some(WireReply::Ok);
    }
    if let Some(rest) = line.strip_prefix("error:") {
        return rest.parse().ok().map(WireReply::Error);
    }
    if let Some(rest) = line.strip_prefix("IMG ") {
        let mut it = rest.split(' ');
        let width = it.next()?.parse().ok()?;
        let height = it.next()?.parse().ok()?;
        let channels = it.next()?.parse().ok()?;
        if it.next().is_some() {
            return None;
        }
        return Some(WireReply::ImageHeader {
            width,
            height,
            channels,
        });
    }
    let (state, rest) = line.split_once(",MPos:")?;
    let run = match state {
        "Idle" => false,
        "Run" => true,
        _ => return None,
    };
    let mut it = rest.split(',');
    let x_mm: f64 = it.next()?.parse().ok()?;
    let y_mm: f64 = it.next()?.parse().ok()?;
    let z_mm: f64 = it.next()?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some(WireReply::Status {
        run,
        x_mm,
        y_mm,
        z_mm,
    })
}

/// Serializes an image as the capture payload: row-major, pixel-interleaved
/// channels, little-endian u16 full scale.
pub fn encode_payload(img: &Image) -> Vec<u8> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut out = Vec::with_capacity(w * h * c * 2);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = (img.get(x, y, ch).clamp(0.0, 1.0) * 65535.0).round() as u16;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Inverse of [`encode_payload`].
pub fn decode_payload(
    bytes: &[u8],
    width: usize,
    height: usize,
    channels: usize,
) -> Option<Image> {
    if bytes.len() != width * height * channels * 2 || !(channels == 1 || channels == 3) {
        return None;
    }
    let mut data = vec![0.0f32; width * height * channels];
    let plane = width * height;
    for i in 0..width * height {
        for ch in 0..channels {
            let o = (i * channels + ch) * 2;
            let v = u16::from_le_bytes([bytes[o], bytes[o + 1]]);
            data[ch * plane + i] = v as f32 / 65535.0;
        }
    }
    Image::from_data(width, height, channels, data).ok()
}
