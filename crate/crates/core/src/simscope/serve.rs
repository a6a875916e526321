//! Wire-protocol endpoint for the simulated instrument.
//!
//! One [`SimScope`] behind a byte stream: commands are processed strictly in
//! arrival order and every command gets exactly one reply, so the endpoint
//! is a drop-in stand-in for the serial controller. Serving is offered over
//! an in-process pipe (the `sim` backend) and TCP (the `serve` CLI command).

use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use crate::clock::SharedClock;
use crate::scanner::wire::{self, WireReply};

use super::{Specimen, SimParams, SimScope};

/// Runs the command loop until EOF on `reader` or an I/O error on `writer`.
pub fn serve_stream<R: BufRead, W: Write>(
    scope: &mut SimScope,
    mut reader: R,
    mut writer: W,
) -> io::Result<()> {
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let trimmed = line.trim_end_matches(['\n', '\r']);
        let (reply, payload) = match wire::parse_command(trimmed) {
            Some(cmd) => scope.execute(&cmd),
            None => (WireReply::Error(wire::ERR_MALFORMED), None),
        };
        writer.write_all(wire::format_reply(&reply).as_bytes())?;
        writer.write_all(b"\n")?;
        if let Some(bytes) = payload {
            writer.write_all(&bytes)?;
        }
        writer.flush()?;
    }
}

/// Write half of an in-process byte pipe.
pub struct ByteTx {
    tx: Sender<Vec<u8>>,
}

impl Write for ByteTx {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "pipe peer closed"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Read half of an in-process byte pipe. A `None` timeout blocks forever;
/// otherwise reads fail with `TimedOut` when the peer stays silent.
pub struct ByteRx {
    rx: Receiver<Vec<u8>>,
    staged: VecDeque<u8>,
    pub timeout: Option<Duration>,
}

impl Read for ByteRx {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.staged.is_empty() {
            let chunk = match self.timeout {
                None => self
                    .rx
                    .recv()
                    .map_err(|_| io::Error::new(io::ErrorKind::UnexpectedEof, "pipe closed"))?,
                Some(t) => match self.rx.recv_timeout(t) {
                    Ok(c) => c,
                    Err(RecvTimeoutError::Timeout) => {
                        return Err(io::Error::new(io::ErrorKind::TimedOut, "pipe read timeout"))
                    }
                    Err(RecvTimeoutError::Disconnected) => {
                        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "pipe closed"))
                    }
                },
            };
            self.staged.extend(chunk);
            // EOF marker: an explicit empty chunk.
            if self.staged.is_empty() {
                return Ok(0);
            }
        }
        let n = buf.len().min(self.staged.len());
        for b in buf.iter_mut().take(n) {
            *b = self.staged.pop_front().unwrap();
        }
        Ok(n)
    }
}

/// One end of a duplex in-process connection.
pub struct DuplexPipe {
    pub reader: ByteRx,
    pub writer: ByteTx,
}

/// Connected pair of pipe ends.
pub fn duplex() -> (DuplexPipe, DuplexPipe) {
    let (atx, arx) = unbounded();
    let (btx, brx) = unbounded();
    (
        DuplexPipe {
            reader: ByteRx {
                rx: arx,
                staged: VecDeque::new(),
                timeout: None,
            },
            writer: ByteTx { tx: btx },
        },
        DuplexPipe {
            reader: ByteRx {
                rx: brx,
                staged: VecDeque::new(),
                timeout: None,
            },
            writer: ByteTx { tx: atx },
        },
    )
}

/// Spawns the simulated instrument on a background thread and returns the
/// host-side pipe end. The thread exits when the host end is dropped.
pub fn spawn_sim(
    specimen: Arc<Specimen>,
    params: SimParams,
    clock: SharedClock,
) -> DuplexPipe {
    let (host, device) = duplex();
    std::thread::Builder::new()
        .name("simscope".into())
        .spawn(move || {
            let mut scope = SimScope::new(specimen, params, clock);
            let reader = BufReader::new(device.reader);
            // Host hangup surfaces as an error; the device just goes quiet.
            let _ = serve_stream(&mut scope, reader, device.writer);
        })
        .expect("spawn simscope thread");
    host
}

/// Serves connections sequentially on `addr`; each connection talks to a
/// fresh instrument. Blocks forever (CLI `serve` runs this).
pub fn serve_tcp<A: ToSocketAddrs>(
    addr: A,
    specimen: Arc<Specimen>,
    params: SimParams,
    clock: SharedClock,
) -> io::Result<()> {
    let listener = TcpListener::bind(addr)?;
    for conn in listener.incoming() {
        let stream = conn?;
        stream.set_nodelay(true).ok();
        let mut scope = SimScope::new(specimen.clone(), params.clone(), clock.clone());
        let reader = BufReader::new(stream.try_clone()?);
        let _ = serve_stream(&mut scope, reader, stream);
    }
    Ok(())
}

/// Binds an ephemeral port, serves one connection in the background, and
/// reports the bound address. Test harness for the TCP backend.
pub fn serve_tcp_once(
    specimen: Arc<Specimen>,
    params: SimParams,
    clock: SharedClock,
) -> io::Result<std::net::SocketAddr> {
    let listener = TcpListener::bind(("127.0.0.1", 0))?;
    let addr = listener.local_addr()?;
    std::thread::Builder::new()
        .name("simscope-tcp".into())
        .spawn(move || {
            if let Ok((stream, _)) = listener.accept() {
                stream.set_nodelay(true).ok();
                let mut scope = SimScope::new(specimen, params, clock);
                if let Ok(clone) = stream.try_clone() {
                    let _ = serve_stream(&mut scope, BufReader::new(clone), stream);
                }
            }
        })
        .expect("spawn tcp sim thread");
    Ok(addr)
}
