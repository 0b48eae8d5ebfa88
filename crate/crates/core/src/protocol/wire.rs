//! Wire messages and length-prefixed framing.
//!
//! Each frame is a 32-bit big-endian body length followed by a JSON body.
//! The same bytes travel over TCP and over the in-process channel links.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Role;
use crate::station::{AnglePolicy, MeasurementRecord};

pub const PROTOCOL_VERSION: u8 = 1;

/// Upper bound on a frame body; a full 4096-record chunk is well below 1 MiB.
pub const MAX_FRAME_LEN: u32 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Hello { role: Role, protocol_version: u8 },
    /// Common seed and trial count plus the receiving station's own policy.
    Assign { seed: u64, n: u64, policy: AnglePolicy },
    RecordsChunk { records: Vec<MeasurementRecord>, last: bool },
    Ack,
    Abort { reason: String },
}

impl WireMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::Hello { .. } => "hello",
            WireMessage::Assign { .. } => "assign",
            WireMessage::RecordsChunk { .. } => "records_chunk",
            WireMessage::Ack => "ack",
            WireMessage::Abort { .. } => "abort",
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("timeout")]
    Timeout,
    #[error("peer disconnected")]
    Disconnected,
    #[error("bad frame: {0}")]
    Frame(String),
    #[error("protocol version mismatch: peer speaks {got}, expected {expected}")]
    VersionMismatch { got: u8, expected: u8 },
    #[error("aborted by peer: {0}")]
    Aborted(String),
    #[error("expected {expected}, received {got}")]
    Unexpected { expected: &'static str, got: &'static str },
    #[error("station failed: {0}")]
    Station(String),
}

pub fn encode_frame(msg: &WireMessage) -> Result<Vec<u8>, ProtocolError> {
    let body = serde_json::to_vec(msg).map_err(|e| ProtocolError::Frame(e.to_string()))?;
    let len = u32::try_from(body.len())
        .ok()
        .filter(|l| *l <= MAX_FRAME_LEN)
        .ok_or_else(|| ProtocolError::Frame(format!("body of {} bytes is too large", body.len())))?;
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&len.to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Decodes one complete frame (prefix included).
pub fn decode_frame(frame: &[u8]) -> Result<WireMessage, ProtocolError> {
    let (prefix, body) = frame
        .split_first_chunk::<4>()
        .ok_or_else(|| ProtocolError::Frame("frame shorter than its length prefix".into()))?;
    if u32::from_be_bytes(*prefix) as usize != body.len() {
        return Err(ProtocolError::Frame("length prefix does not match body".into()));
    }
    decode_body(body)
}

fn decode_body(body: &[u8]) -> Result<WireMessage, ProtocolError> {
    serde_json::from_slice(body).map_err(|e| ProtocolError::Frame(e.to_string()))
}

pub fn write_frame<W: Write>(out: &mut W, msg: &WireMessage) -> Result<(), ProtocolError> {
    out.write_all(&encode_frame(msg)?)?;
    out.flush()?;
    Ok(())
}

/// Reads one frame and returns its raw bytes, prefix included.
pub fn read_frame_bytes<R: Read>(input: &mut R) -> Result<Vec<u8>, ProtocolError> {
    let mut prefix = [0u8; 4];
    input.read_exact(&mut prefix).map_err(map_read_error)?;
    let len = u32::from_be_bytes(prefix);
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::Frame(format!("announced body of {len} bytes is too large")));
    }
    let mut frame = vec![0u8; 4 + len as usize];
    frame[..4].copy_from_slice(&prefix);
    input.read_exact(&mut frame[4..]).map_err(map_read_error)?;
    Ok(frame)
}

pub fn read_frame<R: Read>(input: &mut R) -> Result<WireMessage, ProtocolError> {
    decode_frame(&read_frame_bytes(input)?)
}

fn map_read_error(e: io::Error) -> ProtocolError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ProtocolError::Timeout,
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::BrokenPipe => ProtocolError::Disconnected,
        _ => ProtocolError::Io(e),
    }
}

/// A bidirectional message channel between the coordinator and one station.
pub trait Link: Send {
    fn send(&mut self, msg: &WireMessage) -> Result<(), ProtocolError>;

    /// Waits for the next message, giving up at `deadline` if one is set.
    fn recv(&mut self, deadline: Option<Instant>) -> Result<WireMessage, ProtocolError>;
}

fn remaining(deadline: Option<Instant>) -> Result<Option<Duration>, ProtocolError> {
    match deadline {
        None => Ok(None),
        Some(d) => {
            let left = d.saturating_duration_since(Instant::now());
            if left.is_zero() {
                Err(ProtocolError::Timeout)
            } else {
                Ok(Some(left))
            }
        }
    }
}

pub struct TcpLink {
    stream: TcpStream,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> Result<Self, ProtocolError> {
        stream.set_nodelay(true)?;
        stream.set_nonblocking(false)?;
        Ok(Self { stream })
    }

    /// Connects to `addr`, retrying until `timeout` elapses so a station may
    /// start before its coordinator.
    pub fn connect<A: ToSocketAddrs>(addr: A, timeout: Duration) -> Result<Self, ProtocolError> {
        let deadline = Instant::now() + timeout;
        let addrs: Vec<_> = addr.to_socket_addrs()?.collect();
        loop {
            for a in &addrs {
                let left = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
                if let Ok(stream) = TcpStream::connect_timeout(a, left) {
                    return Self::new(stream);
                }
            }
            if Instant::now() >= deadline {
                return Err(ProtocolError::Timeout);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    pub fn stream(&self) -> &TcpStream {
        &self.stream
    }
}

impl Link for TcpLink {
    fn send(&mut self, msg: &WireMessage) -> Result<(), ProtocolError> {
        write_frame(&mut self.stream, msg)
    }

    fn recv(&mut self, deadline: Option<Instant>) -> Result<WireMessage, ProtocolError> {
        self.stream.set_read_timeout(remaining(deadline)?)?;
        read_frame(&mut self.stream)
    }
}

/// In-process link carrying encoded frames over channels.
pub struct ChannelLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    received: Option<Vec<u8>>,
}

/// Two connected endpoints.
pub fn channel_pair() -> (ChannelLink, ChannelLink) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    (
        ChannelLink { tx: tx_a, rx: rx_a, received: None },
        ChannelLink { tx: tx_b, rx: rx_b, received: None },
    )
}

impl ChannelLink {
    /// Starts keeping a copy of every frame this endpoint receives.
    pub fn record_received(&mut self) {
        self.received.get_or_insert_with(Vec::new);
    }

    /// Bytes received since [`ChannelLink::record_received`].
    pub fn received_bytes(&self) -> &[u8] {
        self.received.as_deref().unwrap_or(&[])
    }
}

impl Link for ChannelLink {
    fn send(&mut self, msg: &WireMessage) -> Result<(), ProtocolError> {
        self.tx
            .send(encode_frame(msg)?)
            .map_err(|_| ProtocolError::Disconnected)
    }

    fn recv(&mut self, deadline: Option<Instant>) -> Result<WireMessage, ProtocolError> {
        let frame = match remaining(deadline)? {
            None => self.rx.recv().map_err(|_| ProtocolError::Disconnected)?,
            Some(left) => self.rx.recv_timeout(left).map_err(|e| match e {
                RecvTimeoutError::Timeout => ProtocolError::Timeout,
                RecvTimeoutError::Disconnected => ProtocolError::Disconnected,
            })?,
        };
        if let Some(log) = self.received.as_mut() {
            log.extend_from_slice(&frame);
        }
        decode_frame(&frame)
    }
}
