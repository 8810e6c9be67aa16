//! Edge-to-fog transport: a framed byte-stream session over any reliable
//! connection, an in-process loopback, and a bandwidth/latency link model.
//!
//! Wire protocol: each message is a little-endian u32 length prefix followed
//! by one serialized frame; the end-of-stream marker is a zero-length
//! message. Frames carry strictly increasing sequence numbers starting at 0;
//! any gap, duplicate or reorder is rejected.

use crate::bitstream::{dequantize, frame_parse, frame_serialize, quantize, WireHeader};
use crate::config::ModelConfig;
use crate::decoder::{decode_frame, DecoderParams};
use crate::encoder::{encode_frame, EncoderParams, Frame};
use crate::error::{CodecError, Result};
use crate::evalkit::{reassemble_frames, segment_frames, Recording};
use crate::transform::Dct;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;

/// Refuse to allocate messages beyond this size; a frame of a 64 x 64 block
/// is a few kilobytes.
const MAX_MESSAGE_LEN: u32 = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub enum SessionMode {
    /// Both ends in one process, through an in-memory buffer.
    Loopback,
    /// Edge side: connect to a listening fog gateway.
    TcpClient { endpoint: String },
    /// Fog side: accept one edge connection.
    TcpServer { endpoint: String },
    /// No transport; account for bytes and model the link analytically.
    Simulated { bandwidth: f64, latency: f64 },
}

/// Session settings shared by both gateways.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub mode: SessionMode,
    /// Quantizer exponent; defaults to the checkpoint's recorded value.
    pub tau: i8,
    /// Quantizer divisor; defaults to the checkpoint's recorded value.
    pub omega: f64,
    /// Checkpoint backing this session, when loaded from disk.
    pub checkpoint: Option<PathBuf>,
}

/// Byte accounting for one streaming session.
///
/// `bytes` is the exact sum of serialized frame lengths (header plus
/// payload); the four-byte transport prefixes and the end-of-stream marker
/// are framing overhead and not counted.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkReport {
    pub frames: usize,
    pub bytes: u64,
    pub frame_sizes: Vec<u32>,
    /// Modeled transfer time; present for simulated links.
    pub simulated_seconds: Option<f64>,
    /// bytes / simulated_seconds, when meaningful.
    pub effective_throughput: Option<f64>,
}

impl LinkReport {
    fn from_sizes(frame_sizes: Vec<u32>) -> Self {
        let bytes = frame_sizes.iter().map(|s| *s as u64).sum();
        LinkReport {
            frames: frame_sizes.len(),
            bytes,
            frame_sizes,
            simulated_seconds: None,
            effective_throughput: None,
        }
    }
}

/// Pure link model: per-frame time is latency + size / bandwidth.
pub fn simulate_link(frame_sizes: &[u32], bandwidth: f64, latency: f64) -> Result<LinkReport> {
    if bandwidth <= 0.0 || !bandwidth.is_finite() {
        return Err(CodecError::Configuration(
            "link bandwidth must be positive".into(),
        ));
    }
    if latency < 0.0 || !latency.is_finite() {
        return Err(CodecError::Configuration(
            "link latency must be non-negative".into(),
        ));
    }
    let mut report = LinkReport::from_sizes(frame_sizes.to_vec());
    let seconds: f64 = frame_sizes
        .iter()
        .map(|s| latency + *s as f64 / bandwidth)
        .sum();
    report.simulated_seconds = Some(seconds);
    report.effective_throughput = if seconds > 0.0 {
        Some(report.bytes as f64 / seconds)
    } else {
        None
    };
    Ok(report)
}

/// Segment, encode, quantize, serialize and write every frame of a recording
/// to a byte sink, then the end-of-stream marker. Returns the byte
/// accounting.
pub fn stream_frames<W: Write>(
    rec: &Recording,
    enc: &EncoderParams,
    model: &ModelConfig,
    tau: i8,
    omega: f64,
    sink: &mut W,
) -> Result<LinkReport> {
    enc.validate(model)?;
    if rec.channel_count() != model.channels {
        return Err(CodecError::Configuration(format!(
            "recording has {} channels, model expects {}",
            rec.channel_count(),
            model.channels
        )));
    }
    let dct = Dct::new(model.block_len)?;
    let frames = segment_frames(rec, model.block_len)?;
    let mut sizes = Vec::with_capacity(frames.len());
    for (seq, frame) in frames.iter().enumerate() {
        let latent = encode_frame(frame, enc, &dct)?;
        let q = quantize(&latent, tau, omega)?;
        let bytes = frame_serialize(&q, model.subbands as u8, seq as u32)?;
        write_message(sink, &bytes, seq)?;
        sizes.push(bytes.len() as u32);
    }
    sink.write_all(&0u32.to_le_bytes())
        .map_err(|e| stream_error(e, sizes.len()))?;
    sink.flush().map_err(|e| stream_error(e, sizes.len()))?;
    Ok(LinkReport::from_sizes(sizes))
}

fn write_message<W: Write>(sink: &mut W, bytes: &[u8], seq: usize) -> Result<()> {
    sink.write_all(&(bytes.len() as u32).to_le_bytes())
        .map_err(|e| stream_error(e, seq))?;
    sink.write_all(bytes).map_err(|e| stream_error(e, seq))?;
    Ok(())
}

fn stream_error(e: std::io::Error, frames_done: usize) -> CodecError {
    CodecError::Protocol(format!(
        "connection failed after {frames_done} acknowledged frames: {e}"
    ))
}

/// Read length-prefixed frames until the end-of-stream marker, enforcing
/// sequence integrity, and decode them back into signal frames.
pub fn receive_frames<R: Read>(
    source: &mut R,
    dec: &DecoderParams,
    model: &ModelConfig,
) -> Result<(Vec<Frame>, Vec<WireHeader>, LinkReport)> {
    dec.validate(model)?;
    let dct = Dct::new(model.block_len)?;
    let mut frames = Vec::new();
    let mut headers: Vec<WireHeader> = Vec::new();
    let mut sizes = Vec::new();
    let mut expected: u32 = 0;
    loop {
        let mut len_buf = [0u8; 4];
        source
            .read_exact(&mut len_buf)
            .map_err(|e| CodecError::Protocol(format!("stream ended without marker: {e}")))?;
        let len = u32::from_le_bytes(len_buf);
        if len == 0 {
            break;
        }
        if len > MAX_MESSAGE_LEN {
            return Err(CodecError::Protocol(format!(
                "message of {len} bytes exceeds the transport limit"
            )));
        }
        let mut bytes = vec![0u8; len as usize];
        source
            .read_exact(&mut bytes)
            .map_err(|e| CodecError::Protocol(format!("frame {expected} truncated: {e}")))?;
        let (q, header) = frame_parse(&bytes)?;

        if header.sequence != expected {
            if header.sequence < expected {
                return Err(CodecError::Protocol(format!(
                    "duplicate sequence {} (expected {expected})",
                    header.sequence
                )));
            }
            return Err(CodecError::Protocol(format!(
                "missing sequence: expected {expected}, got {}",
                header.sequence
            )));
        }
        if header.channels as usize != model.channels
            || header.block_len as usize != model.block_len
        {
            return Err(CodecError::Configuration(format!(
                "frame {} is {}x{}, session expects {}x{}",
                header.sequence, header.channels, header.block_len, model.channels, model.block_len
            )));
        }
        if let Some(first) = headers.first() {
            if header.tau != first.tau || header.omega != first.omega {
                return Err(CodecError::Protocol(format!(
                    "frame {} changed coding parameters mid-stream",
                    header.sequence
                )));
            }
        }

        let latent = dequantize(&q);
        frames.push(decode_frame(&latent, dec, &dct)?);
        headers.push(header);
        sizes.push(len);
        expected += 1;
    }
    Ok((frames, headers, LinkReport::from_sizes(sizes)))
}

/// Reassemble received frames into a recording with generated channel names.
pub fn assemble_reconstruction(frames: &[Frame], sample_rate: f64) -> Result<Recording> {
    reassemble_frames(frames, None, sample_rate)
}

/// Run the edge side of a session. Supported modes: TCP client and
/// simulated.
pub fn edge_stream(
    rec: &Recording,
    enc: &EncoderParams,
    model: &ModelConfig,
    session: &SessionConfig,
) -> Result<LinkReport> {
    match &session.mode {
        SessionMode::TcpClient { endpoint } => {
            let stream = connect(endpoint)?;
            let mut sink = BufWriter::new(stream);
            stream_frames(rec, enc, model, session.tau, session.omega, &mut sink)
        }
        SessionMode::Simulated { bandwidth, latency } => {
            let mut buf = Vec::new();
            let report = stream_frames(rec, enc, model, session.tau, session.omega, &mut buf)?;
            simulate_link(&report.frame_sizes, *bandwidth, *latency)
        }
        SessionMode::Loopback => Err(CodecError::Configuration(
            "loopback sessions run both ends; use loopback_session".into(),
        )),
        SessionMode::TcpServer { .. } => Err(CodecError::Configuration(
            "edge side cannot run in server mode".into(),
        )),
    }
}

/// Run the fog side of a TCP session: accept one connection and receive the
/// stream.
pub fn fog_receive(
    dec: &DecoderParams,
    model: &ModelConfig,
    session: &SessionConfig,
    sample_rate: f64,
) -> Result<(Recording, LinkReport)> {
    let endpoint = match &session.mode {
        SessionMode::TcpServer { endpoint } => endpoint,
        _ => {
            return Err(CodecError::Configuration(
                "fog side requires server mode".into(),
            ))
        }
    };
    let listener = TcpListener::bind(endpoint)
        .map_err(|e| CodecError::Protocol(format!("cannot listen on {endpoint}: {e}")))?;
    let (stream, _) = listener
        .accept()
        .map_err(|e| CodecError::Protocol(format!("accept failed: {e}")))?;
    let mut source = BufReader::new(stream);
    let (frames, _, report) = receive_frames(&mut source, dec, model)?;
    Ok((assemble_reconstruction(&frames, sample_rate)?, report))
}

/// Run a whole edge-to-fog session in process through a byte buffer.
pub fn loopback_session(
    rec: &Recording,
    enc: &EncoderParams,
    dec: &DecoderParams,
    model: &ModelConfig,
    session: &SessionConfig,
) -> Result<(Recording, LinkReport)> {
    let mut wire = Vec::new();
    let report = stream_frames(rec, enc, model, session.tau, session.omega, &mut wire)?;
    let (frames, _, _) = receive_frames(&mut &wire[..], dec, model)?;
    Ok((assemble_reconstruction(&frames, rec.sample_rate)?, report))
}

fn connect(endpoint: &str) -> Result<TcpStream> {
    let addrs: Vec<_> = endpoint
        .to_socket_addrs()
        .map_err(|e| CodecError::Protocol(format!("cannot resolve {endpoint}: {e}")))?
        .collect();
    TcpStream::connect(&addrs[..])
        .map_err(|e| CodecError::Protocol(format!("cannot connect to {endpoint}: {e}")))
}
