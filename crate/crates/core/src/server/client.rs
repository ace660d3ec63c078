//! Blocking client for the streaming protocol.

use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use base64::Engine as _;

use super::metrics::MetricsSnapshot;
use super::protocol::{AdapterAck, ControlMessage, DoneStats, ErrorReply, LoadAdapter, SynthesizeRequest};
use super::wire::{self, read_frame, write_frame, Frame, FrameType, WireError};
use crate::error::{Error, Result};
use crate::toycodec;

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    max_frame: usize,
}

/// What a synthesis stream delivered, as seen by the client.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub pcm: Vec<i16>,
    /// Codec indices from `0x03` frames, when requested.
    pub tokens: Vec<u32>,
    pub audio_frames: usize,
    pub done: DoneStats,
    /// From the end of the request write to the first audio frame.
    pub first_packet: Option<Duration>,
    pub total: Duration,
}

/// A server-reported failure.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteError(pub ErrorReply);

impl std::fmt::Display for RemoteError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "server error [{}]: {}", self.0.code, self.0.message)
    }
}

impl std::error::Error for RemoteError {}

#[derive(Debug)]
pub enum ClientError {
    Remote(RemoteError),
    Local(Error),
}

impl std::fmt::Display for ClientError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientError::Remote(e) => e.fmt(f),
            ClientError::Local(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for ClientError {}

impl From<Error> for ClientError {
    fn from(e: Error) -> Self {
        ClientError::Local(e)
    }
}

impl From<WireError> for ClientError {
    fn from(e: WireError) -> Self {
        ClientError::Local(Error::Protocol(e))
    }
}

impl ClientError {
    /// Stable code of the failure, remote or local.
    pub fn code(&self) -> &str {
        match self {
            ClientError::Remote(r) => &r.0.code,
            ClientError::Local(e) => e.code(),
        }
    }
}

type ClientResult<T> = std::result::Result<T, ClientError>;

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            max_frame: wire::DEFAULT_MAX_FRAME,
        })
    }

    pub fn send(&mut self, msg: &ControlMessage) -> Result<()> {
        write_frame(&mut self.writer, &Frame::json(FrameType::Control, msg))?;
        Ok(())
    }

    pub fn send_raw(&mut self, frame: &Frame) -> Result<()> {
        write_frame(&mut self.writer, frame)?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Frame> {
        read_frame(&mut self.reader, self.max_frame)?
            .ok_or_else(|| Error::Protocol(WireError::Malformed("connection closed".into())))
    }

    fn control_reply<T: serde::de::DeserializeOwned>(&mut self) -> ClientResult<T> {
        let frame = self.recv()?;
        match frame.kind {
            FrameType::Control => Ok(serde_json::from_slice(&frame.payload).map_err(Error::from)?),
            FrameType::Error => Err(remote(&frame)?),
            other => Err(Error::Protocol(WireError::Malformed(format!("unexpected {other:?} frame"))).into()),
        }
    }

    pub fn synthesize(&mut self, req: &SynthesizeRequest) -> ClientResult<SynthesisResult> {
        self.send(&ControlMessage::Synthesize(req.clone()))?;
        let sent = Instant::now();
        let mut pcm = Vec::new();
        let mut tokens = Vec::new();
        let mut audio_frames = 0;
        let mut first_packet = None;
        loop {
            let frame = self.recv()?;
            match frame.kind {
                FrameType::Audio => {
                    first_packet.get_or_insert_with(|| sent.elapsed());
                    pcm.extend(toycodec::pcm_from_le_bytes(&frame.payload)?);
                    audio_frames += 1;
                }
                FrameType::Tokens => {
                    if frame.payload.len() % 4 != 0 {
                        return Err(Error::Protocol(WireError::Malformed("token frame not a multiple of 4".into())).into());
                    }
                    tokens.extend(
                        frame
                            .payload
                            .chunks_exact(4)
                            .map(|c| u32::from_le_bytes(c.try_into().unwrap())),
                    );
                }
                FrameType::Done => {
                    let done: DoneStats = serde_json::from_slice(&frame.payload).map_err(Error::from)?;
                    return Ok(SynthesisResult {
                        pcm,
                        tokens,
                        audio_frames,
                        done,
                        first_packet,
                        total: sent.elapsed(),
                    });
                }
                FrameType::Error => return Err(remote(&frame)?),
                FrameType::Control => {
                    return Err(Error::Protocol(WireError::Malformed("control frame mid-stream".into())).into())
                }
            }
        }
    }

    pub fn load_adapter_bytes(&mut self, bytes: &[u8]) -> ClientResult<AdapterAck> {
        self.send(&ControlMessage::LoadAdapter(LoadAdapter {
            path: None,
            blob_base64: Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
        }))?;
        self.control_reply()
    }

    pub fn load_adapter_path(&mut self, path: &str) -> ClientResult<AdapterAck> {
        self.send(&ControlMessage::LoadAdapter(LoadAdapter {
            path: Some(path.to_string()),
            blob_base64: None,
        }))?;
        self.control_reply()
    }

    pub fn unload_adapter(&mut self, name: &str) -> ClientResult<serde_json::Value> {
        self.send(&ControlMessage::UnloadAdapter { name: name.to_string() })?;
        self.control_reply()
    }

    pub fn list_adapters(&mut self) -> ClientResult<serde_json::Value> {
        self.send(&ControlMessage::ListAdapters)?;
        self.control_reply()
    }

    pub fn metrics(&mut self) -> ClientResult<MetricsSnapshot> {
        self.send(&ControlMessage::Metrics)?;
        self.control_reply()
    }
}

fn remote(frame: &Frame) -> Result<ClientError> {
    let reply: ErrorReply = serde_json::from_slice(&frame.payload)?;
    Ok(ClientError::Remote(RemoteError(reply)))
}
