//! TCP streaming service in front of a [`Pipeline`].
//!
//! Every frame is a 4-byte big-endian payload length followed by a JSON
//! object whose `type` field names the message. Audio travels as base64 of
//! 16-bit little-endian PCM. A connection may carry many requests at once;
//! each is identified by a client-chosen `request_tag`, and for each tag the
//! server sends `chunk` messages with consecutive `chunk_index` values and
//! then exactly one `done` or `error`.

use std::collections::{HashMap, HashSet};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use crossbeam_channel::{unbounded, Sender};
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::AudioChunk;
use crate::pipeline::{Pipeline, PipelineKind, StreamEvent, Submission, SubmitError};
use crate::vocoder::{from_pcm16, to_pcm16};

/// Largest accepted payload.
pub const MAX_FRAME_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Submit {
        text: String,
        request_tag: String,
    },
    Chunk {
        request_tag: String,
        chunk_index: u64,
        sample_offset: u64,
        samples: String,
    },
    Done {
        request_tag: String,
        total_samples: u64,
    },
    Error {
        /// Absent when the error concerns the connection, not a request.
        request_tag: Option<String>,
        message: String,
    },
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_BYTES}-byte limit")]
    Oversize(usize),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("connection closed mid-frame")]
    Truncated,
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Quantizes samples to PCM16 and encodes them for the wire.
pub fn encode_samples(samples: &[f64]) -> String {
    let bytes: Vec<u8> = samples.iter().flat_map(|&s| to_pcm16(s).to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_samples(text: &str) -> Result<Vec<i16>, ProtocolError> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| ProtocolError::Malformed(format!("samples: {e}")))?;
    if bytes.len() % 2 != 0 {
        return Err(ProtocolError::Malformed("odd sample byte count".into()));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect())
}

pub fn write_frame(w: &mut impl Write, msg: &WireMessage) -> Result<(), ProtocolError> {
    let payload = serde_json::to_vec(msg).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if payload.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversize(payload.len()));
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` means the peer closed cleanly between frames.
pub fn read_frame(r: &mut impl Read) -> Result<Option<WireMessage>, ProtocolError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversize(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Truncated,
        _ => ProtocolError::Io(e),
    })?;
    serde_json::from_slice(&payload)
        .map(Some)
        .map_err(|e| ProtocolError::Malformed(e.to_string()))
}

/// Running service. Dropping it stops the listener and closes connections.
pub struct ServerHandle {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
        for c in self.connections.lock().expect("connection list").drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Binds `addr` and serves `pipeline` until the handle is shut down.
pub fn serve(addr: impl ToSocketAddrs, pipeline: Arc<dyn Pipeline>) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local_addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let connections = Arc::new(Mutex::new(Vec::new()));
    let accept = {
        let stop = stop.clone();
        let connections = connections.clone();
        thread::Builder::new()
            .name("tts-accept".into())
            .spawn(move || accept_loop(listener, pipeline, stop, connections))?
    };
    Ok(ServerHandle {
        local_addr,
        stop,
        connections,
        accept: Some(accept),
    })
}

fn accept_loop(
    listener: TcpListener,
    pipeline: Arc<dyn Pipeline>,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
) {
    while !stop.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("connection from {peer}");
                if let Err(e) = start_connection(stream, pipeline.clone(), &connections) {
                    warn!("could not start connection from {peer}: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(2));
            }
        }
    }
}

fn start_connection(
    stream: TcpStream,
    pipeline: Arc<dyn Pipeline>,
    connections: &Mutex<Vec<TcpStream>>,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    connections.lock().expect("connection list").push(stream.try_clone()?);
    let (tx, rx) = unbounded::<Option<WireMessage>>();
    let write_half = stream.try_clone()?;
    thread::Builder::new().name("tts-writer".into()).spawn(move || {
        let mut w = BufWriter::new(write_half);
        // `None` asks the writer to close the connection after what it has sent.
        for msg in rx.iter() {
            let Some(msg) = msg else { break };
            if let Err(e) = write_frame(&mut w, &msg) {
                debug!("write failed: {e}");
                break;
            }
        }
        let _ = w.get_ref().shutdown(Shutdown::Both);
    })?;
    thread::Builder::new()
        .name("tts-reader".into())
        .spawn(move || read_loop(stream, pipeline, tx))?;
    Ok(())
}

fn read_loop(stream: TcpStream, pipeline: Arc<dyn Pipeline>, out: Sender<Option<WireMessage>>) {
    let mut reader = BufReader::new(stream);
    let active: Arc<Mutex<HashSet<String>>> = Arc::default();
    loop {
        let msg = match read_frame(&mut reader) {
            Ok(Some(msg)) => msg,
            Ok(None) => break,
            Err(ProtocolError::Io(e)) => {
                debug!("read failed: {e}");
                break;
            }
            Err(e) => {
                let _ = out.send(Some(WireMessage::Error {
                    request_tag: None,
                    message: e.to_string(),
                }));
                let _ = out.send(None);
                break;
            }
        };
        let WireMessage::Submit { text, request_tag } = msg else {
            let _ = out.send(Some(WireMessage::Error {
                request_tag: None,
                message: "only submit messages are accepted".into(),
            }));
            let _ = out.send(None);
            break;
        };
        if !active.lock().expect("tag set").insert(request_tag.clone()) {
            let _ = out.send(Some(WireMessage::Error {
                request_tag: Some(request_tag),
                message: "request tag already in flight".into(),
            }));
            continue;
        }
        match pipeline.submit(&text) {
            Ok(sub) => {
                let out = out.clone();
                let active = active.clone();
                let spawned = thread::Builder::new()
                    .name("tts-forward".into())
                    .spawn(move || forward(sub, request_tag, out, active));
                if let Err(e) = spawned {
                    warn!("could not spawn forwarder: {e}");
                }
            }
            Err(e) => {
                active.lock().expect("tag set").remove(&request_tag);
                let _ = out.send(Some(WireMessage::Error {
                    request_tag: Some(request_tag),
                    message: e.to_string(),
                }));
            }
        }
    }
}

fn forward(sub: Submission, tag: String, out: Sender<Option<WireMessage>>, active: Arc<Mutex<HashSet<String>>>) {
    let mut index = 0;
    let mut total = 0u64;
    let terminal = loop {
        match sub.stream.recv() {
            Ok(StreamEvent::Chunk { chunk, is_last }) => {
                total += chunk.samples.len() as u64;
                let msg = WireMessage::Chunk {
                    request_tag: tag.clone(),
                    chunk_index: index,
                    sample_offset: chunk.sample_offset,
                    samples: encode_samples(&chunk.samples),
                };
                index += 1;
                if out.send(Some(msg)).is_err() {
                    return;
                }
                if is_last {
                    break WireMessage::Done {
                        request_tag: tag.clone(),
                        total_samples: total,
                    };
                }
            }
            Ok(StreamEvent::Failed(message)) => {
                break WireMessage::Error {
                    request_tag: Some(tag.clone()),
                    message,
                }
            }
            Ok(StreamEvent::Cancelled) | Err(_) => {
                break WireMessage::Error {
                    request_tag: Some(tag.clone()),
                    message: "request cancelled".into(),
                }
            }
        }
    };
    // Free the tag before the terminal message so a client may reuse it as
    // soon as it sees `done`.
    active.lock().expect("tag set").remove(&tag);
    let _ = out.send(Some(terminal));
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("server error: {0}")]
    Server(String),
    #[error("stream ended after {chunks} chunks without done")]
    Truncated { chunks: usize },
    #[error("unexpected message: {0}")]
    Unexpected(String),
    #[error("done reported {reported} samples but {received} arrived")]
    SampleCount { reported: u64, received: u64 },
}

impl From<io::Error> for ClientError {
    fn from(e: io::Error) -> Self {
        ClientError::Protocol(ProtocolError::Io(e))
    }
}

#[derive(Debug, Clone)]
pub struct ReceivedChunk {
    pub chunk_index: u64,
    pub sample_offset: u64,
    pub samples: Vec<i16>,
    pub received_at: Instant,
}

#[derive(Debug, Clone)]
pub struct ClientResponse {
    pub sent_at: Instant,
    pub chunks: Vec<ReceivedChunk>,
    pub total_samples: u64,
}

impl ClientResponse {
    pub fn samples(&self) -> Vec<i16> {
        self.chunks.iter().flat_map(|c| c.samples.iter().copied()).collect()
    }
}

/// Sends one text over a fresh connection and collects the whole stream.
pub fn client_request(addr: impl ToSocketAddrs, text: &str) -> Result<ClientResponse, ClientError> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let mut writer = BufWriter::new(stream.try_clone()?);
    let mut reader = BufReader::new(stream);
    let tag = "0".to_string();
    let sent_at = Instant::now();
    write_frame(
        &mut writer,
        &WireMessage::Submit {
            text: text.to_string(),
            request_tag: tag.clone(),
        },
    )?;
    let mut chunks = Vec::new();
    loop {
        let msg = match read_frame(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) | Err(ProtocolError::Truncated) => return Err(ClientError::Truncated { chunks: chunks.len() }),
            Err(ProtocolError::Io(e)) if is_disconnect(&e) => {
                return Err(ClientError::Truncated { chunks: chunks.len() })
            }
            Err(e) => return Err(e.into()),
        };
        let received_at = Instant::now();
        match msg {
            WireMessage::Chunk {
                request_tag,
                chunk_index,
                sample_offset,
                samples,
            } if request_tag == tag => {
                if chunk_index != chunks.len() as u64 {
                    return Err(ClientError::Unexpected(format!("chunk index {chunk_index}")));
                }
                chunks.push(ReceivedChunk {
                    chunk_index,
                    sample_offset,
                    samples: decode_samples(&samples)?,
                    received_at,
                });
            }
            WireMessage::Done {
                request_tag,
                total_samples,
            } if request_tag == tag => {
                let received: u64 = chunks.iter().map(|c| c.samples.len() as u64).sum();
                if received != total_samples {
                    return Err(ClientError::SampleCount {
                        reported: total_samples,
                        received,
                    });
                }
                return Ok(ClientResponse {
                    sent_at,
                    chunks,
                    total_samples,
                });
            }
            WireMessage::Error { message, .. } => return Err(ClientError::Server(message)),
            other => return Err(ClientError::Unexpected(format!("{other:?}"))),
        }
    }
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted | io::ErrorKind::BrokenPipe
    )
}

type Routes = Arc<Mutex<HashMap<String, Sender<StreamEvent>>>>;

/// A [`Pipeline`] reached over one multiplexed connection. Chunks are
/// converted back to real-valued samples (with PCM16 resolution); the
/// server's `done` arrives as a final empty chunk marked `is_last`.
pub struct RemotePipeline {
    writer: Mutex<BufWriter<TcpStream>>,
    routes: Routes,
    next_tag: AtomicU64,
    kind: PipelineKind,
    sample_rate: u32,
    reader: Option<JoinHandle<()>>,
    stream: TcpStream,
}

impl RemotePipeline {
    pub fn connect(addr: impl ToSocketAddrs, kind: PipelineKind, sample_rate: u32) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let routes: Routes = Arc::default();
        let reader = {
            let routes = routes.clone();
            let read_half = stream.try_clone()?;
            thread::Builder::new()
                .name("tts-remote-reader".into())
                .spawn(move || remote_reader(read_half, routes))?
        };
        Ok(Self {
            writer: Mutex::new(BufWriter::new(stream.try_clone()?)),
            routes,
            next_tag: AtomicU64::new(0),
            kind,
            sample_rate,
            reader: Some(reader),
            stream,
        })
    }
}

fn remote_reader(stream: TcpStream, routes: Routes) {
    let mut reader = BufReader::new(stream);
    let reason = loop {
        let msg = match read_frame(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => break "connection closed".to_string(),
            Err(e) => break e.to_string(),
        };
        let mut routes = routes.lock().expect("route table");
        match msg {
            WireMessage::Chunk {
                request_tag,
                sample_offset,
                samples,
                ..
            } => {
                let Some(tx) = routes.get(&request_tag) else { continue };
                let event = match decode_samples(&samples) {
                    Ok(pcm) => StreamEvent::Chunk {
                        chunk: AudioChunk {
                            samples: pcm.into_iter().map(from_pcm16).collect(),
                            sample_offset,
                        },
                        is_last: false,
                    },
                    Err(e) => StreamEvent::Failed(e.to_string()),
                };
                let _ = tx.send(event);
            }
            WireMessage::Done {
                request_tag,
                total_samples,
            } => {
                if let Some(tx) = routes.remove(&request_tag) {
                    let _ = tx.send(StreamEvent::Chunk {
                        chunk: AudioChunk {
                            samples: Vec::new(),
                            sample_offset: total_samples,
                        },
                        is_last: true,
                    });
                }
            }
            WireMessage::Error {
                request_tag: Some(tag),
                message,
            } => {
                if let Some(tx) = routes.remove(&tag) {
                    let _ = tx.send(StreamEvent::Failed(message));
                }
            }
            WireMessage::Error {
                request_tag: None,
                message,
            } => break message,
            WireMessage::Submit { .. } => break "server sent a submit message".to_string(),
        }
    };
    for (_, tx) in routes.lock().expect("route table").drain() {
        let _ = tx.send(StreamEvent::Failed(reason.clone()));
    }
}

impl Pipeline for RemotePipeline {
    fn submit(&self, text: &str) -> Result<Submission, SubmitError> {
        if text.is_empty() {
            return Err(SubmitError::EmptyText);
        }
        let n = self.next_tag.fetch_add(1, Ordering::Relaxed);
        let tag = n.to_string();
        let (tx, rx) = unbounded();
        self.routes.lock().expect("route table").insert(tag.clone(), tx);
        let msg = WireMessage::Submit {
            text: text.to_string(),
            request_tag: tag.clone(),
        };
        let mut w = self.writer.lock().expect("writer");
        if let Err(e) = write_frame(&mut *w, &msg) {
            self.routes.lock().expect("route table").remove(&tag);
            return Err(SubmitError::Transport(e.to_string()));
        }
        Ok(Submission {
            id: crate::pipeline::RequestId(n),
            stream: rx,
        })
    }

    fn kind(&self) -> PipelineKind {
        self.kind
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

impl Drop for RemotePipeline {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn frames_round_trip() {
        let msgs = vec![
            WireMessage::Submit {
                text: "你好".into(),
                request_tag: "a".into(),
            },
            WireMessage::Chunk {
                request_tag: "a".into(),
                chunk_index: 0,
                sample_offset: 0,
                samples: encode_samples(&[0.0, 0.5, -1.0]),
            },
            WireMessage::Done {
                request_tag: "a".into(),
                total_samples: 3,
            },
            WireMessage::Error {
                request_tag: None,
                message: "x".into(),
            },
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_frame(&mut buf, m).unwrap();
        }
        let mut r = Cursor::new(buf);
        for m in &msgs {
            assert_eq!(read_frame(&mut r).unwrap().as_ref(), Some(m));
        }
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn payload_layout_is_tagged_json() {
        let mut buf = Vec::new();
        write_frame(
            &mut buf,
            &WireMessage::Done {
                request_tag: "t".into(),
                total_samples: 7,
            },
        )
        .unwrap();
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        assert_eq!(len, buf.len() - 4);
        let v: serde_json::Value = serde_json::from_slice(&buf[4..]).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"type": "done", "request_tag": "t", "total_samples": 7})
        );
    }

    #[test]
    fn samples_are_pcm16_little_endian() {
        let text = encode_samples(&[1.0, -1.0, 0.0]);
        assert_eq!(
            STANDARD.decode(&text).unwrap(),
            vec![0xff, 0x7f, 0x01, 0x80, 0x00, 0x00]
        );
        assert_eq!(decode_samples(&text).unwrap(), vec![32767, -32767, 0]);
        assert!(decode_samples("AA==").is_err());
    }

    #[test]
    fn oversize_and_truncated_frames_are_rejected() {
        let mut r = Cursor::new(((MAX_FRAME_BYTES + 1) as u32).to_be_bytes().to_vec());
        assert!(matches!(read_frame(&mut r), Err(ProtocolError::Oversize(_))));
        let mut r = Cursor::new(vec![0, 0]);
        assert!(matches!(read_frame(&mut r), Err(ProtocolError::Truncated)));
        let mut r = Cursor::new([&5u32.to_be_bytes()[..], b"ab"].concat());
        assert!(matches!(read_frame(&mut r), Err(ProtocolError::Truncated)));
        let mut r = Cursor::new([&3u32.to_be_bytes()[..], b"{x}"].concat());
        assert!(matches!(read_frame(&mut r), Err(ProtocolError::Malformed(_))));
    }
}
