//! The model bundle, the per-request output stream, and single-request
//! reference synthesis paths that the batched engines are checked against.

use std::fmt;
use std::sync::Arc;

use crossbeam_channel::Receiver;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustic::{decode_chunk, decoder_step, encode, init_decoder_state, AcousticError};
use crate::domain::{AudioChunk, ConfigError, MelChunk, PipelineConfig};
use crate::frontend::{run_frontend, FrontendError, Lexicon};
use crate::vocoder::{generate, Vocoder, VocoderError, VocoderState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The four stand-in modules and their shared configuration.
#[derive(Debug, Clone)]
pub struct Models {
    pub cfg: PipelineConfig,
    pub lexicon: Arc<Lexicon>,
    pub vocoder: Vocoder,
}

impl Models {
    pub fn new(cfg: PipelineConfig, lexicon: Arc<Lexicon>) -> Result<Self, ConfigError> {
        let cfg = cfg.validate()?;
        let vocoder = Vocoder::new(&cfg).expect("validated overlap is non-zero");
        Ok(Self { cfg, lexicon, vocoder })
    }

    /// Models over the bundled lexicon.
    pub fn builtin(cfg: PipelineConfig) -> Result<Self, ConfigError> {
        Self::new(cfg, Arc::new(Lexicon::builtin()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthesisError {
    #[error("frontend: {0}")]
    Frontend(#[from] FrontendError),
    #[error("acoustic model: {0}")]
    Acoustic(#[from] AcousticError),
    #[error("vocoder: {0}")]
    Vocoder(#[from] VocoderError),
}

/// What a client receives for one request.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamEvent {
    Chunk {
        chunk: AudioChunk,
        is_last: bool,
    },
    Failed(String),
    /// The engine shut down before the request finished.
    Cancelled,
}

pub type ChunkStream = Receiver<StreamEvent>;

#[derive(Debug)]
pub struct Submission {
    pub id: RequestId,
    pub stream: ChunkStream,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubmitError {
    #[error("empty text")]
    EmptyText,
    #[error("pipeline is shut down")]
    ShutDown,
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PipelineKind {
    #[serde(rename = "incr")]
    Incremental,
    #[serde(rename = "non-incr")]
    NonIncremental,
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PipelineKind::Incremental => "incr",
            PipelineKind::NonIncremental => "non-incr",
        })
    }
}

/// Anything that accepts text and streams audio back.
pub trait Pipeline: Send + Sync {
    fn submit(&self, text: &str) -> Result<Submission, SubmitError>;
    fn kind(&self) -> PipelineKind;
    fn sample_rate(&self) -> u32;
}

/// Incremental synthesis of one text with no batching: frontend and encoder
/// once, then one decoder chunk and one vocoder chunk per loop until the
/// stop token.
pub fn synthesize_incremental(text: &str, models: &Models) -> Result<Vec<AudioChunk>, SynthesisError> {
    let cfg = &models.cfg;
    let fo = run_frontend(text, &models.lexicon)?;
    let enc = encode(&fo, cfg)?;
    let mut dec = init_decoder_state(&enc, cfg);
    let mut voc = VocoderState::new();
    let mut chunks = Vec::new();
    loop {
        let out = decode_chunk(&dec, &enc, cfg)?;
        let (audio, next_voc) = models.vocoder.vocode_chunk(&voc, &out.mel, out.stop)?;
        chunks.push(audio);
        dec = out.state;
        voc = next_voc;
        if out.stop {
            return Ok(chunks);
        }
    }
}

/// Whole-utterance synthesis: decode every frame, then vocode the full mel
/// in one call with no splicing.
pub fn synthesize_whole(text: &str, models: &Models) -> Result<Vec<f64>, SynthesisError> {
    let cfg = &models.cfg;
    let fo = run_frontend(text, &models.lexicon)?;
    let enc = encode(&fo, cfg)?;
    let mut dec = init_decoder_state(&enc, cfg);
    let mut frames = Vec::with_capacity(dec.target_frames * cfg.feature_dim);
    while !dec.is_finished() {
        let (frame, _, next) = decoder_step(&dec, &enc, cfg)?;
        frames.extend(frame);
        dec = next;
    }
    let mel = MelChunk::new(frames, cfg.feature_dim).expect("non-empty utterance");
    Ok(generate(&mel, cfg))
}

/// Frame count of the utterance the pipeline will produce for `text`.
pub fn utterance_frames(text: &str, models: &Models) -> Result<usize, FrontendError> {
    Ok(run_frontend(text, &models.lexicon)?.len() * models.cfg.frames_per_phoneme)
}
