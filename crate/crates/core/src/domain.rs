//! Core value types shared by every stage of the pipeline.
//!
//! Everything here is an immutable value once constructed. The seeded
//! vectors stand in for learned embedding tables: they are a pure function
//! of `(table, token, dim)` computed with integer hashing, so they are
//! identical on every platform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while validating or loading a [`PipelineConfig`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("overlap must be < chunk (overlap_frames = {overlap}, chunk_frames = {chunk})")]
    OverlapNotBelowChunk { overlap: usize, chunk: usize },
    #[error("overlap_frames must be at least 1")]
    ZeroOverlap,
    #[error("{0} must be at least 1")]
    ZeroDimension(&'static str),
    #[error("stop_threshold must lie strictly inside (0, 1), got {0}")]
    StopThresholdOutOfRange(f64),
    #[error("attention_penalty must be a finite non-negative number, got {0}")]
    NegativeAttentionPenalty(f64),
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for {key}")]
    InvalidValue { line: usize, key: String, value: String },
    #[error("cannot read config file: {0}")]
    Io(String),
}

/// Chunking, audio and stand-in model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Mel frames produced per decoder chunk.
    pub chunk_frames: usize,
    /// Mel frames shared between adjacent chunks for the vocoder splice.
    pub overlap_frames: usize,
    /// Audio samples per mel frame.
    pub hop_samples: usize,
    pub sample_rate: u32,
    /// Width of every stand-in state vector.
    pub feature_dim: usize,
    /// Mel frames allotted to each phoneme token; fixes the utterance length.
    pub frames_per_phoneme: usize,
    pub stop_threshold: f64,
    /// Weight of the accumulated-attention penalty in the attention score.
    pub attention_penalty: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            chunk_frames: 32,
            overlap_frames: 4,
            hop_samples: 256,
            sample_rate: 22_050,
            feature_dim: 8,
            frames_per_phoneme: 8,
            stop_threshold: 0.5,
            attention_penalty: 0.1,
        }
    }
}

impl PipelineConfig {
    /// Default configuration with a different overlap.
    pub fn with_overlap(overlap_frames: usize) -> Self {
        Self {
            overlap_frames,
            ..Self::default()
        }
    }

    /// Returns the config unchanged if every invariant holds.
    pub fn validate(self) -> Result<Self, ConfigError> {
        if self.chunk_frames == 0 {
            return Err(ConfigError::ZeroDimension("chunk_frames"));
        }
        if self.overlap_frames == 0 {
            return Err(ConfigError::ZeroOverlap);
        }
        if self.overlap_frames >= self.chunk_frames {
            return Err(ConfigError::OverlapNotBelowChunk {
                overlap: self.overlap_frames,
                chunk: self.chunk_frames,
            });
        }
        if self.hop_samples == 0 {
            return Err(ConfigError::ZeroDimension("hop_samples"));
        }
        if self.sample_rate == 0 {
            return Err(ConfigError::ZeroDimension("sample_rate"));
        }
        if self.feature_dim == 0 {
            return Err(ConfigError::ZeroDimension("feature_dim"));
        }
        if self.frames_per_phoneme == 0 {
            return Err(ConfigError::ZeroDimension("frames_per_phoneme"));
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold < 1.0) {
            return Err(ConfigError::StopThresholdOutOfRange(self.stop_threshold));
        }
        if !(self.attention_penalty.is_finite() && self.attention_penalty >= 0.0) {
            return Err(ConfigError::NegativeAttentionPenalty(self.attention_penalty));
        }
        Ok(self)
    }

    /// Samples in one full chunk of audio.
    pub fn chunk_samples(&self) -> usize {
        self.chunk_frames * self.hop_samples
    }

    /// Cross-fade length `L` in samples.
    pub fn overlap_samples(&self) -> usize {
        self.overlap_frames * self.hop_samples
    }

    pub fn chunk_seconds(&self) -> f64 {
        self.chunk_samples() as f64 / f64::from(self.sample_rate)
    }

    /// Applies one `key = value` pair. Returns `Ok(false)` if the key is not a
    /// pipeline key, so callers can route it elsewhere.
    pub fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<bool, ConfigError> {
        let bad = || ConfigError::InvalidValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
        };
        match key {
            "chunk_frames" => self.chunk_frames = value.parse().map_err(|_| bad())?,
            "overlap_frames" => self.overlap_frames = value.parse().map_err(|_| bad())?,
            "hop_samples" => self.hop_samples = value.parse().map_err(|_| bad())?,
            "sample_rate" => self.sample_rate = value.parse().map_err(|_| bad())?,
            "feature_dim" => self.feature_dim = value.parse().map_err(|_| bad())?,
            "frames_per_phoneme" => self.frames_per_phoneme = value.parse().map_err(|_| bad())?,
            "stop_threshold" => self.stop_threshold = value.parse().map_err(|_| bad())?,
            "attention_penalty" => self.attention_penalty = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped,
/// trailing comments are stripped. Returns `(line_number, key, value)`.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            text: raw.to_string(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                text: raw.to_string(),
            });
        }
        out.push((line, key.to_string(), value.to_string()));
    }
    Ok(out)
}

/// Deterministic pseudo-embedding with components in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeededVector(Vec<f64>);

impl SeededVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One splitmix64 output for state `key`: add the golden gamma, then apply
/// the finalizer.
pub fn splitmix64(key: u64) -> u64 {
    let mut z = key.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Component `d` hashes the key `(table << 48) ^ (token << 16) ^ d`; the top
/// 53 bits of the hash map uniformly onto `[-1, 1)`.
pub fn seeded_vector(table: u16, token: u32, dim: usize) -> SeededVector {
    let base = (u64::from(table) << 48) ^ (u64::from(token) << 16);
    let values = (0..dim as u64)
        .map(|d| {
            let z = splitmix64(base ^ d);
            let unit = (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            2.0 * unit - 1.0
        })
        .collect();
    SeededVector(values)
}

/// A block of mel frames, stored row-major as `frame_count x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelChunk {
    data: Vec<f64>,
    dim: usize,
}

impl MelChunk {
    /// Returns `None` if `data` is empty, not a whole number of frames, or
    /// contains a non-finite value.
    pub fn new(data: Vec<f64>, dim: usize) -> Option<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return None;
        }
        if data.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(Self { data, dim })
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Option<Self> {
        let dim = frames.first()?.len();
        if frames.iter().any(|f| f.len() != dim) {
            return None;
        }
        Self::new(frames.concat(), dim)
    }

    pub fn frame_count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The last `count` frames (all of them if the chunk is shorter).
    pub fn tail(&self, count: usize) -> MelChunk {
        let start = self.frame_count().saturating_sub(count);
        MelChunk {
            data: self.data[start * self.dim..].to_vec(),
            dim: self.dim,
        }
    }

    /// `self` followed by `next`.
    pub fn concat(&self, next: &MelChunk) -> Option<MelChunk> {
        if self.dim != next.dim {
            return None;
        }
        let mut data = Vec::with_capacity(self.data.len() + next.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&next.data);
        Some(MelChunk { data, dim: self.dim })
    }
}

/// Failure of one item inside a batched module call; `index` is the item's
/// position in the batch.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("batch item {index}: {error}")]
pub struct BatchItemError<E: std::error::Error> {
    pub index: usize,
    pub error: E,
}

/// Emitted audio with its absolute position in the utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioChunk {
    pub samples: Vec<f64>,
    pub sample_offset: u64,
}

impl AudioChunk {
    pub fn end_offset(&self) -> u64 {
        self.sample_offset + self.samples.len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Frozen from an independent Python evaluation of the same hash.
    const TABLE0_TOKEN5: [f64; 8] = [
        0.0272225027236066,
        -0.18905539451073516,
        -0.31948785175609595,
        -0.3779839344121301,
        0.5545872560651643,
        -0.6872548731447441,
        0.39826022682411866,
        -0.7002840126782057,
    ];
    const TABLE1_TOKEN5: [f64; 8] = [
        0.37882757619047003,
        0.12154033944835785,
        0.2005555419093099,
        0.014529086545186809,
        -0.8279292733613748,
        -0.28987796077688466,
        -0.011220826373981474,
        -0.6597856064236445,
    ];

    #[test]
    fn seeded_vector_matches_frozen_fixture() {
        assert_eq!(seeded_vector(0, 5, 8).values(), &TABLE0_TOKEN5);
        assert_eq!(seeded_vector(1, 5, 8).values(), &TABLE1_TOKEN5);
    }

    #[test]
    fn seeded_vector_is_deterministic_and_table_sensitive() {
        assert_eq!(seeded_vector(0, 5, 8), seeded_vector(0, 5, 8));
        assert_ne!(seeded_vector(0, 5, 8), seeded_vector(1, 5, 8));
    }

    #[test]
    fn default_chunk_is_about_372_ms() {
        let cfg = PipelineConfig::default().validate().unwrap();
        assert_eq!(cfg.chunk_samples(), 8192);
        let secs = cfg.chunk_seconds();
        assert!((secs - 0.3715).abs() < 1e-4, "{secs}");
        assert!((secs - 0.372).abs() < 1e-3);
    }

    #[test]
    fn validate_rejects_each_violation_distinctly() {
        let base = PipelineConfig::default();
        let err = PipelineConfig {
            overlap_frames: 32,
            ..base.clone()
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("overlap must be < chunk"));
        assert_eq!(
            PipelineConfig {
                stop_threshold: 0.0,
                ..base.clone()
            }
            .validate(),
            Err(ConfigError::StopThresholdOutOfRange(0.0))
        );
        assert_eq!(
            PipelineConfig {
                stop_threshold: 1.0,
                ..base.clone()
            }
            .validate(),
            Err(ConfigError::StopThresholdOutOfRange(1.0))
        );
        assert_eq!(
            PipelineConfig {
                feature_dim: 0,
                ..base.clone()
            }
            .validate(),
            Err(ConfigError::ZeroDimension("feature_dim"))
        );
        assert_eq!(
            PipelineConfig {
                frames_per_phoneme: 0,
                ..base.clone()
            }
            .validate(),
            Err(ConfigError::ZeroDimension("frames_per_phoneme"))
        );
        assert_eq!(
            PipelineConfig {
                overlap_frames: 0,
                ..base
            }
            .validate(),
            Err(ConfigError::ZeroOverlap)
        );
    }

    #[test]
    fn key_value_parsing() {
        let text = "# header\nchunk_frames = 16  # inline\n\noverlap_frames=8\n";
        let kv = parse_key_values(text).unwrap();
        assert_eq!(
            kv,
            vec![
                (2, "chunk_frames".to_string(), "16".to_string()),
                (4, "overlap_frames".to_string(), "8".to_string()),
            ]
        );
        assert!(matches!(
            parse_key_values("nonsense"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn mel_chunk_tail_and_concat() {
        let a = MelChunk::from_frames(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
        assert_eq!(a.tail(2).as_slice(), &[2.0, 2.0, 3.0, 3.0]);
        assert_eq!(a.tail(10).frame_count(), 3);
        let b = MelChunk::from_frames(&[vec![4.0, 4.0]]).unwrap();
        assert_eq!(a.concat(&b).unwrap().frame_count(), 4);
        assert!(MelChunk::new(vec![], 2).is_none());
        assert!(MelChunk::new(vec![f64::NAN, 0.0], 2).is_none());
    }

    proptest::proptest! {
        #[test]
        fn seeded_components_in_range(table in 0u16..8, token in proptest::prelude::any::<u32>(), dim in 1usize..64) {
            let v = seeded_vector(table, token, dim);
            proptest::prop_assert_eq!(v.values().len(), dim);
            proptest::prop_assert!(v.values().iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }
}
