//! Mel-to-waveform stand-in with overlap splicing and equal-power
//! cross-fade between consecutive chunks.
//!
//! Each chunk is generated from the previous chunk's last `overlap_frames`
//! mel frames followed by the current chunk. The first `L` generated samples
//! (`L = overlap_frames * hop_samples`) are fused with the previous chunk's
//! withheld tail as `fade_in * head + fade_out * tail`. Every chunk withholds
//! its own final `L` samples for the successor to fuse, except the last
//! chunk, which emits everything. The emitted stream is therefore gap-free
//! and never repeats a sample.

use std::path::Path;

use thiserror::Error;

use crate::domain::{AudioChunk, BatchItemError, MelChunk, PipelineConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocoderError {
    #[error("cross-fade length must be at least 1 sample")]
    ZeroLength,
    #[error("mel chunk has width {got}, expected {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("non-final chunk has {frames} frames, fewer than the {overlap}-frame overlap")]
    ChunkTooShort { frames: usize, overlap: usize },
    #[error("vocoder state already finished")]
    AlreadyFinished,
}

/// Equal-power fade curves of length `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossfadeCurve {
    /// Applied to the head of the current segment.
    pub fade_in: Vec<f64>,
    /// Applied to the withheld tail of the previous segment.
    pub fade_out: Vec<f64>,
}

impl CrossfadeCurve {
    pub fn len(&self) -> usize {
        self.fade_in.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fade_in.is_empty()
    }
}

/// `fade_in[k] = sin(θ_k)`, `fade_out[k] = cos(θ_k)` with
/// `θ_k = π/2 · (k + 0.5) / L`.
pub fn crossfade_curve(len: usize) -> Result<CrossfadeCurve, VocoderError> {
    if len == 0 {
        return Err(VocoderError::ZeroLength);
    }
    let (fade_in, fade_out) = (0..len)
        .map(|k| {
            let theta = std::f64::consts::FRAC_PI_2 * (k as f64 + 0.5) / len as f64;
            (theta.sin(), theta.cos())
        })
        .unzip();
    Ok(CrossfadeCurve { fade_in, fade_out })
}

/// Memoryless upsampling: each frame becomes `hop` copies of its mean.
fn generate_into(frames: &[f64], dim: usize, hop: usize, out: &mut Vec<f64>) {
    for frame in frames.chunks_exact(dim) {
        let mean = frame.iter().sum::<f64>() / dim as f64;
        out.extend(std::iter::repeat_n(mean, hop));
    }
}

pub fn generate(mel: &MelChunk, cfg: &PipelineConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(mel.frame_count() * cfg.hop_samples);
    generate_into(mel.as_slice(), mel.dim(), cfg.hop_samples, &mut out);
    out
}

/// Carry-over between chunks of one request.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VocoderState {
    /// Last `overlap_frames` mel frames of the previous chunk.
    pub prev_mel_tail: Option<MelChunk>,
    /// Last `L` generated samples of the previous segment, not yet emitted.
    pub held_tail: Option<Vec<f64>>,
    /// Absolute index of the next sample to emit.
    pub next_offset: u64,
    pub finished: bool,
}

impl VocoderState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Pre-computed fade curve plus configuration.
#[derive(Debug, Clone)]
pub struct Vocoder {
    cfg: PipelineConfig,
    curve: CrossfadeCurve,
}

impl Vocoder {
    pub fn new(cfg: &PipelineConfig) -> Result<Self, VocoderError> {
        Ok(Self {
            curve: crossfade_curve(cfg.overlap_samples())?,
            cfg: cfg.clone(),
        })
    }

    pub fn curve(&self) -> &CrossfadeCurve {
        &self.curve
    }

    fn check(&self, state: &VocoderState, mel: &MelChunk, is_last: bool) -> Result<(), VocoderError> {
        if state.finished {
            return Err(VocoderError::AlreadyFinished);
        }
        if mel.dim() != self.cfg.feature_dim {
            return Err(VocoderError::WidthMismatch {
                got: mel.dim(),
                expected: self.cfg.feature_dim,
            });
        }
        if !is_last && mel.frame_count() < self.cfg.overlap_frames {
            return Err(VocoderError::ChunkTooShort {
                frames: mel.frame_count(),
                overlap: self.cfg.overlap_frames,
            });
        }
        Ok(())
    }

    /// The mel frames actually passed through the generator for this chunk.
    fn spliced(&self, state: &VocoderState, mel: &MelChunk) -> MelChunk {
        match &state.prev_mel_tail {
            Some(tail) => tail.concat(mel).expect("widths checked"),
            None => mel.clone(),
        }
    }

    /// Fuses, emits and rolls the state over, given the generated segment.
    fn finish_row(
        &self,
        state: &VocoderState,
        mel: &MelChunk,
        mut segment: Vec<f64>,
        is_last: bool,
    ) -> (AudioChunk, VocoderState) {
        let l = self.curve.len();
        if let Some(held) = &state.held_tail {
            for k in 0..l {
                segment[k] = self.curve.fade_in[k] * segment[k] + self.curve.fade_out[k] * held[k];
            }
        }
        let held_tail = if is_last {
            None
        } else {
            Some(segment.split_off(segment.len() - l))
        };
        let emitted = AudioChunk {
            sample_offset: state.next_offset,
            samples: segment,
        };
        let next = VocoderState {
            prev_mel_tail: Some(mel.tail(self.cfg.overlap_frames)),
            held_tail,
            next_offset: emitted.end_offset(),
            finished: is_last,
        };
        (emitted, next)
    }

    pub fn vocode_chunk(
        &self,
        state: &VocoderState,
        mel: &MelChunk,
        is_last: bool,
    ) -> Result<(AudioChunk, VocoderState), VocoderError> {
        self.check(state, mel, is_last)?;
        let segment = generate(&self.spliced(state, mel), &self.cfg);
        Ok(self.finish_row(state, mel, segment, is_last))
    }

    /// Vocodes several requests as one batch: spliced mels are stacked into
    /// a zero-padded `B x max_frames x dim` tensor, generated row by row, and
    /// split back before cross-fading.
    pub fn vocode_batch(
        &self,
        states: &[&VocoderState],
        mels: &[&MelChunk],
        is_last: &[bool],
    ) -> Result<BatchVocodeOutput, BatchItemError<VocoderError>> {
        assert!(states.len() == mels.len() && mels.len() == is_last.len());
        for (index, ((s, m), &last)) in states.iter().zip(mels).zip(is_last).enumerate() {
            self.check(s, m, last)
                .map_err(|error| BatchItemError { index, error })?;
        }
        let dim = self.cfg.feature_dim;
        let hop = self.cfg.hop_samples;
        let spliced: Vec<MelChunk> = states.iter().zip(mels).map(|(s, m)| self.spliced(s, m)).collect();
        let max_frames = spliced.iter().map(MelChunk::frame_count).max().unwrap_or(0);
        let mut input = vec![0.0; spliced.len() * max_frames * dim];
        for (b, m) in spliced.iter().enumerate() {
            let base = b * max_frames * dim;
            input[base..base + m.as_slice().len()].copy_from_slice(m.as_slice());
        }
        let mut output = Vec::with_capacity(spliced.len() * max_frames * hop);
        for b in 0..spliced.len() {
            generate_into(
                &input[b * max_frames * dim..(b + 1) * max_frames * dim],
                dim,
                hop,
                &mut output,
            );
        }
        let outputs = spliced
            .iter()
            .enumerate()
            .map(|(b, m)| {
                let base = b * max_frames * hop;
                let segment = output[base..base + m.frame_count() * hop].to_vec();
                self.finish_row(states[b], mels[b], segment, is_last[b])
            })
            .collect();
        Ok(BatchVocodeOutput {
            outputs,
            frames: max_frames,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchVocodeOutput {
    pub outputs: Vec<(AudioChunk, VocoderState)>,
    /// Padded frame count of the batch.
    pub frames: usize,
}

/// Convenience wrapper that builds the fade curve on every call.
pub fn vocode_chunk(
    state: &VocoderState,
    mel: &MelChunk,
    is_last: bool,
    cfg: &PipelineConfig,
) -> Result<(AudioChunk, VocoderState), VocoderError> {
    Vocoder::new(cfg)?.vocode_chunk(state, mel, is_last)
}

/// Clamps to `[-1, 1]` and scales to 16-bit PCM.
pub fn to_pcm16(sample: f64) -> i16 {
    (sample.clamp(-1.0, 1.0) * f64::from(i16::MAX)).round() as i16
}

pub fn from_pcm16(sample: i16) -> f64 {
    f64::from(sample) / f64::from(i16::MAX)
}

/// Writes mono 16-bit PCM.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), hound::Error> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        writer.write_sample(to_pcm16(s))?;
    }
    writer.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn constant_mel(frames: usize, value: f64, dim: usize) -> MelChunk {
        MelChunk::new(vec![value; frames * dim], dim).unwrap()
    }

    #[test]
    fn curve_examples() {
        let c = crossfade_curve(2).unwrap();
        assert_eq!(c.fade_in, vec![(PI / 8.0).sin(), (3.0 * PI / 8.0).sin()]);
        assert_eq!(c.fade_out, vec![(PI / 8.0).cos(), (3.0 * PI / 8.0).cos()]);
        assert_eq!(crossfade_curve(0), Err(VocoderError::ZeroLength));
        let c = crossfade_curve(1024).unwrap();
        for k in 0..1024 {
            assert!((c.fade_in[k].powi(2) + c.fade_out[k].powi(2) - 1.0).abs() < 1e-9);
        }
        assert!(c.fade_in.windows(2).all(|w| w[0] <= w[1]));
        assert!(c.fade_out.windows(2).all(|w| w[0] >= w[1]));
        assert!(c.fade_in[0] < 0.01 && c.fade_in[1023] > 0.99);
        // θ = π/4 midway between the two middle samples.
        let mid = (c.fade_in[511] + c.fade_in[512]) / 2.0;
        assert!((mid - 2f64.sqrt() / 2.0).abs() < 1e-3);
    }

    #[test]
    fn generate_expands_frame_means() {
        let cfg = PipelineConfig {
            hop_samples: 4,
            ..PipelineConfig::default()
        };
        assert_eq!(generate(&constant_mel(1, 0.5, 8), &cfg), vec![0.5; 4]);
        assert_eq!(generate(&constant_mel(3, 0.0, 8), &cfg), vec![0.0; 12]);

        let cfg = PipelineConfig::default();
        let mel = MelChunk::from_frames(&[
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            vec![-1.0, 1.0, -0.5, 0.5, 0.0, 0.25, -0.25, 0.0],
        ])
        .unwrap();
        let out = generate(&mel, &cfg);
        assert_eq!(out.len(), 512);
        let first = (0.1 + 0.2 + 0.3 + 0.4 + 0.5 + 0.6 + 0.7 + 0.8) / 8.0;
        assert!(out[..256].iter().all(|&s| (s - first).abs() < 1e-15));
        assert!(out[256..].iter().all(|&s| s.abs() < 1e-15));
    }

    #[test]
    fn single_chunk_emits_everything() {
        let cfg = PipelineConfig::default();
        let (audio, state) = vocode_chunk(&VocoderState::new(), &constant_mel(32, 0.3, 8), true, &cfg).unwrap();
        assert_eq!(audio.samples.len(), 8192);
        assert_eq!(audio.sample_offset, 0);
        assert!(state.finished);
        assert!(matches!(
            vocode_chunk(&state, &constant_mel(32, 0.3, 8), true, &cfg),
            Err(VocoderError::AlreadyFinished)
        ));
    }

    #[test]
    fn constant_signal_fuses_to_weighted_sum() {
        let cfg = PipelineConfig::default();
        let voc = Vocoder::new(&cfg).unwrap();
        let c = 0.375;
        let (a, s) = voc
            .vocode_chunk(&VocoderState::new(), &constant_mel(32, c, 8), false)
            .unwrap();
        assert_eq!(a.samples.len(), 28 * 256);
        let (b, _) = voc.vocode_chunk(&s, &constant_mel(8, c, 8), true).unwrap();
        assert_eq!(b.sample_offset, 28 * 256);
        assert_eq!(a.samples.len() + b.samples.len(), 40 * 256);
        for k in 0..cfg.overlap_samples() {
            let want = voc.curve().fade_in[k] * c + voc.curve().fade_out[k] * c;
            assert_eq!(b.samples[k], want);
        }
    }

    #[test]
    fn short_final_chunk_conserves_samples() {
        let cfg = PipelineConfig::default();
        let voc = Vocoder::new(&cfg).unwrap();
        let (a, s) = voc
            .vocode_chunk(&VocoderState::new(), &constant_mel(32, 0.1, 8), false)
            .unwrap();
        let (b, s) = voc.vocode_chunk(&s, &constant_mel(2, 0.2, 8), true).unwrap();
        assert_eq!(a.samples.len() + b.samples.len(), 34 * 256);
        assert_eq!(s.next_offset, 34 * 256);
    }

    #[test]
    fn short_non_final_chunk_is_rejected() {
        let cfg = PipelineConfig::default();
        assert_eq!(
            vocode_chunk(&VocoderState::new(), &constant_mel(3, 0.1, 8), false, &cfg),
            Err(VocoderError::ChunkTooShort { frames: 3, overlap: 4 })
        );
    }

    #[test]
    fn pcm_round_trip_within_half_step() {
        for &x in &[0.0, 0.5, -0.5, 0.999, -1.0, 0.123456] {
            assert!((from_pcm16(to_pcm16(x)) - x).abs() <= 0.5 / 32767.0 + 1e-12);
        }
        assert_eq!(to_pcm16(3.0), i16::MAX);
        assert_eq!(to_pcm16(-3.0), -i16::MAX);
    }

    #[test]
    fn wav_file_has_expected_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.wav");
        write_wav(&path, &vec![0.25; 1000], 22_050).unwrap();
        let reader = hound::WavReader::open(&path).unwrap();
        assert_eq!(reader.len(), 1000);
        assert_eq!(reader.spec().sample_rate, 22_050);
    }
}
