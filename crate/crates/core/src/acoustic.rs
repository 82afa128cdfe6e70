//! Acoustic model stand-ins: a whole-sequence encoder and an incremental
//! decoder whose cross-chunk state is carried explicitly.
//!
//! The decoder keeps eight tensors between chunks: the last mel frame, the
//! attention context, the last and accumulated attention weights, and the
//! hidden/cell pairs of the attention and decoder recurrent cells. Per-step
//! arithmetic lives in row kernels that both the single-item and the batched
//! paths call, so a batch scattered back into items is bit-identical to
//! running the items one by one.

use thiserror::Error;

use crate::domain::{seeded_vector, BatchItemError, MelChunk, PipelineConfig};
use crate::frontend::FrontendOutput;

/// Embedding table ids for the four summed embeddings.
pub const TOKEN_TABLE: u16 = 0;
pub const PW_TABLE: u16 = 1;
pub const PPH_TABLE: u16 = 2;
pub const IPH_TABLE: u16 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AcousticError {
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("decode past stop ({emitted} of {target} frames already emitted)")]
    DecodePastStop { emitted: usize, target: usize },
    #[error("frontend output is empty or inconsistent")]
    InvalidFrontendOutput,
}

/// Encoder output, `seq_len x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeatures {
    rows: Vec<f64>,
    dim: usize,
}

impl EncodedFeatures {
    pub fn seq_len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rows
    }
}

/// `E_all`: token, pw, pph and iph embeddings summed per phoneme.
fn embed_into(fo: &FrontendOutput, dim: usize, out: &mut [f64]) {
    for (t, row) in out.chunks_exact_mut(dim).enumerate().take(fo.len()) {
        let token = seeded_vector(TOKEN_TABLE, fo.phonemes[t], dim);
        let pw = seeded_vector(PW_TABLE, fo.pw[t], dim);
        let pph = seeded_vector(PPH_TABLE, fo.pph[t], dim);
        let iph = seeded_vector(IPH_TABLE, fo.iph[t], dim);
        let parts = token
            .values()
            .iter()
            .zip(pw.values())
            .zip(pph.values())
            .zip(iph.values());
        for (r, (((a, b), c), e)) in row.iter_mut().zip(parts) {
            *r = a + b + c + e;
        }
    }
}

/// Whole-sequence mixing: each output row averages the row itself with the
/// mean of the prefix ending at it and the mean of the suffix starting at
/// it, so every row sees the entire sequence in both directions.
fn context_mix(input: &[f64], len: usize, dim: usize, out: &mut [f64]) {
    let mut prefix = vec![0.0; len * dim];
    let mut running = vec![0.0; dim];
    for t in 0..len {
        for d in 0..dim {
            running[d] += input[t * dim + d];
            prefix[t * dim + d] = running[d] / (t + 1) as f64;
        }
    }
    running.iter_mut().for_each(|v| *v = 0.0);
    for t in (0..len).rev() {
        for d in 0..dim {
            running[d] += input[t * dim + d];
            let suffix = running[d] / (len - t) as f64;
            out[t * dim + d] = (input[t * dim + d] + prefix[t * dim + d] + suffix) / 3.0;
        }
    }
}

fn check_frontend(fo: &FrontendOutput) -> Result<(), AcousticError> {
    if fo.is_empty() || !fo.is_consistent() {
        return Err(AcousticError::InvalidFrontendOutput);
    }
    Ok(())
}

pub fn encode(fo: &FrontendOutput, cfg: &PipelineConfig) -> Result<EncodedFeatures, AcousticError> {
    check_frontend(fo)?;
    let dim = cfg.feature_dim;
    let mut e_all = vec![0.0; fo.len() * dim];
    embed_into(fo, dim, &mut e_all);
    let mut rows = vec![0.0; e_all.len()];
    context_mix(&e_all, fo.len(), dim, &mut rows);
    Ok(EncodedFeatures { rows, dim })
}

/// Encodes several requests as one zero-padded `B x max_len x dim` batch and
/// splits the result back per request.
pub fn encode_batch(
    items: &[&FrontendOutput],
    cfg: &PipelineConfig,
) -> Result<Vec<EncodedFeatures>, BatchItemError<AcousticError>> {
    for (index, fo) in items.iter().enumerate() {
        check_frontend(fo).map_err(|error| BatchItemError { index, error })?;
    }
    let dim = cfg.feature_dim;
    let max_len = items.iter().map(|fo| fo.len()).max().unwrap_or(0);
    let stride = max_len * dim;
    let mut input = vec![0.0; items.len() * stride];
    let mut output = vec![0.0; items.len() * stride];
    for (b, fo) in items.iter().enumerate() {
        embed_into(fo, dim, &mut input[b * stride..(b + 1) * stride]);
    }
    for (b, fo) in items.iter().enumerate() {
        let span = b * stride..(b + 1) * stride;
        context_mix(&input[span.clone()], fo.len(), dim, &mut output[span]);
    }
    Ok(items
        .iter()
        .enumerate()
        .map(|(b, fo)| EncodedFeatures {
            rows: output[b * stride..b * stride + fo.len() * dim].to_vec(),
            dim,
        })
        .collect())
}

/// Decoder state carried across chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    /// Last generated mel frame.
    pub last_frame: Vec<f64>,
    /// Attention context vector.
    pub context: Vec<f64>,
    /// Attention weights of the last frame, one per encoder row.
    pub last_weights: Vec<f64>,
    /// Sum of all past attention weights.
    pub acc_weights: Vec<f64>,
    pub att_hidden: Vec<f64>,
    pub att_cell: Vec<f64>,
    pub dec_hidden: Vec<f64>,
    pub dec_cell: Vec<f64>,
    pub frames_emitted: usize,
    pub target_frames: usize,
}

impl DecoderState {
    pub fn is_finished(&self) -> bool {
        self.frames_emitted >= self.target_frames
    }

    pub fn remaining_frames(&self) -> usize {
        self.target_frames.saturating_sub(self.frames_emitted)
    }

    fn check(&self, enc: &EncodedFeatures) -> Result<(), AcousticError> {
        let dim = enc.dim();
        let n = enc.seq_len();
        let vectors: [(&'static str, &Vec<f64>, usize); 8] = [
            ("last_frame", &self.last_frame, dim),
            ("context", &self.context, dim),
            ("last_weights", &self.last_weights, n),
            ("acc_weights", &self.acc_weights, n),
            ("att_hidden", &self.att_hidden, dim),
            ("att_cell", &self.att_cell, dim),
            ("dec_hidden", &self.dec_hidden, dim),
            ("dec_cell", &self.dec_cell, dim),
        ];
        for (what, v, expected) in vectors {
            if v.len() != expected {
                return Err(AcousticError::DimensionMismatch {
                    what,
                    got: v.len(),
                    expected,
                });
            }
        }
        Ok(())
    }
}

/// All-zero state; the utterance length is `frames_per_phoneme * seq_len`.
pub fn init_decoder_state(enc: &EncodedFeatures, cfg: &PipelineConfig) -> DecoderState {
    let dim = enc.dim();
    let n = enc.seq_len();
    DecoderState {
        last_frame: vec![0.0; dim],
        context: vec![0.0; dim],
        last_weights: vec![0.0; n],
        acc_weights: vec![0.0; n],
        att_hidden: vec![0.0; dim],
        att_cell: vec![0.0; dim],
        dec_hidden: vec![0.0; dim],
        dec_cell: vec![0.0; dim],
        frames_emitted: 0,
        target_frames: cfg.frames_per_phoneme * n,
    }
}

/// Mutable views of one item's state, either from a [`DecoderState`] or
/// from one row of a [`DecoderBatch`].
struct StateRow<'a> {
    last_frame: &'a mut [f64],
    context: &'a mut [f64],
    last_weights: &'a mut [f64],
    acc_weights: &'a mut [f64],
    att_hidden: &'a mut [f64],
    att_cell: &'a mut [f64],
    dec_hidden: &'a mut [f64],
    dec_cell: &'a mut [f64],
}

/// Recurrent cell stand-in. The input is folded to the state width by
/// summing strided slices, then `C' = tanh(C/2 + fold/2 + H/4)`, `H' = tanh(C')`.
fn cell(x: &[f64], hidden: &mut [f64], cell: &mut [f64]) {
    let dim = hidden.len();
    for d in 0..dim {
        let mut fold = 0.0;
        let mut j = d;
        while j < x.len() {
            fold += x[j];
            j += dim;
        }
        let c = (0.5 * cell[d] + 0.5 * fold + 0.25 * hidden[d]).tanh();
        cell[d] = c;
        hidden[d] = c.tanh();
    }
}

/// Location-sensitive attention stand-in: dot-product scores penalised by
/// the accumulated weights, softmax, weighted sum of encoder rows.
fn attend(query: &[f64], enc: &[f64], acc: &[f64], penalty: f64, weights: &mut [f64], context: &mut [f64]) {
    let dim = query.len();
    let n = acc.len();
    let mut max = f64::NEG_INFINITY;
    for t in 0..n {
        let row = &enc[t * dim..(t + 1) * dim];
        let score = row.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() - penalty * acc[t];
        weights[t] = score;
        max = max.max(score);
    }
    let mut total = 0.0;
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        total += *w;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
    context.iter_mut().for_each(|c| *c = 0.0);
    for t in 0..n {
        let row = &enc[t * dim..(t + 1) * dim];
        for d in 0..dim {
            context[d] += weights[t] * row[d];
        }
    }
}

/// One decoder step on a state row; writes the new mel frame into
/// `row.last_frame`.
fn step_row(row: StateRow<'_>, enc: &[f64], penalty: f64, scratch: &mut Vec<f64>) {
    let dim = row.last_frame.len();
    scratch.clear();
    scratch.extend(row.last_frame.iter().map(|v| v.tanh()));
    scratch.extend_from_slice(row.context);
    cell(scratch, row.att_hidden, row.att_cell);

    attend(
        row.att_hidden,
        enc,
        row.acc_weights,
        penalty,
        row.last_weights,
        row.context,
    );

    scratch.clear();
    scratch.extend_from_slice(row.att_hidden);
    scratch.extend_from_slice(row.context);
    cell(scratch, row.dec_hidden, row.dec_cell);

    for (acc, w) in row.acc_weights.iter_mut().zip(row.last_weights.iter()) {
        *acc += w;
    }
    for d in 0..dim {
        row.last_frame[d] = (row.dec_hidden[d] + row.context[d]).tanh();
    }
}

/// Frame-counter stop token: 1 on the frame that reaches the target length.
fn stop_value(frames_emitted: usize, target_frames: usize) -> f64 {
    if frames_emitted + 1 >= target_frames {
        1.0
    } else {
        0.0
    }
}

impl DecoderState {
    fn row(&mut self) -> StateRow<'_> {
        StateRow {
            last_frame: &mut self.last_frame,
            context: &mut self.context,
            last_weights: &mut self.last_weights,
            acc_weights: &mut self.acc_weights,
            att_hidden: &mut self.att_hidden,
            att_cell: &mut self.att_cell,
            dec_hidden: &mut self.dec_hidden,
            dec_cell: &mut self.dec_cell,
        }
    }
}

/// A single decoder step. Returns the new mel frame, the stop value and the
/// updated state.
pub fn decoder_step(
    state: &DecoderState,
    enc: &EncodedFeatures,
    cfg: &PipelineConfig,
) -> Result<(Vec<f64>, f64, DecoderState), AcousticError> {
    state.check(enc)?;
    let mut next = state.clone();
    let mut scratch = Vec::with_capacity(2 * enc.dim());
    step_row(next.row(), enc.as_slice(), cfg.attention_penalty, &mut scratch);
    let stop = stop_value(next.frames_emitted, next.target_frames);
    next.frames_emitted += 1;
    Ok((next.last_frame.clone(), stop, next))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeChunkResult {
    pub mel: MelChunk,
    pub stop: bool,
    pub state: DecoderState,
}

/// Up to `chunk_frames` decoder steps, ending early on the stop token.
pub fn decode_chunk(
    state: &DecoderState,
    enc: &EncodedFeatures,
    cfg: &PipelineConfig,
) -> Result<DecodeChunkResult, AcousticError> {
    state.check(enc)?;
    if state.is_finished() {
        return Err(AcousticError::DecodePastStop {
            emitted: state.frames_emitted,
            target: state.target_frames,
        });
    }
    let mut next = state.clone();
    let mut frames = Vec::with_capacity(cfg.chunk_frames * enc.dim());
    let mut scratch = Vec::with_capacity(2 * enc.dim());
    for _ in 0..cfg.chunk_frames {
        step_row(next.row(), enc.as_slice(), cfg.attention_penalty, &mut scratch);
        frames.extend_from_slice(&next.last_frame);
        let stop = stop_value(next.frames_emitted, next.target_frames);
        next.frames_emitted += 1;
        if stop > cfg.stop_threshold {
            break;
        }
    }
    let mel = MelChunk::new(frames, enc.dim()).expect("at least one finite frame");
    Ok(DecodeChunkResult {
        mel,
        stop: next.is_finished(),
        state: next,
    })
}

/// Structure-of-arrays decoder batch. Per-dimension states are `B x dim`,
/// attention weights and encoder rows are zero-padded to the longest
/// sequence in the batch.
#[derive(Debug, Clone)]
pub struct DecoderBatch {
    dim: usize,
    max_len: usize,
    lens: Vec<usize>,
    enc: Vec<f64>,
    last_frame: Vec<f64>,
    context: Vec<f64>,
    last_weights: Vec<f64>,
    acc_weights: Vec<f64>,
    att_hidden: Vec<f64>,
    att_cell: Vec<f64>,
    dec_hidden: Vec<f64>,
    dec_cell: Vec<f64>,
    frames_emitted: Vec<usize>,
    target_frames: Vec<usize>,
    scratch: Vec<f64>,
}

impl DecoderBatch {
    /// Stacks per-item states and encoder outputs into batch tensors.
    pub fn gather(states: &[&DecoderState], encs: &[&EncodedFeatures]) -> Result<Self, BatchItemError<AcousticError>> {
        assert_eq!(states.len(), encs.len(), "one encoder output per state");
        let dim = encs.first().map_or(0, |e| e.dim());
        for (index, (s, e)) in states.iter().zip(encs).enumerate() {
            if e.dim() != dim {
                return Err(BatchItemError {
                    index,
                    error: AcousticError::DimensionMismatch {
                        what: "encoder width",
                        got: e.dim(),
                        expected: dim,
                    },
                });
            }
            s.check(e).map_err(|error| BatchItemError { index, error })?;
        }
        let b = states.len();
        let max_len = encs.iter().map(|e| e.seq_len()).max().unwrap_or(0);
        let mut batch = Self {
            dim,
            max_len,
            lens: encs.iter().map(|e| e.seq_len()).collect(),
            enc: vec![0.0; b * max_len * dim],
            last_frame: Vec::with_capacity(b * dim),
            context: Vec::with_capacity(b * dim),
            last_weights: vec![0.0; b * max_len],
            acc_weights: vec![0.0; b * max_len],
            att_hidden: Vec::with_capacity(b * dim),
            att_cell: Vec::with_capacity(b * dim),
            dec_hidden: Vec::with_capacity(b * dim),
            dec_cell: Vec::with_capacity(b * dim),
            frames_emitted: states.iter().map(|s| s.frames_emitted).collect(),
            target_frames: states.iter().map(|s| s.target_frames).collect(),
            scratch: Vec::with_capacity(2 * dim),
        };
        for (i, (s, e)) in states.iter().zip(encs).enumerate() {
            let n = e.seq_len();
            let enc_base = i * max_len * dim;
            batch.enc[enc_base..enc_base + n * dim].copy_from_slice(e.as_slice());
            batch.last_weights[i * max_len..i * max_len + n].copy_from_slice(&s.last_weights);
            batch.acc_weights[i * max_len..i * max_len + n].copy_from_slice(&s.acc_weights);
            batch.last_frame.extend_from_slice(&s.last_frame);
            batch.context.extend_from_slice(&s.context);
            batch.att_hidden.extend_from_slice(&s.att_hidden);
            batch.att_cell.extend_from_slice(&s.att_cell);
            batch.dec_hidden.extend_from_slice(&s.dec_hidden);
            batch.dec_cell.extend_from_slice(&s.dec_cell);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    pub fn is_finished(&self, i: usize) -> bool {
        self.frames_emitted[i] >= self.target_frames[i]
    }

    pub fn remaining_frames(&self, i: usize) -> usize {
        self.target_frames[i].saturating_sub(self.frames_emitted[i])
    }

    pub fn last_frame(&self, i: usize) -> &[f64] {
        &self.last_frame[i * self.dim..(i + 1) * self.dim]
    }

    /// Advances every item whose `active` flag is set by one decoder step and
    /// returns each advanced item's stop value.
    pub fn step(&mut self, active: &[bool], penalty: f64) -> Vec<Option<f64>> {
        let (dim, max_len) = (self.dim, self.max_len);
        let mut stops = vec![None; self.len()];
        for i in 0..self.len() {
            if !active[i] {
                continue;
            }
            let n = self.lens[i];
            let v = i * dim..(i + 1) * dim;
            let w = i * max_len..i * max_len + n;
            let row = StateRow {
                last_frame: &mut self.last_frame[v.clone()],
                context: &mut self.context[v.clone()],
                last_weights: &mut self.last_weights[w.clone()],
                acc_weights: &mut self.acc_weights[w],
                att_hidden: &mut self.att_hidden[v.clone()],
                att_cell: &mut self.att_cell[v.clone()],
                dec_hidden: &mut self.dec_hidden[v.clone()],
                dec_cell: &mut self.dec_cell[v],
            };
            let enc = &self.enc[i * max_len * dim..(i * max_len + n) * dim];
            step_row(row, enc, penalty, &mut self.scratch);
            stops[i] = Some(stop_value(self.frames_emitted[i], self.target_frames[i]));
            self.frames_emitted[i] += 1;
        }
        stops
    }

    /// Splits the batch back into per-item states, dropping padding.
    pub fn scatter(&self) -> Vec<DecoderState> {
        let (dim, max_len) = (self.dim, self.max_len);
        (0..self.len())
            .map(|i| {
                let n = self.lens[i];
                let v = i * dim..(i + 1) * dim;
                let w = i * max_len..i * max_len + n;
                DecoderState {
                    last_frame: self.last_frame[v.clone()].to_vec(),
                    context: self.context[v.clone()].to_vec(),
                    last_weights: self.last_weights[w.clone()].to_vec(),
                    acc_weights: self.acc_weights[w].to_vec(),
                    att_hidden: self.att_hidden[v.clone()].to_vec(),
                    att_cell: self.att_cell[v.clone()].to_vec(),
                    dec_hidden: self.dec_hidden[v.clone()].to_vec(),
                    dec_cell: self.dec_cell[v].to_vec(),
                    frames_emitted: self.frames_emitted[i],
                    target_frames: self.target_frames[i],
                }
            })
            .collect()
    }
}

/// Result of one batched chunk decode.
#[derive(Debug, Clone)]
pub struct BatchDecodeOutput {
    pub results: Vec<DecodeChunkResult>,
    /// Decoder steps the batch executed, i.e. the longest item's frame count.
    pub steps: usize,
}

/// Decodes one chunk for every item as a single batch. Items that hit the
/// stop token drop out of later steps.
pub fn decode_chunk_batch(
    states: &[&DecoderState],
    encs: &[&EncodedFeatures],
    cfg: &PipelineConfig,
) -> Result<BatchDecodeOutput, BatchItemError<AcousticError>> {
    for (index, s) in states.iter().enumerate() {
        if s.is_finished() {
            return Err(BatchItemError {
                index,
                error: AcousticError::DecodePastStop {
                    emitted: s.frames_emitted,
                    target: s.target_frames,
                },
            });
        }
    }
    let mut batch = DecoderBatch::gather(states, encs)?;
    let mut active = vec![true; batch.len()];
    let mut frames: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.chunk_frames * batch.dim); batch.len()];
    let mut steps = 0;
    while steps < cfg.chunk_frames && active.iter().any(|&a| a) {
        let stops = batch.step(&active, cfg.attention_penalty);
        for (i, stop) in stops.into_iter().enumerate() {
            if let Some(stop) = stop {
                frames[i].extend_from_slice(batch.last_frame(i));
                if stop > cfg.stop_threshold {
                    active[i] = false;
                }
            }
        }
        steps += 1;
    }
    let dim = batch.dim;
    let results = batch
        .scatter()
        .into_iter()
        .zip(frames)
        .map(|(state, frames)| DecodeChunkResult {
            mel: MelChunk::new(frames, dim).expect("at least one finite frame"),
            stop: state.is_finished(),
            state,
        })
        .collect();
    Ok(BatchDecodeOutput { results, steps })
}
