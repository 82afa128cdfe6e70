//! Non-incremental comparison engine.
//!
//! Requests queue until the current round ends. Each round takes up to
//! `max_batch` queued requests, runs frontend and encoder once, steps the
//! decoder for the whole batch until every item has stopped (finished items
//! keep their slot and are still charged), vocodes each full mel in one call
//! and answers with a single whole-audio message per request.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::Receiver;
use log::warn;
use serde::Serialize;

use crate::acoustic::{encode_batch, init_decoder_state, DecoderBatch, DecoderState, EncodedFeatures};
use crate::cost::{charge, CostModel};
use crate::domain::{AudioChunk, MelChunk};
use crate::frontend::{run_frontend, FrontendOutput};
use crate::pipeline::{Models, PipelineKind, RequestId, StreamEvent};
use crate::scheduler::{run_isolated, Admission, Ingress, LoopOptions, Service, Stepper};
use crate::vocoder::generate;

pub const DEFAULT_MAX_BATCH: usize = 64;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RoundReport {
    pub round_index: u64,
    pub batch_ids: Vec<RequestId>,
    /// Decoder steps run, i.e. the longest target in the batch.
    pub decode_steps: usize,
    /// Batch size the decoder and vocoder were charged at.
    pub charged_batch: usize,
    pub vocoder_frames: usize,
    /// Seconds since the engine was created.
    pub start: f64,
    pub end: f64,
    pub failed_ids: Vec<RequestId>,
}

struct RoundItem {
    admission: Admission,
    frontend_out: Option<FrontendOutput>,
}

pub struct BaselineEngine {
    models: Arc<Models>,
    cost: CostModel,
    max_batch: usize,
    rx: Receiver<Admission>,
    ingress: Ingress,
    early: Vec<Admission>,
    round: u64,
    epoch: Instant,
}

impl BaselineEngine {
    pub fn new(models: Arc<Models>, cost: CostModel, max_batch: usize) -> (Self, Ingress) {
        assert!(max_batch > 0, "max_batch must be positive");
        let (ingress, rx) = Ingress::channel();
        let engine = Self {
            models,
            cost,
            max_batch,
            rx,
            ingress: ingress.clone(),
            early: Vec::new(),
            round: 0,
            epoch: Instant::now(),
        };
        (engine, ingress)
    }

    pub fn epoch(&self) -> Instant {
        self.epoch
    }

    pub fn queued(&self) -> usize {
        self.early.len() + self.rx.len()
    }

    pub fn is_idle(&self) -> bool {
        self.early.is_empty() && self.rx.is_empty()
    }

    pub fn wait_for_work(&mut self, timeout: Duration) {
        if let Ok(a) = self.rx.recv_timeout(timeout) {
            self.early.push(a);
        }
    }

    fn admit(&mut self) -> Vec<RoundItem> {
        let mut batch: Vec<Admission> = Vec::new();
        let take = self.early.len().min(self.max_batch);
        batch.extend(self.early.drain(..take));
        while batch.len() < self.max_batch {
            match self.rx.try_recv() {
                Ok(a) => batch.push(a),
                Err(_) => break,
            }
        }
        batch
            .into_iter()
            .map(|admission| RoundItem {
                admission,
                frontend_out: None,
            })
            .collect()
    }

    fn fail(item: RoundItem, message: String, report: &mut RoundReport) {
        warn!("request {} failed: {message}", item.admission.id);
        let _ = item.admission.sink.send(StreamEvent::Failed(message));
        report.failed_ids.push(item.admission.id);
    }

    /// Runs one round over whatever is queued now (up to `max_batch`).
    pub fn run_round(&mut self) -> RoundReport {
        let start = Instant::now();
        let mut report = RoundReport {
            round_index: self.round,
            start: (start - self.epoch).as_secs_f64(),
            ..RoundReport::default()
        };
        self.round += 1;
        let cfg = self.models.cfg.clone();

        let mut items = self.admit();
        report.batch_ids = items.iter().map(|it| it.admission.id).collect();
        let batch = items.len();
        if batch == 0 {
            report.end = (Instant::now() - self.epoch).as_secs_f64();
            return report;
        }

        let t = Instant::now();
        let mut ok = Vec::with_capacity(items.len());
        for mut item in items.drain(..) {
            match run_frontend(&item.admission.text, &self.models.lexicon) {
                Ok(fo) => {
                    item.frontend_out = Some(fo);
                    ok.push(item);
                }
                Err(e) => Self::fail(item, format!("frontend: {e}"), &mut report),
            }
        }
        charge(t, self.cost.frontend_cost(batch));

        let t = Instant::now();
        let ids: Vec<RequestId> = ok.iter().map(|it| it.admission.id).collect();
        let (survivors, encs, failures) = run_isolated(ids, |ids| {
            let fos: Vec<&FrontendOutput> = ids
                .iter()
                .map(|id| {
                    let it = ok.iter().find(|it| it.admission.id == *id).expect("known id");
                    it.frontend_out.as_ref().expect("frontend ran")
                })
                .collect();
            encode_batch(&fos, &cfg)
        });
        for (id, msg) in failures {
            let pos = ok.iter().position(|it| it.admission.id == id).expect("known id");
            Self::fail(ok.remove(pos), format!("encoder: {msg}"), &mut report);
        }
        charge(t, self.cost.encoder_cost(batch));
        let Some(encs) = encs else {
            report.end = (Instant::now() - self.epoch).as_secs_f64();
            return report;
        };
        debug_assert_eq!(survivors.len(), ok.len());

        // Whole-utterance decode with padding.
        let t = Instant::now();
        let states: Vec<DecoderState> = encs.iter().map(|e| init_decoder_state(e, &cfg)).collect();
        let state_refs: Vec<&DecoderState> = states.iter().collect();
        let enc_refs: Vec<&EncodedFeatures> = encs.iter().collect();
        let mut dec = DecoderBatch::gather(&state_refs, &enc_refs).expect("encoder output matches its own state");
        let mut frames: Vec<Vec<f64>> = vec![Vec::new(); dec.len()];
        let mut steps = 0;
        loop {
            let active: Vec<bool> = (0..dec.len()).map(|i| !dec.is_finished(i)).collect();
            if !active.iter().any(|&a| a) {
                break;
            }
            dec.step(&active, cfg.attention_penalty);
            for (i, _) in active.iter().enumerate().filter(|(_, &a)| a) {
                frames[i].extend_from_slice(dec.last_frame(i));
            }
            steps += 1;
        }
        report.decode_steps = steps;
        report.charged_batch = batch;
        charge(t, self.cost.decoder_cost(batch, steps));

        let t = Instant::now();
        let mels: Vec<MelChunk> = frames
            .into_iter()
            .map(|f| MelChunk::new(f, cfg.feature_dim).expect("every item decodes at least one frame"))
            .collect();
        let audio: Vec<Vec<f64>> = mels.iter().map(|m| generate(m, &cfg)).collect();
        report.vocoder_frames = mels.iter().map(MelChunk::frame_count).max().unwrap_or(0);
        charge(t, self.cost.vocoder_cost(batch, report.vocoder_frames));

        for (item, samples) in ok.into_iter().zip(audio) {
            let chunk = AudioChunk {
                samples,
                sample_offset: 0,
            };
            let _ = item.admission.sink.send(StreamEvent::Chunk { chunk, is_last: true });
        }
        report.end = (Instant::now() - self.epoch).as_secs_f64();
        report
    }

    /// Closes admission and cancels everything queued.
    pub fn shutdown(&mut self) {
        self.ingress.close();
        for a in self.early.drain(..).chain(self.rx.try_iter()) {
            let _ = a.sink.send(StreamEvent::Cancelled);
        }
    }
}

impl Stepper for BaselineEngine {
    type Report = RoundReport;

    fn is_idle(&self) -> bool {
        BaselineEngine::is_idle(self)
    }

    fn wait_for_work(&mut self, timeout: Duration) {
        BaselineEngine::wait_for_work(self, timeout)
    }

    fn step_once(&mut self) -> RoundReport {
        self.run_round()
    }

    fn cancel_all(&mut self) {
        self.shutdown()
    }
}

/// The baseline running on its own thread.
pub type BaselineServer = Service<RoundReport>;

pub fn start_baseline(models: Arc<Models>, cost: CostModel, max_batch: usize, options: LoopOptions) -> BaselineServer {
    let sample_rate = models.cfg.sample_rate;
    let (engine, ingress) = BaselineEngine::new(models, cost, max_batch);
    Service::spawn(engine, ingress, PipelineKind::NonIncremental, sample_rate, options)
}
