//! Instant request pooling with module-wise dynamic batching.
//!
//! Every in-flight request lives in a pool as a [`PoolItem`] carrying all of
//! its model state plus a module indicator. One loop iteration runs the four
//! modules in order; each module gathers exactly the items its indicator
//! selects, runs them as one batch, and scatters the results back:
//!
//! 1. drain the ingress queue (the admission cutoff for this iteration)
//! 2. frontend on indicator-0 items
//! 3. encoder on the same items, which then switch to indicator 1
//! 4. decoder on indicator-1 items, one chunk each
//! 5. vocoder on the same items; each emits one audio chunk
//! 6. items whose stop token fired leave the pool
//!
//! A request submitted before step 1 of iteration `t` gets its first chunk at
//! the end of iteration `t`, however many other requests are in flight.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use log::{debug, warn};
use serde::Serialize;

use crate::acoustic::{decode_chunk_batch, encode_batch, init_decoder_state, DecoderState, EncodedFeatures};
use crate::cost::charge;
pub use crate::cost::{AffineCost, CostModel};
use crate::domain::{BatchItemError, MelChunk};
use crate::frontend::{run_frontend, FrontendOutput};
use crate::pipeline::{Models, Pipeline, PipelineKind, RequestId, StreamEvent, Submission, SubmitError};
use crate::vocoder::VocoderState;

/// Which module pair processes an item in the current iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ModuleIndicator {
    /// Needs frontend and encoder.
    FrontendEncoder = 0,
    /// Needs decoder and vocoder.
    DecoderVocoder = 1,
}

/// One in-flight request.
#[derive(Debug)]
pub struct PoolItem {
    pub id: RequestId,
    pub text: String,
    pub frontend_out: Option<FrontendOutput>,
    pub enc: Option<EncodedFeatures>,
    pub dec_state: Option<DecoderState>,
    pub voc_state: Option<VocoderState>,
    pub indicator: ModuleIndicator,
    pub chunks_emitted: usize,
    pub arrival: Instant,
    /// Mel chunk decoded this iteration, waiting for the vocoder.
    pending_mel: Option<(MelChunk, bool)>,
    sink: Sender<StreamEvent>,
}

impl PoolItem {
    fn new(admission: Admission) -> Self {
        Self {
            id: admission.id,
            text: admission.text,
            frontend_out: None,
            enc: None,
            dec_state: None,
            voc_state: None,
            indicator: ModuleIndicator::FrontendEncoder,
            chunks_emitted: 0,
            arrival: admission.arrival,
            pending_mel: None,
            sink: admission.sink,
        }
    }
}

#[derive(Debug)]
pub(crate) struct Admission {
    pub(crate) id: RequestId,
    pub(crate) text: String,
    pub(crate) arrival: Instant,
    pub(crate) sink: Sender<StreamEvent>,
}

/// Cloneable submission handle. Submitting never waits for the loop.
#[derive(Debug, Clone)]
pub struct Ingress {
    tx: Sender<Admission>,
    next_id: Arc<AtomicU64>,
    open: Arc<AtomicBool>,
}

impl Ingress {
    pub(crate) fn channel() -> (Self, Receiver<Admission>) {
        let (tx, rx) = unbounded();
        let ingress = Self {
            tx,
            next_id: Arc::new(AtomicU64::new(0)),
            open: Arc::new(AtomicBool::new(true)),
        };
        (ingress, rx)
    }

    pub(crate) fn close(&self) {
        self.open.store(false, Ordering::Release);
    }

    pub fn submit(&self, text: &str) -> Result<Submission, SubmitError> {
        if text.is_empty() {
            return Err(SubmitError::EmptyText);
        }
        if !self.open.load(Ordering::Acquire) {
            return Err(SubmitError::ShutDown);
        }
        let id = RequestId(self.next_id.fetch_add(1, Ordering::Relaxed));
        let (sink, stream) = unbounded();
        self.tx
            .send(Admission {
                id,
                text: text.to_string(),
                arrival: Instant::now(),
                sink,
            })
            .map_err(|_| SubmitError::ShutDown)?;
        Ok(Submission { id, stream })
    }

    pub fn is_open(&self) -> bool {
        self.open.load(Ordering::Acquire)
    }
}

/// Per-module batch sizes of one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BatchSizes {
    pub frontend: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub vocoder: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IterationReport {
    pub step_index: u64,
    /// Seconds since the engine was created.
    pub started_at: f64,
    pub batch_sizes: BatchSizes,
    /// Items that went through frontend and encoder.
    pub frontend_ids: Vec<RequestId>,
    /// Items that went through decoder and vocoder.
    pub decoder_ids: Vec<RequestId>,
    /// Decoder steps executed by the batch (longest item this chunk).
    pub decoder_steps: usize,
    /// Padded mel frames in the vocoder batch.
    pub vocoder_frames: usize,
    pub step_duration: f64,
    pub completed_ids: Vec<RequestId>,
    pub failed_ids: Vec<RequestId>,
}

impl IterationReport {
    pub fn is_empty(&self) -> bool {
        self.batch_sizes == BatchSizes::default() && self.failed_ids.is_empty()
    }

    /// One newline-terminated JSON record.
    pub fn to_json_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("report serializes");
        line.push('\n');
        line
    }
}

/// Runs a batched call, dropping any item that fails and retrying the rest.
/// Returns the surviving ids, the batch output (if any survived), and the
/// failures.
pub(crate) fn run_isolated<T, E: std::error::Error>(
    mut ids: Vec<RequestId>,
    mut call: impl FnMut(&[RequestId]) -> Result<T, BatchItemError<E>>,
) -> (Vec<RequestId>, Option<T>, Vec<(RequestId, String)>) {
    let mut failures = Vec::new();
    while !ids.is_empty() {
        match call(&ids) {
            Ok(out) => return (ids, Some(out), failures),
            Err(e) => {
                let id = ids.remove(e.index);
                failures.push((id, e.error.to_string()));
            }
        }
    }
    (ids, None, failures)
}

/// The pool plus the synchronous iteration logic. [`Scheduler`] drives it
/// from a thread; tests can drive it directly.
pub struct Engine {
    models: Arc<Models>,
    cost: CostModel,
    items: BTreeMap<RequestId, PoolItem>,
    ingress_rx: Receiver<Admission>,
    ingress: Ingress,
    early: Vec<Admission>,
    step: u64,
    epoch: Instant,
}

impl Engine {
    pub fn new(models: Arc<Models>, cost: CostModel) -> (Self, Ingress) {
        let (ingress, rx) = Ingress::channel();
        let engine = Self {
            models,
            cost,
            items: BTreeMap::new(),
            ingress_rx: rx,
            ingress: ingress.clone(),
            early: Vec::new(),
            step: 0,
            epoch: Instant::now(),
        };
        (engine, ingress)
    }

    pub fn models(&self) -> &Arc<Models> {
        &self.models
    }

    pub fn epoch(&self) -> Instant {
        self.epoch
    }

    pub fn pool_len(&self) -> usize {
        self.items.len()
    }

    pub fn item(&self, id: RequestId) -> Option<&PoolItem> {
        self.items.get(&id)
    }

    pub fn items(&self) -> impl Iterator<Item = &PoolItem> {
        self.items.values()
    }

    /// True when nothing is pooled or queued.
    pub fn is_idle(&self) -> bool {
        self.items.is_empty() && self.early.is_empty() && self.ingress_rx.is_empty()
    }

    /// Blocks up to `timeout` for a submission. Used by the loop when idle.
    pub fn wait_for_work(&mut self, timeout: Duration) {
        if let Ok(a) = self.ingress_rx.recv_timeout(timeout) {
            self.early.push(a);
        }
    }

    pub fn run_iteration(&mut self) -> IterationReport {
        self.run_iteration_with(|| {})
    }

    /// Runs one iteration, calling `after_admission` right after the ingress
    /// drain. Anything submitted from the hook lands in the next iteration.
    pub fn run_iteration_with(&mut self, after_admission: impl FnOnce()) -> IterationReport {
        let start = Instant::now();
        let mut report = IterationReport {
            step_index: self.step,
            started_at: (start - self.epoch).as_secs_f64(),
            ..IterationReport::default()
        };
        self.step += 1;

        let admitted: Vec<Admission> = self.early.drain(..).chain(self.ingress_rx.try_iter()).collect();
        for a in admitted {
            self.items.insert(a.id, PoolItem::new(a));
        }
        after_admission();

        self.run_frontend(&mut report);
        self.run_encoder(&mut report);
        self.run_decoder(&mut report);
        self.run_vocoder(&mut report);

        let done: Vec<RequestId> = self
            .items
            .values()
            .filter(|it| it.voc_state.as_ref().is_some_and(|v| v.finished))
            .map(|it| it.id)
            .collect();
        for id in &done {
            // Dropping the item closes its sink.
            self.items.remove(id);
        }
        report.completed_ids = done;
        report.step_duration = start.elapsed().as_secs_f64();
        report
    }

    fn fail(&mut self, id: RequestId, message: String, report: &mut IterationReport) {
        warn!("request {id} failed: {message}");
        if let Some(item) = self.items.remove(&id) {
            let _ = item.sink.send(StreamEvent::Failed(message));
        }
        report.failed_ids.push(id);
    }

    fn ids_with(&self, indicator: ModuleIndicator) -> Vec<RequestId> {
        self.items
            .values()
            .filter(|it| it.indicator == indicator)
            .map(|it| it.id)
            .collect()
    }

    fn run_frontend(&mut self, report: &mut IterationReport) {
        let ids: Vec<RequestId> = self
            .ids_with(ModuleIndicator::FrontendEncoder)
            .into_iter()
            .filter(|id| self.items[id].frontend_out.is_none())
            .collect();
        report.batch_sizes.frontend = ids.len();
        if ids.is_empty() {
            return;
        }
        let start = Instant::now();
        for id in ids {
            let result = run_frontend(&self.items[&id].text, &self.models.lexicon);
            match result {
                Ok(fo) => self.items.get_mut(&id).unwrap().frontend_out = Some(fo),
                Err(e) => self.fail(id, format!("frontend: {e}"), report),
            }
        }
        charge(start, self.cost.frontend_cost(report.batch_sizes.frontend));
    }

    fn run_encoder(&mut self, report: &mut IterationReport) {
        let ids = self.ids_with(ModuleIndicator::FrontendEncoder);
        report.batch_sizes.encoder = ids.len();
        if ids.is_empty() {
            return;
        }
        let start = Instant::now();
        let cfg = &self.models.cfg;
        let items = &self.items;
        let (ids, out, failures) = run_isolated(ids, |ids| {
            let fos: Vec<&FrontendOutput> = ids
                .iter()
                .map(|id| items[id].frontend_out.as_ref().expect("frontend ran"))
                .collect();
            encode_batch(&fos, cfg)
        });
        for (id, msg) in failures {
            self.fail(id, format!("encoder: {msg}"), report);
        }
        for (id, enc) in ids.iter().zip(out.into_iter().flatten()) {
            let item = self.items.get_mut(id).unwrap();
            item.dec_state = Some(init_decoder_state(&enc, &self.models.cfg));
            item.voc_state = Some(VocoderState::new());
            item.enc = Some(enc);
            item.indicator = ModuleIndicator::DecoderVocoder;
            report.frontend_ids.push(*id);
        }
        charge(start, self.cost.encoder_cost(report.batch_sizes.encoder));
    }

    fn run_decoder(&mut self, report: &mut IterationReport) {
        let ids = self.ids_with(ModuleIndicator::DecoderVocoder);
        report.batch_sizes.decoder = ids.len();
        if ids.is_empty() {
            return;
        }
        let start = Instant::now();
        let cfg = &self.models.cfg;
        let items = &self.items;
        let (ids, out, failures) = run_isolated(ids, |ids| {
            let states: Vec<&DecoderState> = ids
                .iter()
                .map(|id| items[id].dec_state.as_ref().expect("encoded item"))
                .collect();
            let encs: Vec<&EncodedFeatures> = ids
                .iter()
                .map(|id| items[id].enc.as_ref().expect("encoded item"))
                .collect();
            decode_chunk_batch(&states, &encs, cfg)
        });
        for (id, msg) in failures {
            self.fail(id, format!("decoder: {msg}"), report);
        }
        if let Some(out) = out {
            report.decoder_steps = out.steps;
            for (id, r) in ids.iter().zip(out.results) {
                let item = self.items.get_mut(id).unwrap();
                item.dec_state = Some(r.state);
                item.pending_mel = Some((r.mel, r.stop));
            }
        }
        charge(
            start,
            self.cost.decoder_cost(report.batch_sizes.decoder, report.decoder_steps),
        );
    }

    fn run_vocoder(&mut self, report: &mut IterationReport) {
        let ids: Vec<RequestId> = self
            .ids_with(ModuleIndicator::DecoderVocoder)
            .into_iter()
            .filter(|id| self.items[id].pending_mel.is_some())
            .collect();
        report.batch_sizes.vocoder = ids.len();
        if ids.is_empty() {
            return;
        }
        let start = Instant::now();
        let vocoder = &self.models.vocoder;
        let items = &self.items;
        let (ids, out, failures) = run_isolated(ids, |ids| {
            let states: Vec<&VocoderState> = ids
                .iter()
                .map(|id| items[id].voc_state.as_ref().expect("encoded item"))
                .collect();
            let (mels, last): (Vec<&MelChunk>, Vec<bool>) = ids
                .iter()
                .map(|id| {
                    let (mel, stop) = items[id].pending_mel.as_ref().expect("decoded item");
                    (mel, *stop)
                })
                .unzip();
            vocoder.vocode_batch(&states, &mels, &last)
        });
        for (id, msg) in failures {
            self.fail(id, format!("vocoder: {msg}"), report);
        }
        let mut hung_up = Vec::new();
        if let Some(out) = out {
            report.vocoder_frames = out.frames;
            for (id, (audio, state)) in ids.iter().zip(out.outputs) {
                let item = self.items.get_mut(id).unwrap();
                item.pending_mel = None;
                item.chunks_emitted += 1;
                let is_last = state.finished;
                item.voc_state = Some(state);
                report.decoder_ids.push(*id);
                if item.sink.send(StreamEvent::Chunk { chunk: audio, is_last }).is_err() {
                    hung_up.push(*id);
                }
            }
        }
        for id in hung_up {
            debug!("request {id}: client went away");
            if self
                .items
                .remove(&id)
                .is_some_and(|it| !it.voc_state.is_some_and(|v| v.finished))
            {
                report.failed_ids.push(id);
            }
        }
        charge(
            start,
            self.cost
                .vocoder_cost(report.batch_sizes.vocoder, report.vocoder_frames),
        );
    }

    /// Closes admission and cancels everything pooled or queued.
    pub fn shutdown(&mut self) {
        self.ingress.close();
        let queued: Vec<Admission> = self.early.drain(..).chain(self.ingress_rx.try_iter()).collect();
        for a in queued {
            let _ = a.sink.send(StreamEvent::Cancelled);
        }
        for (_, item) in std::mem::take(&mut self.items) {
            let _ = item.sink.send(StreamEvent::Cancelled);
        }
    }
}

/// A synchronous engine that a background thread can drive.
pub trait Stepper: Send + 'static {
    type Report: Serialize + Send + 'static;

    /// True when nothing is pooled or queued.
    fn is_idle(&self) -> bool;
    /// Blocks up to `timeout` waiting for a submission.
    fn wait_for_work(&mut self, timeout: Duration);
    /// Runs one iteration (or round) over whatever is pending.
    fn step_once(&mut self) -> Self::Report;
    /// Closes admission and cancels everything pooled or queued.
    fn cancel_all(&mut self);
}

impl Stepper for Engine {
    type Report = IterationReport;

    fn is_idle(&self) -> bool {
        Engine::is_idle(self)
    }

    fn wait_for_work(&mut self, timeout: Duration) {
        Engine::wait_for_work(self, timeout)
    }

    fn step_once(&mut self) -> IterationReport {
        self.run_iteration()
    }

    fn cancel_all(&mut self) {
        self.shutdown()
    }
}

/// Loop options.
pub struct LoopOptions {
    /// Upper bound on how long an idle loop waits before re-checking.
    pub poll_interval: Duration,
    /// Receives one JSON line per iteration.
    pub log: Option<Box<dyn Write + Send>>,
}

impl Default for LoopOptions {
    fn default() -> Self {
        Self {
            poll_interval: Duration::from_millis(1),
            log: None,
        }
    }
}

/// Runs iterations until `stop` is set, then cancels whatever is in flight.
pub fn run_loop<S: Stepper>(engine: &mut S, stop: &AtomicBool, mut options: LoopOptions) -> Vec<S::Report> {
    let mut reports = Vec::new();
    while !stop.load(Ordering::Acquire) {
        if engine.is_idle() {
            engine.wait_for_work(options.poll_interval);
            continue;
        }
        let report = engine.step_once();
        if let Some(log) = options.log.as_mut() {
            let mut line = serde_json::to_string(&report).expect("report serializes");
            line.push('\n');
            if let Err(e) = log.write_all(line.as_bytes()) {
                warn!("iteration log write failed: {e}");
            }
        }
        reports.push(report);
    }
    engine.cancel_all();
    if let Some(log) = options.log.as_mut() {
        let _ = log.flush();
    }
    reports
}

/// An engine running on its own thread behind a [`Pipeline`] surface.
pub struct Service<R: Send + 'static> {
    ingress: Ingress,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Vec<R>>>,
    sample_rate: u32,
    kind: PipelineKind,
}

/// The incremental pipeline running on its own thread.
pub type Scheduler = Service<IterationReport>;

impl<R: Send + 'static> Service<R> {
    pub fn spawn<S: Stepper<Report = R>>(
        mut engine: S,
        ingress: Ingress,
        kind: PipelineKind,
        sample_rate: u32,
        options: LoopOptions,
    ) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::Builder::new()
            .name(format!("{kind}-loop"))
            .spawn(move || run_loop(&mut engine, &flag, options))
            .expect("spawn engine thread");
        Self {
            ingress,
            stop,
            thread: Some(thread),
            sample_rate,
            kind,
        }
    }

    pub fn ingress(&self) -> Ingress {
        self.ingress.clone()
    }

    /// Stops the loop, cancels in-flight requests and returns every report.
    pub fn shutdown(mut self) -> Vec<R> {
        self.stop_thread()
    }

    fn stop_thread(&mut self) -> Vec<R> {
        self.stop.store(true, Ordering::Release);
        self.thread
            .take()
            .map(|t| t.join().expect("engine thread panicked"))
            .unwrap_or_default()
    }
}

impl Scheduler {
    pub fn start(models: Arc<Models>, cost: CostModel, options: LoopOptions) -> Self {
        let sample_rate = models.cfg.sample_rate;
        let (engine, ingress) = Engine::new(models, cost);
        Self::spawn(engine, ingress, PipelineKind::Incremental, sample_rate, options)
    }
}

impl<R: Send + 'static> Drop for Service<R> {
    fn drop(&mut self) {
        self.stop_thread();
    }
}

impl<R: Send + 'static> Pipeline for Service<R> {
    fn submit(&self, text: &str) -> Result<Submission, SubmitError> {
        self.ingress.submit(text)
    }

    fn kind(&self) -> PipelineKind {
        self.kind
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyBounds {
    pub min: f64,
    pub max: f64,
    pub expected: f64,
}

/// First-chunk latency bounds for a request arriving during an iteration of
/// length `current`, followed by one of length `next`: at most
/// `current + next`, at least `min(current, next)`, and `current/2 + next`
/// on average for a uniformly distributed arrival.
pub fn latency_bounds(current: f64, next: f64) -> Result<LatencyBounds, String> {
    if !(current >= 0.0 && next >= 0.0) {
        return Err(format!("step times must be non-negative, got {current} and {next}"));
    }
    Ok(LatencyBounds {
        min: current.min(next),
        max: current + next,
        expected: current / 2.0 + next,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PipelineConfig;
    use crate::pipeline::synthesize_incremental;
    use crate::vocoder::VocoderError;

    fn models() -> Arc<Models> {
        Arc::new(Models::builtin(PipelineConfig::default()).unwrap())
    }

    fn drain(stream: &crate::pipeline::ChunkStream) -> Vec<StreamEvent> {
        stream.try_iter().collect()
    }

    #[test]
    fn empty_pool_gives_empty_report() {
        let (mut engine, _ingress) = Engine::new(models(), CostModel::zero());
        let r = engine.run_iteration();
        assert_eq!(r.batch_sizes, BatchSizes::default());
        assert!(r.is_empty());
    }

    #[test]
    fn new_request_emits_in_first_iteration() {
        let (mut engine, ingress) = Engine::new(models(), CostModel::zero());
        let sub = ingress.submit("你好").unwrap();
        let r = engine.run_iteration();
        assert_eq!(
            r.batch_sizes,
            BatchSizes {
                frontend: 1,
                encoder: 1,
                decoder: 1,
                vocoder: 1
            }
        );
        assert_eq!(r.completed_ids, vec![sub.id]);
        let events = drain(&sub.stream);
        assert_eq!(events.len(), 1);
        assert!(matches!(events[0], StreamEvent::Chunk { is_last: true, .. }));
        assert!(sub.stream.recv().is_err(), "sink closed after completion");
        assert_eq!(engine.pool_len(), 0);
    }

    #[test]
    fn indicator_partition_sets_batch_sizes() {
        let (mut engine, ingress) = Engine::new(models(), CostModel::zero());
        let subs: Vec<_> = (0..3).map(|_| ingress.submit("欢迎来电，请稍等").unwrap()).collect();
        engine.run_iteration();
        assert!(engine.items().all(|it| it.indicator == ModuleIndicator::DecoderVocoder));
        let r = engine.run_iteration();
        assert_eq!(
            r.batch_sizes,
            BatchSizes {
                frontend: 0,
                encoder: 0,
                decoder: 3,
                vocoder: 3
            }
        );
        drop(subs);
    }

    #[test]
    fn submission_during_iteration_waits_for_next() {
        let (mut engine, ingress) = Engine::new(models(), CostModel::zero());
        let first = ingress.submit("欢迎来电，请稍等").unwrap();
        let mut late = None;
        let r0 = engine.run_iteration_with(|| late = Some(ingress.submit("你好").unwrap()));
        let late = late.unwrap();
        assert_eq!(r0.frontend_ids, vec![first.id]);
        let r1 = engine.run_iteration();
        assert_eq!(r1.frontend_ids, vec![late.id]);
        assert_eq!(r1.decoder_ids, vec![first.id, late.id]);
    }

    #[test]
    fn hundred_submissions_share_one_frontend_batch() {
        let (mut engine, ingress) = Engine::new(models(), CostModel::zero());
        let subs: Vec<_> = (0..100).map(|_| ingress.submit("你好").unwrap()).collect();
        let r = engine.run_iteration();
        assert_eq!(r.batch_sizes.frontend, 100);
        assert_eq!(r.completed_ids.len(), 100);
        drop(subs);
    }

    #[test]
    fn streams_match_single_request_reference() {
        let m = models();
        let texts = ["你好", "欢迎来电，请稍等", "大家好，今天天气不错", "中国人"];
        let (mut engine, ingress) = Engine::new(m.clone(), CostModel::zero());
        let mut subs = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            subs.push(ingress.submit(t).unwrap());
            if i % 2 == 1 {
                engine.run_iteration();
            }
        }
        while engine.pool_len() > 0 {
            engine.run_iteration();
        }
        for (t, sub) in texts.iter().zip(subs) {
            let got: Vec<_> = drain(&sub.stream)
                .into_iter()
                .map(|e| match e {
                    StreamEvent::Chunk { chunk, .. } => chunk,
                    other => panic!("unexpected {other:?}"),
                })
                .collect();
            assert_eq!(got, synthesize_incremental(t, &m).unwrap());
        }
    }

    #[test]
    fn blank_text_fails_alone() {
        let (mut engine, ingress) = Engine::new(models(), CostModel::zero());
        let good = ingress.submit("你好").unwrap();
        let bad = ingress.submit("   ").unwrap();
        let r = engine.run_iteration();
        assert_eq!(r.failed_ids, vec![bad.id]);
        assert_eq!(r.completed_ids, vec![good.id]);
        assert!(matches!(drain(&bad.stream)[..], [StreamEvent::Failed(_)]));
    }

    #[test]
    fn isolation_retries_without_poisoned_item() {
        let ids: Vec<RequestId> = (0..5).map(RequestId).collect();
        let mut calls = 0;
        let (survivors, out, failures) = run_isolated(ids, |batch| {
            calls += 1;
            match batch.iter().position(|id| id.0 == 1 || id.0 == 3) {
                Some(index) => Err(BatchItemError {
                    index,
                    error: VocoderError::ZeroLength,
                }),
                None => Ok(batch.len()),
            }
        });
        assert_eq!(calls, 3);
        assert_eq!(survivors, vec![RequestId(0), RequestId(2), RequestId(4)]);
        assert_eq!(out, Some(3));
        assert_eq!(
            failures.iter().map(|f| f.0).collect::<Vec<_>>(),
            vec![RequestId(1), RequestId(3)]
        );
    }

    #[test]
    fn shutdown_cancels_in_flight_and_rejects_new_work() {
        let sched = Scheduler::start(models(), CostModel::constant_step(0.01, 32), LoopOptions::default());
        let sub = sched.submit(&"欢迎来电，请稍等".repeat(20)).unwrap();
        // Wait for the first chunk so the request is mid-flight.
        assert!(matches!(
            sub.stream.recv().unwrap(),
            StreamEvent::Chunk { is_last: false, .. }
        ));
        let ingress = sched.ingress();
        let reports = sched.shutdown();
        assert!(!reports.is_empty());
        let rest: Vec<_> = sub.stream.iter().collect();
        assert_eq!(rest.last(), Some(&StreamEvent::Cancelled));
        assert_eq!(ingress.submit("你好").unwrap_err(), SubmitError::ShutDown);
    }

    #[test]
    fn latency_bounds_examples() {
        let b = latency_bounds(0.02, 0.02).unwrap();
        assert_eq!((b.min, b.max), (0.02, 0.04));
        assert!((b.expected - 0.03).abs() < 1e-15);
        let b = latency_bounds(0.0, 0.5).unwrap();
        assert_eq!((b.min, b.max, b.expected), (0.0, 0.5, 0.5));
        assert!(latency_bounds(-1.0, 0.0).is_err());
    }

    #[test]
    fn report_serializes_as_one_line() {
        let (mut engine, ingress) = Engine::new(models(), CostModel::zero());
        let _sub = ingress.submit("你好").unwrap();
        let line = engine.run_iteration().to_json_line();
        assert!(line.ends_with('\n') && line.matches('\n').count() == 1);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["batch_sizes"]["decoder"], 1);
    }
}
