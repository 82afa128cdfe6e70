//! Load generation and latency accounting.
//!
//! A trace spaces requests evenly inside each second. The dispatcher submits
//! each one at its scheduled time and hands the stream to one of a fixed set
//! of virtual clients, which record first- and last-chunk receive times.
//! Records aggregate into nearest-rank percentiles and export as CSV/JSON.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Select, Sender};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{wait_until, CostModel};
use crate::pipeline::{Models, Pipeline, PipelineKind, RequestId, StreamEvent, Submission, SubmitError};
use crate::scheduler::{BatchSizes, Engine, IterationReport};

const BUILTIN_TEXTS: &str = include_str!("../data/texts.tsv");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown text class {0:?}")]
    UnknownClass(String),
    #[error("text fixtures: {0}")]
    Fixtures(String),
    #[error("qps must be at least 1")]
    ZeroQps,
    #[error("no latency records to aggregate")]
    EmptyRecords,
    #[error("request {index} could not be submitted: {error}")]
    Submit { index: usize, error: SubmitError },
    #[error("request {id} failed: {reason}")]
    RequestFailed { id: RequestId, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextClass {
    Short,
    Medium,
    Long,
    Mixed,
}

impl TextClass {
    pub const CONCRETE: [TextClass; 3] = [TextClass::Short, TextClass::Medium, TextClass::Long];

    pub fn as_str(self) -> &'static str {
        match self {
            TextClass::Short => "short",
            TextClass::Medium => "medium",
            TextClass::Long => "long",
            TextClass::Mixed => "mixed",
        }
    }
}

impl fmt::Display for TextClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TextClass {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "short" => Ok(TextClass::Short),
            "medium" => Ok(TextClass::Medium),
            "long" => Ok(TextClass::Long),
            "mixed" => Ok(TextClass::Mixed),
            _ => Err(HarnessError::UnknownClass(s.to_string())),
        }
    }
}

/// Texts grouped by length class.
#[derive(Debug, Clone)]
pub struct TextFixtures {
    short: Vec<String>,
    medium: Vec<String>,
    long: Vec<String>,
}

impl TextFixtures {
    pub fn builtin() -> Self {
        Self::from_tsv(BUILTIN_TEXTS).expect("bundled texts are valid")
    }

    /// Parses `class<TAB>text` lines; `#` starts a comment line.
    pub fn from_tsv(text: &str) -> Result<Self, HarnessError> {
        let mut fx = Self {
            short: Vec::new(),
            medium: Vec::new(),
            long: Vec::new(),
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (class, body) = line
                .split_once('\t')
                .ok_or_else(|| HarnessError::Fixtures(format!("line {}: expected class<TAB>text", n + 1)))?;
            let list = match class.parse()? {
                TextClass::Short => &mut fx.short,
                TextClass::Medium => &mut fx.medium,
                TextClass::Long => &mut fx.long,
                TextClass::Mixed => {
                    return Err(HarnessError::Fixtures(format!(
                        "line {}: mixed is not a fixture class",
                        n + 1
                    )))
                }
            };
            list.push(body.to_string());
        }
        for class in TextClass::CONCRETE {
            if fx.texts(class).is_empty() {
                return Err(HarnessError::Fixtures(format!("no {class} texts")));
            }
        }
        Ok(fx)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    /// Texts of a concrete class; empty for `Mixed`.
    pub fn texts(&self, class: TextClass) -> &[String] {
        match class {
            TextClass::Short => &self.short,
            TextClass::Medium => &self.medium,
            TextClass::Long => &self.long,
            TextClass::Mixed => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub qps: u32,
    pub duration_seconds: u32,
    pub class: TextClass,
    pub seed: u64,
    /// Requests sent before this many seconds are left out of aggregates.
    pub warmup_seconds: f64,
}

impl Default for LoadProfile {
    fn default() -> Self {
        Self {
            qps: 10,
            duration_seconds: 200,
            class: TextClass::Mixed,
            seed: 0,
            warmup_seconds: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub index: usize,
    /// Scheduled send time in seconds from the start of the test.
    pub at: f64,
    pub class: TextClass,
    pub text: String,
}

/// Builds the request schedule for a profile. Arrival `k` of second `s`
/// is at `s + k/qps`; texts are drawn with a seeded generator.
pub fn make_trace(profile: &LoadProfile, fixtures: &TextFixtures) -> Result<Vec<TraceEntry>, HarnessError> {
    if profile.qps == 0 {
        return Err(HarnessError::ZeroQps);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let qps = profile.qps as usize;
    let total = qps * profile.duration_seconds as usize;
    let mut trace = Vec::with_capacity(total);
    for index in 0..total {
        let (s, k) = (index / qps, index % qps);
        let class = match profile.class {
            TextClass::Mixed => TextClass::CONCRETE[rng.gen_range(0..3)],
            c => c,
        };
        let text = fixtures
            .texts(class)
            .choose(&mut rng)
            .expect("fixture classes are non-empty");
        trace.push(TraceEntry {
            index,
            at: s as f64 + k as f64 / profile.qps as f64,
            class,
            text: text.clone(),
        });
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub request_id: u64,
    pub pipeline: PipelineKind,
    pub class: TextClass,
    /// Seconds from the start of the test.
    pub send_time: f64,
    pub first_chunk_time: f64,
    pub last_chunk_time: f64,
    pub total_samples: u64,
    pub audio_duration: f64,
    pub fcl: f64,
    pub lcl: f64,
    pub rtf: f64,
}

impl LatencyRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        request_id: u64,
        pipeline: PipelineKind,
        class: TextClass,
        send_time: f64,
        first_chunk_time: f64,
        last_chunk_time: f64,
        total_samples: u64,
        sample_rate: u32,
    ) -> Self {
        let audio_duration = total_samples as f64 / sample_rate as f64;
        let lcl = last_chunk_time - send_time;
        Self {
            request_id,
            pipeline,
            class,
            send_time,
            first_chunk_time,
            last_chunk_time,
            total_samples,
            audio_duration,
            fcl: first_chunk_time - send_time,
            lcl,
            rtf: lcl / audio_duration,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DriverOptions {
    /// Number of virtual clients streams are spread over.
    pub clients: usize,
}

impl Default for DriverOptions {
    fn default() -> Self {
        Self { clients: 8 }
    }
}

struct InFlight {
    entry_class: TextClass,
    submission: Submission,
    send_time: f64,
    first: Option<f64>,
    samples: u64,
}

type Outcome = Result<LatencyRecord, HarnessError>;

fn client_loop(inbox: Receiver<InFlight>, epoch: Instant, kind: PipelineKind, sample_rate: u32, out: Sender<Outcome>) {
    let mut active: Vec<InFlight> = Vec::new();
    let mut inbox_open = true;
    while inbox_open || !active.is_empty() {
        let mut sel = Select::new();
        for f in &active {
            sel.recv(&f.submission.stream);
        }
        let inbox_slot = inbox_open.then(|| sel.recv(&inbox));
        let op = sel.select();
        let slot = op.index();
        if Some(slot) == inbox_slot {
            match op.recv(&inbox) {
                Ok(f) => active.push(f),
                Err(_) => inbox_open = false,
            }
            continue;
        }
        let event = op.recv(&active[slot].submission.stream);
        let now = epoch.elapsed().as_secs_f64();
        let f = &mut active[slot];
        let id = f.submission.id;
        let finished = match event {
            Ok(StreamEvent::Chunk { chunk, is_last }) => {
                f.first.get_or_insert(now);
                f.samples += chunk.samples.len() as u64;
                is_last.then(|| {
                    Ok(LatencyRecord::new(
                        id.0,
                        kind,
                        f.entry_class,
                        f.send_time,
                        f.first.expect("set above"),
                        now,
                        f.samples,
                        sample_rate,
                    ))
                })
            }
            Ok(StreamEvent::Failed(reason)) => Some(Err(HarnessError::RequestFailed { id, reason })),
            Ok(StreamEvent::Cancelled) => Some(Err(HarnessError::RequestFailed {
                id,
                reason: "cancelled".into(),
            })),
            Err(_) => Some(Err(HarnessError::RequestFailed {
                id,
                reason: "stream closed before the last chunk".into(),
            })),
        };
        if let Some(outcome) = finished {
            active.swap_remove(slot);
            let _ = out.send(outcome);
        }
    }
}

/// Drives `trace` against `pipeline` in real time and returns one record per
/// request, sorted by send time. Any failed request fails the run.
pub fn run_pressure_test(
    pipeline: &dyn Pipeline,
    trace: &[TraceEntry],
    options: DriverOptions,
) -> Result<Vec<LatencyRecord>, HarnessError> {
    let clients = options.clients.max(1);
    let kind = pipeline.kind();
    let sample_rate = pipeline.sample_rate();
    let epoch = Instant::now();
    let (out_tx, out_rx) = unbounded();
    let mut inboxes = Vec::with_capacity(clients);
    let mut handles = Vec::with_capacity(clients);
    for c in 0..clients {
        let (tx, rx) = unbounded();
        let out = out_tx.clone();
        inboxes.push(tx);
        handles.push(
            thread::Builder::new()
                .name(format!("client-{c}"))
                .spawn(move || client_loop(rx, epoch, kind, sample_rate, out))
                .expect("spawn client thread"),
        );
    }
    drop(out_tx);

    let mut submit_error = None;
    for (n, entry) in trace.iter().enumerate() {
        wait_until(epoch + Duration::from_secs_f64(entry.at));
        let send_time = epoch.elapsed().as_secs_f64();
        match pipeline.submit(&entry.text) {
            Ok(submission) => {
                let _ = inboxes[n % clients].send(InFlight {
                    entry_class: entry.class,
                    submission,
                    send_time,
                    first: None,
                    samples: 0,
                });
            }
            Err(error) => {
                submit_error = Some(HarnessError::Submit {
                    index: entry.index,
                    error,
                });
                break;
            }
        }
    }
    drop(inboxes);
    for h in handles {
        h.join().expect("client thread panicked");
    }
    if let Some(e) = submit_error {
        return Err(e);
    }
    let mut records = Vec::with_capacity(trace.len());
    let mut failure = None;
    for outcome in out_rx.iter() {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    records.sort_by(|a, b| a.send_time.total_cmp(&b.send_time));
    Ok(records)
}

/// Drops records sent before `warmup_seconds`.
pub fn exclude_warmup(records: &[LatencyRecord], warmup_seconds: f64) -> Vec<LatencyRecord> {
    records
        .iter()
        .filter(|r| r.send_time >= warmup_seconds)
        .cloned()
        .collect()
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p/100 * n)`, with rank clamped to at least 1.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub p99: f64,
}

impl Summary {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.collect();
        v.sort_by(f64::total_cmp);
        Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: nearest_rank(&v, 50.0),
            p95: nearest_rank(&v, 95.0),
            p99: nearest_rank(&v, 99.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub fcl: Summary,
    pub lcl: Summary,
    pub rtf_mean: f64,
}

pub fn aggregate(records: &[LatencyRecord]) -> Result<Aggregate, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    Ok(Aggregate {
        count: records.len(),
        fcl: Summary::of(records.iter().map(|r| r.fcl)),
        lcl: Summary::of(records.iter().map(|r| r.lcl)),
        rtf_mean: records.iter().map(|r| r.rtf).sum::<f64>() / records.len() as f64,
    })
}

/// One line of a sweep report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pipeline: PipelineKind,
    pub class: TextClass,
    pub qps: u32,
    pub sent: usize,
    pub completed: usize,
    pub fcl_mean: f64,
    pub fcl_median: f64,
    pub fcl_p95: f64,
    pub fcl_p99: f64,
    pub lcl_mean: f64,
    pub lcl_median: f64,
    pub lcl_p95: f64,
    pub lcl_p99: f64,
    pub rtf_mean: f64,
}

/// Column order of the sweep CSV.
pub const SWEEP_HEADER: [&str; 14] = [
    "pipeline",
    "class",
    "qps",
    "sent",
    "completed",
    "fcl_mean",
    "fcl_median",
    "fcl_p95",
    "fcl_p99",
    "lcl_mean",
    "lcl_median",
    "lcl_p95",
    "lcl_p99",
    "rtf_mean",
];

/// Column order of the per-request CSV.
pub const RECORD_HEADER: [&str; 11] = [
    "request_id",
    "pipeline",
    "class",
    "send_time",
    "first_chunk_time",
    "last_chunk_time",
    "total_samples",
    "audio_duration",
    "fcl",
    "lcl",
    "rtf",
];

impl SweepRow {
    pub fn new(pipeline: PipelineKind, class: TextClass, qps: u32, sent: usize, agg: &Aggregate) -> Self {
        Self {
            pipeline,
            class,
            qps,
            sent,
            completed: agg.count,
            fcl_mean: agg.fcl.mean,
            fcl_median: agg.fcl.median,
            fcl_p95: agg.fcl.p95,
            fcl_p99: agg.fcl.p99,
            lcl_mean: agg.lcl.mean,
            lcl_median: agg.lcl.median,
            lcl_p95: agg.lcl.p95,
            lcl_p99: agg.lcl.p99,
            rtf_mean: agg.rtf_mean,
        }
    }
}

/// Serializes rows under a fixed header. Field order of the row structs
/// matches the header constants.
pub fn write_csv<T: Serialize, W: Write>(writer: W, header: &[&str], rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<stem>.csv` and a `<stem>.json` mirror.
pub fn write_report<T: Serialize>(stem: &Path, header: &[&str], rows: &[T]) -> Result<(), HarnessError> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_csv(std::fs::File::create(stem.with_extension("csv"))?, header, rows)?;
    let json = std::fs::File::create(stem.with_extension("json"))?;
    serde_json::to_writer_pretty(json, rows)?;
    Ok(())
}

/// Result of one `bench` run.
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub records: Vec<LatencyRecord>,
    pub row: SweepRow,
}

/// Builds a trace, drives it, and aggregates everything after warm-up.
pub fn run_bench(
    pipeline: &dyn Pipeline,
    profile: &LoadProfile,
    fixtures: &TextFixtures,
    options: DriverOptions,
) -> Result<BenchResult, HarnessError> {
    let trace = make_trace(profile, fixtures)?;
    let records = run_pressure_test(pipeline, &trace, options)?;
    let kept = exclude_warmup(&records, profile.warmup_seconds);
    let agg = aggregate(&kept)?;
    let row = SweepRow::new(pipeline.kind(), profile.class, profile.qps, trace.len(), &agg);
    Ok(BenchResult { records, row })
}

/// Request identifiers of the scripted pooling scenario.
pub const FIG2_REQUESTS: [(&str, &str); 4] = [
    // 16 phonemes: 4 chunks.
    ("R1", "今天天气不错。"),
    ("R2", "你好，欢迎来电。"),
    // 20 phonemes: 5 chunks.
    ("R3", "你好，感谢您的电话。"),
    // 8 phonemes: 2 chunks.
    ("R4", "大家好。"),
];

/// One row of the replay table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayStep {
    pub step: u64,
    pub batch_sizes: BatchSizes,
    pub frontend: Vec<String>,
    pub decoder: Vec<String>,
    pub removed: Vec<String>,
}

/// Runs the scripted scenario: R1 arrives before step 0, R2 and R3 arrive
/// while step 1 is running, R4 arrives at the end of step 5.
pub fn replay_fig2(models: Arc<Models>) -> Vec<ReplayStep> {
    let (mut engine, ingress) = Engine::new(models, CostModel::zero());
    let mut names = std::collections::HashMap::new();
    let mut subs = Vec::new();
    let mut submit = |label: &'static str, text: &str| {
        let s = ingress.submit(text).expect("engine accepts work");
        names.insert(s.id, label);
        subs.push(s);
    };
    submit(FIG2_REQUESTS[0].0, FIG2_REQUESTS[0].1);
    let mut reports: Vec<IterationReport> = Vec::new();
    while reports.len() < 32 {
        let step = reports.len();
        let report = if step == 1 {
            engine.run_iteration_with(|| {
                submit(FIG2_REQUESTS[1].0, FIG2_REQUESTS[1].1);
                submit(FIG2_REQUESTS[2].0, FIG2_REQUESTS[2].1);
            })
        } else {
            engine.run_iteration()
        };
        reports.push(report);
        if step == 5 {
            submit(FIG2_REQUESTS[3].0, FIG2_REQUESTS[3].1);
        }
        if step >= 5 && engine.is_idle() {
            break;
        }
    }
    let label = |ids: &[RequestId]| ids.iter().map(|id| names[id].to_string()).collect();
    reports
        .iter()
        .map(|r| ReplayStep {
            step: r.step_index,
            batch_sizes: r.batch_sizes,
            frontend: label(&r.frontend_ids),
            decoder: label(&r.decoder_ids),
            removed: label(&r.completed_ids),
        })
        .collect()
}

/// Renders the replay as a fixed-width table.
pub fn format_replay(steps: &[ReplayStep]) -> String {
    let mut out = format!(
        "{:<5} {:<14} {:<14} {}\n",
        "step", "frontend+enc", "decoder+voc", "removed"
    );
    for s in steps {
        out.push_str(&format!(
            "{:<5} {:<14} {:<14} {}\n",
            s.step,
            s.frontend.join(","),
            s.decoder.join(","),
            s.removed.join(",")
        ));
    }
    out
}
