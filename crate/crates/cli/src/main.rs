//! `incr-tts` command-line driver.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use incr_tts::baseline::start_baseline;
use incr_tts::config::Settings;
use incr_tts::harness::{
    format_replay, replay_fig2, run_bench, write_report, DriverOptions, LoadProfile, SweepRow, TextClass, TextFixtures,
    RECORD_HEADER, SWEEP_HEADER,
};
use incr_tts::pipeline::{synthesize_incremental, synthesize_whole, Models, Pipeline, PipelineKind};
use incr_tts::scheduler::{LoopOptions, Scheduler};
use incr_tts::server::{serve, RemotePipeline};
use incr_tts::vocoder::write_wav;

#[derive(Parser)]
#[command(name = "incr-tts", version, about = "Incremental TTS serving engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drive one load profile and report latencies.
    Bench(BenchArgs),
    /// Run `bench` over a range of request rates.
    Sweep(SweepArgs),
    /// Replay the scripted four-request pooling scenario step by step.
    ReplayFig2 {
        #[arg(long, default_value_t = 4)]
        overlap: usize,
    },
    /// Synthesize one text to a WAV file.
    Synth {
        text: String,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Vocode the whole utterance at once instead of chunk by chunk.
        #[arg(long)]
        whole: bool,
    },
    /// Serve the incremental pipeline over TCP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        bind: String,
        #[command(flatten)]
        common: Common,
        /// Append one JSON line per loop iteration to this file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Incr,
    NonIncr,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overlap in mel frames; overrides the config file.
    #[arg(long)]
    overlap: Option<usize>,
}

#[derive(Args, Clone)]
struct LoadArgs {
    #[arg(long, default_value_t = 200)]
    duration: u32,
    #[arg(long, default_value = "mixed")]
    class: String,
    #[arg(long, value_enum, default_value = "incr")]
    pipeline: Kind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seconds at the start excluded from aggregates.
    #[arg(long, default_value_t = 5.0)]
    warmup: f64,
    /// Text fixtures (`class<TAB>text`); defaults to the bundled set.
    #[arg(long)]
    texts: Option<PathBuf>,
    /// Drive a running `serve` instance instead of an in-process engine.
    #[arg(long)]
    connect: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 10)]
    qps: u32,
    /// Output path stem; writes `<stem>.csv` and `<stem>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    load: LoadArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value_t = 10)]
    qps_from: u32,
    #[arg(long, default_value_t = 100)]
    qps_to: u32,
    #[arg(long, default_value_t = 10)]
    qps_step: u32,
    /// Output path stem for the summary rows.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    load: LoadArgs,
}

fn settings(common: &Common) -> Result<Settings> {
    let mut s = match &common.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    if let Some(ol) = common.overlap {
        s.pipeline.overlap_frames = ol;
        s.pipeline = s.pipeline.validate()?;
    }
    Ok(s)
}

fn open_pipeline(kind: Kind, load: &LoadArgs, s: &Settings) -> Result<Box<dyn Pipeline>> {
    if let Some(addr) = &load.connect {
        if matches!(kind, Kind::NonIncr) {
            bail!("--connect drives the served incremental pipeline only");
        }
        let remote = RemotePipeline::connect(addr.as_str(), PipelineKind::Incremental, s.pipeline.sample_rate)
            .with_context(|| format!("connecting to {addr}"))?;
        return Ok(Box::new(remote));
    }
    let models = Arc::new(Models::builtin(s.pipeline.clone())?);
    let options = LoopOptions {
        poll_interval: s.poll_interval,
        log: None,
    };
    Ok(match kind {
        Kind::Incr => Box::new(Scheduler::start(models, s.cost, options)),
        Kind::NonIncr => Box::new(start_baseline(models, s.cost, s.max_batch, options)),
    })
}

fn bench_once(qps: u32, load: &LoadArgs, s: &Settings) -> Result<incr_tts::harness::BenchResult> {
    let fixtures = match &load.texts {
        Some(p) => TextFixtures::load(p)?,
        None => TextFixtures::builtin(),
    };
    let profile = LoadProfile {
        qps,
        duration_seconds: load.duration,
        class: load.class.parse::<TextClass>()?,
        seed: load.seed,
        warmup_seconds: load.warmup,
    };
    let pipeline = open_pipeline(load.pipeline, load, s)?;
    info!("driving {} at {qps} qps for {} s", pipeline.kind(), load.duration);
    Ok(run_bench(
        pipeline.as_ref(),
        &profile,
        &fixtures,
        DriverOptions { clients: s.clients },
    )?)
}

fn print_row(r: &SweepRow) {
    println!(
        "{:<8} {:<6} qps {:>3}  n {:>5}  FCL mean {:>8.2} ms p95 {:>8.2}  LCL mean {:>8.2} ms p95 {:>8.2}  RTF {:.4}",
        r.pipeline.to_string(),
        r.class.as_str(),
        r.qps,
        r.completed,
        r.fcl_mean * 1e3,
        r.fcl_p95 * 1e3,
        r.lcl_mean * 1e3,
        r.lcl_p95 * 1e3,
        r.rtf_mean
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Bench(args) => {
            let s = settings(&args.load.common)?;
            let result = bench_once(args.qps, &args.load, &s)?;
            print_row(&result.row);
            if let Some(stem) = &args.out {
                write_report(stem, &RECORD_HEADER, &result.records)?;
                let summary = stem.with_file_name(format!(
                    "{}_summary",
                    stem.file_name().and_then(|n| n.to_str()).unwrap_or("bench")
                ));
                write_report(&summary, &SWEEP_HEADER, std::slice::from_ref(&result.row))?;
            }
        }
        Command::Sweep(args) => {
            if args.qps_step == 0 || args.qps_from == 0 || args.qps_from > args.qps_to {
                bail!("need 1 <= --qps-from <= --qps-to and --qps-step >= 1");
            }
            let s = settings(&args.load.common)?;
            let mut rows = Vec::new();
            for qps in (args.qps_from..=args.qps_to).step_by(args.qps_step as usize) {
                let result = bench_once(qps, &args.load, &s)?;
                print_row(&result.row);
                rows.push(result.row);
            }
            if let Some(stem) = &args.out {
                write_report(stem, &SWEEP_HEADER, &rows)?;
            }
        }
        Command::ReplayFig2 { overlap } => {
            let models = Arc::new(Models::builtin(incr_tts::domain::PipelineConfig::with_overlap(
                overlap,
            ))?);
            print!("{}", format_replay(&replay_fig2(models)));
        }
        Command::Synth {
            text,
            out,
            common,
            whole,
        } => {
            let s = settings(&common)?;
            let models = Models::builtin(s.pipeline.clone())?;
            let samples: Vec<f64> = if whole {
                synthesize_whole(&text, &models)?
            } else {
                synthesize_incremental(&text, &models)?
                    .into_iter()
                    .flat_map(|c| c.samples)
                    .collect()
            };
            write_wav(&out, &samples, s.pipeline.sample_rate)?;
            println!(
                "wrote {} samples ({:.3} s) to {}",
                samples.len(),
                samples.len() as f64 / f64::from(s.pipeline.sample_rate),
                out.display()
            );
        }
        Command::Serve { bind, common, log } => {
            let s = settings(&common)?;
            let models = Arc::new(Models::builtin(s.pipeline.clone())?);
            let log: Option<Box<dyn Write + Send>> = match log {
                Some(p) => Some(Box::new(BufWriter::new(File::create(&p)?))),
                None => None,
            };
            let sched = Arc::new(Scheduler::start(
                models,
                s.cost,
                LoopOptions {
                    poll_interval: s.poll_interval,
                    log,
                },
            ));
            let handle = serve(bind.as_str(), sched as Arc<dyn Pipeline>)?;
            println!("listening on {}", handle.local_addr());
            loop {
                std::thread::park();
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
