use std::io::{BufReader, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use incr_tts::cost::CostModel;
use incr_tts::domain::PipelineConfig;
use incr_tts::pipeline::{synthesize_incremental, Models, Pipeline};
use incr_tts::scheduler::{LoopOptions, Scheduler};
use incr_tts::server::{client_request, read_frame, serve, write_frame, ClientError, WireMessage};
use incr_tts::vocoder::to_pcm16;

fn models() -> Arc<Models> {
    Arc::new(Models::builtin(PipelineConfig::default()).unwrap())
}

fn start(cost: CostModel) -> (Arc<Scheduler>, incr_tts::server::ServerHandle) {
    let sched = Arc::new(Scheduler::start(models(), cost, LoopOptions::default()));
    let handle = serve("127.0.0.1:0", sched.clone() as Arc<dyn Pipeline>).unwrap();
    (sched, handle)
}

#[test]
fn single_request_matches_in_process_after_quantization() {
    let (_sched, server) = start(CostModel::zero());
    let text = "你好，欢迎来电，我们为您提供查询余额和办理业务的服务，请稍等。";
    let resp = client_request(server.local_addr(), text).unwrap();
    let reference = synthesize_incremental(text, &models()).unwrap();
    assert_eq!(resp.chunks.len(), reference.len());
    for (got, want) in resp.chunks.iter().zip(&reference) {
        assert_eq!(got.sample_offset, want.sample_offset);
        let q: Vec<i16> = want.samples.iter().map(|&s| to_pcm16(s)).collect();
        assert_eq!(got.samples, q);
    }
    assert_eq!(
        resp.total_samples,
        reference.iter().map(|c| c.samples.len() as u64).sum::<u64>()
    );
}

#[test]
fn first_chunk_arrives_before_synthesis_finishes() {
    let (_sched, server) = start(CostModel::constant_step(0.030, 32));
    let resp = client_request(server.local_addr(), "今天天气不错，学习和生活。").unwrap();
    let n = resp.chunks.len();
    assert_eq!(n, 7);
    let first = resp.chunks[0].received_at - resp.sent_at;
    let last = resp.chunks[n - 1].received_at - resp.sent_at;
    assert!(
        last - first >= Duration::from_millis(150),
        "first {first:?} last {last:?}"
    );
}

#[test]
fn interleaved_tags_stay_contiguous() {
    let (_sched, server) = start(CostModel::zero());
    let stream = TcpStream::connect(server.local_addr()).unwrap();
    let mut w = stream.try_clone().unwrap();
    let mut r = BufReader::new(stream);
    for (tag, text) in [
        ("a", "今天天气不错，学习和生活。"),
        ("b", "你好，欢迎来电，请稍等"),
        ("c", "你好"),
    ] {
        write_frame(
            &mut w,
            &WireMessage::Submit {
                text: text.into(),
                request_tag: tag.into(),
            },
        )
        .unwrap();
    }
    let mut next = std::collections::HashMap::new();
    let mut done = 0;
    while done < 3 {
        match read_frame(&mut r).unwrap().unwrap() {
            WireMessage::Chunk {
                request_tag,
                chunk_index,
                ..
            } => {
                let n = next.entry(request_tag.clone()).or_insert(0u64);
                assert_eq!(chunk_index, *n, "tag {request_tag}");
                *n += 1;
            }
            WireMessage::Done { request_tag, .. } => {
                assert!(next[&request_tag] > 0);
                done += 1;
            }
            other => panic!("unexpected {other:?}"),
        }
    }
    w.flush().unwrap();
}

#[test]
fn malformed_frames_get_error_then_close() {
    let (_sched, server) = start(CostModel::zero());
    for bad in [
        vec![0xff, 0xff, 0xff, 0xff],
        [&4u32.to_be_bytes()[..], b"nope"].concat(),
    ] {
        let mut stream = TcpStream::connect(server.local_addr()).unwrap();
        stream.write_all(&bad).unwrap();
        let mut r = BufReader::new(stream);
        assert!(matches!(
            read_frame(&mut r).unwrap(),
            Some(WireMessage::Error { request_tag: None, .. })
        ));
        assert!(read_frame(&mut r).unwrap().is_none());
    }
}

#[test]
fn empty_text_is_a_per_request_error() {
    let (_sched, server) = start(CostModel::zero());
    match client_request(server.local_addr(), "") {
        Err(ClientError::Server(msg)) => assert!(msg.contains("empty")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn stopping_the_server_truncates_the_stream() {
    let (_sched, server) = start(CostModel::constant_step(0.030, 32));
    let addr = server.local_addr();
    let client = thread::spawn(move || client_request(addr, &"今天天气不错，学习和生活。".repeat(6)));
    thread::sleep(Duration::from_millis(200));
    server.shutdown();
    match client.join().unwrap() {
        Err(ClientError::Truncated { chunks }) => assert!(chunks > 0),
        other => panic!("{other:?}"),
    }
}
