use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_incr-tts"))
}

#[test]
fn replay_prints_the_eight_step_table() {
    let out = bin().args(["replay-fig2", "--overlap", "8"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    assert!(rows[3].ends_with("R1"));
    assert!(rows[7].ends_with("R4"));
}

#[test]
fn synth_writes_a_wav_of_the_expected_length() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.wav");
    let status = bin().args(["synth", "大家好。", "--out"]).arg(&path).status().unwrap();
    assert!(status.success());
    // header plus two 32-frame chunks of 256-sample PCM16 hops
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 44 + 64 * 256 * 2);
}

#[test]
fn short_bench_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("run");
    let status = bin()
        .args([
            "bench",
            "--qps",
            "4",
            "--duration",
            "2",
            "--warmup",
            "0",
            "--class",
            "short",
            "--out",
        ])
        .arg(&stem)
        .status()
        .unwrap();
    assert!(status.success());
    let records = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert!(records.starts_with("request_id,pipeline,class,send_time,"));
    assert_eq!(records.lines().count(), 1 + 8);
    assert!(dir.path().join("run_summary.json").exists());
}

#[test]
fn bad_arguments_exit_nonzero() {
    let out = bin()
        .args(["bench", "--class", "huge", "--duration", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown text class"));
}
