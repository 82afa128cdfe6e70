use std::sync::Arc;

use incr_tts::domain::PipelineConfig;
use incr_tts::harness::{format_replay, replay_fig2, ReplayStep};
use incr_tts::pipeline::Models;

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn expected() -> Vec<(Vec<String>, Vec<String>, Vec<String>)> {
    [
        (&["R1"][..], &["R1"][..], &[][..]),
        (&[], &["R1"], &[]),
        (&["R2", "R3"], &["R1", "R2", "R3"], &[]),
        (&[], &["R1", "R2", "R3"], &["R1"]),
        (&[], &["R2", "R3"], &[]),
        (&[], &["R2", "R3"], &["R2"]),
        (&["R4"], &["R3", "R4"], &["R3"]),
        (&[], &["R4"], &["R4"]),
    ]
    .iter()
    .map(|(f, d, r)| (names(f), names(d), names(r)))
    .collect()
}

#[test]
fn scripted_scenario_matches_step_table() {
    for overlap in [4, 8] {
        let models = Arc::new(Models::builtin(PipelineConfig::with_overlap(overlap)).unwrap());
        let steps = replay_fig2(models);
        let got: Vec<_> = steps
            .iter()
            .map(|s: &ReplayStep| (s.frontend.clone(), s.decoder.clone(), s.removed.clone()))
            .collect();
        assert_eq!(got, expected(), "\n{}", format_replay(&steps));
        for s in &steps {
            assert_eq!(s.batch_sizes.frontend, s.frontend.len());
            assert_eq!(s.batch_sizes.encoder, s.frontend.len());
            assert_eq!(s.batch_sizes.decoder, s.decoder.len());
            assert_eq!(s.batch_sizes.vocoder, s.decoder.len());
        }
    }
}
