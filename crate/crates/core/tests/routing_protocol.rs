mod common;

use common::{emit_stream, malformed_fixtures, random_decision, stream};
use nxgpt::config::{Modality, SignalCounts};
use nxgpt::routing::{parse_stream, scan_signal_runs};
use nxgpt::tokenizer::{tokenize, SignalVocabulary};
use nxgpt::util::derived_rng;
use proptest::prelude::*;

fn counts() -> impl Strategy<Value = SignalCounts> {
    (1usize..12, 1usize..12, 1usize..30).prop_map(|(image, audio, video)| SignalCounts { text: 0, image, audio, video })
}

proptest! {
    #[test]
    fn emitted_decisions_parse_back(c in counts(), seed: u64) {
        let vocab = SignalVocabulary::new(c);
        let mut rng = derived_rng(seed, "roundtrip");
        let decision = random_decision(&mut rng);
        let ids = emit_stream(&decision, &vocab, &mut rng);
        let d = parse_stream(&stream(ids), &vocab).unwrap();
        prop_assert_eq!(d.activation_map(), decision);
        prop_assert!(d.violations.is_empty());
    }

    /// Arbitrary id soup never fails, and every activation is backed by a
    /// contiguous complete run in the stream.
    #[test]
    fn arbitrary_streams_are_safe(ids in proptest::collection::vec(0u32..200, 0..80)) {
        let vocab = SignalVocabulary::new(SignalCounts::default());
        let d = parse_stream(&stream(ids.clone()), &vocab).unwrap();
        for m in d.activated() {
            let run = vocab.run(m);
            prop_assert!(ids.windows(run.len()).any(|w| w == run.as_slice()));
        }
    }

    #[test]
    fn plain_text_never_tokenizes_to_signals(s in "[ -~]{0,60}") {
        let vocab = SignalVocabulary::new(SignalCounts::default());
        let ids = tokenize(&s).unwrap();
        prop_assert!(ids.iter().all(|&i| !vocab.is_signal(i)));
        prop_assert!(scan_signal_runs(&ids, &vocab).violations.is_empty());
    }
}

#[test]
fn malformed_runs_deactivate_with_violations() {
    let vocab = SignalVocabulary::new(SignalCounts::default());
    for f in malformed_fixtures(&vocab) {
        let d = parse_stream(&stream(f.ids.clone()), &vocab).unwrap();
        for m in &f.deactivated {
            assert!(!d.routes[m].is_activated(), "{}: {m} should be deactivated", f.name);
        }
        assert!(!d.violations.is_empty(), "{}: no violation recorded", f.name);
    }
}

#[test]
fn two_runs_activate_both() {
    let vocab = SignalVocabulary::new(SignalCounts::default());
    let mut ids = vocab.run(Modality::Audio);
    ids.extend(vocab.run(Modality::Image));
    let d = parse_stream(&stream(ids), &vocab).unwrap();
    assert_eq!(d.activated(), vec![Modality::Image, Modality::Audio]);
}
