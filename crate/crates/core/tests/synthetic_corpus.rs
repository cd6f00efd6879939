use std::collections::BTreeSet;

use toolquery::corpus::{load_corpus, preprocess, verify_split, split, SplitConfig};
use toolquery::embed::HashingEmbedder;
use toolquery::harness::evaluate_requests;
use toolquery::index::{RetrievalConfig, ToolIndex};
use toolquery::metrics::MmrrNumerator;
use toolquery::synthetic::{generate_synthetic, write_synthetic, SyntheticSpec};

fn utterance_recall(spec: &SyntheticSpec) -> (f64, f64) {
    let (docs, requests) = generate_synthetic(spec).unwrap();
    let p = HashingEmbedder::new(spec.dimension);
    let index = ToolIndex::build(&docs, &p).unwrap();
    let out = evaluate_requests(&requests, None, &index, &p, &RetrievalConfig::default(), &[5, 11], MmrrNumerator::Corrected)
        .unwrap();
    (out.report.recall(5).unwrap(), out.report.recall(11).unwrap())
}

#[test]
fn clean_utterances_retrieve_their_gold_set_first() {
    let spec = SyntheticSpec::default();
    let (docs, requests) = generate_synthetic(&spec).unwrap();
    let p = HashingEmbedder::new(spec.dimension);
    let index = ToolIndex::build(&docs, &p).unwrap();
    for r in &requests {
        let top = index.search(&r.utterance, r.relevant_api_ids.len(), &p).unwrap();
        let got: BTreeSet<String> = top.ids().into_iter().collect();
        assert_eq!(got, r.relevant_api_ids, "{}", r.request_id);
    }
    assert_eq!(utterance_recall(&spec).1, 1.0);
}

#[test]
fn noisy_utterances_lower_recall() {
    for seed in 0..3 {
        let clean = utterance_recall(&SyntheticSpec { seed, ..SyntheticSpec::default() });
        let noisy = utterance_recall(&SyntheticSpec {
            seed,
            utterance_noise_rate: 0.9,
            ..SyntheticSpec::default()
        });
        assert!(noisy.1 < clean.1, "seed {seed}: {noisy:?} vs {clean:?}");
        assert!(noisy.0 < noisy.1);
    }
}

#[test]
fn written_corpus_loads_and_splits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::fixture(5);
    let (docs, requests) = write_synthetic(&spec, dir.path()).unwrap();
    let (d2, r2) = load_corpus(dir.path()).unwrap();
    assert_eq!((&docs, &requests), (&d2, &r2));
    let (d3, r3, report) = preprocess(&d2, &r2);
    assert_eq!((d3.len(), r3.len()), (docs.len(), requests.len()), "{report:?}");
    let s = split(&docs, &requests, &SplitConfig::default()).unwrap();
    verify_split(&s, &docs).unwrap();
    // Same seed, same bytes.
    let again = tempfile::tempdir().unwrap();
    write_synthetic(&spec, again.path()).unwrap();
    for f in ["apis.jsonl", "requests.jsonl"] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap());
    }
}
