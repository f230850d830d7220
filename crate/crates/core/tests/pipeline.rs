use revlab::demo::demo_corpus;
use revlab::model::{init_params, ModelConfig, ModelParams, PosMode};
use revlab::seqcore::Corpus;
use revlab::tokenize::{train_bpe, BpeTokenizer};
use revlab::verify::{check_reversal_invariance, InvarianceOptions, ReversalSetup};

#[test]
fn bpe_pair_with_merges_is_invariant() {
    let d = Corpus::new(["abcab", "abc"]);
    let setup = ReversalSetup::new(&d, Some(4)).unwrap();
    assert!(setup.notes.is_empty(), "{:?}", setup.notes);
    assert!(setup.vocab_size() > d.alphabet().len());
    let cfg = ModelConfig::new(1, PosMode::LearnedAbsolute);
    let opts = InvarianceOptions {
        target_vocab: Some(4),
        ..Default::default()
    };
    let out = check_reversal_invariance(&cfg, 4, &d, 3, &opts).unwrap();
    assert!(out.report.passed, "{}", out.report.summary());
    assert_eq!(out.vocab_size, setup.vocab_size());
}

#[test]
fn artifacts_round_trip() {
    let d = demo_corpus();
    let t = train_bpe(&d, 12).unwrap();
    let back = BpeTokenizer::from_json(&t.to_json().unwrap()).unwrap();
    assert_eq!(back, t);
    for doc in d.iter() {
        assert_eq!(back.decode(&back.encode(doc).unwrap()).unwrap(), doc);
    }

    let cfg = ModelConfig {
        vocab_size: t.vocab_size(),
        ..ModelConfig::new(1, PosMode::RelativeBias)
    };
    let p = init_params::<f64>(&cfg, 9).unwrap();
    let mut bin = Vec::new();
    let sidecar = p.write_container(&cfg, &mut bin).unwrap();
    let json = serde_json::to_string(&sidecar).unwrap();
    let q = ModelParams::<f64>::read_container(&serde_json::from_str(&json).unwrap(), &bin[..])
        .unwrap();
    assert_eq!(p, q);
}
