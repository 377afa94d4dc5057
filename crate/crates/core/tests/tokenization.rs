use std::path::PathBuf;

use circuit_probe::tokenizer::BpeVocab;
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    text: String,
    ids: Vec<u32>,
}

fn vocab() -> &'static BpeVocab {
    static V: std::sync::OnceLock<BpeVocab> = std::sync::OnceLock::new();
    V.get_or_init(BpeVocab::gpt2)
}

#[test]
fn matches_reference_tokenizer_on_corpus() {
    let path =
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/golden/tokenization.json");
    let cases: Vec<Case> = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert!(cases.len() > 500);
    let v = vocab();
    for c in &cases {
        assert_eq!(v.encode(&c.text), c.ids, "{:?}", c.text);
        assert_eq!(v.decode(&c.ids).unwrap(), c.text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decode_inverts_encode(s in "\\PC{0,40}") {
        let v = vocab();
        prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
    }

    #[test]
    fn encode_inverts_decode_on_canonical_ids(s in "[ a-zA-Z0-9,.'!?]{0,40}") {
        let v = vocab();
        let ids = v.encode(&s);
        prop_assert_eq!(v.encode(&v.decode(&ids).unwrap()), ids);
    }
}
