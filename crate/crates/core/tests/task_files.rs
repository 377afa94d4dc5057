use std::path::PathBuf;

use circuit_probe::tasks::{build_dataset, DatasetOptions, TaskSpec};
use circuit_probe::tokenizer::BpeVocab;

fn task(name: &str) -> TaskSpec {
    let p =
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../assets/tasks/{name}.json"));
    TaskSpec::load(p).unwrap()
}

#[test]
fn shipped_tasks_have_expected_sizes() {
    let v = BpeVocab::gpt2();
    for (name, n) in [
        ("country_capital", 225),
        ("product_developer", 210),
        ("country_capital_reverse", 225),
    ] {
        for shots in 0..=2 {
            let opts = DatasetOptions {
                shots,
                seed: 1,
                ..Default::default()
            };
            let ds = build_dataset(&task(name), &v, opts).unwrap();
            assert_eq!(ds.len(), n, "{name} {shots}-shot");
            for p in &ds.prompts {
                assert_eq!(v.decode(p.text_tokens()).unwrap(), p.text);
                assert!(p.x_span.surface.contains(&p.x), "{:?}", p.text);
                assert_eq!(p.demonstrations.len(), shots);
            }
        }
    }
}
