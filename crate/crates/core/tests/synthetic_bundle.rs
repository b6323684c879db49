use std::fs;
use std::path::PathBuf;

use relsynth::refine::RunConfig;
use relsynth::synthetic;

fn bundle_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic")
}

#[test]
fn bundled_files_match_the_generator() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic::write_bundle(tmp.path(), synthetic::BUNDLE_SEED).unwrap();
    for name in ["corpus.jsonl", "test.jsonl", "definitions.jsonl", "shots.jsonl", "config.json", "group.json"] {
        let fresh = fs::read_to_string(tmp.path().join(name)).unwrap();
        let bundled = fs::read_to_string(bundle_dir().join(name))
            .unwrap_or_else(|e| panic!("{name}: {e}; regenerate with `relsynth synthetic write`"));
        assert!(fresh == bundled, "{name} is stale");
    }
}

#[test]
fn bundled_config_and_corpus_load() {
    let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(bundle_dir().join("config.json")).unwrap()).unwrap();
    cfg.validate().unwrap();
    let store = relsynth::corpus::ingest_file(&bundle_dir().join("corpus.jsonl")).unwrap();
    assert_eq!(store.len(), synthetic::CORPUS_SIZE);
}
