//! Every config shipped under configs/ must resolve without unknown
//! keys, so the examples cannot drift from the parser.

use gfnn_cli::config::{RawConfig, RunConfig};
use std::path::Path;

#[test]
fn shipped_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("conf") {
            continue;
        }
        let raw = RawConfig::load(&path).unwrap();
        let cfg = RunConfig::resolve(raw)
            .unwrap_or_else(|e| panic!("{} failed to resolve: {e}", path.display()));
        assert!(cfg.dataset.gen.n_sequences > 0);
        seen += 1;
    }
    assert!(seen >= 3, "expected the shipped examples, found {seen}");
}
