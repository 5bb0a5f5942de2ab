use std::path::{Path, PathBuf};

use patchgraph::sim::{load_scenario, synth_cross};
use patchgraph::topology::load_map;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn read(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap()
}

// Regenerate with `cargo run -p patchgraph --example gen_fixtures`.
#[test]
fn fixtures_match_the_generator() {
    assert_eq!(read("synth-cross.json"), synth_cross::map().to_json_string() + "\n");
    assert_eq!(read("synth-cross-scenario.json"), synth_cross::scenario().to_json_string() + "\n");
    let mut train = synth_cross::scenario();
    train.anomalies.clear();
    assert_eq!(read("synth-cross-train.json"), train.to_json_string() + "\n");
}

#[test]
fn fixtures_load_and_validate() {
    let map = load_map(fixture("synth-cross.json")).unwrap();
    assert_eq!(map, synth_cross::map());
    assert_eq!(map.len(), synth_cross::PATCH_COUNT);
    for name in ["synth-cross-scenario.json", "synth-cross-train.json"] {
        let s = load_scenario(fixture(name)).unwrap();
        s.validate(&map).unwrap();
        assert_eq!(s.map.as_deref(), Some("synth-cross.json"));
    }
}
