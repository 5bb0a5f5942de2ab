//! Regenerates the synth-cross fixtures and the golden files: `cargo run --example gen_fixtures`.

use std::path::Path;

#[path = "../tests/common/mod.rs"]
mod common;

use patchgraph::sim::synth_cross;

fn main() -> std::io::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("synth-cross.json"), synth_cross::map().to_json_string() + "\n")?;
    std::fs::write(dir.join("synth-cross-scenario.json"), synth_cross::scenario().to_json_string() + "\n")?;
    let mut train = synth_cross::scenario();
    train.anomalies.clear();
    std::fs::write(dir.join("synth-cross-train.json"), train.to_json_string() + "\n")?;
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    std::fs::create_dir_all(&golden)?;
    let g = common::golden();
    std::fs::write(golden.join("dets.jsonl"), g.dets)?;
    std::fs::write(golden.join("model.json"), g.model)?;
    std::fs::write(golden.join("events.jsonl"), g.events)?;
    Ok(())
}
