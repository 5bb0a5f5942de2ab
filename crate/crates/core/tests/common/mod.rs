//! Scenario builders shared by the integration tests and the fixture
//! generator.
#![allow(dead_code)]

use std::collections::BTreeMap;

use patchgraph::behavior::{BehaviorModel, FinalizeParams};
use patchgraph::eval::{compute_report, match_events, truth_items, EvalReport, DEFAULT_FRAME_TOL};
use patchgraph::ingest::{write_detections, Detection, IngestParams, DEFAULT_FPS};
use patchgraph::pipeline::{detect, learn};
use patchgraph::rules::{write_events, AnomalyEvent, AnomalyKind, DEFAULT_STOP_MARGIN};
use patchgraph::sim::{simulate, synth_cross, NoiseConfig, ScenarioConfig, SimOutput, DEFAULT_SIM_MIN_IOU};
use patchgraph::topology::IntersectionMap;

pub const NOISY: NoiseConfig = NoiseConfig {
    position_sigma: 0.3,
    yaw_flip_p: 0.05,
    dropout_p: 0.05,
};

/// Visit debounce used for noisy input.
pub const NOISY_MIN_VISIT_SAMPLES: usize = 3;

/// Normal traffic only.
pub fn normal_scenario(seed: u64, n: usize, noise: NoiseConfig) -> ScenarioConfig {
    let mut c = synth_cross::scenario();
    c.seed = seed;
    c.normal_count = n;
    c.anomalies.clear();
    c.noise = noise;
    c
}

/// `n` normal tracks plus the default anomaly mix (24 zone, 3 stop, 14 turn).
pub fn mixed_scenario(seed: u64, n: usize, noise: NoiseConfig) -> ScenarioConfig {
    let mut c = synth_cross::scenario();
    c.seed = seed;
    c.normal_count = n;
    c.noise = noise;
    c
}

pub fn ingest(min_visit_samples: usize) -> IngestParams {
    IngestParams {
        assoc_min_iou: DEFAULT_SIM_MIN_IOU,
        min_visit_samples,
        ..IngestParams::default()
    }
}

pub fn sim(config: &ScenarioConfig, map: &IntersectionMap) -> SimOutput {
    simulate(config, map).expect("scenario simulates")
}

pub fn train(dets: &[Detection], map: &IntersectionMap, ingest: &IngestParams, finalize: &FinalizeParams) -> BehaviorModel {
    learn(dets, map, ingest, finalize, DEFAULT_FPS).expect("model trains")
}

pub struct Run {
    pub events: Vec<AnomalyEvent>,
    pub report: EvalReport,
}

/// Detects on `test` and scores against its truth.
pub fn score(model: &BehaviorModel, test: &SimOutput, map: &IntersectionMap, ingest: &IngestParams, margin: f64) -> Run {
    let events = detect(model, &test.detections, map, ingest, margin).expect("detection runs");
    let m = match_events(&events, &truth_items(&test.truth), DEFAULT_FRAME_TOL);
    Run {
        report: compute_report(&m, BTreeMap::new()),
        events,
    }
}

/// Train on `train_seed`, test on 200 fresh normal tracks plus the
/// default anomaly mix from `train_seed + 1`.
pub fn end_to_end(train_seed: u64, noise: NoiseConfig, min_visit_samples: usize) -> Run {
    let map = synth_cross::map();
    let ing = ingest(min_visit_samples);
    let tr = sim(&normal_scenario(train_seed, 1000, noise), &map);
    let model = train(&tr.detections, &map, &ing, &FinalizeParams::default());
    let te = sim(&mixed_scenario(train_seed + 1, 200, noise), &map);
    score(&model, &te, &map, &ing, DEFAULT_STOP_MARGIN)
}

pub fn all_kinds_perfect(r: &EvalReport) -> bool {
    AnomalyKind::ALL
        .iter()
        .all(|k| r.per_kind.get(k).is_some_and(|x| x.truths == 0 || x.accuracy == 1.0))
}

/// Inputs and outputs pinned by the golden files.
pub struct Golden {
    pub dets: String,
    pub model: String,
    pub events: String,
}

pub fn golden_dets() -> Vec<Detection> {
    let map = synth_cross::map();
    let mut c = normal_scenario(8, 4, NoiseConfig::default());
    c.anomalies = [
        (AnomalyKind::ImproperTurn, 1),
        (AnomalyKind::ImproperZone, 1),
        (AnomalyKind::UnlawfulStop, 1),
    ]
    .into_iter()
    .collect();
    sim(&c, &map).detections
}

pub fn golden_model() -> BehaviorModel {
    let map = synth_cross::map();
    let tr = sim(&normal_scenario(7, 300, NoiseConfig::default()), &map);
    train(&tr.detections, &map, &ingest(1), &FinalizeParams::default())
}

pub fn golden() -> Golden {
    let map = synth_cross::map();
    let dets = golden_dets();
    let model = golden_model();
    let events = detect(&model, &dets, &map, &ingest(1), DEFAULT_STOP_MARGIN).expect("detection runs");
    let mut d = Vec::new();
    write_detections(&mut d, &dets).unwrap();
    let mut e = Vec::new();
    write_events(&mut e, &events).unwrap();
    Golden {
        dets: String::from_utf8(d).unwrap(),
        model: model.to_json_string(),
        events: String::from_utf8(e).unwrap(),
    }
}
