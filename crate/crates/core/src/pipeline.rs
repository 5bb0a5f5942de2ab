//! End-to-end stages shared by the CLI and the tests.

use thiserror::Error;

use crate::behavior::{init_model, BehaviorModel, FinalizeParams, ModelError};
use crate::ingest::{to_visits_debounced, tracks_from_detections, Detection, IngestError, IngestParams, NodeVisit, Track};
use crate::rules::{detect_visits, AnomalyEvent, RuleError};
use crate::topology::IntersectionMap;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rule(#[from] RuleError),
}

/// Stitched, smoothed tracks with their node visits, in global id order.
pub fn track_visits(
    dets: &[Detection],
    map: &IntersectionMap,
    params: &IngestParams,
) -> Result<Vec<(Track, Vec<NodeVisit>)>, IngestError> {
    Ok(tracks_from_detections(dets, params)?
        .into_iter()
        .map(|t| {
            let v = to_visits_debounced(&t, map, params.assoc_min_iou, params.min_visit_samples);
            (t, v)
        })
        .collect())
}

/// Learns and freezes a model from training detections.
pub fn learn(
    dets: &[Detection],
    map: &IntersectionMap,
    ingest: &IngestParams,
    finalize: &FinalizeParams,
    fps: f64,
) -> Result<BehaviorModel, PipelineError> {
    let mut state = init_model(map);
    for (_, visits) in track_visits(dets, map, ingest)? {
        state.observe(&visits)?;
    }
    let mut model = state.finalize(finalize)?;
    model.fps = fps;
    model.meta.min_iou = Some(ingest.assoc_min_iou);
    model.meta.min_visit_samples = Some(ingest.min_visit_samples);
    Ok(model)
}

/// Runs every track through the rules. Events are grouped by track in
/// global id order, each group in emission order.
pub fn detect(
    model: &BehaviorModel,
    dets: &[Detection],
    map: &IntersectionMap,
    ingest: &IngestParams,
    margin: f64,
) -> Result<Vec<AnomalyEvent>, PipelineError> {
    let mut out = Vec::new();
    for (track, visits) in track_visits(dets, map, ingest)? {
        out.extend(detect_visits(model, &visits, margin, &track.sources)?);
    }
    Ok(out)
}
