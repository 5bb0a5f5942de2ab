//! Patch-graph traffic behavior learning and anomaly detection.

pub mod behavior;
pub mod eval;
pub mod geometry;
pub mod ingest;
pub mod pipeline;
pub mod render;
pub mod rules;
pub mod sim;
pub mod topology;
