//! Scoring predicted events against simulator truth.
//!
//! Matching is greedy and one-to-one. A prediction and a truth item refer to
//! the same agent when they share a camera track (or, lacking sources, the
//! same id), and they overlap in time when the prediction span widened by
//! `frame_tol` on both sides meets the truth span.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ingest::{Frame, SourceKey};
use crate::rules::{AnomalyEvent, AnomalyKind};
use crate::sim::TruthRecord;
use crate::topology::PatchId;

pub const DEFAULT_FRAME_TOL: u64 = 30;

/// One ground-truth anomaly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthItem {
    pub id: u64,
    pub kind: AnomalyKind,
    pub nodes: Vec<PatchId>,
    pub start: Frame,
    pub end: Frame,
    pub sources: Vec<SourceKey>,
}

/// The anomalous entries of a truth sidecar.
pub fn truth_items(records: &[TruthRecord]) -> Vec<TruthItem> {
    records
        .iter()
        .filter_map(|r| {
            Some(TruthItem {
                id: r.id,
                kind: r.kind?,
                nodes: r.nodes.clone(),
                start: r.start?,
                end: r.end?,
                sources: r.sources.clone(),
            })
        })
        .collect()
}

fn same_agent(p: &AnomalyEvent, t: &TruthItem) -> bool {
    if p.sources.is_empty() || t.sources.is_empty() {
        return p.global_id == t.id;
    }
    let ts: BTreeSet<_> = t.sources.iter().collect();
    p.sources.iter().any(|s| ts.contains(s))
}

fn overlaps(p: &AnomalyEvent, t: &TruthItem, tol: u64) -> bool {
    p.start_frame.saturating_sub(tol) <= t.end && t.start <= p.end_frame.saturating_add(tol)
}

/// Result of matching predictions to truth.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Matching {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Truth kind → predicted kind of its match, `None` when missed.
    pub confusion: BTreeMap<AnomalyKind, BTreeMap<Option<AnomalyKind>, usize>>,
    /// Unmatched predictions by predicted kind.
    pub fp_by_kind: BTreeMap<AnomalyKind, usize>,
    /// `(prediction index, truth index)` in the caller's order.
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy one-to-one matching, independent of the order of `predicted`.
///
/// Predictions are visited in `(track, start, kind)` order; each takes the
/// unmatched overlapping truth of the same agent, preferring the same kind,
/// then the closest start, then the earlier truth.
pub fn match_events(predicted: &[AnomalyEvent], truth: &[TruthItem], frame_tol: u64) -> Matching {
    let mut order: Vec<usize> = (0..predicted.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&predicted[a], &predicted[b]);
        (p.global_id, &p.sources, p.start_frame, p.kind, p.end_frame, &p.nodes)
            .cmp(&(q.global_id, &q.sources, q.start_frame, q.kind, q.end_frame, &q.nodes))
    });
    let mut taken = vec![false; truth.len()];
    let mut m = Matching::default();
    for &i in &order {
        let p = &predicted[i];
        let best = truth
            .iter()
            .enumerate()
            .filter(|&(j, t)| !taken[j] && same_agent(p, t) && overlaps(p, t, frame_tol))
            .min_by_key(|&(j, t)| (t.kind != p.kind, p.start_frame.abs_diff(t.start), j));
        match best {
            Some((j, _)) => {
                taken[j] = true;
                m.tp += 1;
                m.pairs.push((i, j));
            }
            None => {
                m.fp += 1;
                *m.fp_by_kind.entry(p.kind).or_default() += 1;
            }
        }
    }
    m.pairs.sort_unstable();
    let matched: BTreeMap<usize, AnomalyKind> = m.pairs.iter().map(|&(i, j)| (j, predicted[i].kind)).collect();
    for (j, t) in truth.iter().enumerate() {
        let pred = matched.get(&j).copied();
        *m.confusion.entry(t.kind).or_default().entry(pred).or_default() += 1;
    }
    m.fn_ = truth.len() - m.tp;
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindReport {
    pub truths: usize,
    /// Truths matched by a prediction of any kind.
    pub detected: usize,
    /// Truths matched by a prediction of their own kind.
    pub correct: usize,
    /// `correct / truths`.
    pub accuracy: f64,
    /// `correct / detected`.
    pub accuracy_detected: f64,
    /// Unmatched predictions of this kind.
    pub fp: usize,
    /// `fp / truths`.
    pub fp_per_truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_kind: BTreeMap<AnomalyKind, KindReport>,
    pub params: BTreeMap<String, String>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Precision, recall, F1; zero wherever a denominator is zero.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

pub fn compute_report(m: &Matching, params: BTreeMap<String, String>) -> EvalReport {
    let (precision, recall, f1) = prf(m.tp, m.fp, m.fn_);
    let mut per_kind = BTreeMap::new();
    for kind in AnomalyKind::ALL {
        let row = m.confusion.get(&kind);
        let truths: usize = row.map(|r| r.values().sum()).unwrap_or(0);
        let missed = row.and_then(|r| r.get(&None)).copied().unwrap_or(0);
        let correct = row.and_then(|r| r.get(&Some(kind))).copied().unwrap_or(0);
        let detected = truths - missed;
        let fp = m.fp_by_kind.get(&kind).copied().unwrap_or(0);
        per_kind.insert(
            kind,
            KindReport {
                truths,
                detected,
                correct,
                accuracy: ratio(correct, truths),
                accuracy_detected: ratio(correct, detected),
                fp,
                fp_per_truth: ratio(fp, truths),
            },
        );
    }
    EvalReport {
        tp: m.tp,
        fp: m.fp,
        fn_: m.fn_,
        precision,
        recall,
        f1,
        per_kind,
        params,
    }
}

impl EvalReport {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
