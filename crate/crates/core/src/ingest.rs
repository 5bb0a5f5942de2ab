//! Tracked-detection ingestion.
//!
//! Input is one JSON detection per line, as produced by a per-camera
//! detector/tracker running on the bird's-eye-view video. From there:
//!
//! 1. detections are grouped into per-camera [`Track`]s,
//! 2. tracks from cameras with overlapping fields of view are stitched into
//!    one track per physical agent,
//! 3. yaw flips are smoothed with a circular median,
//! 4. every track is compressed into per-patch [`NodeVisit`]s.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{angle_distance, iou, OrientedBox, Point2};
use crate::topology::{associate, IntersectionMap, PatchId};

pub type Frame = u64;
pub type CameraId = u32;

pub const DEFAULT_FPS: f64 = 10.0;
pub const DEFAULT_SMOOTHING_WINDOW: usize = 5;
pub const DEFAULT_STITCH_MAX_GAP: Frame = 15;
pub const DEFAULT_STITCH_MIN_IOU: f64 = 0.3;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: camera {camera} frame {frame} regresses from {previous}")]
    OutOfOrderFrame {
        line: usize,
        camera: CameraId,
        frame: Frame,
        previous: Frame,
    },
    #[error("camera {camera} track {track} has two detections at frame {frame}")]
    DuplicateSample {
        camera: CameraId,
        track: u64,
        frame: Frame,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
    Bicyclist,
}

impl AgentClass {
    pub const ALL: [AgentClass; 3] = [AgentClass::Vehicle, AgentClass::Pedestrian, AgentClass::Bicyclist];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentClass::Vehicle => "vehicle",
            AgentClass::Pedestrian => "pedestrian",
            AgentClass::Bicyclist => "bicyclist",
        }
    }
}

impl fmt::Display for AgentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub camera_id: CameraId,
    pub frame: Frame,
    pub track_id: u64,
    pub agent: AgentClass,
    pub bbox: OrientedBox,
    pub confidence: f64,
}

/// Wire form of one detection line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    camera: CameraId,
    frame: Frame,
    track: u64,
    class: AgentClass,
    cx: f64,
    cy: f64,
    len: f64,
    wid: f64,
    yaw: f64,
    conf: f64,
}

impl DetectionRecord {
    fn into_detection(self) -> Result<Detection, String> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("field `{name}` must be finite"))
            }
        };
        let cx = finite("cx", self.cx)?;
        let cy = finite("cy", self.cy)?;
        if !(self.len.is_finite() && self.len > 0.0) {
            return Err(format!("field `len` must be > 0, got {}", self.len));
        }
        if !(self.wid.is_finite() && self.wid > 0.0) {
            return Err(format!("field `wid` must be > 0, got {}", self.wid));
        }
        if !(-std::f64::consts::PI..std::f64::consts::PI).contains(&self.yaw) {
            return Err(format!("field `yaw` must be in [-pi, pi), got {}", self.yaw));
        }
        if !(0.0..=1.0).contains(&self.conf) {
            return Err(format!("field `conf` must be in [0, 1], got {}", self.conf));
        }
        let bbox = OrientedBox::new(Point2::new(cx, cy), self.len, self.wid, self.yaw)
            .map_err(|e| e.to_string())?;
        Ok(Detection {
            camera_id: self.camera,
            frame: self.frame,
            track_id: self.track,
            agent: self.class,
            bbox,
            confidence: self.conf,
        })
    }

    fn from_detection(d: &Detection) -> Self {
        Self {
            camera: d.camera_id,
            frame: d.frame,
            track: d.track_id,
            class: d.agent,
            cx: d.bbox.center.x,
            cy: d.bbox.center.y,
            len: d.bbox.length,
            wid: d.bbox.width,
            yaw: d.bbox.yaw,
            conf: d.confidence,
        }
    }
}

/// Parses detection JSONL. Blank lines are skipped; line numbers are 1-based.
pub fn read_detections<R: BufRead>(reader: R) -> Result<Vec<Detection>, IngestError> {
    let mut out = Vec::new();
    let mut last_frame: BTreeMap<CameraId, Frame> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| IngestError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let det = rec.into_detection().map_err(|message| IngestError::Parse {
            line: line_no,
            message,
        })?;
        if let Some(&prev) = last_frame.get(&det.camera_id) {
            if det.frame < prev {
                return Err(IngestError::OutOfOrderFrame {
                    line: line_no,
                    camera: det.camera_id,
                    frame: det.frame,
                    previous: prev,
                });
            }
        }
        last_frame.insert(det.camera_id, det.frame);
        out.push(det);
    }
    Ok(out)
}

pub fn write_detection<W: Write>(w: &mut W, d: &Detection) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, &DetectionRecord::from_detection(d))?;
    w.write_all(b"\n")
}

pub fn write_detections<W: Write>(mut w: W, dets: &[Detection]) -> std::io::Result<()> {
    for d in dets {
        write_detection(&mut w, d)?;
    }
    w.flush()
}

/// A per-camera track key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceKey(pub CameraId, pub u64);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSample {
    pub frame: Frame,
    pub bbox: OrientedBox,
    pub camera: CameraId,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub global_id: u64,
    pub agent: AgentClass,
    /// Strictly increasing in frame.
    pub samples: Vec<TrackSample>,
    /// Per-camera tracks this one was built from, in chronological order.
    pub sources: Vec<SourceKey>,
}

impl Track {
    pub fn first_frame(&self) -> Frame {
        self.samples[0].frame
    }

    pub fn last_frame(&self) -> Frame {
        self.samples[self.samples.len() - 1].frame
    }

    /// The sample whose frame is closest to `frame`; earlier wins ties.
    fn sample_near(&self, frame: Frame) -> &TrackSample {
        let idx = self.samples.partition_point(|s| s.frame < frame);
        if idx == 0 {
            return &self.samples[0];
        }
        if idx == self.samples.len() {
            return &self.samples[idx - 1];
        }
        let (a, b) = (&self.samples[idx - 1], &self.samples[idx]);
        if frame - a.frame <= b.frame - frame {
            a
        } else {
            b
        }
    }
}

/// Groups detections into per-camera tracks ordered by `(camera, track)`.
///
/// A track's class is the majority class of its detections (ties go to the
/// earlier variant of [`AgentClass`]). `global_id` is the position in the
/// returned list.
pub fn build_tracks(dets: &[Detection]) -> Result<Vec<Track>, IngestError> {
    let mut groups: BTreeMap<SourceKey, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        groups.entry(SourceKey(d.camera_id, d.track_id)).or_default().push(d);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (i, (key, mut ds)) in groups.into_iter().enumerate() {
        ds.sort_by_key(|d| d.frame);
        let mut votes: BTreeMap<AgentClass, usize> = BTreeMap::new();
        let mut samples = Vec::with_capacity(ds.len());
        for d in &ds {
            if samples.last().is_some_and(|s: &TrackSample| s.frame == d.frame) {
                return Err(IngestError::DuplicateSample {
                    camera: key.0,
                    track: key.1,
                    frame: d.frame,
                });
            }
            *votes.entry(d.agent).or_default() += 1;
            samples.push(TrackSample {
                frame: d.frame,
                bbox: d.bbox,
                camera: d.camera_id,
                confidence: d.confidence,
            });
        }
        let best = votes.values().copied().max().unwrap_or(0);
        let agent = votes
            .into_iter()
            .find(|&(_, n)| n == best)
            .map(|(c, _)| c)
            .expect("non-empty group");
        out.push(Track {
            global_id: i as u64,
            agent,
            samples,
            sources: vec![key],
        });
    }
    Ok(out)
}

/// Replaces each yaw with the circular median of the yaws in a centered
/// window (truncated at the ends). Positions are untouched.
///
/// The circular median is the window member minimizing the summed angular
/// distance to all members. Ties prefer the member closest to the sample's
/// own yaw, then the earliest. An even `window` behaves like `window + 1`.
pub fn smooth_orientation(track: &Track, window: usize) -> Track {
    let half = window / 2;
    let mut out = track.clone();
    if half == 0 {
        return out;
    }
    let yaws: Vec<f64> = track.samples.iter().map(|s| s.bbox.yaw).collect();
    for (i, s) in out.samples.iter_mut().enumerate() {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(yaws.len() - 1);
        let win = &yaws[lo..=hi];
        let own = yaws[i];
        let mut best = (f64::INFINITY, f64::INFINITY, own);
        for &cand in win {
            let cost: f64 = win.iter().map(|&y| angle_distance(cand, y)).sum();
            let to_own = angle_distance(cand, own);
            if cost < best.0 - 1e-12 || ((cost - best.0).abs() <= 1e-12 && to_own < best.1) {
                best = (cost, to_own, cand);
            }
        }
        s.bbox.yaw = best.2;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StitchParams {
    pub max_gap: Frame,
    pub min_iou: f64,
}

impl Default for StitchParams {
    fn default() -> Self {
        Self {
            max_gap: DEFAULT_STITCH_MAX_GAP,
            min_iou: DEFAULT_STITCH_MIN_IOU,
        }
    }
}

/// Merges per-camera tracks of the same agent across overlapping fields of
/// view.
///
/// Tracks are visited in order of `(first frame, camera, track id)`. A track
/// B continues the chain whose tail A (from another camera, same class) ends
/// at `f` when B starts in `(f - max_gap, f + max_gap]` and B's first box
/// overlaps A's box nearest to B's start frame with IoU ≥ `min_iou`. The best
/// IoU wins. On frames covered by more than one camera the higher-confidence
/// sample is kept (lower camera id on ties); superseded samples are dropped.
/// Output tracks get fresh sequential ids in order of first frame.
pub fn stitch_tracks(tracks: &[Track], params: StitchParams) -> Vec<Track> {
    let mut order: Vec<&Track> = tracks.iter().filter(|t| !t.samples.is_empty()).collect();
    order.sort_by_key(|t| (t.first_frame(), t.samples[0].camera, t.sources.first().copied()));

    struct Chain<'a> {
        parts: Vec<&'a Track>,
    }
    let mut chains: Vec<Chain> = Vec::new();
    for b in order {
        let b_start = b.first_frame();
        let b_cam = b.samples[0].camera;
        let b_first = b.samples[0].bbox.footprint();
        let mut best: Option<(usize, f64)> = None;
        for (ci, chain) in chains.iter().enumerate() {
            let a = *chain.parts.last().expect("chains are never empty");
            if a.agent != b.agent || a.samples[a.samples.len() - 1].camera == b_cam {
                continue;
            }
            let f = a.last_frame();
            let lower_ok = b_start + params.max_gap > f;
            let upper_ok = b_start <= f + params.max_gap;
            if !(lower_ok && upper_ok) {
                continue;
            }
            let near = a.sample_near(b_start);
            let Ok(v) = iou(&near.bbox.footprint(), &b_first) else {
                continue;
            };
            if v >= params.min_iou && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((ci, v));
            }
        }
        match best {
            Some((ci, _)) => chains[ci].parts.push(b),
            None => chains.push(Chain { parts: vec![b] }),
        }
    }

    chains
        .into_iter()
        .enumerate()
        .map(|(gid, chain)| {
            let mut by_frame: BTreeMap<Frame, TrackSample> = BTreeMap::new();
            let mut sources = Vec::new();
            for part in &chain.parts {
                sources.extend(part.sources.iter().copied());
                for s in &part.samples {
                    by_frame
                        .entry(s.frame)
                        .and_modify(|cur| {
                            let better = s.confidence > cur.confidence
                                || (s.confidence == cur.confidence && s.camera < cur.camera);
                            if better {
                                *cur = *s;
                            }
                        })
                        .or_insert(*s);
                }
            }
            Track {
                global_id: gid as u64,
                agent: chain.parts[0].agent,
                samples: by_frame.into_values().collect(),
                sources,
            }
        })
        .collect()
}

/// A maximal run of frames one agent spends associated with one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeVisit {
    pub global_id: u64,
    pub agent: AgentClass,
    pub node: PatchId,
    pub enter_frame: Frame,
    /// Inclusive.
    pub exit_frame: Frame,
}

impl NodeVisit {
    pub fn dwell(&self) -> u64 {
        self.exit_frame - self.enter_frame + 1
    }
}

/// Run-length compresses per-frame patch association.
///
/// Missing frames (detector dropouts) do not break a run; a sample that
/// associates with no patch does.
pub fn to_visits(track: &Track, map: &IntersectionMap, min_iou: f64) -> Vec<NodeVisit> {
    let mut out = Vec::new();
    let mut cur: Option<NodeVisit> = None;
    for s in &track.samples {
        match associate(&s.bbox, map, min_iou) {
            Some(node) => match cur.as_mut() {
                Some(v) if v.node == node => v.exit_frame = s.frame,
                _ => {
                    out.extend(cur.take());
                    cur = Some(NodeVisit {
                        global_id: track.global_id,
                        agent: track.agent,
                        node,
                        enter_frame: s.frame,
                        exit_frame: s.frame,
                    });
                }
            },
            None => out.extend(cur.take()),
        }
    }
    out.extend(cur);
    out
}

/// Like [`to_visits`], but a change of association (to another patch or to
/// none) takes effect only once `min_samples` consecutive samples agree.
/// Shorter excursions are absorbed into the visit in progress. Samples
/// before the first settled association are attributed to it.
/// `min_samples <= 1` is exactly [`to_visits`].
pub fn to_visits_debounced(track: &Track, map: &IntersectionMap, min_iou: f64, min_samples: usize) -> Vec<NodeVisit> {
    if min_samples <= 1 {
        return to_visits(track, map, min_iou);
    }
    let assoc: Vec<(Frame, Option<PatchId>)> = track
        .samples
        .iter()
        .map(|s| (s.frame, associate(&s.bbox, map, min_iou)))
        .collect();
    // Runs of identical association: (node, first index, last index).
    let mut runs: Vec<(Option<PatchId>, usize, usize)> = Vec::new();
    for (i, &(_, n)) in assoc.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.0 == n => r.2 = i,
            _ => runs.push((n, i, i)),
        }
    }
    let mut out: Vec<NodeVisit> = Vec::new();
    let mut cur: Option<PatchId> = None;
    let mut settled = false;
    for &(node, a, b) in &runs {
        let long = b - a + 1 >= min_samples;
        if !settled {
            if long {
                settled = true;
                cur = node;
                if let Some(n) = node {
                    out.push(NodeVisit {
                        global_id: track.global_id,
                        agent: track.agent,
                        node: n,
                        enter_frame: assoc[0].0,
                        exit_frame: assoc[b].0,
                    });
                }
            }
            continue;
        }
        if node == cur || !long {
            if let (Some(_), Some(v)) = (cur, out.last_mut()) {
                v.exit_frame = assoc[b].0;
            }
            continue;
        }
        cur = node;
        if let Some(n) = node {
            out.push(NodeVisit {
                global_id: track.global_id,
                agent: track.agent,
                node: n,
                enter_frame: assoc[a].0,
                exit_frame: assoc[b].0,
            });
        }
    }
    if !settled {
        // Never settled: fall back to the literal runs.
        return to_visits(track, map, min_iou);
    }
    out
}

/// Parameters of the detections → tracks → visits chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestParams {
    pub smoothing_window: usize,
    pub stitch: StitchParams,
    pub assoc_min_iou: f64,
    /// Debounce for visit extraction; 1 keeps the literal per-frame runs.
    pub min_visit_samples: usize,
}

impl Default for IngestParams {
    fn default() -> Self {
        Self {
            smoothing_window: DEFAULT_SMOOTHING_WINDOW,
            stitch: StitchParams::default(),
            assoc_min_iou: crate::topology::DEFAULT_MIN_IOU,
            min_visit_samples: 1,
        }
    }
}

/// Builds, stitches, and smooths tracks from raw detections.
pub fn tracks_from_detections(dets: &[Detection], params: &IngestParams) -> Result<Vec<Track>, IngestError> {
    let per_camera = build_tracks(dets)?;
    Ok(stitch_tracks(&per_camera, params.stitch)
        .iter()
        .map(|t| smooth_orientation(t, params.smoothing_window))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ConvexPolygon;
    use crate::topology::{Patch, PatchClass};
    use std::f64::consts::PI;

    fn line(camera: u32, frame: u64, track: u64, cx: f64, yaw: f64) -> String {
        format!(
            r#"{{"camera": {camera}, "frame": {frame}, "track": {track}, "class": "vehicle", "cx": {cx}, "cy": 0.0, "len": 4.5, "wid": 1.8, "yaw": {yaw}, "conf": 0.9}}"#
        )
    }

    #[test]
    fn reads_well_formed_lines() {
        let text = [line(0, 1, 7, 0.0, 0.0), line(0, 2, 7, 1.0, 0.0), String::new(), line(1, 0, 3, 5.0, 0.5)]
            .join("\n");
        let dets = read_detections(text.as_bytes()).unwrap();
        assert_eq!(dets.len(), 3);
        assert_eq!(dets[2].camera_id, 1);
        assert_eq!(dets[2].bbox.yaw, 0.5);
    }

    #[test]
    fn bad_yaw_names_the_field() {
        let text = line(0, 1, 7, 0.0, 7.0);
        match read_detections(text.as_bytes()) {
            Err(IngestError::Parse { line, message }) => {
                assert_eq!(line, 1);
                assert!(message.contains("yaw"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{\"camera\": 0", line(0, 1, 7, 0.0, 0.0));
        assert!(matches!(
            read_detections(text.as_bytes()),
            Err(IngestError::Parse { line: 2, .. })
        ));
        let extra = line(0, 1, 7, 0.0, 0.0).replace("}", ", \"speed\": 3}");
        assert!(read_detections(extra.as_bytes()).is_err());
    }

    #[test]
    fn frame_regression_is_rejected_per_camera() {
        let ok = [line(0, 5, 1, 0.0, 0.0), line(1, 2, 1, 0.0, 0.0), line(0, 5, 2, 0.0, 0.0)].join("\n");
        assert!(read_detections(ok.as_bytes()).is_ok());
        let bad = [line(0, 5, 1, 0.0, 0.0), line(0, 4, 1, 0.0, 0.0)].join("\n");
        assert!(matches!(
            read_detections(bad.as_bytes()),
            Err(IngestError::OutOfOrderFrame { line: 2, frame: 4, previous: 5, .. })
        ));
    }

    #[test]
    fn build_tracks_groups_and_rejects_duplicates() {
        let text = [line(0, 1, 7, 0.0, 0.0), line(0, 1, 8, 9.0, 0.0), line(0, 2, 7, 1.0, 0.0)].join("\n");
        let tracks = build_tracks(&read_detections(text.as_bytes()).unwrap()).unwrap();
        assert_eq!(tracks.len(), 2);
        assert_eq!(tracks[0].samples.len(), 2);
        assert_eq!(tracks[0].sources, vec![SourceKey(0, 7)]);

        let dup = [line(0, 1, 7, 0.0, 0.0), line(0, 1, 7, 1.0, 0.0)].join("\n");
        let dets = read_detections(dup.as_bytes()).unwrap();
        assert!(matches!(build_tracks(&dets), Err(IngestError::DuplicateSample { .. })));
    }

    fn track_with_yaws(yaws: &[f64]) -> Track {
        Track {
            global_id: 0,
            agent: AgentClass::Vehicle,
            samples: yaws
                .iter()
                .enumerate()
                .map(|(i, &y)| TrackSample {
                    frame: i as u64,
                    bbox: OrientedBox::new(Point2::new(i as f64 * 0.37, 1.0 / 3.0), 4.5, 1.8, y).unwrap(),
                    camera: 0,
                    confidence: 0.9,
                })
                .collect(),
            sources: vec![SourceKey(0, 0)],
        }
    }

    #[test]
    fn smoothing_examples() {
        let constant = track_with_yaws(&[0.3; 8]);
        assert_eq!(smooth_orientation(&constant, 5), constant);

        let t = track_with_yaws(&[0.1, -2.0, 3.0, 0.4]);
        assert_eq!(smooth_orientation(&t, 1), t);

        let spike = track_with_yaws(&[0.0, 0.0, PI / 2.0, 0.0, 0.0]);
        let s = smooth_orientation(&spike, 5);
        assert_eq!(s.samples[2].bbox.yaw, 0.0);
        for (a, b) in s.samples.iter().zip(&spike.samples) {
            assert_eq!(a.bbox.center.x.to_bits(), b.bbox.center.x.to_bits());
            assert_eq!(a.bbox.center.y.to_bits(), b.bbox.center.y.to_bits());
        }
    }

    #[test]
    fn smoothing_removes_flip_across_wraparound() {
        // heading near ±π with one π flip
        let t = track_with_yaws(&[3.1, -3.1, 3.12, -0.03, 3.13, -3.12, 3.1]);
        let s = smooth_orientation(&t, 5);
        assert!(s.samples.iter().all(|x| angle_distance(x.bbox.yaw, PI) < 0.1));
    }

    /// Enumerates every window member and returns the one with minimal summed
    /// circular distance.
    fn brute_circular_median(win: &[f64]) -> f64 {
        let costs: Vec<f64> = win
            .iter()
            .map(|&c| win.iter().map(|&y| wrap_diff(c, y)).sum())
            .collect();
        let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        win[costs.iter().position(|&c| c == min).unwrap()]
    }

    fn wrap_diff(a: f64, b: f64) -> f64 {
        let d = (a - b).abs() % (2.0 * PI);
        d.min(2.0 * PI - d)
    }

    #[test]
    fn smoothing_middle_sample_matches_enumeration() {
        let yaws = [0.0, 0.0, PI / 2.0, 0.0, 0.0];
        assert_eq!(brute_circular_median(&yaws), 0.0);
        let yaws = [1.0, 1.2, -2.0, 1.1, 0.9];
        let s = smooth_orientation(&track_with_yaws(&yaws), 5);
        assert_eq!(s.samples[2].bbox.yaw, brute_circular_median(&yaws));
    }

    fn cam_track(camera: u32, id: u64, agent: AgentClass, frames: std::ops::RangeInclusive<u64>, x_of: impl Fn(u64) -> f64, conf: f64) -> Track {
        Track {
            global_id: 0,
            agent,
            samples: frames
                .map(|f| TrackSample {
                    frame: f,
                    bbox: OrientedBox::new(Point2::new(x_of(f), 0.0), 4.5, 1.8, 0.0).unwrap(),
                    camera,
                    confidence: conf,
                })
                .collect(),
            sources: vec![SourceKey(camera, id)],
        }
    }

    #[test]
    fn stitch_single_track_passes_through() {
        let t = cam_track(0, 42, AgentClass::Vehicle, 5..=9, |f| f as f64, 0.9);
        let out = stitch_tracks(std::slice::from_ref(&t), StitchParams::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].global_id, 0);
        assert_eq!(out[0].samples, t.samples);
    }

    #[test]
    fn stitch_merges_crossing_vehicle() {
        // camera 0 sees x <= 20, camera 1 sees x >= 18; 0.5 m per frame
        let x = |f: u64| f as f64 * 0.5;
        let a = cam_track(0, 1, AgentClass::Vehicle, 0..=40, x, 0.8);
        let b = cam_track(1, 9, AgentClass::Vehicle, 36..=80, x, 0.9);
        let out = stitch_tracks(&[b.clone(), a.clone()], StitchParams::default());
        assert_eq!(out.len(), 1);
        let t = &out[0];
        assert_eq!(t.first_frame(), 0);
        assert_eq!(t.last_frame(), 80);
        assert_eq!(t.samples.len(), 81);
        assert_eq!(t.sources, vec![SourceKey(0, 1), SourceKey(1, 9)]);
        // the overlap frames come from the more confident camera
        assert!(t.samples.iter().filter(|s| (36..=40).contains(&s.frame)).all(|s| s.camera == 1));
    }

    #[test]
    fn stitch_keeps_disjoint_vehicles_apart() {
        let a = cam_track(0, 1, AgentClass::Vehicle, 0..=40, |f| f as f64 * 0.5, 0.8);
        // laterally offset 3 m: boxes never overlap
        let mut b = cam_track(1, 2, AgentClass::Vehicle, 36..=80, |f| f as f64 * 0.5, 0.9);
        for s in &mut b.samples {
            s.bbox.center.y = 3.0;
        }
        assert_eq!(iou(&a.samples[36].bbox.footprint(), &b.samples[0].bbox.footprint()).unwrap(), 0.0);
        assert_eq!(stitch_tracks(&[a, b], StitchParams::default()).len(), 2);
    }

    #[test]
    fn stitch_never_merges_different_classes_or_far_gaps() {
        let x = |f: u64| f as f64 * 0.5;
        let a = cam_track(0, 1, AgentClass::Vehicle, 0..=40, x, 0.8);
        let b = cam_track(1, 2, AgentClass::Bicyclist, 36..=80, x, 0.9);
        assert_eq!(stitch_tracks(&[a.clone(), b], StitchParams::default()).len(), 2);
        // starts 16 frames after the end: outside the window
        let c = cam_track(1, 3, AgentClass::Vehicle, 56..=80, |_| 20.0, 0.9);
        assert_eq!(stitch_tracks(&[a, c], StitchParams::default()).len(), 2);
    }

    fn strip_map() -> IntersectionMap {
        let rect = |x0: f64, x1: f64| {
            ConvexPolygon::new(vec![
                Point2::new(x0, -2.0),
                Point2::new(x1, -2.0),
                Point2::new(x1, 2.0),
                Point2::new(x0, 2.0),
            ])
            .unwrap()
        };
        let patches = [(1, 0.0, 10.0), (2, 10.0, 20.0), (5, 20.0, 30.0)]
            .into_iter()
            .map(|(id, a, b)| Patch {
                id,
                class: PatchClass::Road,
                shape: rect(a, b),
                label: None,
            })
            .collect();
        IntersectionMap::new(patches, None, None).unwrap()
    }

    fn moving_track(points: &[(u64, f64, f64)]) -> Track {
        Track {
            global_id: 3,
            agent: AgentClass::Vehicle,
            samples: points
                .iter()
                .map(|&(f, x, y)| TrackSample {
                    frame: f,
                    bbox: OrientedBox::new(Point2::new(x, y), 2.0, 1.0, 0.0).unwrap(),
                    camera: 0,
                    confidence: 1.0,
                })
                .collect(),
            sources: vec![SourceKey(0, 3)],
        }
    }

    #[test]
    fn visits_inside_one_patch() {
        let map = strip_map();
        let pts: Vec<_> = (10..=20).map(|f| (f, 12.0 + (f - 10) as f64 * 0.1, 0.0)).collect();
        let v = to_visits(&moving_track(&pts), &map, 0.05);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].node, v[0].enter_frame, v[0].exit_frame), (2, 10, 20));
        let outside: Vec<_> = (0..5).map(|f| (f, 100.0, 100.0)).collect();
        assert!(to_visits(&moving_track(&outside), &map, 0.05).is_empty());
    }

    #[test]
    fn visits_across_three_patches() {
        // dwell 30 in patch 1, 12 in patch 2, 44 in patch 5
        let map = strip_map();
        let mut pts = Vec::new();
        for f in 0..30 {
            pts.push((f, 5.0, 0.0));
        }
        for f in 30..42 {
            pts.push((f, 15.0, 0.0));
        }
        for f in 42..86 {
            pts.push((f, 25.0, 0.0));
        }
        let v = to_visits(&moving_track(&pts), &map, 0.05);
        let spans: Vec<_> = v.iter().map(|x| (x.node, x.enter_frame, x.exit_frame, x.dwell())).collect();
        assert_eq!(spans, vec![(1, 0, 29, 30), (2, 30, 41, 12), (5, 42, 85, 44)]);
    }

    #[test]
    fn dropout_keeps_run_but_failed_association_splits_it() {
        let map = strip_map();
        let gap = moving_track(&[(0, 5.0, 0.0), (1, 5.0, 0.0), (7, 5.0, 0.0)]);
        assert_eq!(to_visits(&gap, &map, 0.05).len(), 1);
        let out = moving_track(&[(0, 5.0, 0.0), (1, 5.0, 50.0), (2, 5.0, 0.0)]);
        let v = to_visits(&out, &map, 0.05);
        assert_eq!(v.len(), 2);
        assert_eq!((v[1].enter_frame, v[1].exit_frame), (2, 2));
    }

    fn spans(v: &[NodeVisit]) -> Vec<(PatchId, Frame, Frame)> {
        v.iter().map(|x| (x.node, x.enter_frame, x.exit_frame)).collect()
    }

    #[test]
    fn debounce_absorbs_short_excursions() {
        let map = strip_map();
        // patch 1 ×3, patch 2 ×1, patch 1 ×3, nowhere ×2, patch 1 ×1, patch 5 ×3
        let xs = [5.0, 5.0, 5.0, 15.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 25.0, 25.0, 25.0];
        let mut pts: Vec<_> = xs.iter().enumerate().map(|(f, &x)| (f as u64, x, 0.0)).collect();
        pts[7].2 = 50.0;
        pts[8].2 = 50.0;
        let t = moving_track(&pts);
        assert_eq!(to_visits(&t, &map, 0.05).len(), 5);
        assert_eq!(to_visits_debounced(&t, &map, 0.05, 1), to_visits(&t, &map, 0.05));
        assert_eq!(spans(&to_visits_debounced(&t, &map, 0.05, 3)), [(1, 0, 9), (5, 10, 12)]);
    }

    #[test]
    fn debounce_leading_samples_and_long_gaps() {
        let map = strip_map();
        // a short leading run is attributed to the first settled patch
        let t = moving_track(&[(0, 15.0, 0.0), (1, 5.0, 0.0), (2, 5.0, 0.0), (3, 5.0, 0.0)]);
        assert_eq!(spans(&to_visits_debounced(&t, &map, 0.05, 3)), [(1, 0, 3)]);
        // a settled stretch with no association ends the visit
        let mut pts: Vec<_> = (0..3).map(|f| (f, 5.0, 0.0)).collect();
        pts.extend((3..6).map(|f| (f, 5.0, 50.0)));
        pts.extend((6..9).map(|f| (f, 5.0, 0.0)));
        let v = to_visits_debounced(&moving_track(&pts), &map, 0.05, 3);
        assert_eq!(spans(&v), [(1, 0, 2), (1, 6, 8)]);
        // too short to ever settle: literal runs
        let t = moving_track(&[(0, 5.0, 0.0), (1, 15.0, 0.0)]);
        assert_eq!(to_visits_debounced(&t, &map, 0.05, 3), to_visits(&t, &map, 0.05));
    }

    #[test]
    fn round_trip_through_jsonl() {
        let text = [line(0, 1, 7, 0.25, -3.0), line(2, 9, 1, -1e-7, 3.1)].join("\n");
        let dets = read_detections(text.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_detections(&mut buf, &dets).unwrap();
        assert_eq!(read_detections(buf.as_slice()).unwrap(), dets);
    }
}
