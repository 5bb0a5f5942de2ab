//! Streaming anomaly classification against a frozen [`BehaviorModel`].
//!
//! Three rules, evaluated in this order on every frame:
//!
//! * zone: the agent class is not permitted on the node,
//! * turn: the node change is not a permitted successor,
//! * stop: the current dwell exceeds `margin × T_avg`.
//!
//! Every event carries the operands the rule was evaluated on, so it can be
//! re-checked from the event alone.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::BehaviorModel;
use crate::ingest::{AgentClass, Frame, NodeVisit, SourceKey};
use crate::topology::PatchId;

pub const DEFAULT_STOP_MARGIN: f64 = 3.0;
/// Coverage gaps longer than this are not checked for improper turns.
pub const TURN_GAP_FRAMES: Frame = 30;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("node {0} is not in the model")]
    UnknownNode(PatchId),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    ImproperTurn,
    ImproperZone,
    UnlawfulStop,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::ImproperTurn, AnomalyKind::ImproperZone, AnomalyKind::UnlawfulStop];

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::ImproperTurn => "improper_turn",
            AnomalyKind::ImproperZone => "improper_zone",
            AnomalyKind::UnlawfulStop => "unlawful_stop",
        }
    }

    /// Wire name of the rule that classifies this kind.
    pub fn rule(self) -> RuleId {
        match self {
            AnomalyKind::ImproperTurn => RuleId::Successor,
            AnomalyKind::ImproperZone => RuleId::AgentClass,
            AnomalyKind::UnlawfulStop => RuleId::Dwell,
        }
    }
}

impl std::fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleId {
    #[serde(rename = "eq1")]
    Successor,
    #[serde(rename = "eq2")]
    AgentClass,
    #[serde(rename = "eq3")]
    Dwell,
}

impl RuleId {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleId::Successor => "eq1",
            RuleId::AgentClass => "eq2",
            RuleId::Dwell => "eq3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnOperands {
    pub from: PatchId,
    pub to: PatchId,
    #[serde(rename = "S_from")]
    pub successors: Vec<PatchId>,
    /// Learned weight of `from → to`, absent if the link was never seen.
    pub weight: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneOperands {
    pub node: PatchId,
    pub agent: AgentClass,
    #[serde(rename = "A_node")]
    pub allowed: Vec<AgentClass>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DwellSource {
    /// Mean dwell of this agent class at the node.
    Class,
    /// Class-collapsed mean at the node.
    Node,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopOperands {
    pub node: PatchId,
    pub agent: AgentClass,
    pub dwell: u64,
    #[serde(rename = "T_avg")]
    pub t_avg: f64,
    pub t_avg_source: DwellSource,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operands {
    Turn(TurnOperands),
    Zone(ZoneOperands),
    Stop(StopOperands),
}

impl Operands {
    /// Re-evaluates the rule from the operands alone.
    pub fn violated(&self) -> bool {
        match self {
            Operands::Turn(t) => !t.successors.contains(&t.to),
            Operands::Zone(z) => !z.allowed.contains(&z.agent),
            Operands::Stop(s) => s.dwell as f64 > s.margin * s.t_avg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detail {
    pub rule: RuleId,
    pub operands: Operands,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyEvent {
    #[serde(rename = "id")]
    pub global_id: u64,
    #[serde(rename = "class")]
    pub agent: AgentClass,
    pub kind: AnomalyKind,
    pub nodes: Vec<PatchId>,
    #[serde(rename = "start")]
    pub start_frame: Frame,
    #[serde(rename = "end")]
    pub end_frame: Frame,
    pub detail: Detail,
    /// Per-camera tracks of the agent.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceKey>,
}

fn fmt_set<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::from("{");
    for (i, x) in items.into_iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{x}");
    }
    s.push('}');
    s
}

fn node_model(model: &BehaviorModel, node: PatchId) -> Result<&crate::behavior::NodeModel, RuleError> {
    model.node(node).ok_or(RuleError::UnknownNode(node))
}

pub fn check_turn(model: &BehaviorModel, from: PatchId, to: PatchId) -> Result<Option<AnomalyKind>, RuleError> {
    Ok(turn_operands(model, from, to)?.map(|_| AnomalyKind::ImproperTurn))
}

fn turn_operands(model: &BehaviorModel, from: PatchId, to: PatchId) -> Result<Option<TurnOperands>, RuleError> {
    let n = node_model(model, from)?;
    node_model(model, to)?;
    if from == to || n.successors.contains(&to) {
        return Ok(None);
    }
    Ok(Some(TurnOperands {
        from,
        to,
        successors: n.successors.iter().copied().collect(),
        weight: n.weights.get(&to).copied(),
    }))
}

pub fn check_zone(model: &BehaviorModel, node: PatchId, agent: AgentClass) -> Result<Option<AnomalyKind>, RuleError> {
    Ok(zone_operands(model, node, agent)?.map(|_| AnomalyKind::ImproperZone))
}

fn zone_operands(model: &BehaviorModel, node: PatchId, agent: AgentClass) -> Result<Option<ZoneOperands>, RuleError> {
    let n = node_model(model, node)?;
    if n.allowed.contains(&agent) {
        return Ok(None);
    }
    Ok(Some(ZoneOperands {
        node,
        agent,
        allowed: n.allowed.iter().copied().collect(),
    }))
}

/// Reference dwell for `agent` at `node`: the class mean, else the
/// class-collapsed node mean.
pub fn reference_dwell(model: &BehaviorModel, node: PatchId, agent: AgentClass) -> Result<Option<(f64, DwellSource)>, RuleError> {
    let n = node_model(model, node)?;
    Ok(match n.t_avg.get(&agent) {
        Some(&t) => Some((t, DwellSource::Class)),
        None => n.t_avg_all.map(|t| (t, DwellSource::Node)),
    })
}

/// An open visit as seen by the stop rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpenVisit {
    pub node: PatchId,
    pub agent: AgentClass,
    pub enter_frame: Frame,
    pub current_frame: Frame,
}

pub fn check_stop(model: &BehaviorModel, visit: OpenVisit, margin: f64) -> Result<Option<AnomalyKind>, RuleError> {
    Ok(stop_operands(model, visit, margin)?.map(|_| AnomalyKind::UnlawfulStop))
}

fn stop_operands(model: &BehaviorModel, v: OpenVisit, margin: f64) -> Result<Option<StopOperands>, RuleError> {
    debug_assert!(v.current_frame >= v.enter_frame);
    let Some((t_avg, source)) = reference_dwell(model, v.node, v.agent)? else {
        return Ok(None);
    };
    let dwell = v.current_frame - v.enter_frame + 1;
    if dwell as f64 > margin * t_avg {
        Ok(Some(StopOperands {
            node: v.node,
            agent: v.agent,
            dwell,
            t_avg,
            t_avg_source: source,
            margin,
        }))
    } else {
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy)]
struct Current {
    node: PatchId,
    enter: Frame,
    stop_fired: bool,
}

/// Per-track streaming detector.
///
/// Feed it visit starts, frame ticks, and visit ends in frame order; events
/// are returned as soon as their rule is satisfied. Each visit yields at most
/// one zone and one stop event, each node change at most one turn event.
#[derive(Debug)]
pub struct TrackMonitor<'m> {
    model: &'m BehaviorModel,
    margin: f64,
    global_id: u64,
    agent: AgentClass,
    sources: Vec<SourceKey>,
    current: Option<Current>,
    previous: Option<(PatchId, Frame)>,
}

impl<'m> TrackMonitor<'m> {
    pub fn new(model: &'m BehaviorModel, global_id: u64, agent: AgentClass, margin: f64) -> Self {
        Self {
            model,
            margin,
            global_id,
            agent,
            sources: Vec::new(),
            current: None,
            previous: None,
        }
    }

    pub fn with_sources(mut self, sources: Vec<SourceKey>) -> Self {
        self.sources = sources;
        self
    }

    fn event(&self, kind: AnomalyKind, nodes: Vec<PatchId>, start: Frame, end: Frame, operands: Operands) -> AnomalyEvent {
        let text = match &operands {
            Operands::Turn(t) => format!(
                "node {} ∉ S(node {}) = {}",
                t.to,
                t.from,
                fmt_set(&t.successors)
            ),
            Operands::Zone(z) => format!(
                "{} ∉ A(node {}) = {}",
                z.agent,
                z.node,
                fmt_set(z.allowed.iter().map(|a| a.as_str()))
            ),
            Operands::Stop(s) => format!(
                "dwell {} frames in node {} > {} × T_avg {:.3} = {:.3}",
                s.dwell,
                s.node,
                s.margin,
                s.t_avg,
                s.margin * s.t_avg
            ),
        };
        AnomalyEvent {
            global_id: self.global_id,
            agent: self.agent,
            kind,
            nodes,
            start_frame: start,
            end_frame: end,
            detail: Detail {
                rule: kind.rule(),
                operands,
                text,
            },
            sources: self.sources.clone(),
        }
    }

    /// Opens a visit at `frame`, closing any open one at the previous frame.
    pub fn enter(&mut self, node: PatchId, frame: Frame) -> Result<Vec<AnomalyEvent>, RuleError> {
        if let Some(c) = self.current.take() {
            self.previous = Some((c.node, frame.saturating_sub(1).max(c.enter)));
        }
        let mut out = Vec::new();
        if let Some(z) = zone_operands(self.model, node, self.agent)? {
            out.push(self.event(AnomalyKind::ImproperZone, vec![node], frame, frame, Operands::Zone(z)));
        }
        if let Some((prev, exit)) = self.previous {
            let gap = frame.saturating_sub(exit + 1);
            if prev != node && gap <= TURN_GAP_FRAMES {
                if let Some(t) = turn_operands(self.model, prev, node)? {
                    out.push(self.event(AnomalyKind::ImproperTurn, vec![prev, node], exit, frame, Operands::Turn(t)));
                }
            }
        }
        self.current = Some(Current {
            node,
            enter: frame,
            stop_fired: false,
        });
        out.extend(self.tick(frame)?);
        Ok(out)
    }

    /// Evaluates the stop rule for the open visit at `frame`.
    pub fn tick(&mut self, frame: Frame) -> Result<Option<AnomalyEvent>, RuleError> {
        let Some(c) = self.current else {
            return Ok(None);
        };
        if c.stop_fired {
            return Ok(None);
        }
        let open = OpenVisit {
            node: c.node,
            agent: self.agent,
            enter_frame: c.enter,
            current_frame: frame,
        };
        let Some(s) = stop_operands(self.model, open, self.margin)? else {
            return Ok(None);
        };
        if let Some(cur) = self.current.as_mut() {
            cur.stop_fired = true;
        }
        Ok(Some(self.event(AnomalyKind::UnlawfulStop, vec![c.node], c.enter, frame, Operands::Stop(s))))
    }

    /// Closes the open visit; its last frame was `exit_frame`.
    pub fn leave(&mut self, exit_frame: Frame) {
        if let Some(c) = self.current.take() {
            self.previous = Some((c.node, exit_frame));
        }
    }

    /// Frame at which the stop rule would first fire for the open visit.
    fn stop_frame(&self) -> Result<Option<Frame>, RuleError> {
        let Some(c) = self.current else {
            return Ok(None);
        };
        let Some((t_avg, _)) = reference_dwell(self.model, c.node, self.agent)? else {
            return Ok(None);
        };
        // smallest dwell d with d > margin * t_avg
        let limit = self.margin * t_avg;
        let mut d = limit.floor().max(0.0) as u64;
        while d as f64 <= limit {
            d += 1;
        }
        Ok(Some(c.enter + d - 1))
    }
}

/// Runs one track's visits through a [`TrackMonitor`].
pub fn detect_stream(model: &BehaviorModel, visits: &[NodeVisit], margin: f64) -> Result<Vec<AnomalyEvent>, RuleError> {
    detect_visits(model, visits, margin, &[])
}

pub fn detect_visits(model: &BehaviorModel, visits: &[NodeVisit], margin: f64, sources: &[SourceKey]) -> Result<Vec<AnomalyEvent>, RuleError> {
    let Some(first) = visits.first() else {
        return Ok(Vec::new());
    };
    let mut mon = TrackMonitor::new(model, first.global_id, first.agent, margin).with_sources(sources.to_vec());
    let mut out = Vec::new();
    for v in visits {
        out.extend(mon.enter(v.node, v.enter_frame)?);
        // every later frame of the visit is a tick; only the crossing frame can fire
        if let Some(f) = mon.stop_frame()? {
            if f > v.enter_frame && f <= v.exit_frame {
                out.extend(mon.tick(f)?);
            }
        }
        mon.leave(v.exit_frame);
    }
    Ok(out)
}

/// Track is anomalous iff it produced at least one event.
pub fn is_anomalous(events: &[AnomalyEvent]) -> bool {
    !events.is_empty()
}

pub fn write_events<W: Write>(mut w: W, events: &[AnomalyEvent]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_events<R: BufRead>(r: R) -> Result<Vec<AnomalyEvent>, RuleError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RuleError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Distinct nodes named by a set of events.
pub fn event_nodes(events: &[AnomalyEvent]) -> BTreeSet<PatchId> {
    events.iter().flat_map(|e| e.nodes.iter().copied()).collect()
}
