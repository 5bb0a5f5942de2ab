//! Anomaly injection.
//!
//! Every injected track breaks exactly one rule once. Paths are assembled
//! from the legal route graph so that everything around the injected fault
//! stays normal, and each candidate path is checked by replaying patch
//! association along its centerline before it is used.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;

use super::{
    invalid, realizable, rng_for, spawn_frames, LabeledTrack, Plan, Polyline, Route, ScenarioConfig, SimError,
    TruthAt, STREAM_ANOMALY, STREAM_ANOMALY_SPAWN,
};
use crate::ingest::AgentClass;
use crate::rules::AnomalyKind;
use crate::topology::{associate, IntersectionMap, PatchClass, PatchId};

/// Injected paths only cross patch borders at least this wide.
const MIN_CONTACT: f64 = 1.0;
/// Injected dwell on an ineligible patch stays below this multiple of the
/// normal traversal time, so the zone anomaly does not also read as a stop.
const ZONE_DWELL_FACTOR: f64 = 1.5;
/// A halted agent stays at least this multiple of the nominal traversal.
const STOP_DWELL_FACTOR: f64 = 5.0;

/// Placements of the zone anomaly, tried in turn.
const ZONE_TARGETS: [(AgentClass, PatchClass); 3] = [
    (AgentClass::Pedestrian, PatchClass::Road),
    (AgentClass::Bicyclist, PatchClass::Road),
    (AgentClass::Vehicle, PatchClass::Curb),
];

/// The legal movement graph implied by a route set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RouteGraph {
    /// Directed node changes that occur on some route.
    pub edges: BTreeSet<(PatchId, PatchId)>,
    /// Nodes on some route of each class.
    pub eligible: BTreeMap<AgentClass, BTreeSet<PatchId>>,
    pub starts: BTreeMap<AgentClass, BTreeSet<PatchId>>,
    pub ends: BTreeMap<AgentClass, BTreeSet<PatchId>>,
}

impl RouteGraph {
    pub fn from_routes(routes: &[Route]) -> Self {
        let mut g = RouteGraph::default();
        for r in routes {
            for w in r.nodes.windows(2) {
                if w[0] != w[1] {
                    g.edges.insert((w[0], w[1]));
                }
            }
            for &c in &r.classes {
                g.eligible.entry(c).or_default().extend(r.nodes.iter().copied());
                if let (Some(&s), Some(&e)) = (r.nodes.first(), r.nodes.last()) {
                    g.starts.entry(c).or_default().insert(s);
                    g.ends.entry(c).or_default().insert(e);
                }
            }
        }
        g
    }

    pub fn is_legal(&self, from: PatchId, to: PatchId) -> bool {
        from == to || self.edges.contains(&(from, to))
    }

    pub fn is_eligible(&self, agent: AgentClass, node: PatchId) -> bool {
        self.eligible.get(&agent).is_some_and(|s| s.contains(&node))
    }

    pub fn successors(&self, u: PatchId) -> impl Iterator<Item = PatchId> + '_ {
        self.edges.range((u, 0)..=(u, PatchId::MAX)).map(|&(_, v)| v)
    }

    pub fn predecessors(&self, v: PatchId) -> impl Iterator<Item = PatchId> + '_ {
        self.edges.iter().filter(move |&&(_, b)| b == v).map(|&(a, _)| a)
    }
}

/// Breadth-first search from `sources`; returns each reached node's parent.
fn bfs(
    sources: impl IntoIterator<Item = PatchId>,
    ok: impl Fn(PatchId) -> bool,
    next: impl Fn(PatchId) -> Vec<PatchId>,
) -> BTreeMap<PatchId, Option<PatchId>> {
    let mut parent = BTreeMap::new();
    let mut queue = VecDeque::new();
    for s in sources {
        if ok(s) && !parent.contains_key(&s) {
            parent.insert(s, None);
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        for v in next(u) {
            if ok(v) && !parent.contains_key(&v) {
                parent.insert(v, Some(u));
                queue.push_back(v);
            }
        }
    }
    parent
}

/// Walks parent links from `n` back to its search source.
fn chain(parent: &BTreeMap<PatchId, Option<PatchId>>, n: PatchId) -> Vec<PatchId> {
    let mut out = vec![n];
    let mut cur = n;
    while let Some(Some(p)) = parent.get(&cur) {
        out.push(*p);
        cur = *p;
    }
    out
}

struct Planner<'a> {
    map: &'a IntersectionMap,
    config: &'a ScenarioConfig,
    graph: RouteGraph,
    contact: BTreeMap<(PatchId, PatchId), bool>,
    /// Shortest normal traversal of each node, frames.
    nominal: BTreeMap<PatchId, f64>,
    /// Longest route section through each node, meters.
    longest: BTreeMap<PatchId, f64>,
}

/// A path with its single rule-breaking position.
#[derive(Debug, Clone)]
struct Candidate {
    path: Vec<PatchId>,
    line: Polyline,
    at: TruthAt,
    min_speed: f64,
    halt: Option<(usize, u64)>,
}

impl<'a> Planner<'a> {
    fn new(map: &'a IntersectionMap, config: &'a ScenarioConfig) -> Self {
        let mut contact = BTreeMap::new();
        for &(a, b) in map.adjacency() {
            let line = Polyline::through(map, &[a, b], MIN_CONTACT);
            contact.insert((a, b), line.is_some());
            contact.insert((b, a), line.is_some());
        }
        let mut nominal: BTreeMap<PatchId, f64> = BTreeMap::new();
        let mut longest: BTreeMap<PatchId, f64> = BTreeMap::new();
        for r in &config.routes {
            let Some(line) = Polyline::through(map, &r.nodes, 0.0) else {
                continue;
            };
            for (j, &n) in r.nodes.iter().enumerate() {
                let (a, b) = line.section(j);
                let len = b - a;
                let l = longest.entry(n).or_insert(0.0);
                *l = l.max(len);
                for &c in &r.classes {
                    let (lo, hi) = config.speed_range(c);
                    let frames = len / (0.5 * (lo + hi)) * config.fps;
                    let e = nominal.entry(n).or_insert(f64::INFINITY);
                    *e = e.min(frames);
                }
            }
        }
        Planner {
            map,
            config,
            graph: RouteGraph::from_routes(&config.routes),
            contact,
            nominal,
            longest,
        }
    }

    fn passable(&self, u: PatchId, v: PatchId) -> bool {
        self.contact.get(&(u, v)).copied().unwrap_or(false)
    }

    fn has_class(&self, c: AgentClass) -> bool {
        self.config.sizes.contains_key(&c) && self.config.speeds.contains_key(&c)
    }

    fn forward(&self, c: AgentClass) -> BTreeMap<PatchId, Option<PatchId>> {
        let starts = self.graph.starts.get(&c).cloned().unwrap_or_default();
        bfs(starts, |n| self.graph.is_eligible(c, n), |u| {
            self.graph.successors(u).filter(|&v| self.passable(u, v)).collect()
        })
    }

    fn backward(&self, c: AgentClass) -> BTreeMap<PatchId, Option<PatchId>> {
        let ends = self.graph.ends.get(&c).cloned().unwrap_or_default();
        bfs(ends, |n| self.graph.is_eligible(c, n), |v| {
            self.graph.predecessors(v).filter(|&u| self.passable(u, v)).collect()
        })
    }

    /// Shortest legal loop leaving and returning to `w`, as `[w, …, w]`.
    fn cycle(&self, c: AgentClass, w: PatchId) -> Option<Vec<PatchId>> {
        let parent = bfs(
            self.graph.successors(w).filter(|&v| self.passable(w, v)).collect::<Vec<_>>(),
            |n| n != w && self.graph.is_eligible(c, n),
            |u| self.graph.successors(u).filter(|&v| self.passable(u, v)).collect(),
        );
        let last = self
            .graph
            .predecessors(w)
            .filter(|&u| parent.contains_key(&u) && self.passable(u, w))
            .min_by_key(|&u| (chain(&parent, u).len(), u))?;
        let mut out = vec![w];
        out.extend(chain(&parent, last).into_iter().rev());
        out.push(w);
        Some(out)
    }

    fn check(&self, c: AgentClass, path: Vec<PatchId>, at: TruthAt, min_speed: f64) -> Option<Candidate> {
        let line = Polyline::through(self.map, &path, MIN_CONTACT)?;
        let (_, hi) = self.config.speed_range(c);
        let step = hi.max(min_speed) / self.config.fps;
        realizable(self.map, &path, &line, self.config.size(c), step, self.config.min_iou).then_some(Candidate {
            path,
            line,
            at,
            min_speed,
            halt: None,
        })
    }

    fn zone_candidates(&self, c: AgentClass, class: PatchClass) -> Vec<Candidate> {
        if !self.has_class(c) {
            return Vec::new();
        }
        let fwd = self.forward(c);
        let bwd = self.backward(c);
        let mut out = Vec::new();
        for x in self.map.patches().iter().filter(|p| p.class == class && !self.graph.is_eligible(c, p.id)) {
            let x = x.id;
            let mut options = Vec::new();
            for p in self.graph.predecessors(x).filter(|&p| fwd.contains_key(&p) && self.passable(p, x)) {
                for q in self.graph.successors(x).filter(|&q| bwd.contains_key(&q) && self.passable(x, q)) {
                    options.push((chain(&fwd, p).len() + chain(&bwd, q).len(), p, q));
                }
            }
            options.sort_unstable();
            for (_, p, q) in options {
                let mut path: Vec<_> = chain(&fwd, p).into_iter().rev().collect();
                let j = path.len();
                path.push(x);
                path.extend(chain(&bwd, q));
                let Some(line) = Polyline::through(self.map, &path, MIN_CONTACT) else {
                    continue;
                };
                let (a, b) = line.section(j);
                let min_speed = match self.nominal.get(&x) {
                    Some(&frames) => (b - a) * self.config.fps / (ZONE_DWELL_FACTOR * frames),
                    None => 0.0,
                };
                if let Some(cand) = self.check(c, path, TruthAt::Step(j), min_speed) {
                    out.push(cand);
                    break;
                }
            }
        }
        out
    }

    fn stop_candidates(&self) -> Vec<Candidate> {
        let c = AgentClass::Vehicle;
        if !self.has_class(c) {
            return Vec::new();
        }
        let (lo, hi) = self.config.speed_range(c);
        let size = self.config.size(c);
        let mut out = Vec::new();
        for r in self.config.routes.iter().filter(|r| r.classes.contains(&c)) {
            let Some(line) = Polyline::through(self.map, &r.nodes, MIN_CONTACT) else {
                continue;
            };
            for j in 1..r.nodes.len() - 1 {
                let node = r.nodes[j];
                if self.map.patch(node).map(|p| p.class) != Some(PatchClass::Road) {
                    continue;
                }
                let (a, b) = line.section(j);
                let (center, yaw, _) = line.at(0.5 * (a + b));
                let halted = super::agent_box(center, yaw, size);
                if associate(&halted, self.map, self.config.min_iou) != Some(node) {
                    continue;
                }
                let nominal = self.longest[&node] / (0.5 * (lo + hi)) * self.config.fps;
                let frames = (STOP_DWELL_FACTOR * nominal).ceil() as u64;
                if let Some(mut cand) = self.check(c, r.nodes.clone(), TruthAt::Step(j), 0.0) {
                    cand.halt = Some((j, frames));
                    out.push(cand);
                }
            }
        }
        out
    }

    /// Illegal single moves a vehicle can make while staying eligible, with
    /// legal ways in and out.
    fn hops(&self) -> Vec<(PatchId, PatchId)> {
        let c = AgentClass::Vehicle;
        let fwd = self.forward(c);
        let bwd = self.backward(c);
        let mut out = Vec::new();
        for &(a, b) in self.map.adjacency() {
            for (u, v) in [(a, b), (b, a)] {
                if !self.graph.is_legal(u, v)
                    && self.passable(u, v)
                    && fwd.contains_key(&u)
                    && bwd.contains_key(&v)
                {
                    out.push((u, v));
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Turn candidates: plain illegal moves, loops ending in an illegal exit,
    /// and wrong-way entries followed by a loop.
    fn turn_candidates(&self) -> [Vec<Candidate>; 3] {
        let c = AgentClass::Vehicle;
        let mut out: [Vec<Candidate>; 3] = Default::default();
        if !self.has_class(c) {
            return out;
        }
        let fwd = self.forward(c);
        let bwd = self.backward(c);
        for (u, v) in self.hops() {
            let prefix: Vec<_> = chain(&fwd, u).into_iter().rev().collect();
            let suffix = chain(&bwd, v);
            let j = prefix.len() - 1;
            let plain: Vec<_> = prefix.iter().chain(&suffix).copied().collect();
            out[0].extend(self.check(c, plain, TruthAt::Transition(j), 0.0));
            if let Some(cyc) = self.cycle(c, u) {
                let mut path = prefix.clone();
                path.extend(&cyc[1..]);
                let j = path.len() - 1;
                path.extend(&suffix);
                out[1].extend(self.check(c, path, TruthAt::Transition(j), 0.0));
            }
            if suffix.contains(&u) {
                let loop_at = suffix[1..].iter().enumerate().find_map(|(i, &w)| self.cycle(c, w).map(|cy| (i + 1, cy)));
                if let Some((i, cyc)) = loop_at {
                    let mut path = prefix.clone();
                    path.extend(&suffix[..i]);
                    path.extend(&cyc);
                    path.extend(&suffix[i + 1..]);
                    out[2].extend(self.check(c, path, TruthAt::Transition(j), 0.0));
                }
            }
        }
        out
    }
}

fn pick<'c, R: Rng>(rng: &mut R, pools: &[&'c [Candidate]], first: usize) -> Option<&'c Candidate> {
    (0..pools.len())
        .map(|k| pools[(first + k) % pools.len()])
        .find(|p| !p.is_empty())
        .map(|p| &p[rng.random_range(0..p.len())])
}

/// Labeled anomalous tracks, `mix[kind]` of each kind, with ids following
/// the scenario's normal tracks.
pub fn inject_anomalies(
    config: &ScenarioConfig,
    map: &IntersectionMap,
    mix: &BTreeMap<AnomalyKind, usize>,
) -> Result<Vec<LabeledTrack>, SimError> {
    let total: usize = mix.values().sum();
    if total == 0 {
        return Ok(Vec::new());
    }
    config.validate(map)?;
    let planner = Planner::new(map, config);
    let wanted = |k| mix.get(&k).copied().unwrap_or(0) > 0;
    let zone: Vec<Vec<Candidate>> = if wanted(AnomalyKind::ImproperZone) {
        ZONE_TARGETS.iter().map(|&(c, pc)| planner.zone_candidates(c, pc)).collect()
    } else {
        Vec::new()
    };
    let stop = if wanted(AnomalyKind::UnlawfulStop) {
        planner.stop_candidates()
    } else {
        Vec::new()
    };
    let turn = if wanted(AnomalyKind::ImproperTurn) {
        planner.turn_candidates()
    } else {
        Default::default()
    };

    let stretch = (config.normal_count / total).max(1) as u64;
    let spawns = spawn_frames(config, STREAM_ANOMALY_SPAWN, total, stretch);
    let mut out = Vec::with_capacity(total);
    let mut index = 0usize;
    for (&kind, &count) in mix {
        for i in 0..count {
            let mut rng = rng_for(config.seed, STREAM_ANOMALY, index as u64);
            let (agent, cand) = match kind {
                AnomalyKind::ImproperZone => {
                    let pools: Vec<&[Candidate]> = zone.iter().map(Vec::as_slice).collect();
                    let first = (0..pools.len()).map(|k| (i + k) % pools.len()).find(|&k| !pools[k].is_empty());
                    let cand = pick(&mut rng, &pools, i % ZONE_TARGETS.len());
                    (first.map(|k| ZONE_TARGETS[k].0), cand)
                }
                AnomalyKind::UnlawfulStop => (Some(AgentClass::Vehicle), pick(&mut rng, &[&stop], 0)),
                AnomalyKind::ImproperTurn => {
                    let pools: Vec<&[Candidate]> = turn.iter().map(Vec::as_slice).collect();
                    (Some(AgentClass::Vehicle), pick(&mut rng, &pools, i % 3))
                }
            };
            let (Some(agent), Some(cand)) = (agent, cand) else {
                return Err(SimError::InfeasibleInjection {
                    kind,
                    reason: "the map and route set offer no placement".into(),
                });
            };
            let (lo, hi) = config.speed_range(agent);
            let speed = rng.random_range(lo..=hi).max(cand.min_speed);
            let plan = Plan {
                id: (config.normal_count + index) as u64,
                agent,
                path: cand.path.clone(),
                line: cand.line.clone(),
                speed,
                spawn: spawns[index],
                size: config.size(agent),
                halt: cand.halt,
                truth: Some((kind, cand.at)),
            };
            out.push(plan.roll_out(config.fps));
            index += 1;
        }
    }
    if out.len() != total {
        return Err(invalid("injection count mismatch"));
    }
    Ok(out)
}
