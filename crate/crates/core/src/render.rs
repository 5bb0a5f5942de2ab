//! Top-down SVG of the map, trajectories, and anomalies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::geometry::{project_point, Homography, Point2};
use crate::ingest::{AgentClass, SourceKey, Track};
use crate::rules::{AnomalyEvent, AnomalyKind};
use crate::topology::{IntersectionMap, PatchClass};

const MARGIN: f64 = 20.0;

fn patch_fill(c: PatchClass) -> &'static str {
    match c {
        PatchClass::Road => "#9e9e9e",
        PatchClass::BicycleLane => "#81c784",
        PatchClass::Curb => "#d7ccc8",
        PatchClass::Crosswalk => "#fff59d",
    }
}

fn agent_stroke(c: AgentClass) -> &'static str {
    match c {
        AgentClass::Vehicle => "#1565c0",
        AgentClass::Pedestrian => "#6a1b9a",
        AgentClass::Bicyclist => "#00838f",
    }
}

fn kind_stroke(k: AnomalyKind) -> &'static str {
    match k {
        AnomalyKind::ImproperTurn => "#d32f2f",
        AnomalyKind::ImproperZone => "#ef6c00",
        AnomalyKind::UnlawfulStop => "#c2185b",
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(ch),
        }
    }
    out
}

/// World → drawing coordinates. Uses the map's BEV homography when present;
/// otherwise world meters with the y axis flipped.
struct View {
    h: Option<Homography>,
    offset: Point2,
}

impl View {
    fn raw(&self, p: Point2) -> Point2 {
        match &self.h {
            Some(h) => project_point(h, p).unwrap_or(p),
            None => Point2::new(p.x, -p.y),
        }
    }

    fn pt(&self, p: Point2) -> Point2 {
        self.raw(p) - self.offset
    }
}

fn points_attr(view: &View, pts: impl IntoIterator<Item = Point2>) -> String {
    let mut s = String::new();
    for (i, p) in pts.into_iter().enumerate() {
        let q = view.pt(p);
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:.2},{:.2}", q.x, q.y);
    }
    s
}

fn event_track<'t>(e: &AnomalyEvent, tracks: &'t [Track]) -> Option<&'t Track> {
    if !e.sources.is_empty() {
        let want: BTreeSet<&SourceKey> = e.sources.iter().collect();
        if let Some(t) = tracks.iter().find(|t| t.sources.iter().any(|s| want.contains(s))) {
            return Some(t);
        }
    }
    tracks.iter().find(|t| t.global_id == e.global_id)
}

/// Renders the scene. `meta` entries are written into the SVG description.
pub fn render_svg(map: &IntersectionMap, tracks: &[Track], events: &[AnomalyEvent], meta: &BTreeMap<String, String>) -> String {
    let mut view = View {
        h: map.bev_homography().copied(),
        offset: Point2::new(0.0, 0.0),
    };
    let corners: Vec<Point2> = map
        .patches()
        .iter()
        .flat_map(|p| p.shape.vertices().iter().map(|&v| view.raw(v)))
        .collect();
    let (mut lo, mut hi) = (Point2::new(0.0, 0.0), Point2::new(1.0, 1.0));
    if let Some(first) = corners.first() {
        lo = *first;
        hi = *first;
        for c in &corners {
            lo = Point2::new(lo.x.min(c.x), lo.y.min(c.y));
            hi = Point2::new(hi.x.max(c.x), hi.y.max(c.y));
        }
    }
    view.offset = Point2::new(lo.x - MARGIN, lo.y - MARGIN);
    let (w, h) = (hi.x - lo.x + 2.0 * MARGIN, hi.y - lo.y + 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#
    );
    let _ = writeln!(s, "<title>patchgraph scene</title>");
    if !meta.is_empty() {
        let desc: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "<desc>{}</desc>", escape(&desc.join(" ")));
    }
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#fafafa"/>"##);

    let _ = writeln!(s, r##"<g id="patches" stroke="#616161" stroke-width="0.5">"##);
    for p in map.patches() {
        let label = p.label.as_deref().map(|l| format!(" {l}")).unwrap_or_default();
        let _ = writeln!(
            s,
            r#"<polygon class="patch {cls}" data-id="{id}" points="{pts}" fill="{fill}"><title>patch {id} {cls}{label}</title></polygon>"#,
            cls = p.class,
            id = p.id,
            pts = points_attr(&view, p.shape.vertices().iter().copied()),
            fill = patch_fill(p.class),
            label = escape(&label),
        );
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="tracks" fill="none" stroke-width="1.2" stroke-opacity="0.7">"#);
    for t in tracks {
        let _ = writeln!(
            s,
            r#"<polyline class="track {agent}" data-id="{id}" points="{pts}" stroke="{stroke}"><title>track {id} {agent}</title></polyline>"#,
            agent = t.agent,
            id = t.global_id,
            pts = points_attr(&view, t.samples.iter().map(|x| x.bbox.center)),
            stroke = agent_stroke(t.agent),
        );
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="anomalies" fill="none" stroke-width="3">"#);
    for e in events {
        let Some(t) = event_track(e, tracks) else {
            continue;
        };
        let pts: Vec<Point2> = t
            .samples
            .iter()
            .filter(|x| x.frame >= e.start_frame && x.frame <= e.end_frame)
            .map(|x| x.bbox.center)
            .collect();
        let Some(&anchor) = pts.first() else {
            continue;
        };
        let nodes: Vec<String> = e.nodes.iter().map(|n| n.to_string()).collect();
        let note = format!(
            "{} {} nodes {}: {}",
            e.kind,
            e.detail.rule.as_str(),
            nodes.join("→"),
            e.detail.text
        );
        let stroke = kind_stroke(e.kind);
        let _ = writeln!(s, r#"<g class="anomaly {}" data-id="{}">"#, e.kind, e.global_id);
        if pts.len() > 1 {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" stroke="{stroke}"/>"#,
                points_attr(&view, pts.iter().copied())
            );
        } else {
            let c = view.pt(anchor);
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" stroke="{stroke}"/>"#,
                c.x, c.y
            );
        }
        let a = view.pt(anchor);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="9" fill="{stroke}" stroke="none">{}</text>"#,
            a.x + 5.0,
            a.y - 5.0,
            escape(&note)
        );
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, "</svg>");
    s
}
