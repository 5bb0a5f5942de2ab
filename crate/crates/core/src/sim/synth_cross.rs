//! The bundled four-arm test intersection and its default scenario.
//!
//! Layout (right-hand traffic, meters, origin at the junction center):
//!
//! * four road quadrants of 3.5 × 3.5 m forming the junction box,
//! * one 4 m crosswalk per arm across both lanes,
//! * per arm an inbound and an outbound lane of three 10 m segments,
//! * per arm an inbound and an outbound bicycle lane of three segments,
//! * four curb corners joining bicycle lanes and crosswalks.
//!
//! Arms are generated from the north arm by quarter turns counter-clockwise,
//! so arm `k` is north, west, south, east for `k = 0..4`.

use std::collections::BTreeMap;

use crate::geometry::{ConvexPolygon, Homography, Point2};
use crate::ingest::AgentClass;
use crate::rules::AnomalyKind;
use crate::sim::{CameraConfig, NoiseConfig, Route, ScenarioConfig, DEFAULT_SIM_MIN_IOU};
use crate::topology::{IntersectionMap, Patch, PatchClass, PatchId};

pub const LANE_WIDTH: f64 = 3.5;
pub const CROSSWALK_WIDTH: f64 = 4.0;
pub const BIKE_LANE_WIDTH: f64 = 2.0;
pub const SEGMENT_LENGTH: f64 = 10.0;
pub const SEGMENTS_PER_LANE: usize = 3;
pub const PATCH_COUNT: usize = 60;

const ARMS: [&str; 4] = ["n", "w", "s", "e"];
const QUADRANTS: [&str; 4] = ["nw", "sw", "se", "ne"];

/// Junction quadrant entered by traffic arriving on arm `k`.
pub fn quadrant(k: usize) -> PatchId {
    (k % 4) as PatchId
}

pub fn crosswalk(k: usize) -> PatchId {
    4 + (k % 4) as PatchId
}

/// Curb corner between arm `k` and arm `k + 1`.
pub fn corner(k: usize) -> PatchId {
    8 + (k % 4) as PatchId
}

/// Lane segment `seg` (1 = nearest the junction) of arm `k`.
pub fn lane(k: usize, inbound: bool, seg: usize) -> PatchId {
    debug_assert!((1..=SEGMENTS_PER_LANE).contains(&seg));
    (12 + 6 * (k % 4) + if inbound { 0 } else { 3 } + seg - 1) as PatchId
}

pub fn bike_lane(k: usize, inbound: bool, seg: usize) -> PatchId {
    lane(k, inbound, seg) + 24
}

fn rotate(p: Point2, k: usize) -> Point2 {
    (0..k % 4).fold(p, |q, _| Point2::new(-q.y, q.x))
}

fn rect(x0: f64, x1: f64, y0: f64, y1: f64, k: usize) -> ConvexPolygon {
    let pts = [
        Point2::new(x0, y0),
        Point2::new(x1, y0),
        Point2::new(x1, y1),
        Point2::new(x0, y1),
    ];
    ConvexPolygon::new(pts.iter().map(|&p| rotate(p, k)).collect()).expect("axis-aligned rectangle")
}

fn patch(id: PatchId, class: PatchClass, shape: ConvexPolygon, label: String) -> Patch {
    Patch {
        id,
        class,
        shape,
        label: Some(label),
    }
}

pub fn map() -> IntersectionMap {
    let w = LANE_WIDTH;
    let stop = w + CROSSWALK_WIDTH;
    let bike = w + BIKE_LANE_WIDTH;
    let mut patches = Vec::with_capacity(PATCH_COUNT);
    for k in 0..4 {
        patches.push(patch(quadrant(k), PatchClass::Road, rect(-w, 0.0, 0.0, w, k), format!("junction-{}", QUADRANTS[k])));
    }
    for k in 0..4 {
        patches.push(patch(crosswalk(k), PatchClass::Crosswalk, rect(-w, w, w, stop, k), format!("crosswalk-{}", ARMS[k])));
    }
    for k in 0..4 {
        patches.push(patch(corner(k), PatchClass::Curb, rect(-stop, -w, w, stop, k), format!("corner-{}", QUADRANTS[k])));
    }
    for (base, class, inner, outer, kind) in [
        (0usize, PatchClass::Road, 0.0, w, "lane"),
        (24, PatchClass::BicycleLane, w, bike, "bike"),
    ] {
        for k in 0..4 {
            for (inbound, x0, x1, dir) in [(true, -outer, -inner, "in"), (false, inner, outer, "out")] {
                for seg in 1..=SEGMENTS_PER_LANE {
                    let y0 = stop + SEGMENT_LENGTH * (seg - 1) as f64;
                    let id = lane(k, inbound, seg) + base as PatchId;
                    patches.push(patch(
                        id,
                        class,
                        rect(x0, x1, y0, y0 + SEGMENT_LENGTH, k),
                        format!("{}-{dir}-{kind}-seg-{seg}", ARMS[k]),
                    ));
                }
            }
        }
    }
    let h = Homography::new([[10.0, 0.0, 500.0], [0.0, -10.0, 500.0], [0.0, 0.0, 1.0]]).expect("invertible");
    IntersectionMap::new(patches, None, Some(h)).expect("synth-cross is valid")
}

fn approach(k: usize, bike: bool) -> Vec<PatchId> {
    let f = if bike { bike_lane } else { lane };
    (1..=SEGMENTS_PER_LANE).rev().map(|s| f(k, true, s)).collect()
}

fn departure(k: usize, bike: bool) -> Vec<PatchId> {
    let f = if bike { bike_lane } else { lane };
    (1..=SEGMENTS_PER_LANE).map(|s| f(k, false, s)).collect()
}

const TURNS: [&str; 3] = ["right", "straight", "left"];

/// The 40 legal routes: 12 vehicle, 12 bicycle, 16 pedestrian.
pub fn routes() -> Vec<Route> {
    let mut out = Vec::new();
    for k in 0..4 {
        for t in 1..=3 {
            let m = (k + t) % 4;
            let mut nodes = approach(k, false);
            nodes.push(crosswalk(k));
            nodes.extend((0..t).map(|i| quadrant(k + i)));
            nodes.push(crosswalk(m));
            nodes.extend(departure(m, false));
            out.push(Route {
                name: format!("vehicle-{}-{}", ARMS[k], TURNS[t - 1]),
                nodes,
                classes: vec![AgentClass::Vehicle],
            });
        }
    }
    for k in 0..4 {
        for t in 1..=3 {
            let m = (k + t) % 4;
            let mut nodes = approach(k, true);
            nodes.push(corner(k));
            for i in 1..t {
                nodes.push(crosswalk(k + i));
                nodes.push(corner(k + i));
            }
            nodes.extend(departure(m, true));
            out.push(Route {
                name: format!("bicycle-{}-{}", ARMS[k], TURNS[t - 1]),
                nodes,
                classes: vec![AgentClass::Bicyclist],
            });
        }
    }
    // crosswalk j lies between corner j - 1 and corner j
    for j in 0..4 {
        let fwd = vec![corner(j + 3), crosswalk(j), corner(j)];
        for (dir, nodes) in [("a", fwd.clone()), ("b", fwd.into_iter().rev().collect())] {
            out.push(Route {
                name: format!("pedestrian-{}-{dir}", ARMS[j]),
                nodes,
                classes: vec![AgentClass::Pedestrian],
            });
        }
    }
    for j in 0..4 {
        let fwd = vec![corner(j + 3), crosswalk(j), corner(j), crosswalk(j + 1), corner(j + 1)];
        for (dir, nodes) in [("a", fwd.clone()), ("b", fwd.into_iter().rev().collect())] {
            out.push(Route {
                name: format!("pedestrian-{}{}-{dir}", ARMS[j], ARMS[(j + 1) % 4]),
                nodes,
                classes: vec![AgentClass::Pedestrian],
            });
        }
    }
    out
}

/// Default scenario: two cameras overlapping by 1 m on the north arm and the
/// anomaly mix 24 zone / 3 stop / 14 turn.
pub fn scenario() -> ScenarioConfig {
    use AgentClass::*;
    ScenarioConfig {
        map: Some("synth-cross.json".into()),
        seed: 42,
        fps: 10.0,
        normal_count: 1000,
        anomalies: BTreeMap::from([
            (AnomalyKind::ImproperTurn, 14),
            (AnomalyKind::ImproperZone, 24),
            (AnomalyKind::UnlawfulStop, 3),
        ]),
        mix: BTreeMap::from([(Vehicle, 0.5), (Pedestrian, 0.3), (Bicyclist, 0.2)]),
        speeds: BTreeMap::from([(Vehicle, [3.0, 6.0]), (Pedestrian, [1.0, 1.6]), (Bicyclist, [3.0, 5.0])]),
        sizes: BTreeMap::from([(Vehicle, [4.5, 1.8]), (Pedestrian, [0.8, 0.8]), (Bicyclist, [1.8, 0.7])]),
        noise: NoiseConfig::default(),
        spawn_gap: [10, 30],
        min_iou: DEFAULT_SIM_MIN_IOU,
        cameras: vec![
            CameraConfig {
                id: 0,
                min: [-40.0, -40.0],
                max: [40.0, 19.0],
            },
            CameraConfig {
                id: 1,
                min: [-40.0, 18.0],
                max: [40.0, 40.0],
            },
        ],
        routes: routes(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::polygon_distance;

    #[test]
    fn patch_count_and_classes() {
        let m = map();
        assert_eq!(m.len(), PATCH_COUNT);
        let count = |c: PatchClass| m.patches().iter().filter(|p| p.class == c).count();
        assert_eq!(count(PatchClass::Road), 28);
        assert_eq!(count(PatchClass::BicycleLane), 24);
        assert_eq!(count(PatchClass::Crosswalk), 4);
        assert_eq!(count(PatchClass::Curb), 4);
    }

    #[test]
    fn adjacency_matches_brute_force() {
        let m = map();
        let mut n = 0;
        for (i, a) in m.patches().iter().enumerate() {
            for b in &m.patches()[i + 1..] {
                let touching = polygon_distance(&a.shape, &b.shape) <= 0.2;
                assert_eq!(touching, m.are_adjacent(a.id, b.id), "{} {}", a.id, b.id);
                n += touching as usize;
            }
        }
        assert_eq!(n, m.adjacency().len());
    }

    #[test]
    fn routes_are_adjacent_chains() {
        let m = map();
        let r = routes();
        assert_eq!(r.len(), 40);
        for route in &r {
            for w in route.nodes.windows(2) {
                assert!(m.are_adjacent(w[0], w[1]), "{}: {} {}", route.name, w[0], w[1]);
            }
        }
    }

    #[test]
    fn rotation_is_counter_clockwise() {
        let m = map();
        let c = |id| m.patch(id).unwrap().shape.centroid();
        assert!(c(quadrant(0)).x < 0.0 && c(quadrant(0)).y > 0.0);
        assert!(c(quadrant(1)).x < 0.0 && c(quadrant(1)).y < 0.0);
        assert!(c(quadrant(2)).x > 0.0 && c(quadrant(2)).y < 0.0);
        assert!(c(crosswalk(3)).x > 0.0);
        assert!(c(lane(0, true, 3)).y > 30.0);
    }
}
