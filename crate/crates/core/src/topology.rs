//! Intersection maps: typed convex patches, their adjacency graph, and
//! association of agent footprints to patches.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{iou, polygon_distance, Aabb, ConvexPolygon, Homography, OrientedBox, Point2};

pub type PatchId = u32;

/// Smallest accepted patch area, m².
pub const MIN_PATCH_AREA: f64 = 0.1;
/// Largest IoU tolerated between two patches of one map.
pub const MAX_PATCH_OVERLAP_IOU: f64 = 0.01;
pub const DEFAULT_ADJACENCY_GAP: f64 = 0.2;
pub const DEFAULT_MIN_IOU: f64 = 0.05;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("cannot read map {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed map: {0}")]
    Parse(String),
    #[error("invalid map: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchClass {
    Road,
    BicycleLane,
    Curb,
    Crosswalk,
}

impl PatchClass {
    pub const ALL: [PatchClass; 4] = [
        PatchClass::Road,
        PatchClass::BicycleLane,
        PatchClass::Curb,
        PatchClass::Crosswalk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatchClass::Road => "road",
            PatchClass::BicycleLane => "bicycle_lane",
            PatchClass::Curb => "curb",
            PatchClass::Crosswalk => "crosswalk",
        }
    }
}

impl fmt::Display for PatchClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub id: PatchId,
    pub class: PatchClass,
    pub shape: ConvexPolygon,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchRecord {
    id: PatchId,
    class: PatchClass,
    polygon: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    patches: Vec<PatchRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adjacency: Option<Vec<[PatchId; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bev_homography: Option<[f64; 9]>,
}

/// The patch graph of one intersection. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionMap {
    patches: Vec<Patch>,
    index: BTreeMap<PatchId, usize>,
    aabbs: Vec<Aabb>,
    adjacency: BTreeSet<(PatchId, PatchId)>,
    neighbors: BTreeMap<PatchId, BTreeSet<PatchId>>,
    bev_homography: Option<Homography>,
}

impl IntersectionMap {
    /// Validates patches and adjacency. When `adjacency` is `None` it is
    /// computed with the default gap.
    pub fn new(
        mut patches: Vec<Patch>,
        adjacency: Option<Vec<(PatchId, PatchId)>>,
        bev_homography: Option<Homography>,
    ) -> Result<Self, MapError> {
        if patches.is_empty() {
            return Err(MapError::Validation("map has no patches".into()));
        }
        patches.sort_by_key(|p| p.id);
        let mut index = BTreeMap::new();
        for (i, p) in patches.iter().enumerate() {
            if index.insert(p.id, i).is_some() {
                return Err(MapError::Validation(format!("duplicate patch id {}", p.id)));
            }
            let area = p.shape.area();
            if area <= MIN_PATCH_AREA {
                return Err(MapError::Validation(format!(
                    "patch {} area {area:.4} m² is below {MIN_PATCH_AREA}",
                    p.id
                )));
            }
        }
        let aabbs: Vec<Aabb> = patches.iter().map(|p| p.shape.aabb()).collect();
        for i in 0..patches.len() {
            for j in i + 1..patches.len() {
                if !aabbs[i].overlaps(&aabbs[j]) {
                    continue;
                }
                let v = iou(&patches[i].shape, &patches[j].shape)
                    .map_err(|e| MapError::Validation(e.to_string()))?;
                if v > MAX_PATCH_OVERLAP_IOU {
                    return Err(MapError::Validation(format!(
                        "patches {} and {} overlap (IoU {v:.4})",
                        patches[i].id, patches[j].id
                    )));
                }
            }
        }
        let adjacency: BTreeSet<(PatchId, PatchId)> = match adjacency {
            Some(pairs) => {
                let mut set = BTreeSet::new();
                for (a, b) in pairs {
                    if a == b {
                        return Err(MapError::Validation(format!("self adjacency on patch {a}")));
                    }
                    for id in [a, b] {
                        if !index.contains_key(&id) {
                            return Err(MapError::Validation(format!(
                                "adjacency references unknown patch {id}"
                            )));
                        }
                    }
                    set.insert((a.min(b), a.max(b)));
                }
                set
            }
            None => compute_adjacency(&patches, DEFAULT_ADJACENCY_GAP),
        };
        let mut neighbors: BTreeMap<PatchId, BTreeSet<PatchId>> =
            patches.iter().map(|p| (p.id, BTreeSet::new())).collect();
        for &(a, b) in &adjacency {
            neighbors.entry(a).or_default().insert(b);
            neighbors.entry(b).or_default().insert(a);
        }
        Ok(Self {
            patches,
            index,
            aabbs,
            adjacency,
            neighbors,
            bev_homography,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self, MapError> {
        let file: MapFile = serde_json::from_str(s).map_err(|e| MapError::Parse(e.to_string()))?;
        let mut patches = Vec::with_capacity(file.patches.len());
        for rec in file.patches {
            let verts = rec.polygon.iter().map(|&[x, y]| Point2::new(x, y)).collect();
            let shape = ConvexPolygon::new(verts)
                .map_err(|e| MapError::Validation(format!("patch {}: {e}", rec.id)))?;
            patches.push(Patch {
                id: rec.id,
                class: rec.class,
                shape,
                label: rec.label,
            });
        }
        let adjacency = file
            .adjacency
            .map(|v| v.into_iter().map(|[a, b]| (a, b)).collect());
        let h = file
            .bev_homography
            .map(|m| Homography::from_row_major(&m))
            .transpose()
            .map_err(|e| MapError::Validation(format!("bev_homography: {e}")))?;
        Self::new(patches, adjacency, h)
    }

    fn to_file(&self) -> MapFile {
        MapFile {
            patches: self
                .patches
                .iter()
                .map(|p| PatchRecord {
                    id: p.id,
                    class: p.class,
                    polygon: p.shape.vertices().iter().map(|v| [v.x, v.y]).collect(),
                    label: p.label.clone(),
                })
                .collect(),
            adjacency: Some(self.adjacency.iter().map(|&(a, b)| [a, b]).collect()),
            bev_homography: self.bev_homography.map(|h| h.to_row_major()),
        }
    }

    /// Canonical JSON: patches sorted by id, explicit sorted adjacency.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("map serializes")
    }

    /// Hex SHA-256 of the canonical compact serialization.
    pub fn checksum(&self) -> String {
        let canon = serde_json::to_vec(&self.to_file()).expect("map serializes");
        hex::encode(Sha256::digest(&canon))
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn patch(&self, id: PatchId) -> Option<&Patch> {
        self.index.get(&id).map(|&i| &self.patches[i])
    }

    pub fn contains(&self, id: PatchId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Unordered adjacency pairs stored as `(min, max)`.
    pub fn adjacency(&self) -> &BTreeSet<(PatchId, PatchId)> {
        &self.adjacency
    }

    pub fn are_adjacent(&self, a: PatchId, b: PatchId) -> bool {
        self.adjacency.contains(&(a.min(b), a.max(b)))
    }

    pub fn neighbors(&self, id: PatchId) -> impl Iterator<Item = PatchId> + '_ {
        self.neighbors.get(&id).into_iter().flatten().copied()
    }

    pub fn bev_homography(&self) -> Option<&Homography> {
        self.bev_homography.as_ref()
    }

    /// Best-IoU patch for a footprint, if it reaches `min_iou`.
    pub fn associate(&self, b: &OrientedBox, min_iou: f64) -> Option<PatchId> {
        associate(b, self, min_iou)
    }
}

pub fn load_map(path: impl AsRef<Path>) -> Result<IntersectionMap, MapError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MapError::Io {
        path: path.display().to_string(),
        source,
    })?;
    IntersectionMap::from_json_str(&text)
}

/// Pairs of patches whose shapes come within `gap` meters of each other.
pub fn compute_adjacency(patches: &[Patch], gap: f64) -> BTreeSet<(PatchId, PatchId)> {
    let boxes: Vec<Aabb> = patches.iter().map(|p| p.shape.aabb().inflate(gap)).collect();
    let mut out = BTreeSet::new();
    for i in 0..patches.len() {
        for j in i + 1..patches.len() {
            if !boxes[i].overlaps(&boxes[j]) {
                continue;
            }
            if polygon_distance(&patches[i].shape, &patches[j].shape) <= gap {
                let (a, b) = (patches[i].id, patches[j].id);
                out.insert((a.min(b), a.max(b)));
            }
        }
    }
    out
}

/// Argmax-IoU association. Ties go to the lowest patch id.
pub fn associate(b: &OrientedBox, map: &IntersectionMap, min_iou: f64) -> Option<PatchId> {
    debug_assert!(min_iou > 0.0 && min_iou < 1.0, "min_iou must be in (0, 1)");
    let footprint = b.footprint();
    let fb = footprint.aabb();
    let mut best: Option<(PatchId, f64)> = None;
    for (patch, bb) in map.patches.iter().zip(&map.aabbs) {
        if !fb.overlaps(bb) {
            continue;
        }
        let Ok(v) = iou(&footprint, &patch.shape) else {
            continue;
        };
        if v >= min_iou && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((patch.id, v));
        }
    }
    best.map(|(id, _)| id)
}
