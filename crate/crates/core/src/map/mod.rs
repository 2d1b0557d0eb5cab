//! Vectorized map data model.
//!
//! A map is a flat list of [`MapElement`]s. Every element carries a semantic
//! type and a small geometry payload that is always expressible as the
//! canonical 8-slot descriptor consumed by the positional encoder.

mod io;
mod query;
mod surfel;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{load_map, map_size_report, parse_map, save_map, write_map, MapSizeReport};
pub use query::{query_window, segment_intersects_window};
pub use surfel::{filter_surfels, SURFEL_CELL_SIZE, SURFEL_MAX_PLANARITY};

pub const MAP_FORMAT_VERSION: u32 = 1;
pub const DESCRIPTOR_LEN: usize = 8;

/// Semantic class of a map element. `index()` is the contiguous row into the
/// semantic embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticType {
    LaneLine,
    RoadBoundary,
    StopLine,
    PedestrianCrossing,
    RoadMarking,
    Pole,
    TrafficSign,
    Surfel,
}

impl SemanticType {
    pub const ALL: [SemanticType; 8] = [
        SemanticType::LaneLine,
        SemanticType::RoadBoundary,
        SemanticType::StopLine,
        SemanticType::PedestrianCrossing,
        SemanticType::RoadMarking,
        SemanticType::Pole,
        SemanticType::TrafficSign,
        SemanticType::Surfel,
    ];

    /// Number of semantic types (N_e).
    pub const COUNT: usize = Self::ALL.len();

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn tag(self) -> &'static str {
        match self {
            SemanticType::LaneLine => "lane_line",
            SemanticType::RoadBoundary => "road_boundary",
            SemanticType::StopLine => "stop_line",
            SemanticType::PedestrianCrossing => "pedestrian_crossing",
            SemanticType::RoadMarking => "road_marking",
            SemanticType::Pole => "pole",
            SemanticType::TrafficSign => "traffic_sign",
            SemanticType::Surfel => "surfel",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.tag() == tag)
    }

    pub fn kind(self) -> GeometryKind {
        match self {
            SemanticType::Pole | SemanticType::TrafficSign => GeometryKind::Vertical,
            SemanticType::Surfel => GeometryKind::Surfel,
            _ => GeometryKind::Segment,
        }
    }
}

impl std::fmt::Display for SemanticType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryKind {
    Segment,
    Vertical,
    Surfel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    /// Horizontal segment between two endpoints (meters).
    Segment { start: [f64; 2], end: [f64; 2] },
    /// Pole or sign: ground footprint and height above ground.
    Vertical { center: [f64; 2], height: f64 },
    /// Planar patch: center, unit normal, eigenvalue ratios (λ1/λ2, λ1/λ3).
    Surfel {
        center: [f64; 2],
        normal: [f64; 3],
        ratios: [f64; 2],
    },
}

impl Geometry {
    pub fn kind(&self) -> GeometryKind {
        match self {
            Geometry::Segment { .. } => GeometryKind::Segment,
            Geometry::Vertical { .. } => GeometryKind::Vertical,
            Geometry::Surfel { .. } => GeometryKind::Surfel,
        }
    }

    /// Canonical 8-slot descriptor, zero padded.
    pub fn descriptor(&self) -> [f64; DESCRIPTOR_LEN] {
        match *self {
            Geometry::Segment { start, end } => [start[0], start[1], end[0], end[1], 0.0, 0.0, 0.0, 0.0],
            Geometry::Vertical { center, height } => [center[0], center[1], 0.0, height, 0.0, 0.0, 0.0, 0.0],
            Geometry::Surfel {
                center,
                normal,
                ratios,
            } => [
                center[0], center[1], normal[0], normal[1], normal[2], ratios[0], ratios[1], 0.0,
            ],
        }
    }

    pub fn from_descriptor(kind: GeometryKind, d: &[f64; DESCRIPTOR_LEN]) -> Self {
        match kind {
            GeometryKind::Segment => Geometry::Segment {
                start: [d[0], d[1]],
                end: [d[2], d[3]],
            },
            GeometryKind::Vertical => Geometry::Vertical {
                center: [d[0], d[1]],
                height: d[3],
            },
            GeometryKind::Surfel => Geometry::Surfel {
                center: [d[0], d[1]],
                normal: [d[2], d[3], d[4]],
                ratios: [d[5], d[6]],
            },
        }
    }

    /// Descriptor slots holding planar x/y coordinates, as (x_slot, y_slot) pairs.
    pub fn coordinate_slots(kind: GeometryKind) -> &'static [(usize, usize)] {
        match kind {
            GeometryKind::Segment => &[(0, 1), (2, 3)],
            GeometryKind::Vertical | GeometryKind::Surfel => &[(0, 1)],
        }
    }

    /// First endpoint (segments) or footprint.
    pub fn anchor(&self) -> [f64; 2] {
        match *self {
            Geometry::Segment { start, .. } => start,
            Geometry::Vertical { center, .. } | Geometry::Surfel { center, .. } => center,
        }
    }

    pub fn bounds(&self) -> Aabb {
        match *self {
            Geometry::Segment { start, end } => Aabb {
                min: [start[0].min(end[0]), start[1].min(end[1])],
                max: [start[0].max(end[0]), start[1].max(end[1])],
            },
            Geometry::Vertical { center, .. } | Geometry::Surfel { center, .. } => Aabb {
                min: center,
                max: center,
            },
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        self.map_points(|p| [p[0] + dx, p[1] + dy], |n| n)
    }

    /// Rigid rotation about the planar origin; surfel normals rotate about z.
    pub fn rotated(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let rot = move |p: [f64; 2]| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
        self.map_points(rot, move |n: [f64; 3]| {
            let r = rot([n[0], n[1]]);
            [r[0], r[1], n[2]]
        })
    }

    fn map_points(&self, f: impl Fn([f64; 2]) -> [f64; 2], g: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        match *self {
            Geometry::Segment { start, end } => Geometry::Segment {
                start: f(start),
                end: f(end),
            },
            Geometry::Vertical { center, height } => Geometry::Vertical {
                center: f(center),
                height,
            },
            Geometry::Surfel {
                center,
                normal,
                ratios,
            } => Geometry::Surfel {
                center: f(center),
                normal: g(normal),
                ratios,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapElement {
    pub id: u64,
    pub sem: SemanticType,
    pub geom: Geometry,
}

impl MapElement {
    pub fn segment(id: u64, sem: SemanticType, start: [f64; 2], end: [f64; 2]) -> Self {
        Self {
            id,
            sem,
            geom: Geometry::Segment { start, end },
        }
    }

    pub fn vertical(id: u64, sem: SemanticType, center: [f64; 2], height: f64) -> Self {
        Self {
            id,
            sem,
            geom: Geometry::Vertical { center, height },
        }
    }

    pub fn surfel(id: u64, center: [f64; 2], normal: [f64; 3], ratios: [f64; 2]) -> Self {
        Self {
            id,
            sem: SemanticType::Surfel,
            geom: Geometry::Surfel {
                center,
                normal,
                ratios,
            },
        }
    }

    pub fn descriptor(&self) -> [f64; DESCRIPTOR_LEN] {
        self.geom.descriptor()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| {
            Err(Error::Validation {
                id: self.id,
                message,
            })
        };
        if self.sem.kind() != self.geom.kind() {
            return bad(format!("geometry {:?} does not fit type {}", self.geom.kind(), self.sem));
        }
        if self.descriptor().iter().any(|v| !v.is_finite()) {
            return bad("non-finite geometry".into());
        }
        match self.geom {
            Geometry::Segment { .. } => {}
            Geometry::Vertical { height, .. } => {
                if height <= 0.0 {
                    return bad(format!("height must be > 0, got {height}"));
                }
            }
            Geometry::Surfel { normal, ratios, .. } => {
                let norm = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return bad(format!("surfel normal has length {norm}"));
                }
                if ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
                    return bad(format!("surfel ratios {ratios:?} outside (0, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// Axis-aligned box in map coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Aabb {
    pub fn around(center: [f64; 2], half_extent: [f64; 2]) -> Self {
        Self {
            min: [center[0] - half_extent[0], center[1] - half_extent[1]],
            max: [center[0] + half_extent[0], center[1] + half_extent[1]],
        }
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: [self.min[0].min(other.min[0]), self.min[1].min(other.min[1])],
            max: [self.max[0].max(other.max[0]), self.max[1].max(other.max[1])],
        }
    }

    pub fn contains(&self, other: &Aabb) -> bool {
        self.min[0] <= other.min[0]
            && self.min[1] <= other.min[1]
            && self.max[0] >= other.max[0]
            && self.max[1] >= other.max[1]
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        self.min[0] <= other.max[0]
            && other.min[0] <= self.max[0]
            && self.min[1] <= other.max[1]
            && other.min[1] <= self.max[1]
    }

    pub fn contains_point(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

/// Immutable vectorized map.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorMap {
    version: u32,
    origin: [f64; 2],
    bbox: Aabb,
    elements: Vec<MapElement>,
    index: query::BucketIndex,
}

impl VectorMap {
    /// Builds a map with a tight bounding box, validating every element.
    pub fn new(origin: [f64; 2], elements: Vec<MapElement>) -> Result<Self> {
        let bbox = elements
            .iter()
            .map(|e| e.geom.bounds())
            .reduce(|a, b| a.union(&b))
            .unwrap_or(Aabb {
                min: [0.0, 0.0],
                max: [0.0, 0.0],
            });
        Self::with_bbox(origin, bbox, elements)
    }

    pub fn with_bbox(origin: [f64; 2], bbox: Aabb, elements: Vec<MapElement>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(elements.len());
        for e in &elements {
            e.validate()?;
            if !seen.insert(e.id) {
                return Err(Error::Validation {
                    id: e.id,
                    message: "duplicate id".into(),
                });
            }
            if !bbox.contains(&e.geom.bounds()) {
                return Err(Error::Validation {
                    id: e.id,
                    message: "outside the map bounding box".into(),
                });
            }
        }
        if !(origin.iter().all(|v| v.is_finite()) && bbox.min.iter().chain(&bbox.max).all(|v| v.is_finite())) {
            return Err(Error::arg("map origin and bounding box must be finite"));
        }
        let index = query::BucketIndex::build(&elements);
        Ok(Self {
            version: MAP_FORMAT_VERSION,
            origin,
            bbox,
            elements,
            index,
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn bbox(&self) -> Aabb {
        self.bbox
    }

    pub fn elements(&self) -> &[MapElement] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn count_of(&self, sem: SemanticType) -> usize {
        self.elements.iter().filter(|e| e.sem == sem).count()
    }

    pub(crate) fn bucket_index(&self) -> &query::BucketIndex {
        &self.index
    }

    pub fn into_elements(self) -> Vec<MapElement> {
        self.elements
    }
}
