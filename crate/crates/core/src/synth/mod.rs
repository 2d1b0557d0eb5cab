//! Synthetic road scenes and the oracle BEV renderer that stands in for the
//! sensor encoders.

mod frame;
mod render;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{GridSpec, Pose6};
use crate::map::{filter_surfels, MapElement, SemanticType, VectorMap};
use crate::{Error, Result};

pub use frame::{ablate_landmarks, augment_lidar_rotation, augment_world_rotation, make_frame, make_frames, perturb_pose, Frame};
pub use render::{render_oracle_bev, semantic_targets, Renderer, Signatures, ORACLE_DOT};

/// Independent RNG stream `stream` under `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Scene generation and frame sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Length of the initial straight (m).
    pub straight_m: f64,
    /// Arc length of the following left curve (m).
    pub curve_m: f64,
    pub curve_radius_m: f64,
    pub lanes: usize,
    pub lane_width_m: f64,
    /// Length of the segments polylines are cut into (m).
    pub segment_m: f64,
    /// Dash and gap lengths of the lane separators between lanes (m); a
    /// zero dash makes them solid.
    pub dash_m: f64,
    pub gap_m: f64,
    pub poles_per_km: f64,
    pub signs_per_km: f64,
    pub surfels_per_km: f64,
    pub crossings_per_km: f64,
    pub markings_per_km: f64,
    /// Spacing of trajectory poses (m).
    pub frame_spacing_m: f64,
    pub sensor_height_m: f64,
    /// Uniform initial-pose error half-ranges: x, y (m).
    pub perturb_m: [f64; 2],
    pub perturb_yaw_deg: f64,
    /// Uniform ground-truth roll and pitch half-range (degrees).
    pub tilt_deg: f64,
    /// Frames with fewer visible elements are skipped.
    pub min_visible: usize,
    /// Render noise standard deviation (absolute feature units).
    pub noise_std: f64,
    /// Per-element drop probability by semantic tag.
    pub dropout: BTreeMap<String, f64>,
    /// Layer-0 BEV grid; finer layers halve its cell size.
    pub bev: GridSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            straight_m: 600.0,
            curve_m: 300.0,
            curve_radius_m: 150.0,
            lanes: 3,
            lane_width_m: 3.5,
            segment_m: 10.0,
            dash_m: 3.0,
            gap_m: 6.0,
            poles_per_km: 60.0,
            signs_per_km: 20.0,
            surfels_per_km: 120.0,
            crossings_per_km: 5.0,
            markings_per_km: 30.0,
            frame_spacing_m: 5.0,
            sensor_height_m: 1.8,
            perturb_m: [2.0, 2.0],
            perturb_yaw_deg: 2.0,
            tilt_deg: 2.0,
            min_visible: 20,
            noise_std: 0.0,
            dropout: BTreeMap::new(),
            bev: GridSpec::centered(64, 64, 0.5),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("poles_per_km", self.poles_per_km),
            ("signs_per_km", self.signs_per_km),
            ("surfels_per_km", self.surfels_per_km),
            ("crossings_per_km", self.crossings_per_km),
            ("markings_per_km", self.markings_per_km),
            ("curve_m", self.curve_m),
            ("noise_std", self.noise_std),
            ("tilt_deg", self.tilt_deg),
            ("perturb_yaw_deg", self.perturb_yaw_deg),
            ("perturb_m[0]", self.perturb_m[0]),
            ("perturb_m[1]", self.perturb_m[1]),
            ("dash_m", self.dash_m),
            ("gap_m", self.gap_m),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        let positive = [
            ("straight_m", self.straight_m),
            ("curve_radius_m", self.curve_radius_m),
            ("lane_width_m", self.lane_width_m),
            ("segment_m", self.segment_m),
            ("frame_spacing_m", self.frame_spacing_m),
            ("sensor_height_m", self.sensor_height_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be positive, got {v}")));
            }
        }
        if self.dash_m > 0.0 && self.gap_m <= 0.0 {
            return Err(Error::arg("dashed separators need a positive gap"));
        }
        if self.lanes == 0 {
            return Err(Error::arg("need at least one lane"));
        }
        if self.curve_m / self.curve_radius_m > PI {
            return Err(Error::arg("curve turns more than 180 degrees"));
        }
        self.dropout_table()?;
        self.bev.validate()
    }

    pub fn road_length_m(&self) -> f64 {
        self.straight_m + self.curve_m
    }

    /// Drop probability per semantic-type index.
    pub fn dropout_table(&self) -> Result<[f64; SemanticType::COUNT]> {
        let mut t = [0.0; SemanticType::COUNT];
        for (tag, &p) in &self.dropout {
            let sem = SemanticType::from_tag(tag).ok_or_else(|| Error::arg(format!("unknown semantic type '{tag}' in dropout")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::arg(format!("dropout for {tag} must be in [0, 1], got {p}")));
            }
            t[sem.index()] = p;
        }
        Ok(t)
    }
}

/// A generated map and the planar poses of a drive along it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub map: VectorMap,
    pub trajectory: Vec<Pose6>,
}

struct Road {
    straight: f64,
    curve: f64,
    radius: f64,
}

impl Road {
    fn length(&self) -> f64 {
        self.straight + self.curve
    }

    /// Centerline point and heading at arc length `s`.
    fn center(&self, s: f64) -> ([f64; 2], f64) {
        if s <= self.straight || self.curve == 0.0 {
            ([s, 0.0], 0.0)
        } else {
            let a = (s - self.straight) / self.radius;
            ([self.straight + self.radius * a.sin(), self.radius * (1.0 - a.cos())], a)
        }
    }

    /// Point at arc length `s`, `d` meters to the left of the centerline.
    fn at(&self, s: f64, d: f64) -> [f64; 2] {
        let (c, h) = self.center(s);
        [c[0] - d * h.sin(), c[1] + d * h.cos()]
    }
}

fn count_for(per_km: f64, length_m: f64) -> usize {
    (per_km * length_m / 1000.0).round() as usize
}

/// Builds a straight-plus-curved road with lane lines, boundaries, periodic
/// crossings with stop lines, and randomly placed markings, poles, signs and
/// surfels. Fully determined by `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = rng_stream(spec.seed, 0);
    let road = Road {
        straight: spec.straight_m,
        curve: spec.curve_m,
        radius: spec.curve_radius_m,
    };
    let len = road.length();
    let half = spec.lanes as f64 * spec.lane_width_m / 2.0;
    let mut els: Vec<MapElement> = Vec::new();
    let mut next_id = 0u64;
    let mut push = |els: &mut Vec<MapElement>, mut e: MapElement| {
        e.id = next_id;
        next_id += 1;
        els.push(e);
    };

    let n_seg = (len / spec.segment_m).ceil() as usize;
    let stations: Vec<f64> = (0..=n_seg).map(|k| (k as f64 * spec.segment_m).min(len)).collect();
    let dashed = spec.dash_m > 0.0;
    let mut solid = vec![(-half, SemanticType::LaneLine), (half, SemanticType::LaneLine)];
    solid.push((-half - 1.0, SemanticType::RoadBoundary));
    solid.push((half + 1.0, SemanticType::RoadBoundary));
    let separators = (1..spec.lanes).map(|k| -half + k as f64 * spec.lane_width_m);
    if !dashed {
        solid.extend(separators.clone().map(|d| (d, SemanticType::LaneLine)));
    }
    for (d, sem) in solid {
        for w in stations.windows(2) {
            push(&mut els, MapElement::segment(0, sem, road.at(w[0], d), road.at(w[1], d)));
        }
    }
    if dashed {
        let period = spec.dash_m + spec.gap_m;
        for d in separators {
            let mut s = 0.0;
            while s < len {
                let end = (s + spec.dash_m).min(len);
                push(&mut els, MapElement::segment(0, SemanticType::LaneLine, road.at(s, d), road.at(end, d)));
                s += period;
            }
        }
    }

    let n_cross = count_for(spec.crossings_per_km, len);
    for i in 0..n_cross {
        let s = (i as f64 + 0.5) * len / n_cross as f64;
        if s + 4.0 > len || s < 3.0 {
            continue;
        }
        let corners = [road.at(s, -half), road.at(s, half), road.at(s + 4.0, half), road.at(s + 4.0, -half)];
        for k in 0..4 {
            push(&mut els, MapElement::segment(0, SemanticType::PedestrianCrossing, corners[k], corners[(k + 1) % 4]));
        }
        push(&mut els, MapElement::segment(0, SemanticType::StopLine, road.at(s - 3.0, -half), road.at(s - 3.0, half)));
    }

    for _ in 0..count_for(spec.markings_per_km, len) {
        let s = rng.random_range(0.0..(len - 2.5).max(0.0));
        let lane = rng.random_range(0..spec.lanes);
        let d = -half + (lane as f64 + 0.5) * spec.lane_width_m;
        push(&mut els, MapElement::segment(0, SemanticType::RoadMarking, road.at(s, d), road.at(s + 2.5, d)));
    }

    let side = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    for (per_km, sem, hmin, hmax) in [
        (spec.poles_per_km, SemanticType::Pole, 4.0, 9.0),
        (spec.signs_per_km, SemanticType::TrafficSign, 2.0, 4.0),
    ] {
        for _ in 0..count_for(per_km, len) {
            let s = rng.random_range(0.0..len);
            let d = side(&mut rng) * (half + 1.5 + rng.random_range(0.0..2.0));
            let h = rng.random_range(hmin..hmax);
            push(&mut els, MapElement::vertical(0, sem, road.at(s, d), h));
        }
    }

    // planar wall patches facing the road, plus non-planar clutter that the
    // surfel filter removes
    let n_surfels = count_for(spec.surfels_per_km, len);
    let mut surfels = Vec::new();
    for k in 0..n_surfels + n_surfels / 5 {
        let s = rng.random_range(0.0..len);
        let sd = side(&mut rng);
        let d = sd * (half + 4.0 + rng.random_range(0.0..4.0));
        let (_, h) = road.center(s);
        let facing = h + if sd > 0.0 { -PI / 2.0 } else { PI / 2.0 } + rng.random_range(-0.2..0.2);
        let nz: f64 = rng.random_range(-0.1..0.1);
        let nn = (1.0 + nz * nz).sqrt();
        let normal = [facing.cos() / nn, facing.sin() / nn, nz / nn];
        let r1 = if k < n_surfels {
            rng.random_range(0.005..0.1)
        } else {
            rng.random_range(0.2..0.9)
        };
        let r2 = r1 * rng.random_range(0.1..1.0);
        surfels.push(MapElement::surfel(k as u64, road.at(s, d), normal, [r1, r2]));
    }
    for e in filter_surfels(&surfels)? {
        push(&mut els, e);
    }

    let map = VectorMap::new([0.0, 0.0], els)?;
    let margin = 20.0f64.min(len / 4.0);
    let mut trajectory = Vec::new();
    let mut s = margin;
    while s <= len - margin {
        let lane = rng.random_range(0..spec.lanes);
        let d = -half + (lane as f64 + 0.5) * spec.lane_width_m;
        let p = road.at(s, d);
        let (_, h) = road.center(s);
        trajectory.push(Pose6::planar(p[0], p[1], spec.sensor_height_m, h));
        s += spec.frame_spacing_m;
    }
    Ok(Scene {
        spec: spec.clone(),
        map,
        trajectory,
    })
}
