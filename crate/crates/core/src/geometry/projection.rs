//! Map geometry to BEV grid coordinates.
//!
//! Map elements live on the horizontal plane, the BEV plane is the sensor's
//! x/y plane and tilts with roll and pitch. A planar point `(x, y)` is lifted
//! onto the BEV plane along the vertical, moved into the sensor frame, and
//! scaled into grid cells.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::Pose6;
use crate::map::{Geometry, MapElement};
use crate::{Error, Result};

/// Shape and placement of a BEV grid in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cells along the sensor x-axis (H).
    pub rows: usize,
    /// Cells along the sensor y-axis (W).
    pub cols: usize,
    /// Meters per cell.
    pub resolution: f64,
    /// Sensor-frame x of grid coordinate 0.
    pub h_min: f64,
    /// Sensor-frame y of grid coordinate 0.
    pub w_min: f64,
}

impl GridSpec {
    /// Grid whose center node sits on the sensor origin.
    pub fn centered(rows: usize, cols: usize, resolution: f64) -> Self {
        Self {
            rows,
            cols,
            resolution,
            h_min: -(rows as f64) * resolution / 2.0,
            w_min: -(cols as f64) * resolution / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || !(self.resolution > 0.0) {
            return Err(Error::arg(format!("invalid grid spec {self:?}")));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Metric extent (rows·r, cols·r).
    pub fn extent(&self) -> [f64; 2] {
        [self.rows as f64 * self.resolution, self.cols as f64 * self.resolution]
    }

    /// The same metric window at half the cell size.
    pub fn refined(&self) -> Self {
        Self {
            rows: self.rows * 2,
            cols: self.cols * 2,
            resolution: self.resolution / 2.0,
            h_min: self.h_min,
            w_min: self.w_min,
        }
    }

    /// Sensor-frame (x, y) to grid coordinates.
    pub fn to_grid(&self, local: [f64; 2]) -> [f64; 2] {
        [
            (local[0] - self.h_min) / self.resolution,
            (local[1] - self.w_min) / self.resolution,
        ]
    }

    /// Grid coordinates inside the sampleable square `[0, H-1] × [0, W-1]`.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (self.rows - 1) as f64 && p[1] <= (self.cols - 1) as f64
    }
}

/// Precomputed world → BEV grid map for one pose and grid.
#[derive(Debug, Clone, Copy)]
pub struct BevProjector {
    normal: Vector3<f64>,
    plane_offset: f64,
    translation: Vector3<f64>,
    inv_rotation: Matrix3<f64>,
    spec: GridSpec,
}

impl BevProjector {
    pub fn new(pose: &Pose6, spec: &GridSpec) -> Result<Self> {
        let normal = pose.plane_normal();
        if normal.z.abs() < 1e-6 {
            return Err(Error::DegeneratePlane { n_z: normal.z });
        }
        Ok(Self {
            normal,
            plane_offset: normal.dot(&pose.translation),
            translation: pose.translation,
            inv_rotation: pose.rotation.transpose(),
            spec: *spec,
        })
    }

    /// Height of the BEV plane above planar point (x, y).
    pub fn plane_height(&self, p: [f64; 2]) -> f64 {
        (self.plane_offset - self.normal.x * p[0] - self.normal.y * p[1]) / self.normal.z
    }

    /// Point on the BEV plane in the sensor frame.
    pub fn to_sensor(&self, p: [f64; 2]) -> Vector3<f64> {
        let world = Vector3::new(p[0], p[1], self.plane_height(p));
        self.inv_rotation * (world - self.translation)
    }

    pub fn project(&self, p: [f64; 2]) -> [f64; 2] {
        let local = self.to_sensor(p);
        self.spec.to_grid([local.x, local.y])
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }
}

pub fn project_endpoint_to_bev(pose: &Pose6, endpoint: [f64; 2], spec: &GridSpec) -> Result<[f64; 2]> {
    Ok(BevProjector::new(pose, spec)?.project(endpoint))
}

/// How segments are densified into point sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentSampling {
    /// Exactly this many points (at least 2).
    Count(usize),
    /// `max(2, ceil(len / 10 · k))` points.
    PerTenMeters(f64),
    /// Points no further apart than this many meters.
    Spacing(f64),
}

impl Default for SegmentSampling {
    fn default() -> Self {
        SegmentSampling::PerTenMeters(8.0)
    }
}

impl SegmentSampling {
    pub fn count_for(&self, length: f64) -> usize {
        if length == 0.0 {
            return 1;
        }
        match *self {
            SegmentSampling::Count(n) => n.max(2),
            SegmentSampling::PerTenMeters(k) => ((length / 10.0 * k).ceil() as usize).max(2),
            SegmentSampling::Spacing(s) => ((length / s).ceil() as usize + 1).max(2),
        }
    }
}

/// Uniform arc-length samples including both endpoints.
pub fn sample_segment(start: [f64; 2], end: [f64; 2], sampling: SegmentSampling) -> Vec<[f64; 2]> {
    let length = (end[0] - start[0]).hypot(end[1] - start[1]);
    let n = sampling.count_for(length);
    if n == 1 {
        return vec![start];
    }
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            [start[0] + t * (end[0] - start[0]), start[1] + t * (end[1] - start[1])]
        })
        .collect()
}

impl MapElement {
    /// Planar points representing this element: densified segments, or the
    /// single footprint of vertical elements and surfels.
    pub fn world_points(&self, sampling: SegmentSampling) -> Vec<[f64; 2]> {
        match self.geom {
            Geometry::Segment { start, end } => sample_segment(start, end, sampling),
            // every height of a pole drops onto the same BEV-plane point
            Geometry::Vertical { center, .. } => vec![center],
            Geometry::Surfel { center, .. } => vec![center],
        }
    }
}

pub fn project_elements(
    pose: &Pose6,
    elements: &[MapElement],
    spec: &GridSpec,
    sampling: SegmentSampling,
) -> Result<Vec<Vec<[f64; 2]>>> {
    let proj = BevProjector::new(pose, spec)?;
    Ok(elements
        .iter()
        .map(|e| e.world_points(sampling).into_iter().map(|p| proj.project(p)).collect())
        .collect())
}
