use super::BevGrid;
use crate::geometry::{project_elements, GridSpec, Pose6, SegmentSampling};
use crate::map::MapElement;
use crate::{Error, Result};

/// Cell containing grid point `p` (nearest node), if inside the grid.
#[inline]
pub fn cell_of(spec: &GridSpec, p: [f64; 2]) -> Option<(usize, usize)> {
    let i = (p[0] + 0.5).floor();
    let j = (p[1] + 0.5).floor();
    if i >= 0.0 && j >= 0.0 && (i as usize) < spec.rows && (j as usize) < spec.cols {
        Some((i as usize, j as usize))
    } else {
        None
    }
}

/// Binary single-channel occupancy of same-type elements projected at `pose`.
pub fn rasterize_semantic_gt(
    elements: &[MapElement],
    pose: &Pose6,
    spec: &GridSpec,
    sampling: SegmentSampling,
) -> Result<BevGrid> {
    if let Some(first) = elements.first() {
        if let Some(other) = elements.iter().find(|e| e.sem != first.sem) {
            return Err(Error::arg(format!(
                "rasterization expects one semantic type, got {} and {}",
                first.sem, other.sem
            )));
        }
    }
    let mut grid = BevGrid::zeros(*spec, 1, 0);
    for points in project_elements(pose, elements, spec, sampling)? {
        for p in points {
            if let Some((i, j)) = cell_of(spec, p) {
                grid.data[i * spec.cols + j] = 1.0;
            }
        }
    }
    Ok(grid)
}
