use std::collections::BTreeMap;

use super::{Geometry, MapElement, SemanticType};
use crate::{Error, Result};

/// Surfels with λ1/λ2 above this are not planar enough to keep.
pub const SURFEL_MAX_PLANARITY: f64 = 0.1;
/// Grid-sampling cell edge (meters), anchored at integer world coordinates.
pub const SURFEL_CELL_SIZE: f64 = 1.0;

/// Eigenvalue filter followed by 1 m grid sampling: keeps the flattest surfel
/// (smallest λ1/λ2, then lowest id) per occupied cell. Output keeps input order.
pub fn filter_surfels(surfels: &[MapElement]) -> Result<Vec<MapElement>> {
    let mut best: BTreeMap<(i64, i64), (f64, u64, usize)> = BTreeMap::new();
    for (i, e) in surfels.iter().enumerate() {
        let Geometry::Surfel { center, ratios, .. } = e.geom else {
            return Err(Error::arg(format!("element {} is {} not a surfel", e.id, e.sem)));
        };
        debug_assert_eq!(e.sem, SemanticType::Surfel);
        if ratios[0] > SURFEL_MAX_PLANARITY {
            continue;
        }
        let cell = (
            (center[0] / SURFEL_CELL_SIZE).floor() as i64,
            (center[1] / SURFEL_CELL_SIZE).floor() as i64,
        );
        let cand = (ratios[0], e.id, i);
        best.entry(cell)
            .and_modify(|cur| {
                if (cand.0, cand.1) < (cur.0, cur.1) {
                    *cur = cand;
                }
            })
            .or_insert(cand);
    }
    let mut keep: Vec<usize> = best.into_values().map(|(_, _, i)| i).collect();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| surfels[i]).collect())
}
