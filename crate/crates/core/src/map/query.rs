use std::collections::BTreeMap;

use super::{Aabb, Geometry, MapElement, VectorMap};

const BUCKET_SIZE: f64 = 16.0;

/// Uniform bucket grid over element bounding boxes.
#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct BucketIndex {
    buckets: BTreeMap<(i64, i64), Vec<u32>>,
}

fn bucket_range(b: &Aabb) -> ((i64, i64), (i64, i64)) {
    let lo = |v: f64| (v / BUCKET_SIZE).floor() as i64;
    ((lo(b.min[0]), lo(b.min[1])), (lo(b.max[0]), lo(b.max[1])))
}

impl BucketIndex {
    pub(crate) fn build(elements: &[MapElement]) -> Self {
        let mut buckets: BTreeMap<(i64, i64), Vec<u32>> = BTreeMap::new();
        for (i, e) in elements.iter().enumerate() {
            let ((x0, y0), (x1, y1)) = bucket_range(&e.geom.bounds());
            for bx in x0..=x1 {
                for by in y0..=y1 {
                    buckets.entry((bx, by)).or_default().push(i as u32);
                }
            }
        }
        Self { buckets }
    }

    fn candidates(&self, window: &Aabb) -> Vec<usize> {
        let ((x0, y0), (x1, y1)) = bucket_range(window);
        let mut out: Vec<usize> = Vec::new();
        if ((x1 - x0 + 1) * (y1 - y0 + 1)) as usize > self.buckets.len() {
            for list in self.buckets.values() {
                out.extend(list.iter().map(|&i| i as usize));
            }
        } else {
            for bx in x0..=x1 {
                for by in y0..=y1 {
                    if let Some(list) = self.buckets.get(&(bx, by)) {
                        out.extend(list.iter().map(|&i| i as usize));
                    }
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Liang–Barsky clip of a segment against a closed box.
pub fn segment_intersects_window(a: [f64; 2], b: [f64; 2], window: &Aabb) -> bool {
    let d = [b[0] - a[0], b[1] - a[1]];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for axis in 0..2 {
        let checks = [(-d[axis], a[axis] - window.min[axis]), (d[axis], window.max[axis] - a[axis])];
        for (p, q) in checks {
            if p == 0.0 {
                if q < 0.0 {
                    return false;
                }
            } else {
                let t = q / p;
                if p < 0.0 {
                    t0 = t0.max(t);
                } else {
                    t1 = t1.min(t);
                }
                if t0 > t1 {
                    return false;
                }
            }
        }
    }
    true
}

fn intersects(e: &MapElement, window: &Aabb) -> bool {
    match e.geom {
        Geometry::Segment { start, end } => segment_intersects_window(start, end, window),
        Geometry::Vertical { center, .. } | Geometry::Surfel { center, .. } => window.contains_point(center),
    }
}

/// Elements whose geometry touches the closed window `center ± half_extent`,
/// in map order.
pub fn query_window(map: &VectorMap, center: [f64; 2], half_extent: [f64; 2]) -> Vec<MapElement> {
    debug_assert!(half_extent[0] > 0.0 && half_extent[1] > 0.0);
    let window = Aabb::around(center, half_extent);
    let elements = map.elements();
    map.bucket_index()
        .candidates(&window)
        .into_iter()
        .map(|i| &elements[i])
        .filter(|e| intersects(e, &window))
        .copied()
        .collect()
}
