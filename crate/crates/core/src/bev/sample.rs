use super::BevGrid;
use crate::geometry::GridSpec;
use crate::{Error, Result};

/// The four corner cells and weights of a bilinear lookup, plus the partial
/// derivatives of each weight with respect to the grid coordinates.
#[derive(Debug, Clone, Copy)]
pub struct BilinearWeights {
    pub cells: [usize; 4],
    pub weights: [f64; 4],
    pub d_du: [f64; 4],
    pub d_dv: [f64; 4],
}

#[inline]
fn axis(coord: f64, n: usize) -> (usize, usize, f64, f64) {
    if n == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let i0 = (coord.floor() as usize).min(n - 2);
    (i0, i0 + 1, coord - i0 as f64, 1.0)
}

/// Weights for sampling `p`, or `None` outside `[0, H-1] × [0, W-1]`.
#[inline]
pub fn bilinear_weights(spec: &GridSpec, p: [f64; 2]) -> Option<BilinearWeights> {
    if !spec.contains(p) {
        return None;
    }
    let (i0, i1, fu, du) = axis(p[0], spec.rows);
    let (j0, j1, fv, dv) = axis(p[1], spec.cols);
    let w = spec.cols;
    Some(BilinearWeights {
        cells: [i0 * w + j0, i1 * w + j0, i0 * w + j1, i1 * w + j1],
        weights: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
        d_du: [-du * (1.0 - fv), du * (1.0 - fv), -du * fv, du * fv],
        d_dv: [-(1.0 - fu) * dv, -fu * dv, (1.0 - fu) * dv, fu * dv],
    })
}

impl BevGrid {
    /// Accumulates `scale · sample(p)` into `out`.
    #[inline]
    pub fn sample_accumulate(&self, p: [f64; 2], scale: f64, out: &mut [f64]) {
        if let Some(bw) = bilinear_weights(&self.spec, p) {
            let c = self.channels;
            for (cell, w) in bw.cells.iter().zip(bw.weights) {
                if w == 0.0 {
                    continue;
                }
                let src = &self.data[cell * c..(cell + 1) * c];
                for (o, v) in out.iter_mut().zip(src) {
                    *o += scale * w * v;
                }
            }
        }
    }
}

/// Bilinear blend of the four cells around `point` (grid coordinates); zero
/// outside the sampleable square.
pub fn bilinear_sample(grid: &BevGrid, point: [f64; 2]) -> Result<Vec<f64>> {
    if !(point[0].is_finite() && point[1].is_finite()) {
        return Err(Error::arg(format!("non-finite sample point {point:?}")));
    }
    let mut out = vec![0.0; grid.channels];
    grid.sample_accumulate(point, 1.0, &mut out);
    Ok(out)
}
