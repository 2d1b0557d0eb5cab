use super::BevGrid;
use crate::{Error, Result, Tensor};

/// 2× bilinear spatial upsampling followed by a per-cell channel projection
/// `projection: out_channels × channels`. Border nodes are clamped so
/// constant grids stay constant.
pub fn upsample_layer(grid: &BevGrid, projection: &Tensor) -> Result<BevGrid> {
    if projection.cols != grid.channels || projection.rows > grid.channels {
        return Err(Error::Shape(format!(
            "projection {:?} cannot map {} channels down",
            projection.shape(),
            grid.channels
        )));
    }
    let src = grid.spec;
    let spec = src.refined();
    let (h, w) = (src.rows, src.cols);
    let c = grid.channels;
    let mut fine = vec![0.0; spec.cells() * c];
    let lerp = |k: usize, n: usize| -> (usize, usize, f64) {
        let coord = (k as f64 / 2.0).min((n - 1) as f64);
        let i0 = coord.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, coord - i0 as f64)
    };
    for i in 0..spec.rows {
        let (i0, i1, fu) = lerp(i, h);
        for j in 0..spec.cols {
            let (j0, j1, fv) = lerp(j, w);
            let out = &mut fine[(i * spec.cols + j) * c..(i * spec.cols + j + 1) * c];
            for (cell, wgt) in [
                ((i0, j0), (1.0 - fu) * (1.0 - fv)),
                ((i1, j0), fu * (1.0 - fv)),
                ((i0, j1), (1.0 - fu) * fv),
                ((i1, j1), fu * fv),
            ] {
                if wgt != 0.0 {
                    for (o, v) in out.iter_mut().zip(grid.cell(cell.0, cell.1)) {
                        *o += wgt * v;
                    }
                }
            }
        }
    }
    let projected = Tensor::from_vec(spec.cells(), c, fine).matmul(&projection.transpose());
    BevGrid::new(spec, projection.rows, grid.layer + 1, projected.data)
}
