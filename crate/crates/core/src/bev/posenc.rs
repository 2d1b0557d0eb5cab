use super::BevGrid;
use crate::geometry::GridSpec;
use crate::{Error, Result};

/// Sinusoidal 2-D encoding: the first half of the channels encodes the row
/// index, the second half the column index, each as interleaved
/// `sin(i·ω_k), cos(i·ω_k)` with `ω_k = 10000^(-2k/half)`.
pub fn positional_encoding_2d(spec: &GridSpec, channels: usize) -> Result<BevGrid> {
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::arg(format!("positional encoding needs an even channel count, got {channels}")));
    }
    spec.validate()?;
    let half = channels / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|c| 10000f64.powf(-2.0 * (c / 2) as f64 / half as f64))
        .collect();
    let encode = |pos: usize, out: &mut [f64]| {
        for (c, (o, w)) in out.iter_mut().zip(&freqs).enumerate() {
            let a = pos as f64 * w;
            *o = if c % 2 == 0 { a.sin() } else { a.cos() };
        }
    };
    let rows: Vec<Vec<f64>> = (0..spec.rows.max(spec.cols))
        .map(|i| {
            let mut v = vec![0.0; half];
            encode(i, &mut v);
            v
        })
        .collect();
    let mut grid = BevGrid::zeros(*spec, channels, 0);
    for i in 0..spec.rows {
        for j in 0..spec.cols {
            let cell = grid.cell_mut(i, j);
            cell[..half].copy_from_slice(&rows[i]);
            cell[half..].copy_from_slice(&rows[j]);
        }
    }
    Ok(grid)
}
