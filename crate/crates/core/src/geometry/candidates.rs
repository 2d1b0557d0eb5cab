use super::PoseOffset3;
use crate::{Error, Result};

/// Full Cartesian grid of pose offsets, x outermost and yaw innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrid {
    /// Sample positions along x (m), y (m) and yaw (rad).
    pub axes: [Vec<f64>; 3],
}

impl CandidateGrid {
    /// Grid over `[-range, range]` per axis with the given step; every range
    /// must be an integer multiple of its step.
    pub fn new(range: [f64; 3], step: [f64; 3]) -> Result<Self> {
        let mut axes: [Vec<f64>; 3] = Default::default();
        for (axis, (&r, &s)) in range.iter().zip(&step).enumerate() {
            if !(r > 0.0 && s > 0.0 && r.is_finite() && s.is_finite()) {
                return Err(Error::arg(format!("axis {axis}: range {r} and step {s} must be positive")));
            }
            let n = (r / s).round();
            if (n * s - r).abs() > 1e-9 * r.max(1.0) {
                return Err(Error::arg(format!("axis {axis}: range {r} is not a multiple of step {s}")));
            }
            axes[axis] = symmetric_axis(n as usize, s);
        }
        Ok(Self { axes })
    }

    /// Grid with `2 * half_count + 1` samples per axis spanning `[-range, range]`.
    pub fn with_counts(range: [f64; 3], half_count: [usize; 3]) -> Result<Self> {
        let mut axes: [Vec<f64>; 3] = Default::default();
        for axis in 0..3 {
            if !(range[axis] > 0.0) || half_count[axis] == 0 {
                return Err(Error::arg(format!("axis {axis}: need positive range and half count")));
            }
            axes[axis] = symmetric_axis(half_count[axis], range[axis] / half_count[axis] as f64);
        }
        Ok(Self { axes })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.axes[0].len(), self.axes[1].len(), self.axes[2].len()]
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offset(&self, index: usize) -> PoseOffset3 {
        let [_, ny, nr] = self.shape();
        PoseOffset3::new(
            self.axes[0][index / (ny * nr)],
            self.axes[1][(index / nr) % ny],
            self.axes[2][index % nr],
        )
    }

    pub fn offsets(&self) -> Vec<PoseOffset3> {
        (0..self.len()).map(|i| self.offset(i)).collect()
    }

    /// Half-widths of the grid per axis.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.axes[a].last().copied().unwrap_or(0.0))
    }

    /// Index of the grid node nearest to `o`.
    pub fn nearest(&self, o: PoseOffset3) -> usize {
        let [_, ny, nr] = self.shape();
        let near = |axis: &[f64], v: f64| {
            axis.iter()
                .enumerate()
                .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0)
        };
        let (i, j, k) = (near(&self.axes[0], o.dx), near(&self.axes[1], o.dy), near(&self.axes[2], o.dpsi));
        (i * ny + j) * nr + k
    }
}

fn symmetric_axis(n: usize, step: f64) -> Vec<f64> {
    let n = n as i64;
    (-n..=n).map(|i| i as f64 * step).collect()
}

/// Flat list form of [`CandidateGrid::new`].
pub fn sample_candidate_offsets(range: [f64; 3], step: [f64; 3]) -> Result<Vec<PoseOffset3>> {
    Ok(CandidateGrid::new(range, step)?.offsets())
}
