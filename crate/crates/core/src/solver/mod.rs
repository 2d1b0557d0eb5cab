//! Histogram pose solver: exhaustive scoring of a 3-DoF offset grid, softmax
//! posterior, expectation and covariance, refined over the pyramid levels
//! with halving search ranges.

mod posterior;
mod score;

use std::fmt::Write as _;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::bev::{BevPyramid, PYRAMID_LEVELS};
use crate::geometry::{compose, CandidateGrid, Pose6, PoseOffset3, SegmentSampling};
use crate::map::MapElement;
use crate::matcher::MatcherParams;
use crate::{fmt_f64, Error, Result, Tensor};

pub use posterior::{expected_offset, offset_covariance, posterior, softmax, Posterior};
pub use score::{score_candidates, score_graph, LevelScorer};

/// Largest yaw half-range for which linear yaw averaging is accepted.
pub const MAX_YAW_RANGE_DEG: f64 = 30.0;

/// Search schedule. Level `l` searches `range / 2^l` with the same number
/// of samples per axis, so the step halves with the range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Level-0 half-ranges along x and y (meters).
    pub range_m: [f64; 2],
    /// Level-0 yaw half-range (degrees).
    pub range_yaw_deg: f64,
    /// Samples on each side of zero per axis (x, y, yaw).
    pub half_samples: [usize; 3],
    pub levels: usize,
    /// Segment densification used when projecting elements.
    pub samples_per_10m: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            range_m: [2.5, 2.5],
            range_yaw_deg: 2.5,
            half_samples: [6, 6, 6],
            levels: PYRAMID_LEVELS,
            samples_per_10m: 20.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=PYRAMID_LEVELS).contains(&self.levels) {
            return Err(Error::arg(format!("levels must be in 1..={PYRAMID_LEVELS}, got {}", self.levels)));
        }
        if !(self.range_m.iter().all(|&r| r > 0.0 && r.is_finite()) && self.range_yaw_deg > 0.0) {
            return Err(Error::arg("solver ranges must be positive"));
        }
        if self.range_yaw_deg >= MAX_YAW_RANGE_DEG {
            return Err(Error::arg(format!(
                "yaw range {}° is too wide for linear yaw averaging (limit {MAX_YAW_RANGE_DEG}°)",
                self.range_yaw_deg
            )));
        }
        if self.half_samples.contains(&0) {
            return Err(Error::arg("need at least one sample on each side per axis"));
        }
        if !(self.samples_per_10m > 0.0) {
            return Err(Error::arg("samples_per_10m must be positive"));
        }
        Ok(())
    }

    pub fn sampling(&self) -> SegmentSampling {
        SegmentSampling::PerTenMeters(self.samples_per_10m)
    }

    /// Half-ranges (m, m, rad) searched at `level`.
    pub fn level_range(&self, level: usize) -> [f64; 3] {
        let f = 0.5f64.powi(level as i32);
        [self.range_m[0] * f, self.range_m[1] * f, self.range_yaw_deg.to_radians() * f]
    }

    pub fn level_grid(&self, level: usize) -> Result<CandidateGrid> {
        CandidateGrid::with_counts(self.level_range(level), self.half_samples)
    }
}

/// What one level of the solver saw and concluded.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTrace {
    /// Estimate the candidates were composed onto.
    pub anchor: Pose6,
    pub grid: CandidateGrid,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub delta: PoseOffset3,
    pub sigma: Matrix3<f64>,
}

impl LevelTrace {
    /// Estimate after this level.
    pub fn estimate(&self) -> Pose6 {
        compose(&self.anchor, self.delta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    /// Sum of the per-level offsets.
    pub delta: PoseOffset3,
    pub final_pose: Pose6,
    pub levels: Vec<LevelTrace>,
}

impl SolverResult {
    pub fn sigmas(&self) -> Vec<Matrix3<f64>> {
        self.levels.iter().map(|l| l.sigma).collect()
    }
}

/// Coarse-to-fine solve. `embeddings` is the `K × C` matrix aligned with
/// `elements`.
pub fn solve_multilevel(
    pyramid: &BevPyramid,
    elements: &[MapElement],
    embeddings: &Tensor,
    init_pose: &Pose6,
    config: &SolverConfig,
    params: &MatcherParams,
) -> Result<SolverResult> {
    config.validate()?;
    let mut estimate = *init_pose;
    let mut total = PoseOffset3::ZERO;
    let mut levels = Vec::with_capacity(config.levels);
    for l in 0..config.levels {
        let grid = config.level_grid(l)?;
        let offsets = grid.offsets();
        let scorer = LevelScorer::new(pyramid.layer(l), elements, embeddings, params, config.sampling())?;
        let scores = scorer.score_offsets(&estimate, &offsets)?;
        let post = posterior(offsets, &scores)?;
        let delta = expected_offset(&post);
        let sigma = offset_covariance(&post, delta);
        levels.push(LevelTrace {
            anchor: estimate,
            grid,
            scores,
            probs: post.probs,
            delta,
            sigma,
        });
        estimate = compose(&estimate, delta);
        total = total + delta;
    }
    Ok(SolverResult {
        delta: total,
        final_pose: estimate,
        levels,
    })
}

/// Plot-ready dump of the per-level score histograms: axis samples, then
/// the flat score and probability arrays in candidate order (x outermost,
/// yaw innermost).
pub fn write_histograms(result: &SolverResult) -> String {
    let join = |v: &[f64]| v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(" ");
    let mut out = String::from("histograms 1\n");
    for (l, t) in result.levels.iter().enumerate() {
        let [nx, ny, nr] = t.grid.shape();
        let _ = writeln!(out, "level {l} shape {nx} {ny} {nr}");
        let _ = writeln!(out, "axis_x {}", join(&t.grid.axes[0]));
        let _ = writeln!(out, "axis_y {}", join(&t.grid.axes[1]));
        let _ = writeln!(out, "axis_yaw {}", join(&t.grid.axes[2]));
        let _ = writeln!(out, "scores {}", join(&t.scores));
        let _ = writeln!(out, "probs {}", join(&t.probs));
    }
    out
}
