use serde::Serialize;

use crate::geometry::{relative_offset, GridSpec, Pose6, PoseOffset3};
use crate::solver::LevelTrace;

/// Longitudinal and lateral thresholds (m).
pub const DIST_THRESHOLDS_M: [f64; 3] = [0.1, 0.2, 0.3];
/// Yaw thresholds (degrees).
pub const YAW_THRESHOLDS_DEG: [f64; 3] = [0.1, 0.3, 0.6];
/// Simultaneous limits for the available ratio: lon (m), lat (m), yaw (deg).
pub const AR_LIMITS: [f64; 3] = [0.6, 0.3, 1.0];
/// Axis names in report order.
pub const AXES: [&str; 3] = ["lon", "lat", "yaw"];

/// Outcome of one trial. Numeric fields are NaN when the trial failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRecord {
    pub id: usize,
    pub failure: Option<String>,
    /// Offset from the initial pose to the ground truth.
    pub true_offset: [f64; 3],
    /// Offset from the initial pose to the final estimate.
    pub estimate: [f64; 3],
    /// Signed final error in the ground-truth frame: lon (m), lat (m), yaw (deg).
    pub errors: [f64; 3],
    /// Diagonal of the last level's covariance (m², m², rad²).
    pub sigma_diag: [f64; 3],
    /// Combined error after each level, see [`level_error`].
    pub level_errors: [f64; 3],
}

impl FrameRecord {
    pub fn failed(id: usize, message: impl Into<String>) -> Self {
        Self {
            id,
            failure: Some(message.into()),
            true_offset: [f64::NAN; 3],
            estimate: [f64::NAN; 3],
            errors: [f64::NAN; 3],
            sigma_diag: [f64::NAN; 3],
            level_errors: [f64::NAN; 3],
        }
    }

    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }

    /// Per-level errors never grow. Missing levels are ignored.
    pub fn is_monotone(&self) -> bool {
        let v: Vec<f64> = self.level_errors.iter().copied().filter(|e| e.is_finite()).collect();
        v.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Error of `estimate` in the ground-truth frame: lon (m), lat (m), yaw (deg).
pub fn frame_errors(gt: &Pose6, estimate: &Pose6) -> [f64; 3] {
    let e = relative_offset(gt, estimate);
    [e.dx, e.dy, e.dpsi.to_degrees()]
}

/// Lever arm that converts a yaw error to meters: the RMS distance of the
/// grid's points from its centre.
pub fn yaw_lever_arm(spec: &GridSpec) -> f64 {
    let [ex, ey] = spec.extent();
    (((0.5 * ex).powi(2) + (0.5 * ey).powi(2)) / 3.0).sqrt()
}

/// Single pose-error magnitude `sqrt(dx² + dy² + (L·dψ)²)` with `L` the
/// yaw lever arm of `spec`.
pub fn level_error(gt: &Pose6, estimate: &Pose6, spec: &GridSpec) -> f64 {
    let e = relative_offset(gt, estimate);
    let l = yaw_lever_arm(spec);
    (e.dx * e.dx + e.dy * e.dy + (l * e.dpsi).powi(2)).sqrt()
}

/// Builds the record of a solved trial.
pub fn frame_record(
    id: usize,
    gt: &Pose6,
    init: &Pose6,
    true_offset: PoseOffset3,
    final_pose: &Pose6,
    levels: &[LevelTrace],
    spec: &GridSpec,
) -> FrameRecord {
    let mut level_errors = [f64::NAN; 3];
    for (slot, t) in level_errors.iter_mut().zip(levels) {
        *slot = level_error(gt, &t.estimate(), spec);
    }
    let sigma_diag = levels.last().map_or([f64::NAN; 3], |t| [t.sigma[(0, 0)], t.sigma[(1, 1)], t.sigma[(2, 2)]]);
    FrameRecord {
        id,
        failure: None,
        true_offset: true_offset.to_array(),
        estimate: relative_offset(init, final_pose).to_array(),
        errors: frame_errors(gt, final_pose),
        sigma_diag,
        level_errors,
    }
}

/// Aggregate accuracy over the successful trials. Fields are NaN when no
/// trial succeeded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub trials: usize,
    pub evaluated: usize,
    pub failures: usize,
    /// Per axis: lon (m), lat (m), yaw (deg).
    pub mae: [f64; 3],
    pub rmse: [f64; 3],
    /// `below[axis][k]`: percentage of trials with |error| under threshold `k`
    /// (`DIST_THRESHOLDS_M` for lon and lat, `YAW_THRESHOLDS_DEG` for yaw).
    pub below: [[f64; 3]; 3],
    /// Percentage with all three errors under `AR_LIMITS` at once.
    pub available_ratio: f64,
    /// Percentage of trials whose per-level error never grows.
    pub monotone: f64,
}

pub fn thresholds(axis: usize) -> [f64; 3] {
    if axis == 2 {
        YAW_THRESHOLDS_DEG
    } else {
        DIST_THRESHOLDS_M
    }
}

/// Aggregates `records` in order.
pub fn compute_metrics(records: &[FrameRecord]) -> MetricsReport {
    let ok: Vec<&FrameRecord> = records.iter().filter(|r| r.is_ok()).collect();
    let n = ok.len() as f64;
    let pct = |count: usize| if ok.is_empty() { f64::NAN } else { 100.0 * count as f64 / n };
    let mut mae = [f64::NAN; 3];
    let mut rmse = [f64::NAN; 3];
    let mut below = [[f64::NAN; 3]; 3];
    for a in 0..3 {
        if !ok.is_empty() {
            mae[a] = ok.iter().map(|r| r.errors[a].abs()).sum::<f64>() / n;
            rmse[a] = (ok.iter().map(|r| r.errors[a] * r.errors[a]).sum::<f64>() / n).sqrt();
        }
        for (k, t) in thresholds(a).iter().enumerate() {
            below[a][k] = pct(ok.iter().filter(|r| r.errors[a].abs() < *t).count());
        }
    }
    let available = ok
        .iter()
        .filter(|r| r.errors.iter().zip(AR_LIMITS).all(|(e, lim)| e.abs() < lim))
        .count();
    MetricsReport {
        trials: records.len(),
        evaluated: ok.len(),
        failures: records.len() - ok.len(),
        mae,
        rmse,
        below,
        available_ratio: pct(available),
        monotone: pct(ok.iter().filter(|r| r.is_monotone()).count()),
    }
}

impl MetricsReport {
    /// Consistency checks every report must satisfy: percentages in
    /// [0, 100] and non-decreasing in the threshold, MAE ≤ RMSE, AR no
    /// larger than any single-axis percentage at its AR limit. Returns the
    /// first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.evaluated == 0 {
            return Ok(());
        }
        for a in 0..3 {
            // rounding slack for the case where every error is identical
            if self.mae[a] > self.rmse[a] * (1.0 + 1e-12) {
                return Err(format!("{} MAE {} exceeds RMSE {}", AXES[a], self.mae[a], self.rmse[a]));
            }
            let b = self.below[a];
            if b.iter().any(|p| !(0.0..=100.0).contains(p)) {
                return Err(format!("{} percentage out of range: {b:?}", AXES[a]));
            }
            if b.windows(2).any(|w| w[1] < w[0]) {
                return Err(format!("{} percentages not monotone: {b:?}", AXES[a]));
            }
        }
        if !(0.0..=100.0).contains(&self.available_ratio) {
            return Err(format!("available ratio out of range: {}", self.available_ratio));
        }
        // the lateral AR limit equals the largest lateral threshold
        if self.available_ratio > self.below[1][2] {
            return Err(format!("available ratio {} exceeds lateral {}", self.available_ratio, self.below[1][2]));
        }
        Ok(())
    }

    /// Field-wise equality within `tol`, with NaN equal to NaN.
    pub fn approx_eq(&self, other: &MetricsReport, tol: f64) -> bool {
        let close = |a: f64, b: f64| (a.is_nan() && b.is_nan()) || (a - b).abs() <= tol;
        let flat = |m: &MetricsReport| {
            let mut v = Vec::new();
            v.extend(m.mae);
            v.extend(m.rmse);
            m.below.iter().for_each(|b| v.extend(b));
            v.push(m.available_ratio);
            v.push(m.monotone);
            v
        };
        self.trials == other.trials
            && self.evaluated == other.evaluated
            && self.failures == other.failures
            && flat(self).iter().zip(flat(other)).all(|(a, b)| close(*a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, e: [f64; 3]) -> FrameRecord {
        FrameRecord {
            id,
            failure: None,
            true_offset: [0.0; 3],
            estimate: e,
            errors: e,
            sigma_diag: [0.0; 3],
            level_errors: [3.0, 2.0, 1.0],
        }
    }

    #[test]
    fn hand_computed_metrics() {
        let rs = vec![rec(0, [0.05, -0.25, 0.2]), rec(1, [-0.15, 0.05, -0.7]), FrameRecord::failed(2, "x")];
        let m = compute_metrics(&rs);
        assert_eq!((m.trials, m.evaluated, m.failures), (3, 2, 1));
        assert!((m.mae[0] - 0.1).abs() < 1e-15);
        assert!((m.rmse[1] - ((0.0625 + 0.0025) / 2.0f64).sqrt()).abs() < 1e-15);
        assert_eq!(m.below[0], [50.0, 100.0, 100.0]);
        assert_eq!(m.below[1], [50.0, 50.0, 100.0]);
        assert_eq!(m.below[2], [0.0, 50.0, 50.0]);
        assert_eq!(m.available_ratio, 100.0);
        assert_eq!(m.monotone, 100.0);
        m.check_invariants().unwrap();
    }

    #[test]
    fn empty_set_is_nan() {
        let m = compute_metrics(&[]);
        assert_eq!((m.trials, m.evaluated, m.failures), (0, 0, 0));
        assert!(m.mae.iter().chain(&m.rmse).all(|v| v.is_nan()));
        assert!(m.available_ratio.is_nan() && m.monotone.is_nan());
        assert!(m.approx_eq(&m.clone(), 0.0));
    }

    #[test]
    fn errors_are_in_the_ground_truth_frame() {
        let gt = Pose6::planar(10.0, 5.0, 1.8, std::f64::consts::FRAC_PI_2);
        // 0.3 m along the heading, which points along world +y
        let est = Pose6::planar(10.0, 5.3, 1.8, std::f64::consts::FRAC_PI_2 + 0.01);
        let e = frame_errors(&gt, &est);
        assert!((e[0] - 0.3).abs() < 1e-12 && e[1].abs() < 1e-12);
        assert!((e[2] - 0.01f64.to_degrees()).abs() < 1e-12);
    }

    #[test]
    fn lever_arm_is_rms_radius() {
        let spec = GridSpec::centered(64, 64, 0.5);
        assert!((yaw_lever_arm(&spec) - 16.0 * (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn monotonicity_is_strict_about_growth() {
        let mut r = rec(0, [0.0; 3]);
        r.level_errors = [1.0, 1.0, 0.5];
        assert!(r.is_monotone());
        r.level_errors = [1.0, 0.5, 0.5 + 1e-15];
        assert!(!r.is_monotone());
        r.level_errors = [1.0, 0.5, f64::NAN];
        assert!(r.is_monotone());
    }
}
