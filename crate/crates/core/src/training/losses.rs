use std::sync::Arc;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::autodiff::{focal_term, Graph, NodeId};
use crate::geometry::{compose, Pose6, PoseOffset3};
use crate::{Error, Result, Tensor};

use super::RandomPoseDistribution;

/// Eigenvalue floor applied before inverting the covariance.
pub const EIGEN_FLOOR: f64 = 1e-6;

/// Whitening matrix `Λ^{1/2} Uᵀ` for `sigma = U S Uᵀ`, where `Λ` is
/// `diag(1 / max(s, EIGEN_FLOOR))` scaled to unit trace.
pub fn rmse_weights(sigma: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !sigma.iter().all(|v| v.is_finite()) {
        return Err(Error::arg("covariance has non-finite entries"));
    }
    let scale = sigma.abs().max().max(1.0);
    if (sigma - sigma.transpose()).abs().max() > 1e-9 * scale {
        return Err(Error::arg("covariance is not symmetric"));
    }
    let eig = SymmetricEigen::new(*sigma);
    let min = eig.eigenvalues.min();
    if min < -1e-9 * scale {
        return Err(Error::arg(format!("covariance is not positive semi-definite (eigenvalue {min:e})")));
    }
    let inv = eig.eigenvalues.map(|s| 1.0 / s.max(EIGEN_FLOOR));
    let lambda = inv / inv.sum();
    Ok(Matrix3::from_diagonal(&lambda.map(f64::sqrt)) * eig.eigenvectors.transpose())
}

/// Covariance-weighted offset error `‖Λ^{1/2} Uᵀ (delta − delta_gt)‖`.
pub fn rmse_loss(delta: PoseOffset3, delta_gt: PoseOffset3, sigma: &Matrix3<f64>) -> Result<f64> {
    let w = rmse_weights(sigma)?;
    let e = nalgebra::Vector3::from(delta.to_array()) - nalgebra::Vector3::from(delta_gt.to_array());
    Ok((w * e).norm())
}

/// `−log(exp(S_gt) / (exp(S_gt) + Σ exp(S_i)))`; the ground truth sits in
/// its own denominator, so the loss is never negative.
pub fn pose_solver_kl_loss(scores: &[f64], gt_score: f64) -> f64 {
    let m = scores.iter().copied().fold(gt_score, f64::max);
    let s: f64 = scores.iter().map(|x| (x - m).exp()).sum::<f64>() + (gt_score - m).exp();
    m + s.ln() - gt_score
}

/// `−S_gt + log((1/N) Σ exp(S_j) / q_j)` from precomputed scores and
/// log-densities.
pub fn random_pose_kl_from_scores(scores: &[f64], ln_q: &[f64], gt_score: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != ln_q.len() {
        return Err(Error::arg("need one log-density per sampled score"));
    }
    let adj: Vec<f64> = scores.iter().zip(ln_q).map(|(s, q)| s - q).collect();
    let m = adj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + adj.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    Ok(lse - (scores.len() as f64).ln() - gt_score)
}

/// Importance-sampled KL estimate: draws poses around `gt_pose` from `dist`
/// with `seed` and scores them together with the ground truth.
pub fn random_pose_kl_loss(
    score_fn: impl Fn(&[Pose6]) -> Result<Vec<f64>>,
    gt_pose: &Pose6,
    dist: &RandomPoseDistribution,
    seed: u64,
) -> Result<f64> {
    let draws = dist.sample(seed)?;
    let mut poses: Vec<Pose6> = draws.iter().map(|(o, _)| compose(gt_pose, *o)).collect();
    poses.push(*gt_pose);
    let scores = score_fn(&poses)?;
    if scores.len() != poses.len() {
        return Err(Error::arg("score function returned the wrong number of scores"));
    }
    let ln_q: Vec<f64> = draws.iter().map(|d| d.1).collect();
    random_pose_kl_from_scores(&scores[..draws.len()], &ln_q, scores[draws.len()])
}

/// Binary focal loss summed over all entries of `cells × types` and divided
/// by the cell count: the per-type mean over cells, summed over types.
pub fn focal_seg_loss(pred: &Tensor, target: &Tensor, gamma: f64, alpha: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("predictions {:?} vs targets {:?}", pred.shape(), target.shape())));
    }
    if pred.rows == 0 {
        return Err(Error::arg("empty prediction grid"));
    }
    if !pred.data.iter().all(|p| (0.0..=1.0).contains(p)) {
        return Err(Error::arg("predictions must be probabilities"));
    }
    let total: f64 = pred.data.iter().zip(&target.data).map(|(&p, &t)| focal_term(p, t, gamma, alpha).0).sum();
    Ok(total / pred.rows as f64)
}

// ----- recorded versions -----

/// `delta` is a `1 × 3` node; `sigma` is held constant.
pub fn rmse_graph(g: &mut Graph, delta: NodeId, delta_gt: PoseOffset3, sigma: &Matrix3<f64>) -> Result<NodeId> {
    let w = rmse_weights(sigma)?;
    let wt = Tensor::from_vec(3, 3, (0..9).map(|k| w[(k % 3, k / 3)]).collect());
    let gt = g.constant(Tensor::from_vec(1, 3, delta_gt.to_array().to_vec()));
    let wt = g.constant(wt);
    let e = g.sub(delta, gt);
    let we = g.matmul(e, wt);
    let sq = g.square(we);
    let s = g.sum(sq);
    Ok(g.sqrt(s))
}

/// `scores` is `N × 1`, `gt` is `1 × 1`.
pub fn pose_solver_kl_graph(g: &mut Graph, scores: NodeId, gt: NodeId) -> NodeId {
    let all = g.concat_rows(scores, gt);
    let lse = g.logsumexp(all);
    g.sub(lse, gt)
}

pub fn random_pose_kl_graph(g: &mut Graph, scores: NodeId, ln_q: &[f64], gt: NodeId) -> NodeId {
    let q = g.constant(Tensor::from_vec(ln_q.len(), 1, ln_q.to_vec()));
    let adj = g.sub(scores, q);
    let lse = g.logsumexp(adj);
    let ln_n = g.constant(Tensor::scalar((ln_q.len() as f64).ln()));
    let lse = g.sub(lse, ln_n);
    g.sub(lse, gt)
}

/// `probs` is `cells × types`.
pub fn focal_graph(g: &mut Graph, probs: NodeId, target: Arc<Tensor>, gamma: f64, alpha: f64) -> NodeId {
    let cells = target.rows as f64;
    let f = g.focal(probs, target, gamma, alpha);
    let s = g.sum(f);
    g.scale(s, 1.0 / cells)
}
