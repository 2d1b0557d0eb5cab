use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::{gelu_value, Graph, NodeId};
use crate::bev::BevGrid;
use crate::geometry::{compose, BevProjector, GridSpec, Pose6, PoseOffset3, SegmentSampling};
use crate::matcher::{level_key, MatcherParams, ParamNodes};
use crate::map::MapElement;
use crate::{Error, Result, Tensor};

/// Scores poses against one pyramid layer. The layer is projected to the
/// score width once, which is exact because sampling is linear.
pub struct LevelScorer {
    grid: BevGrid,
    emb: Vec<Vec<f64>>,
    points: Vec<Vec<[f64; 2]>>,
    w1: Tensor,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

fn check_inputs(grid: &BevGrid, elements: &[MapElement], embeddings: &Tensor, params: &MatcherParams) -> Result<()> {
    if elements.is_empty() {
        return Err(Error::arg("scoring needs at least one map element"));
    }
    if embeddings.rows != elements.len() || embeddings.cols != params.dims.channels {
        return Err(Error::Shape(format!(
            "embeddings {:?} do not match {} elements of width {}",
            embeddings.shape(),
            elements.len(),
            params.dims.channels
        )));
    }
    if grid.layer >= params.dims.level_channels.len() || grid.channels != params.dims.level_channels[grid.layer] {
        return Err(Error::Shape(format!("layer {} grid has {} channels", grid.layer, grid.channels)));
    }
    Ok(())
}

impl LevelScorer {
    pub fn new(
        grid: &BevGrid,
        elements: &[MapElement],
        embeddings: &Tensor,
        params: &MatcherParams,
        sampling: SegmentSampling,
    ) -> Result<Self> {
        check_inputs(grid, elements, embeddings, params)?;
        let l = grid.layer;
        let projected = grid.to_tensor().matmul(params.get(&level_key("unify_bev", l)));
        let grid = BevGrid::from_tensor(grid.spec, l, projected)?;
        let mut e = embeddings.matmul(params.get(&level_key("unify_emb", l)));
        let b = params.get(&level_key("unify_emb_b", l));
        for i in 0..e.rows {
            e.row_mut(i).iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        Ok(Self {
            grid,
            emb: (0..e.rows).map(|i| e.row(i).to_vec()).collect(),
            points: elements.iter().map(|el| el.world_points(sampling)).collect(),
            w1: params.get("head.w1").clone(),
            b1: params.get("head.b1").data.clone(),
            w2: params.get("head.w2").data.clone(),
            b2: params.get("head.b2").item(),
        })
    }

    fn head(&self, z: &[f64], hidden: &mut [f64]) -> f64 {
        hidden.copy_from_slice(&self.b1);
        for (d, &zd) in z.iter().enumerate() {
            if zd != 0.0 {
                for (h, w) in hidden.iter_mut().zip(self.w1.row(d)) {
                    *h += zd * w;
                }
            }
        }
        hidden.iter().zip(&self.w2).map(|(&h, w)| gelu_value(h) * w).sum::<f64>() + self.b2
    }

    pub fn score_pose(&self, pose: &Pose6) -> Result<f64> {
        let proj = BevProjector::new(pose, &self.grid.spec)?;
        let d = self.grid.channels;
        let mut u = vec![0.0; d];
        let mut hidden = vec![0.0; self.b1.len()];
        let mut total = 0.0;
        for (pts, e) in self.points.iter().zip(&self.emb) {
            u.fill(0.0);
            let inv = 1.0 / pts.len() as f64;
            for &p in pts {
                self.grid.sample_accumulate(proj.project(p), inv, &mut u);
            }
            u.iter_mut().zip(e).for_each(|(a, b)| *a *= b);
            total += self.head(&u, &mut hidden);
        }
        Ok(total / self.points.len() as f64)
    }

    /// Scores in input order, computed in parallel.
    pub fn score_poses(&self, poses: &[Pose6]) -> Result<Vec<f64>> {
        poses.par_iter().map(|p| self.score_pose(p)).collect()
    }

    pub fn score_offsets(&self, base: &Pose6, offsets: &[PoseOffset3]) -> Result<Vec<f64>> {
        offsets.par_iter().map(|&o| self.score_pose(&compose(base, o))).collect()
    }
}

/// Similarity of every candidate offset applied to `base_pose`: the mean over
/// elements of the score head applied to (unified averaged BEV sample) ⊙
/// (unified embedding). The pyramid layer is `grid.layer`.
pub fn score_candidates(
    grid: &BevGrid,
    elements: &[MapElement],
    embeddings: &Tensor,
    candidates: &[PoseOffset3],
    base_pose: &Pose6,
    params: &MatcherParams,
    sampling: SegmentSampling,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::arg("no candidates to score"));
    }
    LevelScorer::new(grid, elements, embeddings, params, sampling)?.score_offsets(base_pose, candidates)
}

/// Recorded version of the scorer: `grid` is the `cells × C_l` layer at
/// `level`, `emb` the `K × C` embeddings. Returns an `N × 1` node with one
/// score per pose.
#[allow(clippy::too_many_arguments)]
pub fn score_graph(
    g: &mut Graph,
    p: &ParamNodes,
    level: usize,
    grid: NodeId,
    spec: GridSpec,
    emb: NodeId,
    elements: &[MapElement],
    poses: &[Pose6],
    sampling: SegmentSampling,
) -> Result<NodeId> {
    let k = elements.len();
    if k == 0 || poses.is_empty() {
        return Err(Error::arg("scoring needs elements and poses"));
    }
    let world: Vec<Vec<[f64; 2]>> = elements.iter().map(|e| e.world_points(sampling)).collect();
    let mut points = Vec::new();
    let mut offsets = vec![0];
    for pose in poses {
        let proj = BevProjector::new(pose, &spec)?;
        for pts in &world {
            points.extend(pts.iter().map(|&q| proj.project(q)));
            offsets.push(points.len());
        }
    }
    let gd = g.matmul(grid, p.id(&level_key("unify_bev", level)));
    let sampled = g.sample_segments(gd, spec, Arc::new(points), Arc::new(offsets));
    let e = g.matmul(emb, p.id(&level_key("unify_emb", level)));
    let e = g.add_row(e, p.id(&level_key("unify_emb_b", level)));
    let tiled = g.gather_rows(e, (0..poses.len()).flat_map(|_| 0..k).collect());
    let z = g.mul(sampled, tiled);
    let h = g.matmul(z, p.id("head.w1"));
    let h = g.add_row(h, p.id("head.b1"));
    let h = g.gelu(h);
    let s = g.matmul(h, p.id("head.w2"));
    let s = g.add_row(s, p.id("head.b2"));
    let s = g.reshape(s, poses.len(), k);
    let s = g.row_sum(s);
    Ok(g.scale(s, 1.0 / k as f64))
}
