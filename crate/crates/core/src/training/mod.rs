//! Losses, reverse-mode gradients through the matcher and solver, finite
//! difference gradient checks and a plain gradient-descent loop.

mod losses;
mod random_pose;

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::bev::PYRAMID_LEVELS;
use crate::geometry::{compose, relative_offset, GridSpec, Pose6, PoseOffset3};
use crate::map::MapElement;
use crate::matcher::{decode, decode_graph, element_inputs, semantic_logits_graph, value_tensor, DecoderInputs, MapEmbedding, MatcherParams, ParamNodes};
use crate::solver::{score_graph, solve_multilevel, SolverConfig};
use crate::synth::{semantic_targets, Frame};
use crate::{Error, Result, Tensor};

pub use losses::{
    focal_graph, focal_seg_loss, pose_solver_kl_graph, pose_solver_kl_loss, random_pose_kl_from_scores, random_pose_kl_graph,
    random_pose_kl_loss, rmse_graph, rmse_loss, rmse_weights, EIGEN_FLOOR,
};
pub use random_pose::{bessel_i0_scaled, RandomPoseDistribution};

/// Training aborts once the total loss exceeds this.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Names of the loss terms, in breakdown order.
pub const LOSS_TERMS: [&str; 4] = ["rmse", "pose_solver", "random_pose", "segmentation"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rmse: f64,
    pub pose_solver: f64,
    pub random_pose: f64,
    pub segmentation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rmse: 1.0,
            pose_solver: 1.0,
            random_pose: 1.0,
            segmentation: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.rmse, self.pose_solver, self.random_pose, self.segmentation]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Frames in the fixed training set.
    pub train_frames: usize,
    /// Frames held out for the before/after solver comparison.
    pub held_out_frames: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub random_pose: RandomPoseDistribution,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: 0.01,
            iterations: 200,
            seed: 0,
            train_frames: 8,
            held_out_frames: 50,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            random_pose: RandomPoseDistribution::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.weights.as_array().iter().all(|w| *w >= 0.0 && w.is_finite()) {
            return Err(Error::arg("loss weights must be finite and non-negative"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning rate must be finite and non-negative"));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_alpha > 0.0) {
            return Err(Error::arg("focal gamma must be non-negative and alpha positive"));
        }
        self.random_pose.validate()
    }
}

/// Loss values of one evaluation. Terms are unweighted and summed over
/// pyramid levels; `total` applies the weights.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rmse: f64,
    pub pose_solver: f64,
    pub random_pose: f64,
    pub segmentation: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 4] {
        [self.rmse, self.pose_solver, self.random_pose, self.segmentation]
    }

    fn from_terms(t: [f64; 4], total: f64) -> Self {
        Self {
            rmse: t[0],
            pose_solver: t[1],
            random_pose: t[2],
            segmentation: t[3],
            total,
        }
    }
}

struct LevelContext {
    anchor: Pose6,
    offsets: Vec<PoseOffset3>,
    sigma: Matrix3<f64>,
    delta_gt: PoseOffset3,
    grid: Tensor,
    spec: GridSpec,
    targets: Arc<Tensor>,
}

/// Everything held constant while differentiating one frame: solver anchors
/// and covariances from a forward pass, the sampled random poses, the BEV
/// features and the segmentation targets.
pub struct FrameContext {
    inputs: DecoderInputs,
    value: Tensor,
    elements: Vec<MapElement>,
    gt_pose: Pose6,
    levels: Vec<LevelContext>,
    random: Vec<(PoseOffset3, f64)>,
}

/// Seed of the random poses for `frame` at training step `step`.
pub fn random_pose_seed(seed: u64, frame: usize, step: usize) -> u64 {
    let mix = (frame as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (step as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    seed ^ mix
}

impl FrameContext {
    /// Context with the random poses of step 0.
    pub fn new(frame: &Frame, params: &MatcherParams, config: &TrainingConfig, solver: &SolverConfig) -> Result<Self> {
        Self::at_step(frame, params, config, solver, 0)
    }

    /// Context whose random poses are drawn for training step `step`.
    pub fn at_step(frame: &Frame, params: &MatcherParams, config: &TrainingConfig, solver: &SolverConfig, step: usize) -> Result<Self> {
        if frame.elements.is_empty() {
            return Err(Error::arg(format!("frame {} has no elements", frame.id)));
        }
        let layer0 = frame.pyramid.layer(0);
        let emb = MapEmbedding::stack(&decode(&frame.elements, &frame.init_pose, layer0, params)?);
        let solved = solve_multilevel(&frame.pyramid, &frame.elements, &emb, &frame.init_pose, solver, params)?;
        let levels = solved
            .levels
            .iter()
            .enumerate()
            .map(|(l, t)| {
                let layer = frame.pyramid.layer(l);
                Ok(LevelContext {
                    anchor: t.anchor,
                    offsets: t.grid.offsets(),
                    sigma: t.sigma,
                    delta_gt: relative_offset(&t.anchor, &frame.gt_pose),
                    grid: layer.to_tensor(),
                    spec: layer.spec,
                    targets: Arc::new(semantic_targets(&frame.elements, &frame.gt_pose, &layer.spec)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs: element_inputs(&frame.elements, &frame.init_pose, &layer0.spec)?,
            value: value_tensor(layer0)?,
            elements: frame.elements.clone(),
            gt_pose: frame.gt_pose,
            levels,
            random: config.random_pose.sample(random_pose_seed(config.seed, frame.id, step))?,
        })
    }
}

/// Term nodes of a recorded loss.
pub struct LossNodes {
    pub terms: [NodeId; 4],
    pub total: NodeId,
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> NodeId {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n);
    }
    acc
}

/// Records all four losses over every solver level of one frame.
pub fn loss_graph(g: &mut Graph, p: &ParamNodes, ctx: &FrameContext, config: &TrainingConfig, solver: &SolverConfig) -> Result<LossNodes> {
    let value = g.constant(ctx.value.clone());
    let emb = decode_graph(g, p, &ctx.inputs, value, ctx.levels[0].spec)?;
    let ln_q: Vec<f64> = ctx.random.iter().map(|r| r.1).collect();
    let mut terms: [Vec<NodeId>; 4] = Default::default();
    for (l, lc) in ctx.levels.iter().enumerate() {
        let n = lc.offsets.len();
        let mut poses: Vec<Pose6> = lc.offsets.iter().map(|&o| compose(&lc.anchor, o)).collect();
        poses.push(ctx.gt_pose);
        poses.extend(ctx.random.iter().map(|(o, _)| compose(&ctx.gt_pose, *o)));
        let grid = g.constant(lc.grid.clone());
        let all = score_graph(g, p, l, grid, lc.spec, emb, &ctx.elements, &poses, solver.sampling())?;
        let cands = g.gather_rows(all, (0..n).collect());
        let gt = g.gather_rows(all, vec![n]);
        let random = g.gather_rows(all, (n + 1..poses.len()).collect());

        let row = g.transpose(cands);
        let probs = g.softmax_rows(row);
        let offsets = g.constant(Tensor::from_vec(n, 3, lc.offsets.iter().flat_map(|o| o.to_array()).collect()));
        let delta = g.matmul(probs, offsets);
        terms[0].push(rmse_graph(g, delta, lc.delta_gt, &lc.sigma)?);
        terms[1].push(pose_solver_kl_graph(g, cands, gt));
        terms[2].push(random_pose_kl_graph(g, random, &ln_q, gt));

        let logits = semantic_logits_graph(g, p, grid, l);
        let sem = g.sigmoid(logits);
        terms[3].push(focal_graph(g, sem, lc.targets.clone(), config.focal_gamma, config.focal_alpha));
    }
    let terms = terms.map(|t| sum_nodes(g, &t));
    let weighted: Vec<NodeId> = terms.iter().zip(config.weights.as_array()).map(|(&t, w)| g.scale(t, w)).collect();
    let total = sum_nodes(g, &weighted);
    Ok(LossNodes { terms, total })
}

fn breakdown(g: &Graph, nodes: &LossNodes) -> LossBreakdown {
    LossBreakdown::from_terms(nodes.terms.map(|t| g.value(t).item()), g.value(nodes.total).item())
}

/// Loss values with the context held fixed.
pub fn evaluate_context(ctx: &FrameContext, params: &MatcherParams, config: &TrainingConfig, solver: &SolverConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let nodes = loss_graph(&mut g, &p, ctx, config, solver)?;
    Ok(breakdown(&g, &nodes))
}

/// Weighted total and breakdown for one frame, running the full forward
/// pipeline once.
pub fn total_loss(frame: &Frame, params: &MatcherParams, config: &TrainingConfig, solver: &SolverConfig) -> Result<LossBreakdown> {
    config.validate()?;
    evaluate_context(&FrameContext::new(frame, params, config, solver)?, params, config, solver)
}

pub type ParamGradients = BTreeMap<String, Tensor>;

fn collect_gradients(g: &Graph, p: &ParamNodes, params: &MatcherParams, out: NodeId) -> Result<ParamGradients> {
    let grads = g.backward(out)?;
    Ok(p.iter().map(|(name, id)| (name.to_string(), grads.get_or_zeros(id, params.get(name)))).collect())
}

/// Gradients of every term and of the total (last) with the context fixed.
pub fn context_gradients(
    ctx: &FrameContext,
    params: &MatcherParams,
    config: &TrainingConfig,
    solver: &SolverConfig,
) -> Result<(LossBreakdown, Vec<ParamGradients>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let nodes = loss_graph(&mut g, &p, ctx, config, solver)?;
    let mut out = Vec::with_capacity(5);
    for node in nodes.terms.iter().chain([&nodes.total]) {
        out.push(collect_gradients(&g, &p, params, *node)?);
    }
    Ok((breakdown(&g, &nodes), out))
}

/// Mean loss and mean total-loss gradient over `frames` with the random
/// poses of training step `step`. Frames run in parallel; the reduction is
/// in frame order.
pub fn loss_and_gradients(
    frames: &[Frame],
    params: &MatcherParams,
    config: &TrainingConfig,
    solver: &SolverConfig,
    step: usize,
) -> Result<(LossBreakdown, ParamGradients)> {
    if frames.is_empty() {
        return Err(Error::arg("no training frames"));
    }
    let per_frame: Vec<(LossBreakdown, ParamGradients)> = frames
        .par_iter()
        .map(|f| {
            let ctx = FrameContext::at_step(f, params, config, solver, step)?;
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let nodes = loss_graph(&mut g, &p, &ctx, config, solver)?;
            Ok((breakdown(&g, &nodes), collect_gradients(&g, &p, params, nodes.total)?))
        })
        .collect::<Result<_>>()?;
    let k = 1.0 / frames.len() as f64;
    let mut mean = LossBreakdown::default();
    let mut grads: ParamGradients = params.iter().map(|(n, t)| (n.to_string(), Tensor::zeros(t.rows, t.cols))).collect();
    for (b, gr) in &per_frame {
        mean.rmse += k * b.rmse;
        mean.pose_solver += k * b.pose_solver;
        mean.random_pose += k * b.random_pose;
        mean.segmentation += k * b.segmentation;
        mean.total += k * b.total;
        for (name, t) in gr {
            let acc = grads.get_mut(name).expect("gradient for every parameter");
            acc.data.iter_mut().zip(&t.data).for_each(|(a, v)| *a += k * v);
        }
    }
    Ok((mean, grads))
}

pub fn gradient_norm(grads: &ParamGradients) -> f64 {
    grads.values().map(|t| t.data.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub rmse: f64,
    pub pose_solver: f64,
    pub random_pose: f64,
    pub segmentation: f64,
    pub total: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub params: MatcherParams,
    pub log: Vec<IterationRecord>,
}

/// Plain gradient descent on the mean total loss over `frames`. Anchors and
/// covariances are refreshed from the current parameters every iteration,
/// and the random poses are redrawn so the sampled denominator cannot be
/// memorized.
/// `on_record` sees each log line as it is produced.
pub fn train_loop(
    frames: &[Frame],
    params: MatcherParams,
    config: &TrainingConfig,
    solver: &SolverConfig,
    mut on_record: impl FnMut(&IterationRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    solver.validate()?;
    let mut params = params;
    let mut log = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let (loss, grads) = loss_and_gradients(frames, &params, config, solver, iteration)?;
        if !(loss.total <= DIVERGENCE_LOSS) {
            return Err(Error::Divergence { iteration, loss: loss.total });
        }
        let record = IterationRecord {
            iteration,
            rmse: loss.rmse,
            pose_solver: loss.pose_solver,
            random_pose: loss.random_pose,
            segmentation: loss.segmentation,
            total: loss.total,
            grad_norm: gradient_norm(&grads),
        };
        on_record(&record);
        log.push(record);
        params.apply_update(&grads, -config.learning_rate);
    }
    Ok(TrainOutcome { params, log })
}

/// Analytic against central-difference gradient of one loss over one
/// parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub loss: String,
    pub group: String,
    pub scalars: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    /// Worst relative error per loss, in `LOSS_TERMS` order then `total`.
    pub fn worst_by_loss(&self) -> Vec<(String, f64)> {
        let mut names: Vec<String> = LOSS_TERMS.iter().map(|s| s.to_string()).collect();
        names.push("total".into());
        names
            .into_iter()
            .map(|n| {
                let worst = self.entries.iter().filter(|e| e.loss == n).map(|e| e.rel_error).fold(0.0, f64::max);
                (n, worst)
            })
            .collect()
    }
}

/// Groups whose gradient norms both fall below this are reported as zero
/// error; it sits above the round-off floor of a 1e-4 central difference.
pub const VANISHING_NORM: f64 = 1e-9;

/// Central differences with `step` on every scalar of every parameter,
/// compared per group against the reverse-mode gradients of each loss term
/// and of the total.
pub fn gradcheck(frame: &Frame, params: &MatcherParams, config: &TrainingConfig, solver: &SolverConfig, step: f64) -> Result<GradcheckReport> {
    if !(step > 0.0) {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    config.validate()?;
    let ctx = FrameContext::new(frame, params, config, solver)?;
    let (_, analytic) = context_gradients(&ctx, params, config, solver)?;
    let mut loss_names: Vec<String> = LOSS_TERMS.iter().map(|s| s.to_string()).collect();
    loss_names.push("total".into());
    let mut entries = Vec::new();
    for (name, tensor) in params.iter() {
        let numeric: Vec<[f64; 5]> = (0..tensor.len())
            .into_par_iter()
            .map(|i| {
                let eval = |delta: f64| -> Result<[f64; 5]> {
                    let mut p = params.clone();
                    let mut t = tensor.clone();
                    t.data[i] += delta;
                    p.set(name, t)?;
                    let b = evaluate_context(&ctx, &p, config, solver)?;
                    let t = b.terms();
                    Ok([t[0], t[1], t[2], t[3], b.total])
                };
                let (plus, minus) = (eval(step)?, eval(-step)?);
                Ok(std::array::from_fn(|k| (plus[k] - minus[k]) / (2.0 * step)))
            })
            .collect::<Result<_>>()?;
        for (k, loss) in loss_names.iter().enumerate() {
            let a = &analytic[k][name];
            let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
            for (av, nv) in a.data.iter().zip(&numeric) {
                diff += (av - nv[k]).powi(2);
                an += av * av;
                nn += nv[k] * nv[k];
            }
            let (an, nn, diff) = (an.sqrt(), nn.sqrt(), diff.sqrt());
            let denom = an.max(nn);
            entries.push(GradcheckEntry {
                loss: loss.clone(),
                group: name.to_string(),
                scalars: tensor.len(),
                analytic_norm: an,
                numeric_norm: nn,
                rel_error: if denom < VANISHING_NORM { 0.0 } else { diff / denom },
            });
        }
    }
    Ok(GradcheckReport { step, entries })
}

/// Problem size used by the gradient check: 8 channels, 4 map elements and
/// 5 samples per solver axis.
pub fn gradcheck_dims() -> crate::matcher::MatcherDims {
    crate::matcher::MatcherDims {
        channels: 8,
        heads: 2,
        points: 2,
        layers: 1,
        ffn_hidden: 16,
        score_dim: 8,
        score_hidden: 8,
        level_channels: [8; PYRAMID_LEVELS],
    }
}

/// Seeded toy problem for the gradient check: a rendered frame trimmed to
/// four elements, perturbed initial parameters and a 5 × 5 × 5 candidate
/// grid per level.
pub fn gradcheck_problem(seed: u64) -> Result<(Frame, MatcherParams, SolverConfig)> {
    use crate::synth::{generate_scene, make_frame, rng_stream, Renderer, SceneSpec, Signatures};
    let spec = SceneSpec {
        seed,
        straight_m: 200.0,
        curve_m: 100.0,
        perturb_m: [0.8, 0.8],
        perturb_yaw_deg: 0.8,
        min_visible: 4,
        noise_std: 0.1,
        bev: GridSpec::centered(16, 16, 1.0),
        ..Default::default()
    };
    let scene = generate_scene(&spec)?;
    let mut params = MatcherParams::init(gradcheck_dims(), seed)?;
    let mut rng = rng_stream(seed, 7);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let mut t = params.get(&name).clone();
        t.data.iter_mut().for_each(|v| *v += rand::Rng::random_range(&mut rng, -0.1..0.1));
        params.set(&name, t)?;
    }
    let renderer = Renderer::new(spec.bev, Signatures::from_params(&params), spec.noise_std);
    let solver = SolverConfig {
        range_m: [1.0, 1.0],
        range_yaw_deg: 1.0,
        half_samples: [2, 2, 2],
        samples_per_10m: 8.0,
        ..Default::default()
    };
    let mut frame = make_frame(&scene, 0, &renderer, solver.level_range(0), seed)?
        .ok_or_else(|| Error::Sampling("no toy frame with four visible elements".into()))?;
    frame.elements.truncate(4);
    Ok((frame, params, solver))
}
