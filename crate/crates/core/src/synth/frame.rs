use rand::Rng;
use rayon::prelude::*;

use super::{rng_stream, Renderer, Scene};
use crate::geometry::{compose, relative_offset, BevProjector, GridSpec, Pose6, PoseOffset3, SegmentSampling};
use crate::map::{query_window, MapElement, VectorMap};
use crate::{bev::BevPyramid, Error, Result};

/// One localization problem: a ground-truth pose, a perturbed initial pose,
/// the map elements visible from the initial pose and the rendered BEV.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: usize,
    pub gt_pose: Pose6,
    pub init_pose: Pose6,
    /// Offset the solver should find: `compose(init_pose, true_offset) = gt_pose`.
    pub true_offset: PoseOffset3,
    pub elements: Vec<MapElement>,
    pub pyramid: BevPyramid,
    /// The perturbation was allowed to exceed the solver's level-0 range.
    pub out_of_range: bool,
}

/// Uniform offset within `±ranges` (m, m, rad) composed onto `gt_pose`.
/// Returns the initial pose and the offset leading back to `gt_pose`.
pub fn perturb_pose(gt_pose: &Pose6, ranges: [f64; 3], rng: &mut impl Rng) -> (Pose6, PoseOffset3) {
    let draw = |r: f64, rng: &mut dyn rand::RngCore| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let o = PoseOffset3::new(draw(ranges[0], rng), draw(ranges[1], rng), draw(ranges[2], rng));
    let init = compose(gt_pose, o);
    (init, relative_offset(&init, gt_pose))
}

/// Map elements that can appear in a grid centred on `pose`.
pub(crate) fn elements_near(map: &VectorMap, pose: &Pose6, spec: &GridSpec) -> Vec<MapElement> {
    let ext = spec.extent();
    let r = 0.5 * ext[0].hypot(ext[1]) + 1.0;
    query_window(map, pose.xy(), [r, r])
}

/// Elements with at least one point inside the grid at `pose`.
pub(crate) fn visible_elements(map: &VectorMap, pose: &Pose6, spec: &GridSpec) -> Result<Vec<MapElement>> {
    let proj = BevProjector::new(pose, spec)?;
    Ok(elements_near(map, pose, spec)
        .into_iter()
        .filter(|e| e.world_points(SegmentSampling::default()).iter().any(|&p| spec.contains(proj.project(p))))
        .collect())
}

/// Drops each element independently with the probability of its type.
pub fn ablate_landmarks(frame: &Frame, dropout: &[f64], rng: &mut impl Rng) -> Frame {
    let mut out = frame.clone();
    out.elements.retain(|e| {
        let p = dropout.get(e.sem.index()).copied().unwrap_or(0.0);
        !(p > 0.0 && rng.random_bool(p.min(1.0)))
    });
    out
}

/// Frame `index` of `scene`: a random trajectory pose with random tilt and
/// initial-pose error, rendered by `renderer`. Returns `None` when no pose
/// with enough visible elements is found.
pub fn make_frame(scene: &Scene, index: usize, renderer: &Renderer, solver_range: [f64; 3], seed: u64) -> Result<Option<Frame>> {
    let spec = &scene.spec;
    if scene.trajectory.is_empty() {
        return Err(Error::arg("scene has no trajectory"));
    }
    let dropout = spec.dropout_table()?;
    let mut rng = rng_stream(seed, 1 + index as u64);
    let ranges = [spec.perturb_m[0], spec.perturb_m[1], spec.perturb_yaw_deg.to_radians()];
    let out_of_range = ranges.iter().zip(solver_range).any(|(r, s)| *r > s);
    let tilt = spec.tilt_deg.to_radians();
    for _ in 0..32 {
        let base = scene.trajectory[rng.random_range(0..scene.trajectory.len())];
        let (roll, pitch) = if tilt > 0.0 {
            (rng.random_range(-tilt..=tilt), rng.random_range(-tilt..=tilt))
        } else {
            (0.0, 0.0)
        };
        let t = base.translation;
        let gt = Pose6::from_euler([t.x, t.y, t.z], base.yaw(), pitch, roll);
        let (init, true_offset) = perturb_pose(&gt, ranges, &mut rng);
        let mut frame = Frame {
            id: index,
            gt_pose: gt,
            init_pose: init,
            true_offset,
            elements: visible_elements(&scene.map, &init, &spec.bev)?,
            pyramid: renderer.render(&elements_near(&scene.map, &gt, &spec.bev), &gt, &mut rng)?,
            out_of_range,
        };
        frame = ablate_landmarks(&frame, &dropout, &mut rng);
        if frame.elements.len() >= spec.min_visible.max(1) {
            return Ok(Some(frame));
        }
    }
    Ok(None)
}

/// `count` frames rendered in parallel, each from its own RNG stream.
pub fn make_frames(scene: &Scene, renderer: &Renderer, count: usize, solver_range: [f64; 3], seed: u64) -> Result<Vec<Frame>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            make_frame(scene, i, renderer, solver_range, seed)?
                .ok_or_else(|| Error::Sampling(format!("frame {i}: no pose with {} visible elements", scene.spec.min_visible)))
        })
        .collect()
}

/// Rotates the sensor frame of `frame` by `theta` about its own z-axis and
/// re-renders the BEV. Both poses turn with the sensor.
pub fn augment_lidar_rotation(frame: &Frame, map: &VectorMap, renderer: &Renderer, theta: f64, rng: &mut impl Rng) -> Result<Frame> {
    if !theta.is_finite() {
        return Err(Error::arg("rotation angle must be finite"));
    }
    let gt = frame.gt_pose.rotated_local(theta);
    let init = frame.init_pose.rotated_local(theta);
    let spec = renderer.specs[0];
    Ok(Frame {
        gt_pose: gt,
        init_pose: init,
        true_offset: relative_offset(&init, &gt),
        pyramid: renderer.render(&elements_near(map, &gt, &spec), &gt, rng)?,
        ..frame.clone()
    })
}

/// Rotates the map and the poses by `phi` about the world z-axis.
pub fn augment_world_rotation(map: &VectorMap, poses: &[Pose6], phi: f64) -> Result<(VectorMap, Vec<Pose6>)> {
    if !phi.is_finite() {
        return Err(Error::arg("rotation angle must be finite"));
    }
    let elements = map
        .elements()
        .iter()
        .map(|e| MapElement {
            geom: e.geom.rotated(phi),
            ..*e
        })
        .collect();
    let rotated = VectorMap::new(map.origin(), elements)?;
    Ok((rotated, poses.iter().map(|p| p.rotated_world(phi)).collect()))
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, SceneSpec, Signatures};
    use super::*;
    use crate::map::SemanticType;
    use crate::matcher::{MatcherDims, MatcherParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Scene, Renderer) {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let params = MatcherParams::oracle(MatcherDims::default(), [1.0; 3]).unwrap();
        let renderer = Renderer::new(scene.spec.bev, Signatures::from_params(&params), 0.0);
        (scene, renderer)
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let gt = Pose6::from_euler([3.0, 4.0, 1.8], 0.5, 0.01, 0.02);
        let (init, o) = perturb_pose(&gt, [0.0; 3], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(init, gt);
        assert_eq!(o, PoseOffset3::ZERO);
    }

    #[test]
    fn recorded_offset_inverts_the_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let gt = Pose6::from_euler([rng.random_range(-50.0..50.0), 3.0, 1.8], rng.random_range(-3.0..3.0), 0.02, -0.01);
            let (init, o) = perturb_pose(&gt, [2.0, 2.0, 0.035], &mut rng);
            let back = compose(&init, o);
            assert!((back.translation - gt.translation).norm() < 1e-12);
            assert!((back.rotation - gt.rotation).abs().max() < 1e-12);
        }
    }

    #[test]
    fn perturbations_are_uniform() {
        // Kolmogorov-Smirnov distance of 1000 x-draws against U(-2, 2)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = Pose6::identity();
        let mut xs: Vec<f64> = (0..1000)
            .map(|_| {
                let (init, _) = perturb_pose(&gt, [2.0, 2.0, 0.03], &mut rng);
                init.translation.x
            })
            .collect();
        xs.sort_by(f64::total_cmp);
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (x + 2.0) / 4.0;
                (f - i as f64 / 1000.0).abs().max((f - (i + 1) as f64 / 1000.0).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.63 / 1000f64.sqrt(), "KS distance {d}");
    }

    #[test]
    fn frames_are_seeded_and_visible() {
        let (scene, renderer) = setup();
        let a = make_frames(&scene, &renderer, 4, [3.0, 3.0, 0.05], 9).unwrap();
        let b = make_frames(&scene, &renderer, 4, [3.0, 3.0, 0.05], 9).unwrap();
        assert_eq!(a, b);
        for f in &a {
            assert!(f.elements.len() >= 20);
            assert!(!f.out_of_range);
            let back = compose(&f.init_pose, f.true_offset);
            assert!((back.translation - f.gt_pose.translation).norm() < 1e-12);
        }
        let wide = make_frames(&scene, &renderer, 1, [1.0, 1.0, 0.05], 9).unwrap();
        assert!(wide[0].out_of_range);
    }

    #[test]
    fn ablation_rates() {
        let (scene, renderer) = setup();
        let frame = make_frame(&scene, 0, &renderer, [3.0, 3.0, 0.05], 1).unwrap().unwrap();
        assert_eq!(ablate_landmarks(&frame, &[0.0; 8], &mut ChaCha8Rng::seed_from_u64(0)), frame);
        let mut all_poles = [0.0; 8];
        all_poles[SemanticType::Pole.index()] = 1.0;
        let f = ablate_landmarks(&frame, &all_poles, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(f.elements.iter().all(|e| e.sem != SemanticType::Pole));
        let mut half = [0.0; 8];
        half[SemanticType::LaneLine.index()] = 0.3;
        let n = frame.elements.iter().filter(|e| e.sem == SemanticType::LaneLine).count();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut kept = 0usize;
        for _ in 0..1000 {
            kept += ablate_landmarks(&frame, &half, &mut rng).elements.iter().filter(|e| e.sem == SemanticType::LaneLine).count();
        }
        let trials = (1000 * n) as f64;
        let dropped = trials - kept as f64;
        let sigma = (trials * 0.3 * 0.7).sqrt();
        assert!((dropped - 0.3 * trials).abs() <= 3.0 * sigma);
    }

    #[test]
    fn world_rotation_round_trips() {
        let (scene, _) = setup();
        let poses = &scene.trajectory[..5];
        let (m1, p1) = augment_world_rotation(&scene.map, poses, 0.7).unwrap();
        let (m2, p2) = augment_world_rotation(&m1, &p1, -0.7).unwrap();
        for (a, b) in scene.map.elements().iter().zip(m2.elements()) {
            let (da, db) = (a.descriptor(), b.descriptor());
            for k in 0..8 {
                assert!((da[k] - db[k]).abs() < 1e-9);
            }
        }
        for (a, b) in poses.iter().zip(&p2) {
            assert!((a.translation - b.translation).norm() < 1e-9);
        }
        let (m0, p0) = augment_world_rotation(&scene.map, poses, 0.0).unwrap();
        assert_eq!(m0.elements(), scene.map.elements());
        assert_eq!(p0, poses);
    }

    #[test]
    fn lidar_rotation_keeps_the_problem() {
        let (scene, renderer) = setup();
        let frame = make_frame(&scene, 3, &renderer, [3.0, 3.0, 0.05], 2).unwrap().unwrap();
        let same = augment_lidar_rotation(&frame, &scene.map, &renderer, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(same.pyramid, frame.pyramid);
        let turned = augment_lidar_rotation(&frame, &scene.map, &renderer, 0.3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // the world positions do not move, only the sensor axes
        assert!((turned.gt_pose.translation - frame.gt_pose.translation).norm() < 1e-15);
        assert!((turned.true_offset.dpsi - frame.true_offset.dpsi).abs() < 1e-12);
        let back = compose(&turned.init_pose, turned.true_offset);
        assert!((back.translation - turned.gt_pose.translation).norm() < 1e-12);
    }
}
