//! Acceptance suite: prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. Run with `--nocapture` to see the lines.

use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecmatch::bev::{bilinear_sample, rasterize_semantic_gt, BevGrid};
use vecmatch::geometry::{compose, BevProjector, GridSpec, Pose6, PoseOffset3, SegmentSampling};
use vecmatch::harness::{
    self, compute_metrics, emit_report, evaluate_frames, parse_summary, recompute_from_csv, run_experiment, ExperimentConfig, FrameRecord,
    MetricsReport, CSV_FILE, SUMMARY_FILE,
};
use vecmatch::map::{filter_surfels, Geometry, MapElement, SemanticType, SURFEL_CELL_SIZE, SURFEL_MAX_PLANARITY};
use vecmatch::matcher::{MatcherDims, MatcherParams};
use vecmatch::solver::{offset_covariance, posterior, score_candidates, softmax, Posterior};
use vecmatch::synth::{make_frames, Signatures};
use vecmatch::training::{gradcheck, gradcheck_dims, gradcheck_problem, train_loop, GradcheckReport};
use vecmatch::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn load_config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    toml::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn fmt3(v: [f64; 3]) -> String {
    format!("{:.4} m / {:.4} m / {:.4} deg", v[0], v[1], v[2])
}

// ---------------------------------------------------------------- oracles

/// Intersection of the vertical line through `(x, y)` with the plane
/// through `origin` with normal `n`.
fn line_plane(origin: Vector3<f64>, n: Vector3<f64>, x: f64, y: f64) -> Vector3<f64> {
    let p0 = Vector3::new(x, y, 0.0);
    let dir = Vector3::new(0.0, 0.0, 1.0);
    let t = n.dot(&(origin - p0)) / n.dot(&dir);
    p0 + dir * t
}

/// Grid coordinates of planar world point `p` seen from `pose`.
fn brute_project(pose: &Pose6, spec: &GridSpec, p: [f64; 2]) -> [f64; 2] {
    let n = pose.rotation * Vector3::z();
    let world = line_plane(pose.translation, n, p[0], p[1]);
    let local = pose.rotation.transpose() * (world - pose.translation);
    [(local.x - spec.h_min) / spec.resolution, (local.y - spec.w_min) / spec.resolution]
}

/// Densified planar points of an element.
fn brute_points(e: &MapElement, per_10m: f64) -> Vec<[f64; 2]> {
    match e.geom {
        Geometry::Segment { start, end } => {
            let len = ((end[0] - start[0]).powi(2) + (end[1] - start[1]).powi(2)).sqrt();
            if len == 0.0 {
                return vec![start];
            }
            let n = ((len / 10.0 * per_10m).ceil() as usize).max(2);
            (0..n)
                .map(|i| {
                    let t = i as f64 / (n - 1) as f64;
                    [start[0] + t * (end[0] - start[0]), start[1] + t * (end[1] - start[1])]
                })
                .collect()
        }
        Geometry::Vertical { center, .. } | Geometry::Surfel { center, .. } => vec![center],
    }
}

/// Tent-kernel form of bilinear interpolation: a weighted sum over every
/// node, zero outside the node hull.
fn brute_bilinear(grid: &BevGrid, p: [f64; 2]) -> Vec<f64> {
    let s = grid.spec;
    let mut out = vec![0.0; grid.channels];
    if p[0] < 0.0 || p[1] < 0.0 || p[0] > (s.rows - 1) as f64 || p[1] > (s.cols - 1) as f64 {
        return out;
    }
    for i in 0..s.rows {
        for j in 0..s.cols {
            let w = (1.0 - (p[0] - i as f64).abs()).max(0.0) * (1.0 - (p[1] - j as f64).abs()).max(0.0);
            if w > 0.0 {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * grid.data[(i * s.cols + j) * grid.channels + c];
                }
            }
        }
    }
    out
}

fn brute_gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

fn matvec_row(v: &[f64], m: &Tensor) -> Vec<f64> {
    (0..m.cols).map(|d| (0..m.rows).map(|c| v[c] * m.get(c, d)).sum()).collect()
}

/// Mean over elements of head(unify(avg sample) ⊙ unify(embedding)).
#[allow(clippy::too_many_arguments)]
fn brute_scores(
    grid: &BevGrid,
    els: &[MapElement],
    emb: &Tensor,
    cands: &[PoseOffset3],
    base: &Pose6,
    p: &MatcherParams,
    per_10m: f64,
) -> Vec<f64> {
    let l = grid.layer;
    let ub = p.get(&format!("unify_bev.{l}"));
    let ue = p.get(&format!("unify_emb.{l}"));
    let be = p.get(&format!("unify_emb_b.{l}"));
    let (w1, b1, w2, b2) = (p.get("head.w1"), p.get("head.b1"), p.get("head.w2"), p.get("head.b2").data[0]);
    cands
        .iter()
        .map(|&o| {
            let pose = compose(base, o);
            let mut total = 0.0;
            for (k, e) in els.iter().enumerate() {
                let pts = brute_points(e, per_10m);
                let mut avg = vec![0.0; grid.channels];
                for q in &pts {
                    for (a, v) in avg.iter_mut().zip(brute_bilinear(grid, brute_project(&pose, &grid.spec, *q))) {
                        *a += v / pts.len() as f64;
                    }
                }
                let u = matvec_row(&avg, ub);
                let m: Vec<f64> = matvec_row(emb.row(k), ue).iter().zip(&be.data).map(|(a, b)| a + b).collect();
                let z: Vec<f64> = u.iter().zip(&m).map(|(a, b)| a * b).collect();
                let h = matvec_row(&z, w1);
                total += h.iter().zip(&b1.data).zip(&w2.data).map(|((h, b), w)| brute_gelu(h + b) * w).sum::<f64>() + b2;
            }
            total / els.len() as f64
        })
        .collect()
}

/// Two-pass full outer-product covariance.
fn brute_covariance(post: &Posterior, mean: [f64; 3]) -> Matrix3<f64> {
    let mut s = Matrix3::zeros();
    for (o, p) in post.offsets.iter().zip(&post.probs) {
        let d = Vector3::from(o.to_array()) - Vector3::from(mean);
        s += *p * d * d.transpose();
    }
    s
}

fn brute_raster(els: &[MapElement], pose: &Pose6, spec: &GridSpec, per_10m: f64) -> Vec<f64> {
    let mut out = vec![0.0; spec.cells()];
    for e in els {
        for q in brute_points(e, per_10m) {
            let g = brute_project(pose, spec, q);
            let (i, j) = ((g[0] + 0.5).floor(), (g[1] + 0.5).floor());
            if i >= 0.0 && j >= 0.0 && i < spec.rows as f64 && j < spec.cols as f64 {
                out[i as usize * spec.cols + j as usize] = 1.0;
            }
        }
    }
    out
}

fn random_pose(rng: &mut ChaCha8Rng, tilt: f64) -> Pose6 {
    Pose6::from_euler(
        [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(1.0..2.5)],
        rng.random_range(-3.1..3.1),
        rng.random_range(-tilt..=tilt),
        rng.random_range(-tilt..=tilt),
    )
}

fn random_elements(rng: &mut ChaCha8Rng, k: usize, sem_segment: SemanticType) -> Vec<MapElement> {
    (0..k)
        .map(|i| {
            let p = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
            if i % 3 == 2 {
                MapElement::vertical(i as u64, SemanticType::Pole, p, 5.0)
            } else {
                let q = [p[0] + rng.random_range(-5.0..5.0), p[1] + rng.random_range(-5.0..5.0)];
                MapElement::segment(i as u64, sem_segment, p, q)
            }
        })
        .collect()
}

fn random_grid(rng: &mut ChaCha8Rng, spec: GridSpec, channels: usize, layer: usize) -> BevGrid {
    BevGrid::new(spec, channels, layer, (0..spec.cells() * channels).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// ------------------------------------------------------------- criteria

fn criterion_1_and_3() -> (Outcome, Outcome, Vec<MetricsReport>) {
    let cfg = load_config("oracle.toml");
    let t = Instant::now();
    let e = run_experiment(&cfg).unwrap();
    let elapsed = t.elapsed();
    let m = &e.report;
    let mae_ok = m.mae[0] <= 0.05 && m.mae[1] <= 0.05 && m.mae[2] <= 0.05;
    let all_below = m.below[0][2] == 100.0 && m.below[1][2] == 100.0 && m.below[2][2] == 100.0;
    let c1 = outcome(
        mae_ok && all_below && m.failures == 0 && m.evaluated == 200 && elapsed <= Duration::from_secs(120),
        format!(
            "MAE {} (limit 0.05 each); below 0.3 m/0.3 m/0.6 deg: {:.1}/{:.1}/{:.1} %; {} frames, {} failures; {:.1} s (limit 120 s)",
            fmt3(m.mae),
            m.below[0][2],
            m.below[1][2],
            m.below[2][2],
            m.evaluated,
            m.failures,
            elapsed.as_secs_f64()
        ),
    );
    let c3 = outcome(
        m.monotone >= 90.0,
        format!("per-level error non-increasing in {:.1} % of criterion-1 frames (limit 90 %)", m.monotone),
    );
    (c1, c3, vec![e.report])
}

fn criterion_2() -> (Outcome, MetricsReport) {
    let cfg = load_config("noisy.toml");
    let sig = Signatures::from_params(&cfg.matcher.build().unwrap());
    let norm = sig.levels[0].row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
    let e = run_experiment(&cfg).unwrap();
    let m = e.report;
    let noise_ok = (cfg.scene.noise_std - 0.3 * norm).abs() < 1e-12;
    let dropout_ok = cfg.scene.dropout.get("pole") == Some(&0.05) && cfg.scene.dropout.get("road_boundary") == Some(&0.5);
    let pass = noise_ok
        && dropout_ok
        && m.failures == 0
        && m.mae[0] <= 0.15
        && m.mae[1] <= 0.10
        && m.mae[2] <= 0.15
        && m.below[0][2] >= 95.0
        && m.below[1][2] >= 95.0;
    let detail = format!(
        "noise {:.4} = 0.3 x signature norm {:.4}; MAE {} (limits 0.15/0.10/0.15); below 0.3 m lon/lat {:.1}/{:.1} % (limit 95 %)",
        cfg.scene.noise_std,
        norm,
        fmt3(m.mae),
        m.below[0][2],
        m.below[1][2]
    );
    (outcome(pass, detail), m)
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_sum, mut worst_shift, mut worst_asym, mut min_eig, mut worst_delta) = (0.0f64, 0.0f64, 0.0f64, f64::INFINITY, 0.0f64);
    for case in 0..1000 {
        let n = rng.random_range(1..300);
        let scale = [0.1, 1.0, 10.0, 100.0][case % 4];
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let offsets: Vec<PoseOffset3> = (0..n)
            .map(|_| PoseOffset3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-0.05..0.05)))
            .collect();
        let post = posterior(offsets.clone(), &scores).unwrap();
        worst_sum = worst_sum.max((post.probs.iter().sum::<f64>() - 1.0).abs());
        let c = rng.random_range(-100.0..100.0);
        let shifted = softmax(&scores.iter().map(|s| s + c).collect::<Vec<_>>());
        worst_shift = worst_shift.max(shifted.iter().zip(&post.probs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let delta = vecmatch::solver::expected_offset(&post);
        let s = offset_covariance(&post, delta);
        worst_asym = worst_asym.max((s - s.transpose()).abs().max());
        min_eig = min_eig.min(SymmetricEigen::new(s).eigenvalues.min());
        // delta posterior: one candidate dominates by far more than the
        // exponent range, so every other probability is exactly zero
        let k = rng.random_range(0..n);
        let mut peaked = vec![-1e4; n];
        peaked[k] = 0.0;
        let post = posterior(offsets, &peaked).unwrap();
        let d = vecmatch::solver::expected_offset(&post);
        worst_delta = worst_delta.max(offset_covariance(&post, d).abs().max());
    }
    let pass = worst_sum <= 1e-9 && worst_shift <= 1e-12 && worst_asym == 0.0 && min_eig >= -1e-10 && worst_delta == 0.0;
    outcome(
        pass,
        format!(
            "1000 cases: |sum p - 1| {worst_sum:.1e} (1e-9); shift {worst_shift:.1e} (1e-12); asymmetry {worst_asym:.1e}; min eigenvalue {min_eig:.1e} (-1e-10); delta-posterior covariance {worst_delta:.1e}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = MatcherDims {
        channels: 8,
        heads: 2,
        points: 2,
        layers: 1,
        ffn_hidden: 8,
        score_dim: 4,
        score_hidden: 6,
        level_channels: [8, 6, 4],
    };
    let mut worst = [0.0f64; 4];
    let cases = 120;
    for case in 0..cases {
        // score_candidates
        let level = case % 3;
        let mut p = MatcherParams::init(dims, case as u64).unwrap();
        for name in [format!("unify_emb_b.{level}"), "head.b1".to_string(), "head.b2".to_string()] {
            let (r, c) = p.get(&name).shape();
            p.set(&name, Tensor::uniform(r, c, 0.5, &mut rng)).unwrap();
        }
        let spec = vecmatch::bev::pyramid_specs(GridSpec::centered(10, 12, 1.0))[level];
        let grid = random_grid(&mut rng, spec, dims.level_channels[level], level);
        let els = random_elements(&mut rng, 1 + case % 5, SemanticType::LaneLine);
        let emb = Tensor::uniform(els.len(), dims.channels, 1.0, &mut rng);
        let base = random_pose(&mut rng, 0.05);
        let cands: Vec<PoseOffset3> = (0..9)
            .map(|_| PoseOffset3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.1..0.1)))
            .collect();
        let per_10m = [4.0, 8.0, 20.0][case % 3];
        let fast = score_candidates(&grid, &els, &emb, &cands, &base, &p, SegmentSampling::PerTenMeters(per_10m)).unwrap();
        let slow = brute_scores(&grid, &els, &emb, &cands, &base, &p, per_10m);
        worst[0] = worst[0].max(fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        // offset_covariance
        let n = rng.random_range(1..200);
        let offsets: Vec<PoseOffset3> = (0..n)
            .map(|_| PoseOffset3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.05..0.05)))
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let post = posterior(offsets, &scores).unwrap();
        let mean = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.02..0.02)];
        let fast = offset_covariance(&post, PoseOffset3::from_array(mean));
        worst[1] = worst[1].max((fast - brute_covariance(&post, mean)).abs().max());

        // bilinear_sample, including points on and beyond the border
        let (rows, cols) = (rng.random_range(1..7), rng.random_range(1..7));
        let g = random_grid(&mut rng, GridSpec::centered(rows, cols, 0.5), 3, 0);
        for _ in 0..20 {
            let q = [rng.random_range(-1.0..g.spec.rows as f64 + 0.5), rng.random_range(-1.0..g.spec.cols as f64 + 0.5)];
            let q = if rng.random_bool(0.2) { [q[0].round(), q[1].round()] } else { q };
            let d = bilinear_sample(&g, q).unwrap().iter().zip(brute_bilinear(&g, q)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst[2] = worst[2].max(d);
        }

        // rasterize_semantic_gt
        let spec = GridSpec::centered(rng.random_range(8..24), rng.random_range(8..24), [0.25, 0.5, 1.0][case % 3]);
        let lines = random_elements(&mut rng, 6, SemanticType::LaneLine)
            .into_iter()
            .filter(|e| e.sem == SemanticType::LaneLine)
            .collect::<Vec<_>>();
        let pose = random_pose(&mut rng, 0.05);
        let fast = rasterize_semantic_gt(&lines, &pose, &spec, SegmentSampling::PerTenMeters(per_10m)).unwrap();
        let slow = brute_raster(&lines, &pose, &spec, per_10m);
        worst[3] = worst[3].max(fast.data.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    outcome(
        worst.iter().all(|w| *w <= 1e-10),
        format!(
            "{cases} instances each; max deviation score {:.1e}, covariance {:.1e}, bilinear {:.1e}, raster {:.1e} (limit 1e-10)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn criterion_6() -> (Outcome, GradcheckReport) {
    let t = Instant::now();
    let (frame, params, solver) = gradcheck_problem(6).unwrap();
    let cfg = vecmatch::training::TrainingConfig::default();
    let report = gradcheck(&frame, &params, &cfg, &solver, 1e-4).unwrap();
    let elapsed = t.elapsed();
    let dims = gradcheck_dims();
    let cands: usize = solver.level_grid(0).unwrap().len();
    let worst = report.worst_by_loss();
    let groups = params.names().count();
    let covered = worst.len() == 5 && report.entries.len() == 5 * groups;
    let pass = covered
        && report.max_rel_error() < 1e-4
        && dims.channels == 8
        && frame.elements.len() == 4
        && cands == 125
        && elapsed <= Duration::from_secs(180);
    let per: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    (
        outcome(
            pass,
            format!(
                "C = {}, K = {}, {} candidates, {} groups x 5 losses; worst relative error {} (limit 1e-4); {:.1} s (limit 180 s)",
                dims.channels,
                frame.elements.len(),
                cands,
                groups,
                per.join(", "),
                elapsed.as_secs_f64()
            ),
        ),
        report,
    )
}

fn criterion_7() -> (Outcome, Vec<MetricsReport>) {
    let cfg = load_config("train.toml");
    let setup = harness::setup(&cfg).unwrap();
    let train = harness::training_frames(&cfg, &setup).unwrap();
    let held = make_frames(&setup.scene, &setup.renderer, cfg.training.held_out_frames, cfg.solver.level_range(0), cfg.seed).unwrap();
    let before = compute_metrics(&evaluate_frames(&held, &setup.params, &cfg.solver));
    let out = train_loop(&train, setup.params.clone(), &cfg.training, &cfg.solver, |_| {}).unwrap();
    let after = compute_metrics(&evaluate_frames(&held, &out.params, &cfg.solver));
    let first = out.log.first().unwrap().total;
    let last = out.log.last().unwrap().total;
    let reduction = (first - last) / first;
    // determinism: a short rerun reproduces the start of the trajectory
    let mut short = cfg.training.clone();
    short.iterations = 3;
    let again = train_loop(&train, setup.params.clone(), &short, &cfg.solver, |_| {}).unwrap();
    let deterministic = again.log[..] == out.log[..3];
    let mae_down = (0..3).all(|a| after.mae[a] < before.mae[a]);
    let pass = train.len() == 8
        && held.len() == 50
        && out.log.len() == 200
        && first > 0.0
        && reduction >= 0.5
        && mae_down
        && deterministic;
    let w = cfg.training.weights;
    (
        outcome(
            pass,
            format!(
                "200 GD iterations (lr {}, weights rmse {} / ps {} / rp {} / seg {}): total {first:.3} -> {last:.3} ({:.1} % reduction, limit 50 %); held-out MAE {} -> {}; deterministic: {deterministic}",
                cfg.training.learning_rate,
                w.rmse,
                w.pose_solver,
                w.random_pose,
                w.segmentation,
                100.0 * reduction,
                fmt3(before.mae),
                fmt3(after.mae)
            ),
        ),
        vec![before, after],
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = GridSpec::centered(64, 64, 0.5);
    let mut flat_exact = true;
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let h = rng.random_range(0.5..3.0);
        let flat = Pose6::planar(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), h, rng.random_range(-3.1..3.1));
        let proj = BevProjector::new(&flat, &spec).unwrap();
        let q = [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)];
        flat_exact &= proj.plane_height(q) == h;
        let tilt = [0.01, 0.05, 0.2][case % 3];
        let pose = random_pose(&mut rng, tilt);
        let proj = BevProjector::new(&pose, &spec).unwrap();
        let q = [pose.translation.x + rng.random_range(-20.0..20.0), pose.translation.y + rng.random_range(-20.0..20.0)];
        let n = pose.rotation * Vector3::z();
        let oracle = line_plane(pose.translation, n, q[0], q[1]);
        worst = worst.max((proj.plane_height(q) - oracle.z).abs());
        let sensor = pose.rotation.transpose() * (oracle - pose.translation);
        worst = worst.max((proj.to_sensor(q) - sensor).abs().max());
        let g = brute_project(&pose, &spec, q);
        let fast = proj.project(q);
        worst = worst.max((fast[0] - g[0]).abs().max((fast[1] - g[1]).abs()) * spec.resolution);
    }
    outcome(
        flat_exact && worst <= 1e-9,
        format!("1000 flat poses give z = sensor height exactly: {flat_exact}; 1000 tilted poses deviate from the line-plane oracle by {worst:.1e} m (limit 1e-9)"),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut planar, mut per_cell, mut idempotent, mut complete) = (true, true, true, true);
    for case in 0..1000 {
        let n = rng.random_range(0..80);
        let span: f64 = [2.0, 5.0, 20.0][case % 3];
        let surfels: Vec<MapElement> = (0..n)
            .map(|i| {
                let c = if rng.random_bool(0.1) {
                    [rng.random_range(-span..span).floor(), rng.random_range(-span..span).floor()]
                } else {
                    [rng.random_range(-span..span), rng.random_range(-span..span)]
                };
                let r1 = if rng.random_bool(0.1) { SURFEL_MAX_PLANARITY } else { rng.random_range(0.0..0.3) };
                MapElement::surfel(rng.random_range(0..1000) * 100 + i as u64, c, [0.0, 0.0, 1.0], [r1, rng.random_range(0.0..1.0)])
            })
            .collect();
        let out = filter_surfels(&surfels).unwrap();
        let cell = |e: &MapElement| match e.geom {
            Geometry::Surfel { center, .. } => ((center[0] / SURFEL_CELL_SIZE).floor() as i64, (center[1] / SURFEL_CELL_SIZE).floor() as i64),
            _ => unreachable!(),
        };
        let ratio = |e: &MapElement| match e.geom {
            Geometry::Surfel { ratios, .. } => ratios[0],
            _ => unreachable!(),
        };
        planar &= out.iter().all(|e| ratio(e) <= SURFEL_MAX_PLANARITY);
        let mut cells: Vec<(i64, i64)> = out.iter().map(cell).collect();
        cells.sort_unstable();
        let before = cells.len();
        cells.dedup();
        per_cell &= cells.len() == before;
        idempotent &= filter_surfels(&out).unwrap() == out;
        // every cell holding a planar input keeps exactly one surfel
        let mut expected: Vec<(i64, i64)> = surfels.iter().filter(|e| ratio(e) <= SURFEL_MAX_PLANARITY).map(cell).collect();
        expected.sort_unstable();
        expected.dedup();
        complete &= expected == cells;
    }
    outcome(
        planar && per_cell && idempotent && complete,
        format!("1000 fuzzed inputs: ratio <= 0.1 {planar}; <= 1 surfel per 1 m cell {per_cell}; idempotent {idempotent}; every planar cell kept {complete}"),
    )
}

fn criterion_10(mut reports: Vec<MetricsReport>, mut record_sets: Vec<Vec<FrameRecord>>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..200 {
        let n = if case == 0 { 0 } else { rng.random_range(1..60) };
        let scale = [0.05, 0.3, 2.0][case % 3];
        let recs: Vec<FrameRecord> = (0..n)
            .map(|id| {
                if rng.random_bool(0.05) {
                    return FrameRecord::failed(id, "synthetic failure");
                }
                let e = [rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale) * 2.0];
                FrameRecord {
                    id,
                    failure: None,
                    true_offset: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.03..0.03)],
                    estimate: [0.0; 3],
                    errors: e,
                    sigma_diag: [rng.random_range(0.0..0.1), rng.random_range(0.0..0.1), rng.random_range(0.0..1e-4)],
                    level_errors: [rng.random_range(0.0..2.0), rng.random_range(0.0..1.0), rng.random_range(0.0..0.5)],
                }
            })
            .collect();
        record_sets.push(recs);
    }
    let dir = tempfile::tempdir().unwrap();
    let (mut matched, mut invariants, mut total) = (0, 0, 0);
    let mut first_problem = String::new();
    for (k, recs) in record_sets.iter().enumerate() {
        let report = compute_metrics(recs);
        let sub = dir.path().join(format!("r{k}"));
        emit_report(&report, recs, &[], &sub).unwrap();
        let csv = std::fs::read_to_string(sub.join(CSV_FILE)).unwrap();
        let summary = parse_summary(&std::fs::read_to_string(sub.join(SUMMARY_FILE)).unwrap()).unwrap();
        let recomputed = recompute_from_csv(&csv).unwrap();
        if recomputed.approx_eq(&report, 1e-9) && summary.approx_eq(&report, 1e-9) && csv.lines().count() == recs.len() + 1 {
            matched += 1;
        } else if first_problem.is_empty() {
            first_problem = format!("; set {k} did not recompute");
        }
        reports.push(report);
    }
    for r in &reports {
        total += 1;
        match r.check_invariants() {
            Ok(()) => invariants += 1,
            Err(e) if first_problem.is_empty() => first_problem = format!("; {e}"),
            Err(_) => {}
        }
    }
    outcome(
        matched == record_sets.len() && invariants == total,
        format!(
            "{matched}/{} reports recomputed from CSV within 1e-9; MAE <= RMSE and threshold monotonicity in {invariants}/{total} reports{first_problem}",
            record_sets.len()
        ),
    )
}

#[test]
fn acceptance() {
    let suite = Instant::now();
    let mut lines: Vec<(usize, Outcome)> = Vec::new();

    let (c1, c3, mut reports) = criterion_1_and_3();
    lines.push((1, c1));
    let (c2, noisy) = criterion_2();
    reports.push(noisy);
    lines.push((2, c2));
    lines.push((3, c3));
    lines.push((4, criterion_4()));
    lines.push((5, criterion_5()));
    lines.push((6, criterion_6().0));
    let (c7, before_after) = criterion_7();
    reports.extend(before_after);
    lines.push((7, c7));
    lines.push((8, criterion_8()));
    lines.push((9, criterion_9()));

    // the real experiment's per-frame records also go through the CSV check
    let mut small = load_config("oracle.toml");
    small.trials = 30;
    let real = run_experiment(&small).unwrap().records;
    lines.push((10, criterion_10(reports, vec![real])));

    lines.sort_by_key(|l| l.0);
    // write to the handle directly so the lines survive test output capture
    let mut out = std::io::stdout().lock();
    for (n, o) in &lines {
        writeln!(out, "criterion {n:>2}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail).unwrap();
    }
    writeln!(out, "acceptance suite: {:.1} s", suite.elapsed().as_secs_f64()).unwrap();
    drop(out);
    let failed: Vec<usize> = lines.iter().filter(|l| !l.1.pass).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
