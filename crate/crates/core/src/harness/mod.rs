//! Experiment orchestration: scene generation, rendering, optional training,
//! solving and accuracy metrics.

mod metrics;
mod report;

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::matcher::{decode, MapEmbedding, MatcherDims, MatcherParams, ORACLE_GAINS};
use crate::solver::{solve_multilevel, write_histograms, SolverConfig, SolverResult};
use crate::synth::{generate_scene, make_frame, make_frames, Frame, Renderer, Scene, SceneSpec, Signatures};
use crate::training::{train_loop, IterationRecord, TrainingConfig};
use crate::{Error, Result};

pub use metrics::{
    compute_metrics, frame_errors, frame_record, level_error, thresholds, yaw_lever_arm, FrameRecord, MetricsReport, AR_LIMITS, AXES,
    DIST_THRESHOLDS_M, YAW_THRESHOLDS_DEG,
};
pub use report::{
    emit_report, format_table, parse_csv, parse_summary, recompute_from_csv, write_csv, write_summary, CSV_FILE, CSV_HEADER,
    FAILURES_FILE, HISTOGRAM_DIR, SUMMARY_FILE, TABLE_FILE,
};

/// Where the matcher parameters come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatcherMode {
    /// Hand-set parameters that match oracle renders exactly.
    Oracle,
    /// Seeded random initialization, optionally trained.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherSetup {
    pub mode: MatcherMode,
    pub dims: MatcherDims,
    /// Per-level score gains of the oracle parameters.
    pub gains: [f64; 3],
    /// Initialization seed in learned mode.
    pub params_seed: u64,
}

impl Default for MatcherSetup {
    fn default() -> Self {
        Self {
            mode: MatcherMode::Oracle,
            dims: MatcherDims::default(),
            gains: ORACLE_GAINS,
            params_seed: 1,
        }
    }
}

impl MatcherSetup {
    /// Parameters before any training.
    pub fn build(&self) -> Result<MatcherParams> {
        match self.mode {
            MatcherMode::Oracle => MatcherParams::oracle(self.dims, self.gains),
            MatcherMode::Learned => MatcherParams::init(self.dims, self.params_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of the evaluation frames.
    pub seed: u64,
    pub trials: usize,
    pub out: PathBuf,
    /// Train the matcher on `training.train_frames` frames before solving.
    pub train: bool,
    /// Number of leading trials whose score histograms are written.
    pub histogram_frames: usize,
    pub scene: SceneSpec,
    pub solver: SolverConfig,
    pub matcher: MatcherSetup,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: 200,
            out: PathBuf::from("out"),
            train: false,
            histogram_frames: 4,
            scene: SceneSpec::default(),
            solver: SolverConfig::default(),
            matcher: MatcherSetup::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.solver.validate()?;
        self.matcher.dims.validate()?;
        self.training.validate()?;
        if self.scene.bev.rows < 2 || self.scene.bev.cols < 2 {
            return Err(Error::arg("BEV grid needs at least 2 × 2 cells"));
        }
        Ok(())
    }
}

/// Scene, untrained parameters and the renderer whose signatures are a
/// frozen snapshot of those parameters.
pub struct Setup {
    pub scene: Scene,
    pub params: MatcherParams,
    pub renderer: Renderer,
}

pub fn setup(config: &ExperimentConfig) -> Result<Setup> {
    config.validate()?;
    let scene = generate_scene(&config.scene)?;
    let params = config.matcher.build()?;
    let renderer = Renderer::new(config.scene.bev, Signatures::from_params(&params), config.scene.noise_std);
    Ok(Setup { scene, params, renderer })
}

/// Decodes the frame's elements and runs the multi-level solver.
pub fn solve_frame(frame: &Frame, params: &MatcherParams, solver: &SolverConfig) -> Result<SolverResult> {
    let emb = MapEmbedding::stack(&decode(&frame.elements, &frame.init_pose, frame.pyramid.layer(0), params)?);
    solve_multilevel(&frame.pyramid, &frame.elements, &emb, &frame.init_pose, solver, params)
}

/// Record of one solved frame.
pub fn evaluate_frame(frame: &Frame, result: &SolverResult) -> FrameRecord {
    frame_record(
        frame.id,
        &frame.gt_pose,
        &frame.init_pose,
        frame.true_offset,
        &result.final_pose,
        &result.levels,
        &frame.pyramid.layer(0).spec,
    )
}

/// Solves `frames` in parallel; records come back in frame order, failed
/// solves as failure records.
pub fn evaluate_frames(frames: &[Frame], params: &MatcherParams, solver: &SolverConfig) -> Vec<FrameRecord> {
    frames
        .par_iter()
        .map(|f| match solve_frame(f, params, solver) {
            Ok(r) => evaluate_frame(f, &r),
            Err(e) => FrameRecord::failed(f.id, e.to_string()),
        })
        .collect()
}

/// Everything a run produces.
pub struct Experiment {
    pub report: MetricsReport,
    pub records: Vec<FrameRecord>,
    /// Score histograms of the first `histogram_frames` solved trials.
    pub histograms: Vec<(usize, String)>,
    pub training_log: Vec<IterationRecord>,
    pub params: MatcherParams,
}

/// Training frames use their own seed so they never coincide with the
/// evaluation frames.
pub fn training_frames(config: &ExperimentConfig, setup: &Setup) -> Result<Vec<Frame>> {
    make_frames(
        &setup.scene,
        &setup.renderer,
        config.training.train_frames,
        config.solver.level_range(0),
        config.training.seed ^ 0x7472_6169_6e00_0000,
    )
}

/// Full pipeline. Frames that cannot be sampled or solved are recorded as
/// failures and excluded from the metrics.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Experiment> {
    run_experiment_with(config, None)
}

/// [`run_experiment`] solving with `params` instead of the configured
/// matcher. The renderer still uses the configured matcher's signatures,
/// and no training happens.
pub fn run_experiment_with(config: &ExperimentConfig, params: Option<MatcherParams>) -> Result<Experiment> {
    let setup = setup(config)?;
    let (params, training_log) = if let Some(p) = params {
        if p.dims.channels != config.matcher.dims.channels {
            return Err(Error::Shape(format!(
                "checkpoint has {} channels, the renderer {}",
                p.dims.channels, config.matcher.dims.channels
            )));
        }
        (p, Vec::new())
    } else if config.train {
        let frames = training_frames(config, &setup)?;
        let out = train_loop(&frames, setup.params.clone(), &config.training, &config.solver, |_| {})?;
        (out.params, out.log)
    } else {
        (setup.params.clone(), Vec::new())
    };
    let range = config.solver.level_range(0);
    let solved: Vec<(FrameRecord, Option<String>)> = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let frame = match make_frame(&setup.scene, i, &setup.renderer, range, config.seed) {
                Ok(Some(f)) => f,
                Ok(None) => return (FrameRecord::failed(i, format!("no pose with {} visible elements", config.scene.min_visible)), None),
                Err(e) => return (FrameRecord::failed(i, e.to_string()), None),
            };
            match solve_frame(&frame, &params, &config.solver) {
                Ok(r) => {
                    let hist = (i < config.histogram_frames).then(|| write_histograms(&r));
                    (evaluate_frame(&frame, &r), hist)
                }
                Err(e) => (FrameRecord::failed(i, e.to_string()), None),
            }
        })
        .collect();
    let mut records = Vec::with_capacity(solved.len());
    let mut histograms = Vec::new();
    for (r, h) in solved {
        if let Some(h) = h {
            histograms.push((r.id, h));
        }
        records.push(r);
    }
    Ok(Experiment {
        report: compute_metrics(&records),
        records,
        histograms,
        training_log,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            trials: 6,
            histogram_frames: 2,
            scene: SceneSpec {
                straight_m: 200.0,
                curve_m: 100.0,
                bev: GridSpec::centered(32, 32, 1.0),
                min_visible: 10,
                ..Default::default()
            },
            solver: SolverConfig {
                half_samples: [3, 3, 3],
                samples_per_10m: 8.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let c = small();
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.histograms, b.histograms);
        assert_eq!(a.records.len(), 6);
        assert_eq!(a.histograms.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 1]);
        a.report.check_invariants().unwrap();
    }

    #[test]
    fn impossible_frames_are_counted_as_failures() {
        let mut c = small();
        c.scene.min_visible = 100_000;
        let e = run_experiment(&c).unwrap();
        assert_eq!((e.report.trials, e.report.failures, e.report.evaluated), (6, 6, 0));
        assert!(e.report.mae[0].is_nan());
    }

    #[test]
    fn zero_trials_give_an_empty_report() {
        let mut c = small();
        c.trials = 0;
        let e = run_experiment(&c).unwrap();
        assert!(e.records.is_empty() && e.report.mae.iter().all(|v| v.is_nan()));
    }

    #[test]
    fn zero_perturbation_stays_within_quantization() {
        let mut c = small();
        c.scene.perturb_m = [0.0, 0.0];
        c.scene.perturb_yaw_deg = 0.0;
        let e = run_experiment(&c).unwrap();
        assert_eq!(e.report.failures, 0);
        assert!(e.report.mae[0] < 0.03 && e.report.mae[1] < 0.03, "{:?}", e.report.mae);
        assert!(e.report.mae[2] < 0.03, "{:?}", e.report.mae);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = small();
        c.solver.levels = 0;
        assert!(run_experiment(&c).is_err());
    }
}
