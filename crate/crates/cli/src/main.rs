//! `vecmatch`: command-line front end for scene generation, rendering,
//! solving, training, evaluation and gradient checking.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use vecmatch::bev::save_grid;
use vecmatch::geometry::save_poses;
use vecmatch::harness::{self, emit_report, format_table, run_experiment_with, ExperimentConfig, FrameRecord};
use vecmatch::map::{map_size_report, save_map, VectorMap};
use vecmatch::matcher::{load_params, save_params};
use vecmatch::synth::{make_frame, make_frames};
use vecmatch::training::{gradcheck, gradcheck_problem, train_loop};

/// Relative error above which `gradcheck` fails.
const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "vecmatch", version, about = "Vectorized-map to BEV matching localizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic map and trajectory.
    GenMap(Common),
    /// Render the evaluation frames: poses, visible elements and BEV grids.
    Render(Common),
    /// Solve the evaluation frames with the untrained matcher.
    Solve(Common),
    /// Train the matcher and compare held-out accuracy before and after.
    Train(Common),
    /// Full experiment: optional training, solving and metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Solve with this checkpoint instead of the configured matcher.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck(Common),
}

/// Error with a stable machine-readable kind.
#[derive(Debug)]
struct Tagged {
    kind: &'static str,
    message: String,
}

impl std::fmt::Display for Tagged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Tagged {}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(t) = cause.downcast_ref::<Tagged>() {
            return t.kind;
        }
        if let Some(v) = cause.downcast_ref::<vecmatch::Error>() {
            return v.kind();
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "config";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "internal"
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(&c.config).with_context(|| format!("reading config {}", c.config.display()))?;
    let mut cfg: ExperimentConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", c.config.display()))?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_map(c: &Common) -> anyhow::Result<serde_json::Value> {
    let cfg = load_config(c)?;
    let setup = harness::setup(&cfg)?;
    let scene = &setup.scene;
    save_map(&scene.map, cfg.out.join("map.txt"))?;
    save_poses(&scene.trajectory, cfg.out.join("trajectory.txt"))?;
    let size = map_size_report(&scene.map, cfg.scene.road_length_m() / 1000.0)?;
    write_json(&cfg.out.join("map_size.json"), &size)?;
    Ok(json!({ "elements": scene.map.len(), "poses": scene.trajectory.len(), "bytes_per_km": size.bytes_per_km }))
}

fn render(c: &Common) -> anyhow::Result<serde_json::Value> {
    let cfg = load_config(c)?;
    let setup = harness::setup(&cfg)?;
    save_map(&setup.scene.map, cfg.out.join("map.txt"))?;
    let range = cfg.solver.level_range(0);
    let mut rendered = 0;
    let mut skipped = Vec::new();
    for i in 0..cfg.trials {
        let Some(f) = make_frame(&setup.scene, i, &setup.renderer, range, cfg.seed)? else {
            skipped.push(i);
            continue;
        };
        let dir = cfg.out.join("frames").join(format!("{i:05}"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        save_poses(&[f.gt_pose, f.init_pose], dir.join("poses.txt"))?;
        save_map(&VectorMap::new(setup.scene.map.origin(), f.elements.clone())?, dir.join("elements.txt"))?;
        for (l, grid) in f.pyramid.layers().iter().enumerate() {
            save_grid(grid, dir.join(format!("layer{l}.txt")))?;
        }
        write_json(&dir.join("frame.json"), &json!({ "id": i, "true_offset": f.true_offset.to_array(), "out_of_range": f.out_of_range }))?;
        rendered += 1;
    }
    Ok(json!({ "rendered": rendered, "skipped": skipped }))
}

fn report_summary(report: &harness::MetricsReport) -> serde_json::Value {
    serde_json::to_value(report).unwrap_or(serde_json::Value::Null)
}

fn solve(c: &Common) -> anyhow::Result<serde_json::Value> {
    let mut cfg = load_config(c)?;
    cfg.train = false;
    let e = harness::run_experiment(&cfg)?;
    emit_report(&e.report, &e.records, &e.histograms, &cfg.out)?;
    eprint!("{}", format_table(&e.report));
    Ok(report_summary(&e.report))
}

fn mae(records: &[FrameRecord]) -> [f64; 3] {
    harness::compute_metrics(records).mae
}

fn train(c: &Common) -> anyhow::Result<serde_json::Value> {
    let cfg = load_config(c)?;
    let setup = harness::setup(&cfg)?;
    let frames = harness::training_frames(&cfg, &setup)?;
    let held = make_frames(&setup.scene, &setup.renderer, cfg.training.held_out_frames, cfg.solver.level_range(0), cfg.seed)?;
    let before = mae(&harness::evaluate_frames(&held, &setup.params, &cfg.solver));
    let log_path = cfg.out.join("training_log.jsonl");
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut io_err = None;
    let out = train_loop(&frames, setup.params.clone(), &cfg.training, &cfg.solver, |r| {
        if io_err.is_none() {
            if let Err(e) = serde_json::to_string(r).map_err(anyhow::Error::from).and_then(|s| Ok(writeln!(log, "{s}")?)) {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.context(format!("writing {}", log_path.display())));
    }
    save_params(&out.params, cfg.out.join("params.txt"))?;
    let after = mae(&harness::evaluate_frames(&held, &out.params, &cfg.solver));
    let first = out.log.first().map_or(f64::NAN, |r| r.total);
    let last = out.log.last().map_or(f64::NAN, |r| r.total);
    let summary = json!({
        "iterations": out.log.len(),
        "initial_total": first,
        "final_total": last,
        "reduction": (first - last) / first.abs(),
        "held_out_mae_before": before,
        "held_out_mae_after": after,
    });
    write_json(&cfg.out.join("train_summary.json"), &summary)?;
    Ok(summary)
}

fn eval(c: &Common, params: Option<&Path>) -> anyhow::Result<serde_json::Value> {
    let cfg = load_config(c)?;
    let params = params.map(load_params).transpose()?;
    let e = run_experiment_with(&cfg, params)?;
    emit_report(&e.report, &e.records, &e.histograms, &cfg.out)?;
    if !e.training_log.is_empty() {
        write_jsonl(&cfg.out.join("training_log.jsonl"), &e.training_log)?;
        save_params(&e.params, cfg.out.join("params.txt"))?;
    }
    eprint!("{}", format_table(&e.report));
    Ok(report_summary(&e.report))
}

fn run_gradcheck(c: &Common) -> anyhow::Result<serde_json::Value> {
    let cfg = load_config(c)?;
    let (frame, params, solver) = gradcheck_problem(cfg.seed)?;
    let report = gradcheck(&frame, &params, &cfg.training, &solver, GRADCHECK_STEP)?;
    write_json(&cfg.out.join("gradcheck.json"), &report)?;
    let worst: serde_json::Map<String, serde_json::Value> = report.worst_by_loss().into_iter().map(|(k, v)| (k, json!(v))).collect();
    let max = report.max_rel_error();
    if !(max < GRADCHECK_TOLERANCE) {
        return Err(anyhow!(Tagged {
            kind: "gradcheck_failed",
            message: format!("max relative error {max:e} ≥ {GRADCHECK_TOLERANCE:e}; see gradcheck.json"),
        }));
    }
    Ok(json!({ "max_rel_error": max, "worst_by_loss": worst, "entries": report.entries.len() }))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenMap(_) => "gen-map",
        Command::Render(_) => "render",
        Command::Solve(_) => "solve",
        Command::Train(_) => "train",
        Command::Eval { .. } => "eval",
        Command::Gradcheck(_) => "gradcheck",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let record = json!({ "status": "error", "kind": "usage", "message": e.to_string().trim_end() });
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    let name = command_name(&cli.command);
    let result = match &cli.command {
        Command::GenMap(c) => gen_map(c),
        Command::Render(c) => render(c),
        Command::Solve(c) => solve(c),
        Command::Train(c) => train(c),
        Command::Eval { common, params } => eval(common, params.as_deref()),
        Command::Gradcheck(c) => run_gradcheck(c),
    };
    match result {
        Ok(summary) => {
            println!("{}", json!({ "status": "ok", "command": name, "result": summary }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = json!({ "status": "error", "command": name, "kind": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
