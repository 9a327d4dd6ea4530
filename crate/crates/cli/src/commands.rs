use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _, Result};
use rantrack::experiments::{
    self, ablation_csv, fresh_model, search_threshold as grid_search, span_table_csv,
    threshold_curve_csv, Protocol,
};
use rantrack::io::{
    self, load_checkpoint, save_checkpoint, Checkpoint, DetectionSet, TrainingMetadata,
};
use rantrack::metrics::{clearmot, GroundTruth};
use rantrack::synth::{self, ScenePaths};
use rantrack::tracker::track_stream;
use rantrack::training::{
    grad_check, loss_curve_csv, sample_trajectories, AdamConfig, TrainingConfig, TrajectoryPool,
};
use rantrack::Error;

use crate::config::{file_sets, RunConfig};
use crate::{
    EvalArgs, GradcheckArgs, ModelArgs, OptimArgs, ProtocolArgs, SearchArgs, SweepArgs, SynthArgs,
    TrackArgs, TrackerArgs, TrainArgs,
};

pub struct Context {
    pub seed: u64,
    pub config: Option<PathBuf>,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_CHECK_FAILED: u8 = 5;

/// Process exit status for an error, by category.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => EXIT_CONFIG,
        Some(
            Error::Parse { .. }
            | Error::Features(_)
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::EmptyDataset(_)
            | Error::OutOfOrderFrames { .. },
        ) => EXIT_DATA,
        Some(Error::TrainingDiverged(_)) => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn missing(what: &str) -> anyhow::Error {
    Error::Config(format!("{what} is required (flag or config file)")).into()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).map_err(|source| {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn apply_model(cfg: &mut RunConfig, m: &ModelArgs) {
    cfg.predictor = m.predictor;
    cfg.span = m.span;
}

fn training_config(o: &OptimArgs, lr: f64) -> TrainingConfig {
    TrainingConfig {
        iterations: o.iterations,
        batch_size: o.batch_size,
        adam: AdamConfig {
            learning_rate: lr,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.adam_epsilon,
        },
        keep_prob: o.keep_prob,
        crop_min: o.crop_min,
        crop_max: o.crop_max,
        max_grad_norm: o.max_grad_norm,
    }
}

fn apply_tracker(cfg: &mut RunConfig, t: &TrackerArgs) {
    if let Some(th) = t.threshold {
        cfg.tracker.score_threshold = th;
    }
    cfg.tracker.gate_factor = t.gate_factor;
    cfg.tracker.t_terminate = t.t_terminate;
    cfg.tracker.min_detection_confidence = t.min_conf;
    cfg.tracker.modality = t.modality;
}

/// Detections of a scene directory, with features when the sidecar exists.
fn read_detections(dir: &Path) -> Result<DetectionSet> {
    let paths = ScenePaths::in_dir(dir);
    let dets = io::read_detections(&paths.detections)?;
    if paths.features.exists() {
        Ok(io::read_features(&paths.features, &dets)?)
    } else {
        Ok(dets)
    }
}

fn appearance_dim(dets: &DetectionSet) -> Result<usize> {
    dets.iter()
        .find_map(|d| d.appearance.as_ref().map(|a| a.len()))
        .ok_or_else(|| Error::EmptyDataset("no detection carries appearance features".into()).into())
}

pub fn synth(ctx: &Context, a: SynthArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::new(ctx.seed, &a.preset)?;
    cfg.paths.out = a.out;
    let cfg = cfg.overridden(ctx.config.as_deref())?;
    let out = cfg.paths.out.as_deref().ok_or_else(|| missing("--out"))?;
    let scene = synth::generate(&cfg.scene)?;
    synth::write_scene(out, &scene)?;
    println!(
        "wrote {} ({} frames, {} targets, {} detections, seed {})",
        out.display(),
        cfg.scene.num_frames,
        cfg.scene.num_targets,
        scene.detections.len(),
        cfg.scene.seed
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::new(ctx.seed, "crossing")?;
    apply_model(&mut cfg, &a.model);
    cfg.training = training_config(&a.optim, a.lr);
    cfg.paths.data = a.data;
    cfg.paths.model = Some(a.out);
    cfg.paths.loss_csv = Some(a.loss_csv);
    let cfg = cfg.overridden(ctx.config.as_deref())?;
    if cfg.paths.data.is_empty() {
        return Err(missing("--data"));
    }
    let mut pool = TrajectoryPool::new();
    let mut dim = None;
    for dir in &cfg.paths.data {
        let (gt, dets) = synth::read_scene(dir)?;
        dim.get_or_insert(appearance_dim(&dets)?);
        pool.add_scene(&gt, &dets)?;
    }
    let model_config = cfg.model_config(dim.expect("at least one scene"));
    let outcome = experiments::train_pool(&model_config, &pool, &cfg.training, cfg.seed)?;
    let checkpoint = Checkpoint::new(
        outcome.model,
        TrainingMetadata {
            seed: cfg.seed,
            iterations: cfg.training.iterations,
            score_threshold: None,
        },
    );
    let model_path = cfg.paths.model.as_deref().ok_or_else(|| missing("--out"))?;
    save_checkpoint(model_path, &checkpoint)?;
    if let Some(path) = &cfg.paths.loss_csv {
        write_text(path, &loss_curve_csv(&outcome.loss_curve))?;
    }
    let curve = &outcome.loss_curve;
    println!(
        "trained {} on {} trajectories: mean NLL {:.4} -> {:.4}; checkpoint {}",
        checkpoint.kind,
        pool.len(),
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN),
        model_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_model(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg.paths.model.as_deref().ok_or_else(|| missing("--model"))?;
    Ok(load_checkpoint(path)?)
}

/// A flag wins, then the config file, then the checkpoint's tuned value.
fn resolve_threshold(ctx: &Context, flag: Option<f64>, cfg: &mut RunConfig, ckpt: &Checkpoint) -> Result<()> {
    let from_file = file_sets(ctx.config.as_deref(), &["tracker", "score_threshold"])?;
    if flag.is_none() && !from_file {
        if let Some(t) = ckpt.metadata.score_threshold {
            cfg.tracker.score_threshold = t;
        }
    }
    Ok(())
}

pub fn track(ctx: &Context, a: TrackArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::new(ctx.seed, "crossing")?;
    apply_tracker(&mut cfg, &a.tracker);
    cfg.paths.model = a.model;
    cfg.paths.data = a.data.into_iter().collect();
    cfg.paths.results = Some(a.out);
    let mut cfg = cfg.overridden(ctx.config.as_deref())?;
    let ckpt = load_model(&cfg)?;
    resolve_threshold(ctx, a.tracker.threshold, &mut cfg, &ckpt)?;
    let [dir] = cfg.paths.data.as_slice() else {
        return Err(Error::Config("track needs exactly one --data directory".into()).into());
    };
    let dets = read_detections(dir)?;
    let rows = track_stream(&dets, &ckpt.model, &cfg.tracker)?;
    let out = cfg.paths.results.as_deref().ok_or_else(|| missing("--out"))?;
    io::write_results(out, &rows)?;
    let tracks = rows.iter().map(|r| r.track_id).collect::<std::collections::BTreeSet<_>>();
    println!(
        "{} rows, {} tracks, threshold {}; wrote {}",
        rows.len(),
        tracks.len(),
        cfg.tracker.score_threshold,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::new(ctx.seed, "crossing")?;
    cfg.paths.gt = a.gt;
    cfg.paths.results = a.results;
    cfg.paths.out = a.csv;
    cfg.iou_threshold = a.iou;
    let cfg = cfg.overridden(ctx.config.as_deref())?;
    let gt = io::read_ground_truth(cfg.paths.gt.as_deref().ok_or_else(|| missing("--gt"))?)?;
    let rows = io::read_results(cfg.paths.results.as_deref().ok_or_else(|| missing("--results"))?)?;
    let report = clearmot(&gt, &rows, cfg.iou_threshold);
    print!("{}", report.to_text());
    if let Some(path) = &cfg.paths.out {
        write_text(path, &report.to_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(ctx: &Context, a: GradcheckArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::new(ctx.seed, &a.preset)?;
    apply_model(&mut cfg, &a.model);
    let cfg = cfg.overridden(ctx.config.as_deref())?;
    let scene = synth::generate(&cfg.scene)?;
    let crop = (cfg.training.crop_min, cfg.training.crop_max);
    let sample = sample_trajectories(&scene.ground_truth, &scene.detections, 1, crop, cfg.seed)?
        .pop()
        .ok_or_else(|| anyhow!("scene produced no trajectories"))?;
    let model = fresh_model(&cfg.model_config(cfg.scene.appearance_dim), cfg.seed)?;
    let report = grad_check(&model, &sample, a.epsilon, a.tolerance, a.max_coords, cfg.seed)?;
    println!(
        "{}: checked {} of {} parameters, max relative error {:.3e} (tolerance {:.0e}) -> {}",
        cfg.predictor,
        report.checked,
        report.total,
        report.max_rel_error,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if let (false, Some(i)) = (report.passed, report.worst_index) {
        println!("worst parameter index {i}");
    }
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILED)
    })
}

pub fn search_threshold(ctx: &Context, a: SearchArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::new(ctx.seed, "crossing")?;
    apply_tracker(&mut cfg, &a.tracker);
    cfg.paths.model = a.model;
    cfg.paths.data = a.data;
    cfg.paths.out = a.out;
    if !a.grid.is_empty() {
        cfg.threshold_grid = a.grid;
    }
    let cfg = cfg.overridden(ctx.config.as_deref())?;
    if cfg.paths.data.is_empty() {
        return Err(missing("--data"));
    }
    let mut ckpt = load_model(&cfg)?;
    let scenes: Vec<(GroundTruth, DetectionSet)> = cfg
        .paths
        .data
        .iter()
        .map(|d| synth::read_scene(d))
        .collect::<rantrack::Result<_>>()?;
    let refs: Vec<_> = scenes.iter().map(|(g, d)| (g, d)).collect();
    let search = grid_search(&ckpt.model, &cfg.tracker, &refs, &cfg.threshold_grid, cfg.iou_threshold)?;
    emit(cfg.paths.out.as_deref(), &threshold_curve_csv(&search))?;
    eprintln!("best threshold {} (MOTA {:.4})", search.best, search.best_mota);
    if a.write_back {
        ckpt.metadata.score_threshold = Some(search.best);
        save_checkpoint(cfg.paths.model.as_deref().expect("model path checked"), &ckpt)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn protocol_config(ctx: &Context, a: &ProtocolArgs) -> Result<(RunConfig, Protocol)> {
    let mut cfg = RunConfig::new(ctx.seed, &a.preset)?;
    apply_model(&mut cfg, &a.model);
    apply_tracker(&mut cfg, &a.tracker);
    cfg.training = training_config(&a.optim, a.lr);
    cfg.train_scenes = a.train_scenes;
    cfg.paths.out = a.out.clone();
    let cfg = cfg.overridden(ctx.config.as_deref())?;
    let mut p = Protocol::for_preset(&cfg.preset, cfg.predictor)?;
    // presets that train on their own kind of scene follow scene overrides
    if p.train_scene == p.eval_scene {
        p.train_scene = cfg.scene.clone();
    }
    p.eval_scene = cfg.scene.clone();
    p.model = cfg.model_config(cfg.scene.appearance_dim);
    p.training = cfg.training.clone();
    p.tracker = cfg.tracker.clone();
    p.train_scenes = cfg.train_scenes;
    p.threshold_grid = cfg.threshold_grid.clone();
    p.iou_threshold = cfg.iou_threshold;
    if p.train_scene.appearance_dim != p.eval_scene.appearance_dim {
        p.train_scene.appearance_dim = p.eval_scene.appearance_dim;
    }
    p.validate()?;
    Ok((cfg, p))
}

pub fn ablate(ctx: &Context, a: ProtocolArgs) -> Result<ExitCode> {
    let (cfg, p) = protocol_config(ctx, &a)?;
    let rows = experiments::ablate(&p, cfg.seed)?;
    emit(cfg.paths.out.as_deref(), &ablation_csv(&rows))?;
    Ok(ExitCode::SUCCESS)
}

pub fn sweep_span(ctx: &Context, a: SweepArgs) -> Result<ExitCode> {
    let (cfg, p) = protocol_config(ctx, &a.protocol)?;
    let rows = experiments::sweep_span(&p, &a.spans, cfg.seed)?;
    emit(cfg.paths.out.as_deref(), &span_table_csv(&rows))?;
    Ok(ExitCode::SUCCESS)
}
