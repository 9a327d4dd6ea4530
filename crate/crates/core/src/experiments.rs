//! End-to-end protocols: train on synthetic scenes, pick the association
//! threshold on a validation scene, then track and score a test scene.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::PredictorKind;
use crate::error::{Error, Result};
use crate::io::DetectionSet;
use crate::metrics::{clearmot, GroundTruth, sweep_table_csv, MetricsReport, SweepRow, DEFAULT_IOU_THRESHOLD};
use crate::model::{ModelConfig, TrackModel};
use crate::synth::{self, Scene, SceneConfig};
use crate::tracker::{track_stream, Modality, ResultRow, TrackerConfig};
use crate::training::{derive_seed, train, AdamConfig, TrainingConfig, TrainingOutcome, TrajectoryPool};

/// Step size used by the experiment protocols. Appearance noise scales sit
/// near `e^-3`, which the library default needs thousands of steps to reach.
pub const PROTOCOL_LEARNING_RATE: f64 = 1e-2;

/// Log-score thresholds tried by the threshold search, ascending.
pub fn default_threshold_grid() -> Vec<f64> {
    vec![
        -1000.0, -500.0, -300.0, -200.0, -150.0, -100.0, -80.0, -60.0, -40.0, -30.0, -20.0,
        -10.0, 0.0, 10.0,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub tracker: TrackerConfig,
    /// Scenes the predictors are trained on.
    pub train_scene: SceneConfig,
    pub train_scenes: usize,
    /// Validation and test scenes are drawn from this config.
    pub eval_scene: SceneConfig,
    pub threshold_grid: Vec<f64>,
    pub iou_threshold: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        let crossing = synth::preset("crossing").expect("built-in preset");
        Self {
            model: ModelConfig::desk(PredictorKind::Ran),
            training: TrainingConfig {
                adam: AdamConfig {
                    learning_rate: PROTOCOL_LEARNING_RATE,
                    ..AdamConfig::default()
                },
                ..TrainingConfig::default()
            },
            tracker: TrackerConfig::default(),
            train_scene: crossing.clone(),
            train_scenes: 16,
            eval_scene: crossing,
            threshold_grid: default_threshold_grid(),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
        }
    }
}

impl Protocol {
    /// Training, validation and test on scenes of one preset.
    pub fn for_preset(name: &str, kind: PredictorKind) -> Result<Self> {
        let scene = synth::preset(name)?;
        let mut protocol = Self {
            model: ModelConfig::desk(kind).with_appearance_dim(scene.appearance_dim),
            train_scene: scene.clone(),
            eval_scene: scene,
            ..Self::default()
        };
        if name == "parallel" {
            // noise-free scenes teach nothing about noise; train on crossing data
            protocol.train_scene = synth::preset("crossing")?;
        }
        Ok(protocol)
    }

    pub fn with_kind(mut self, kind: PredictorKind) -> Self {
        self.model.kind = kind;
        self
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.model.validate() {
            out.push(e.to_string());
        }
        out.extend(self.training.violations());
        if let Err(e) = self.tracker.validate() {
            out.push(e.to_string());
        }
        out.extend(self.train_scene.violations().into_iter().map(|v| format!("train scene: {v}")));
        out.extend(self.eval_scene.violations().into_iter().map(|v| format!("eval scene: {v}")));
        if self.train_scenes == 0 {
            out.push("train_scenes must be positive".into());
        }
        if self.threshold_grid.is_empty() || self.threshold_grid.iter().any(|t| t.is_nan()) {
            out.push("threshold_grid needs at least one number".into());
        }
        if self.train_scene.appearance_dim != self.model.appearance.input_dim
            || self.eval_scene.appearance_dim != self.model.appearance.input_dim
        {
            out.push("scene appearance_dim must equal the appearance model input dimension".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn training_scenes(&self, seed: u64) -> Result<Vec<Scene>> {
        (0..self.train_scenes)
            .map(|i| synth::generate(&self.train_scene.clone().with_seed(derive_seed(seed, 1, i as u64))))
            .collect()
    }

    pub fn validation_scene(&self, seed: u64) -> Result<Scene> {
        synth::generate(&self.eval_scene.clone().with_seed(derive_seed(seed, 2, 0)))
    }

    pub fn test_scene(&self, seed: u64) -> Result<Scene> {
        synth::generate(&self.eval_scene.clone().with_seed(derive_seed(seed, 3, 0)))
    }
}

pub fn pool_of(scenes: &[Scene]) -> Result<TrajectoryPool> {
    let mut pool = TrajectoryPool::new();
    for s in scenes {
        pool.add_scene(&s.ground_truth, &s.detections)?;
    }
    Ok(pool)
}

/// Fresh predictors initialized from `seed`, trained on `scenes`.
pub fn train_model(
    config: &ModelConfig,
    scenes: &[Scene],
    training: &TrainingConfig,
    seed: u64,
) -> Result<TrainingOutcome> {
    train_pool(config, &pool_of(scenes)?, training, seed)
}

pub fn train_pool(
    config: &ModelConfig,
    pool: &TrajectoryPool,
    training: &TrainingConfig,
    seed: u64,
) -> Result<TrainingOutcome> {
    train(fresh_model(config, seed)?, pool, training, seed)
}

/// Randomly initialized predictors, reproducible from `seed`.
pub fn fresh_model(config: &ModelConfig, seed: u64) -> Result<TrackModel> {
    config.validate()?;
    Ok(TrackModel::random(config, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Ground truth with the detections to track, features attached.
pub type Labeled<'a> = (&'a GroundTruth, &'a DetectionSet);

pub fn labeled(scene: &Scene) -> Labeled<'_> {
    (&scene.ground_truth, &scene.detections)
}

pub fn evaluate(
    model: &TrackModel,
    tracker: &TrackerConfig,
    (gt, dets): Labeled<'_>,
    iou_threshold: f64,
) -> Result<(Vec<ResultRow>, MetricsReport)> {
    let rows = track_stream(dets, model, tracker)?;
    let report = clearmot(gt, &rows, iou_threshold);
    Ok((rows, report))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdSearch {
    pub best: f64,
    pub best_mota: f64,
    /// `(threshold, MOTA)` for every grid point.
    pub curve: Vec<(f64, f64)>,
}

/// Grid search maximizing mean MOTA on `scenes`. When several grid points tie,
/// the middle of the longest run of tied points wins (lower middle for even
/// runs), which keeps the threshold away from both plateau edges.
pub fn search_threshold(
    model: &TrackModel,
    tracker: &TrackerConfig,
    scenes: &[Labeled<'_>],
    grid: &[f64],
    iou_threshold: f64,
) -> Result<ThresholdSearch> {
    if grid.is_empty() || scenes.is_empty() {
        return Err(Error::InvalidArgument(
            "threshold search needs a grid and at least one scene".into(),
        ));
    }
    let curve: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&t| -> Result<(f64, f64)> {
            let config = TrackerConfig {
                score_threshold: t,
                ..tracker.clone()
            };
            let mut total = 0.0;
            for &scene in scenes {
                total += evaluate(model, &config, scene, iou_threshold)?.1.mota;
            }
            Ok((t, total / scenes.len() as f64))
        })
        .collect::<Result<_>>()?;
    let best_mota = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    // longest run of consecutive grid points reaching the best MOTA
    let (mut run_start, mut run_len, mut cur_start, mut cur_len) = (0, 0, 0, 0);
    for (i, c) in curve.iter().enumerate() {
        if c.1 == best_mota {
            if cur_len == 0 {
                cur_start = i;
            }
            cur_len += 1;
            if cur_len > run_len {
                run_start = cur_start;
                run_len = cur_len;
            }
        } else {
            cur_len = 0;
        }
    }
    let best = curve[run_start + (run_len - 1) / 2].0;
    Ok(ThresholdSearch {
        best,
        best_mota,
        curve,
    })
}

pub fn threshold_curve_csv(search: &ThresholdSearch) -> String {
    let mut out = String::from("threshold,mota\n");
    for (t, m) in &search.curve {
        let _ = writeln!(out, "{t},{m:.6}");
    }
    out
}

/// A trained model with its tuned threshold.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub model: TrackModel,
    pub loss_curve: Vec<f64>,
    pub threshold: ThresholdSearch,
}

impl Prepared {
    pub fn tracker(&self, base: &TrackerConfig) -> TrackerConfig {
        TrackerConfig {
            score_threshold: self.threshold.best,
            ..base.clone()
        }
    }
}

pub fn prepare(protocol: &Protocol, seed: u64) -> Result<Prepared> {
    protocol.validate()?;
    let scenes = protocol.training_scenes(seed)?;
    let outcome = train_model(&protocol.model, &scenes, &protocol.training, seed)?;
    let threshold = search_threshold(
        &outcome.model,
        &protocol.tracker,
        &[labeled(&protocol.validation_scene(seed)?)],
        &protocol.threshold_grid,
        protocol.iou_threshold,
    )?;
    Ok(Prepared {
        model: outcome.model,
        loss_curve: outcome.loss_curve,
        threshold,
    })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub prepared: Prepared,
    pub rows: Vec<ResultRow>,
    pub report: MetricsReport,
}

/// Train, tune and test with one seed.
pub fn run(protocol: &Protocol, seed: u64) -> Result<RunOutcome> {
    let prepared = prepare(protocol, seed)?;
    let (rows, report) = evaluate(
        &prepared.model,
        &prepared.tracker(&protocol.tracker),
        labeled(&protocol.test_scene(seed)?),
        protocol.iou_threshold,
    )?;
    Ok(RunOutcome {
        prepared,
        rows,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub kind: PredictorKind,
    pub modality: Modality,
    pub threshold: f64,
    pub report: MetricsReport,
}

/// Every predictor kind under every modality: 12 rows, kinds in
/// [`PredictorKind::ALL`] order, modalities A, M, A+M. One model is trained
/// per kind; the threshold is tuned per row.
pub fn ablate(protocol: &Protocol, seed: u64) -> Result<Vec<AblationRow>> {
    protocol.validate()?;
    let scenes = protocol.training_scenes(seed)?;
    let validation = protocol.validation_scene(seed)?;
    let validation = [labeled(&validation)];
    let test = protocol.test_scene(seed)?;
    let models: Vec<TrackModel> = PredictorKind::ALL
        .par_iter()
        .map(|&kind| {
            let config = ModelConfig { kind, ..protocol.model };
            Ok(train_model(&config, &scenes, &protocol.training, seed)?.model)
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, Modality)> = (0..models.len())
        .flat_map(|i| Modality::ALL.into_iter().map(move |m| (i, m)))
        .collect();
    jobs.par_iter()
        .map(|&(i, modality)| {
            let model = &models[i];
            let base = TrackerConfig {
                modality,
                ..protocol.tracker.clone()
            };
            let search = search_threshold(
                model,
                &base,
                &validation,
                &protocol.threshold_grid,
                protocol.iou_threshold,
            )?;
            let tuned = TrackerConfig {
                score_threshold: search.best,
                ..base
            };
            let (_, report) = evaluate(model, &tuned, labeled(&test), protocol.iou_threshold)?;
            Ok(AblationRow {
                kind: model.kind(),
                modality,
                threshold: search.best,
                report,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("predictor,modality,threshold,mota,mt,ml,fp,fn,ids,frag,motp\n");
    for row in rows {
        let r = &row.report;
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4},{},{},{},{},{:.4}",
            row.kind.name(),
            row.modality.label(),
            row.threshold,
            r.mota,
            r.mt_fraction,
            r.ml_fraction,
            r.false_positives,
            r.false_negatives,
            r.id_switches,
            r.fragmentations,
            r.motp
        );
    }
    out
}

/// Retrains and re-tunes the protocol's model for every external memory span.
pub fn sweep_span(protocol: &Protocol, spans: &[usize], seed: u64) -> Result<Vec<SweepRow<usize>>> {
    protocol.validate()?;
    if spans.contains(&0) {
        return Err(Error::InvalidArgument("memory spans must be positive".into()));
    }
    spans
        .par_iter()
        .map(|&span| {
            let p = Protocol {
                model: protocol.model.with_span(span),
                ..protocol.clone()
            };
            Ok(SweepRow {
                value: span,
                report: run(&p, seed)?.report,
            })
        })
        .collect()
}

pub fn span_table_csv(rows: &[SweepRow<usize>]) -> String {
    sweep_table_csv("span", rows)
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
