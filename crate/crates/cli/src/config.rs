//! Run configuration: flags build a [`RunConfig`], then an optional TOML file
//! overrides any subset of its keys.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rantrack::experiments::default_threshold_grid;
use rantrack::metrics::DEFAULT_IOU_THRESHOLD;
use rantrack::model::DEFAULT_SPAN;
use rantrack::synth::{self, SceneConfig};
use rantrack::tracker::TrackerConfig;
use rantrack::training::TrainingConfig;
use rantrack::{Error, PredictorKind};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Scene directories holding gt.txt, det.txt and features.txt.
    pub data: Vec<PathBuf>,
    pub model: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: String,
    pub predictor: PredictorKind,
    pub span: usize,
    pub train_scenes: usize,
    pub threshold_grid: Vec<f64>,
    pub iou_threshold: f64,
    pub scene: SceneConfig,
    pub tracker: TrackerConfig,
    pub training: TrainingConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn new(seed: u64, preset: &str) -> Result<Self> {
        Ok(Self {
            seed,
            preset: preset.to_string(),
            predictor: PredictorKind::Ran,
            span: DEFAULT_SPAN,
            train_scenes: 16,
            threshold_grid: default_threshold_grid(),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            scene: synth::preset(preset)?.with_seed(seed),
            tracker: TrackerConfig::default(),
            training: TrainingConfig::default(),
            paths: Paths::default(),
        })
    }

    /// Every key a config file may set, with all optional fields present.
    fn template() -> Result<Value> {
        let mut t = Self::new(0, "crossing")?;
        t.training.max_grad_norm = Some(1.0);
        let p = PathBuf::new();
        t.paths = Paths {
            data: vec![],
            model: Some(p.clone()),
            gt: Some(p.clone()),
            results: Some(p.clone()),
            out: Some(p.clone()),
            loss_csv: Some(p),
        };
        Ok(Value::try_from(&t)?)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = synth::preset(&self.preset) {
            out.push(e.to_string());
        }
        if self.span == 0 {
            out.push("span must be positive".into());
        }
        if self.train_scenes == 0 {
            out.push("train_scenes must be positive".into());
        }
        if self.threshold_grid.is_empty() || self.threshold_grid.iter().any(|t| t.is_nan()) {
            out.push("threshold_grid needs at least one number".into());
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            out.push(format!("iou_threshold must be in (0, 1], got {}", self.iou_threshold));
        }
        out.extend(self.scene.violations().into_iter().map(|v| format!("scene: {v}")));
        if let Err(e) = self.tracker.validate() {
            out.push(format!("tracker: {e}"));
        }
        out.extend(self.training.violations().into_iter().map(|v| format!("training: {v}")));
        out
    }

    /// Applies `file` on top of `self`. Unknown keys, type errors and invalid
    /// values are all collected before failing.
    pub fn overridden(self, file: Option<&Path>) -> Result<Self> {
        let table = match file {
            None => None,
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let table: Table = text
                    .parse()
                    .with_context(|| format!("parsing config {}", path.display()))?;
                Some(table)
            }
        };
        let mut problems = Vec::new();
        let mut base = self;
        let table = match table {
            None => None,
            Some(table) => {
                let mut given = Value::Table(table);
                prune_unknown(&Self::template()?, &mut given, "", &mut problems);
                let Value::Table(table) = given else { unreachable!() };
                // a new preset replaces the whole scene before key overrides land
                if let Some(Value::String(name)) = table.get("preset") {
                    match synth::preset(name) {
                        Ok(scene) => {
                            base.preset = name.clone();
                            base.scene = scene.with_seed(base.seed);
                        }
                        Err(e) => problems.push(e.to_string()),
                    }
                }
                Some(table)
            }
        };
        let config = match &table {
            None => base,
            Some(table) => {
                let mut merged = Value::try_from(&base)?;
                merge(&mut merged, &Value::Table(table.clone()));
                match merged.try_into::<Self>() {
                    Ok(mut config) => {
                        let scene_seed_set = table
                            .get("scene")
                            .and_then(Value::as_table)
                            .is_some_and(|s| s.contains_key("seed"));
                        if !scene_seed_set {
                            config.scene.seed = config.seed;
                        }
                        config
                    }
                    Err(e) => {
                        problems.push(e.message().to_string());
                        return Err(Error::Config(report(&problems)).into());
                    }
                }
            }
        };
        problems.extend(config.violations());
        if !problems.is_empty() {
            return Err(Error::Config(report(&problems)).into());
        }
        Ok(config)
    }

    pub fn model_config(&self, appearance_dim: usize) -> rantrack::ModelConfig {
        rantrack::ModelConfig::desk(self.predictor)
            .with_span(self.span)
            .with_appearance_dim(appearance_dim)
    }
}

/// Whether the config file at `file` sets the key at `path`.
pub fn file_sets(file: Option<&Path>, path: &[&str]) -> Result<bool> {
    let Some(file) = file else {
        return Ok(false);
    };
    let text = fs::read_to_string(file).with_context(|| format!("reading config {}", file.display()))?;
    let mut value = Value::Table(text.parse()?);
    for key in path {
        match value.as_table().and_then(|t| t.get(*key)) {
            Some(v) => value = v.clone(),
            None => return Ok(false),
        }
    }
    Ok(true)
}

fn report(problems: &[String]) -> String {
    let mut msg = format!("{} problem(s):", problems.len());
    for p in problems {
        msg.push_str("\n  - ");
        msg.push_str(p);
    }
    msg
}

/// Removes keys the template lacks, recording each one.
fn prune_unknown(template: &Value, given: &mut Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Table(t), Value::Table(g)) = (template, given) else {
        return;
    };
    g.retain(|key, _| {
        let known = t.contains_key(key);
        if !known {
            out.push(format!("unknown key `{}{key}`", prefix));
        }
        known
    });
    for (key, value) in g.iter_mut() {
        prune_unknown(&t[key], value, &format!("{prefix}{key}."), out);
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (key, value) in o {
                match b.get_mut(key) {
                    Some(existing) if existing.is_table() && value.is_table() => merge(existing, value),
                    _ => {
                        b.insert(key.clone(), value.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}
