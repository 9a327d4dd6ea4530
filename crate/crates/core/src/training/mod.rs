//! Maximum-likelihood training of the appearance and motion predictors on
//! trajectories sampled from ground truth and detections.

mod adam;
mod gradcheck;
mod tape;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_against, GradCheckReport};

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::io::DetectionSet;
use crate::metrics::{iou, GroundTruth};
use crate::model::TrackModel;
use crate::tracker::{initial_motion_feature, motion_feature, BBox};
use crate::{Predictor, Vector};

use tape::GapRule;

/// Detections must overlap the ground-truth box by more than this to be sampled.
pub const SAMPLE_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub bbox: BBox,
    /// Center offset from the previous observed box, then size. Across
    /// masked steps the loss re-measures the offset from the extrapolated box.
    pub motion: Vector,
    pub appearance: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub frame: u32,
    /// `None` where the target is invisible or no detection covers it.
    pub observation: Option<Observation>,
}

impl TrajectoryStep {
    pub fn visible(&self) -> bool {
        self.observation.is_some()
    }
}

/// One cropped training trajectory. The first step is always observed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    pub steps: Vec<TrajectoryStep>,
}

impl TrajectorySample {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.steps.iter().filter(|s| s.visible()).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.len() < 2 || self.visible_count() < 2 {
            return Err(Error::InvalidArgument(
                "a trajectory sample needs at least two observed steps".into(),
            ));
        }
        if !self.steps[0].visible() {
            return Err(Error::InvalidArgument(
                "a trajectory sample must start with an observed step".into(),
            ));
        }
        Ok(())
    }

    fn modality<'a>(&'a self, pick: impl Fn(&'a Observation) -> &'a [f64]) -> (&'a [f64], Vec<Option<&'a [f64]>>) {
        let first = pick(self.steps[0].observation.as_ref().expect("validated"));
        let rest = self.steps[1..]
            .iter()
            .map(|s| s.observation.as_ref().map(&pick))
            .collect();
        (first, rest)
    }
}

/// Per-sequence recurrent dropout masks, already scaled by `1 / keep_prob`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutPlan {
    pub keep_prob: f64,
    pub appearance: Option<Vec<f64>>,
    pub motion: Option<Vec<f64>>,
}

impl DropoutPlan {
    pub fn none() -> Self {
        Self {
            keep_prob: 1.0,
            appearance: None,
            motion: None,
        }
    }

    /// Masks for both modalities' hidden units. Keep probability 1 yields
    /// all-ones masks, which leave every computation unchanged.
    pub fn sample<R: Rng + ?Sized>(model: &TrackModel, keep_prob: f64, rng: &mut R) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dropout keep probability must be in (0, 1], got {keep_prob}"
            )));
        }
        let mut mask = |pred: &Predictor| -> Option<Vec<f64>> {
            if !pred.kind().is_recurrent() {
                return None;
            }
            Some(
                (0..pred.dims().hidden_dim)
                    .map(|_| {
                        if rng.gen::<f64>() < keep_prob {
                            1.0 / keep_prob
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )
        };
        let appearance = mask(&model.appearance);
        let motion = mask(&model.motion);
        Ok(Self {
            keep_prob,
            appearance,
            motion,
        })
    }
}

/// Gradient with the same layout as a [`TrackModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub appearance: Predictor,
    pub motion: Predictor,
}

impl Gradients {
    pub fn zeros_like(model: &TrackModel) -> Self {
        Self {
            appearance: model.appearance.zeroed(),
            motion: model.motion.zeroed(),
        }
    }

    pub fn from_flat(model: &TrackModel, values: &[f64]) -> Result<Self> {
        let mut m = model.zeroed();
        m.set_flat(values)?;
        Ok(Self {
            appearance: m.appearance,
            motion: m.motion,
        })
    }

    /// Appearance coordinates followed by motion, matching [`TrackModel::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.appearance.flatten();
        out.extend(self.motion.flatten());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|g| g.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn run_modalities(
    model: &TrackModel,
    sample: &TrajectorySample,
    dropout: &DropoutPlan,
) -> Result<(tape::ModalityTape, tape::ModalityTape)> {
    sample.validate()?;
    let (first, steps) = sample.modality(|o| o.appearance.as_slice());
    let app = tape::forward(
        &model.appearance,
        first,
        &steps,
        GapRule::Freeze,
        dropout.appearance.as_deref(),
    )?;
    let (first, steps) = sample.modality(|o| o.motion.as_slice());
    let mot = tape::forward(
        &model.motion,
        first,
        &steps,
        GapRule::FollowMean { offset_dims: 2 },
        dropout.motion.as_deref(),
    )?;
    Ok((app, mot))
}

/// Negative log-likelihood of every observed step after the first, summed
/// over both modalities. Masked steps add nothing; appearance state stays
/// frozen across them while motion state advances on its own predicted mean,
/// exactly as a lost track does, and the next offset is measured from the
/// box extrapolated that way.
pub fn sequence_nll(model: &TrackModel, sample: &TrajectorySample) -> Result<f64> {
    let (app, mot) = run_modalities(model, sample, &DropoutPlan::none())?;
    Ok(app.loss + mot.loss)
}

/// Per-step `(appearance, motion)` losses of the observed steps after the first.
pub fn step_nll(model: &TrackModel, sample: &TrajectorySample) -> Result<Vec<(f64, f64)>> {
    let (app, mot) = run_modalities(model, sample, &DropoutPlan::none())?;
    Ok(app.step_losses.into_iter().zip(mot.step_losses).collect())
}

/// Sequence NLL and its exact gradient with respect to every parameter.
pub fn backward(model: &TrackModel, sample: &TrajectorySample) -> Result<(f64, Gradients)> {
    backward_with_dropout(model, sample, &DropoutPlan::none())
}

pub fn backward_with_dropout(
    model: &TrackModel,
    sample: &TrajectorySample,
    dropout: &DropoutPlan,
) -> Result<(f64, Gradients)> {
    let (app, mot) = run_modalities(model, sample, dropout)?;
    let appearance = tape::backward(&model.appearance, &app, dropout.appearance.as_deref())?;
    let motion = tape::backward(&model.motion, &mot, dropout.motion.as_deref())?;
    Ok((app.loss + mot.loss, Gradients { appearance, motion }))
}

/// Per-frame candidates of one ground-truth trajectory.
#[derive(Clone, Debug)]
struct PooledTrajectory {
    frames: Vec<(u32, Vec<(BBox, Vector)>)>,
}

impl PooledTrajectory {
    fn usable(&self, i: usize) -> bool {
        !self.frames[i].1.is_empty()
    }
}

/// Ground-truth trajectories with the detections that cover them, ready for
/// repeated sampling.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryPool {
    trajectories: Vec<PooledTrajectory>,
}

impl TrajectoryPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_scene(gt: &GroundTruth, dets: &DetectionSet) -> Result<Self> {
        let mut pool = Self::new();
        pool.add_scene(gt, dets)?;
        Ok(pool)
    }

    /// Adds every trajectory of a scene. Detections need appearance features.
    pub fn add_scene(&mut self, gt: &GroundTruth, dets: &DetectionSet) -> Result<()> {
        if let (Some((g0, g1)), Some((d0, d1))) = (gt.frame_range(), dets.frame_range()) {
            if d0 < g0 || d1 > g1 {
                return Err(Error::InvalidArgument(format!(
                    "detections span frames {d0}..={d1} outside ground truth {g0}..={g1}"
                )));
            }
        }
        for rows in gt.trajectories().into_values() {
            let (start, end) = (rows[0].0, rows[rows.len() - 1].0);
            let mut frames = Vec::with_capacity((end - start + 1) as usize);
            let mut next = rows.iter().peekable();
            for frame in start..=end {
                let mut candidates = Vec::new();
                if let Some(&&(f, gt_box, visible)) = next.peek() {
                    if f == frame {
                        next.next();
                        if visible {
                            for d in dets.frame(frame) {
                                if iou(&d.bbox, &gt_box) > SAMPLE_IOU {
                                    let feature = d.appearance.clone().ok_or_else(|| {
                                        Error::Features(format!(
                                            "training needs appearance features (frame {frame})"
                                        ))
                                    })?;
                                    candidates.push((d.bbox, feature));
                                }
                            }
                        }
                    }
                }
                frames.push((frame, candidates));
            }
            let trajectory = PooledTrajectory { frames };
            if (0..trajectory.frames.len())
                .filter(|&i| trajectory.usable(i))
                .count()
                >= 2
            {
                self.trajectories.push(trajectory);
            }
        }
        Ok(())
    }

    /// Trajectories with at least two usable steps.
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Draws `batch` crops with lengths in `[crop_min, crop_max]`; every crop
    /// starts on a usable step and holds at least two.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch: usize,
        crop: (usize, usize),
        rng: &mut R,
    ) -> Result<Vec<TrajectorySample>> {
        if self.trajectories.is_empty() {
            return Err(Error::EmptyDataset(
                "no trajectory has two steps covered by detections".into(),
            ));
        }
        let (crop_min, crop_max) = crop;
        if crop_min < 2 || crop_max < crop_min {
            return Err(Error::InvalidArgument(format!(
                "crop lengths must satisfy 2 <= min <= max, got [{crop_min}, {crop_max}]"
            )));
        }
        (0..batch)
            .map(|_| {
                let t = &self.trajectories[rng.gen_range(0..self.trajectories.len())];
                let len = rng.gen_range(crop_min..=crop_max).min(t.frames.len());
                let n = t.frames.len();
                let ok = |s: &usize| {
                    t.usable(*s) && (*s..(*s + len).min(n)).filter(|&i| t.usable(i)).count() >= 2
                };
                // prefer crops that fit entirely inside the trajectory
                let mut starts: Vec<usize> = (0..=n - len).filter(ok).collect();
                if starts.is_empty() {
                    starts = (0..n).filter(ok).collect();
                }
                let start = *starts.choose(rng).expect("pooled trajectories have two usable steps");
                Ok(build_sample(t, start, len, rng))
            })
            .collect()
    }
}

fn build_sample<R: Rng + ?Sized>(
    t: &PooledTrajectory,
    start: usize,
    len: usize,
    rng: &mut R,
) -> TrajectorySample {
    let end = (start + len).min(t.frames.len());
    let mut previous: Option<BBox> = None;
    let steps = t.frames[start..end]
        .iter()
        .map(|(frame, candidates)| {
            let observation = candidates.choose(rng).map(|(bbox, feature)| {
                let motion = match previous {
                    Some(prev) => motion_feature(bbox, &prev),
                    None => initial_motion_feature(bbox),
                };
                previous = Some(*bbox);
                Observation {
                    bbox: *bbox,
                    motion,
                    appearance: feature.clone(),
                }
            });
            TrajectoryStep {
                frame: *frame,
                observation,
            }
        })
        .collect();
    TrajectorySample { steps }
}

/// Samples `batch` trajectories from one scene, deterministically per seed.
pub fn sample_trajectories(
    gt: &GroundTruth,
    dets: &DetectionSet,
    batch: usize,
    crop: (usize, usize),
    seed: u64,
) -> Result<Vec<TrajectorySample>> {
    let pool = TrajectoryPool::from_scene(gt, dets)?;
    pool.sample(batch, crop, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Recurrent dropout keep probability; 1 disables dropout.
    pub keep_prob: f64,
    pub crop_min: usize,
    pub crop_max: usize,
    /// Rescale the batch gradient when its norm exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 64,
            adam: AdamConfig::default(),
            keep_prob: 0.75,
            crop_min: 8,
            crop_max: 20,
            max_grad_norm: None,
        }
    }
}

impl TrainingConfig {
    /// Every violated constraint, not only the first.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("batch_size must be positive".to_string());
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            out.push(format!("keep_prob must be in (0, 1], got {}", self.keep_prob));
        }
        if self.crop_min < 2 || self.crop_max < self.crop_min {
            out.push(format!(
                "crop lengths must satisfy 2 <= crop_min <= crop_max, got [{}, {}]",
                self.crop_min, self.crop_max
            ));
        }
        if let Err(e) = self.adam.validate() {
            out.push(e.to_string());
        }
        if self.max_grad_norm.is_some_and(|n| !(n > 0.0)) {
            out.push("max_grad_norm must be positive".to_string());
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
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub model: TrackModel,
    /// Mean batch NLL, one entry per iteration.
    pub loss_curve: Vec<f64>,
}

/// Mixes a seed with stream indices into an independent seed.
pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn canonical_order(a: &(f64, Vec<f64>), b: &(f64, Vec<f64>)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| {
        a.1.iter()
            .zip(&b.1)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Mean loss and mean gradient of a batch. Terms are summed in a canonical
/// order so the result does not depend on how the batch is arranged.
pub fn batch_gradient(
    model: &TrackModel,
    samples: &[TrajectorySample],
    dropout: &[DropoutPlan],
) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() || samples.len() != dropout.len() {
        return Err(shape("one dropout plan per sample is required"));
    }
    let mut terms: Vec<(f64, Vec<f64>)> = samples
        .par_iter()
        .zip(dropout.par_iter())
        .map(|(s, d)| backward_with_dropout(model, s, d).map(|(l, g)| (l, g.flatten())))
        .collect::<Result<_>>()?;
    terms.sort_by(canonical_order);
    let scale = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.num_parameters()];
    for (l, g) in &terms {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Adam on batches drawn from `pool`. Deterministic for a given seed,
/// independent of the number of worker threads.
pub fn train(
    mut model: TrackModel,
    pool: &TrajectoryPool,
    config: &TrainingConfig,
    seed: u64,
) -> Result<TrainingOutcome> {
    config.validate()?;
    model.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyDataset(
            "no trajectory has two steps covered by detections".into(),
        ));
    }
    let mut params = model.flatten();
    let mut state = AdamState::new(params.len());
    let mut loss_curve = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, it as u64, 0));
        let samples = pool.sample(config.batch_size, (config.crop_min, config.crop_max), &mut rng)?;
        let dropout = (0..samples.len())
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(derive_seed(seed, it as u64, i as u64 + 1));
                DropoutPlan::sample(&model, config.keep_prob, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, mut grad) = batch_gradient(&model, &samples, &dropout)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "batch loss {loss} at iteration {}",
                it + 1
            )));
        }
        if let Some(max) = config.max_grad_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                grad.iter_mut().for_each(|g| *g *= max / norm);
            }
        }
        adam_update(&mut params, &grad, &mut state, &config.adam)?;
        model.set_flat(&params)?;
        loss_curve.push(loss);
    }
    Ok(TrainingOutcome { model, loss_curve })
}

/// `iteration,mean_nll` with 1-based iterations.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("iteration,mean_nll\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, l);
    }
    out
}

/// Trailing moving average over `window` entries.
pub fn smoothed(curve: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..curve.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            curve[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
