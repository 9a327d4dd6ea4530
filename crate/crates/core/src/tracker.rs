//! Online multi-object tracking: gating, log-likelihood association scoring,
//! greedy one-to-one assignment and the track lifecycle.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::DetectionSet;
use crate::model::TrackModel;
use crate::{RanState, Vector};

/// Smallest width/height an extrapolated box may shrink to.
const MIN_EXTENT: f64 = 1e-3;

/// Axis-aligned box: top-left corner plus extent, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "box ({x}, {y}, {w}, {h}) needs finite coordinates and positive extent"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - 0.5 * w,
            y: cy - 0.5 * h,
            w,
            h,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: u32,
    pub bbox: BBox,
    pub confidence: f64,
    /// Attached from the feature sidecar; absent for motion-only runs.
    pub appearance: Option<Vector>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackStatus {
    Tracked,
    Lost,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub frame: u32,
    pub bbox: BBox,
    pub predicted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u64,
    /// `None` when the detection that started the track carried no features.
    pub appearance_state: Option<RanState>,
    pub motion_state: RanState,
    pub last_box: BBox,
    pub status: TrackStatus,
    pub lost_count: u32,
    pub birth_frame: u32,
    pub last_seen_frame: u32,
    pub history: Vec<HistoryEntry>,
}

/// Which likelihood terms enter the association score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "a")]
    Appearance,
    #[serde(rename = "m")]
    Motion,
    #[serde(rename = "am")]
    Both,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Self::Appearance, Self::Motion, Self::Both];

    pub fn uses_appearance(self) -> bool {
        matches!(self, Self::Appearance | Self::Both)
    }

    pub fn uses_motion(self) -> bool {
        matches!(self, Self::Motion | Self::Both)
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Appearance => "A",
            Self::Motion => "M",
            Self::Both => "A+M",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Self::Appearance),
            "m" => Ok(Self::Motion),
            "am" | "a+m" => Ok(Self::Both),
            other => Err(Error::InvalidArgument(format!(
                "unknown modality `{other}` (expected a, m or am)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    /// Minimum log association score for a match.
    pub score_threshold: f64,
    /// Gate radius in units of the track's last box diagonal.
    pub gate_factor: f64,
    /// Tracks lost for more than this many frames are dropped.
    pub t_terminate: u32,
    pub min_detection_confidence: f64,
    pub modality: Modality,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            score_threshold: -60.0,
            gate_factor: 2.0,
            t_terminate: 20,
            min_detection_confidence: 0.0,
            modality: Modality::Both,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.t_terminate < 1 {
            problems.push("t_terminate must be at least 1".to_string());
        }
        if !(self.gate_factor > 0.0) {
            problems.push(format!("gate_factor must be positive, got {}", self.gate_factor));
        }
        if self.score_threshold.is_nan() {
            problems.push("score_threshold is NaN".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Outcome of one frame's association.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignment {
    pub matches: Vec<(u64, usize)>,
    pub unmatched_tracks: Vec<u64>,
    pub unmatched_detections: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPair {
    pub track_id: u64,
    pub detection: usize,
    pub score: f64,
}

/// One emitted tracking result.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub frame: u32,
    pub track_id: u64,
    pub bbox: BBox,
}

/// `[dcx, dcy, w, h]`: detection center relative to the previous box center,
/// followed by the detection's extent.
pub fn motion_feature(det: &BBox, prev: &BBox) -> Vector {
    let (cx, cy) = det.center();
    let (px, py) = prev.center();
    Vector::from(vec![cx - px, cy - py, det.w, det.h])
}

/// First motion input of a new track.
pub fn initial_motion_feature(det: &BBox) -> Vector {
    Vector::from(vec![0.0, 0.0, det.w, det.h])
}

pub fn within_gate(track_box: &BBox, det_box: &BBox, gate_factor: f64) -> bool {
    let (tx, ty) = track_box.center();
    let (dx, dy) = det_box.center();
    (dx - tx).hypot(dy - ty) <= gate_factor * track_box.diagonal()
}

/// `(track index, detection index)` pairs passing the distance gate and the
/// confidence floor, track-major.
pub fn candidate_pairs(
    tracks: &[Track],
    detections: &[Detection],
    gate_factor: f64,
    min_confidence: f64,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (ti, track) in tracks.iter().enumerate() {
        for (di, det) in detections.iter().enumerate() {
            if det.confidence >= min_confidence && within_gate(&track.last_box, &det.bbox, gate_factor)
            {
                pairs.push((ti, di));
            }
        }
    }
    pairs
}

/// Log association score: appearance and motion log-likelihoods, summed over
/// the modalities enabled by `modality`.
pub fn association_score(
    model: &TrackModel,
    track: &Track,
    det: &Detection,
    modality: Modality,
) -> Result<f64> {
    let mut score = 0.0;
    if modality.uses_appearance() {
        let (state, feature) = match (&track.appearance_state, &det.appearance) {
            (Some(s), Some(f)) => (s, f),
            _ => {
                return Err(Error::Features(
                    "appearance scoring needs features on detections".into(),
                ))
            }
        };
        score += model.appearance.score(state, feature)?;
    }
    if modality.uses_motion() {
        let feature = motion_feature(&det.bbox, &track.last_box);
        score += model.motion.score(&track.motion_state, &feature)?;
    }
    Ok(score)
}

/// Greedy one-to-one matching by descending score. Ties go to the lower
/// track id, then the lower detection index.
/// `detection_ids` lists every detection that passed the confidence floor.
pub fn associate(
    scored: &[ScoredPair],
    threshold: f64,
    track_ids: &[u64],
    detection_ids: &[usize],
) -> Assignment {
    let mut order: Vec<&ScoredPair> = scored.iter().filter(|p| p.score > threshold).collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.track_id.cmp(&b.track_id))
            .then(a.detection.cmp(&b.detection))
    });
    let mut track_taken: Vec<u64> = Vec::new();
    let mut det_taken: Vec<usize> = Vec::new();
    let mut matches = Vec::new();
    for pair in order {
        if det_taken.contains(&pair.detection) || track_taken.contains(&pair.track_id) {
            continue;
        }
        det_taken.push(pair.detection);
        track_taken.push(pair.track_id);
        matches.push((pair.track_id, pair.detection));
    }
    Assignment {
        unmatched_tracks: track_ids
            .iter()
            .copied()
            .filter(|id| !track_taken.contains(id))
            .collect(),
        unmatched_detections: detection_ids
            .iter()
            .copied()
            .filter(|i| !det_taken.contains(i))
            .collect(),
        matches,
    }
}

/// Both sibling memories absorb the matched detection.
pub fn update_matched(model: &TrackModel, track: &Track, det: &Detection) -> Result<Track> {
    let motion = motion_feature(&det.bbox, &track.last_box);
    let motion_state = model.motion.advance(&track.motion_state, &motion)?;
    let appearance_state = match (&track.appearance_state, &det.appearance) {
        (Some(state), Some(feature)) => Some(model.appearance.advance(state, feature)?),
        (None, Some(feature)) => Some(model.appearance.init_state(feature)?),
        (state, None) => state.clone(),
    };
    let mut out = track.clone();
    out.appearance_state = appearance_state;
    out.motion_state = motion_state;
    out.last_box = det.bbox;
    out.status = TrackStatus::Tracked;
    out.lost_count = 0;
    out.last_seen_frame = det.frame;
    out.history.push(HistoryEntry {
        frame: det.frame,
        bbox: det.bbox,
        predicted: false,
    });
    Ok(out)
}

/// Unmatched track: the motion memory absorbs its own predicted mean and
/// the box is extrapolated with it; appearance stays frozen.
pub fn update_lost(model: &TrackModel, track: &Track, frame: u32) -> Result<Track> {
    let predicted = model.motion.predict(&track.motion_state)?.mu;
    let motion_state = model.motion.advance(&track.motion_state, &predicted)?;
    let (cx, cy) = track.last_box.center();
    let bbox = BBox::from_center(
        cx + predicted[0],
        cy + predicted[1],
        predicted[2].max(MIN_EXTENT),
        predicted[3].max(MIN_EXTENT),
    );
    let mut out = track.clone();
    out.motion_state = motion_state;
    out.last_box = bbox;
    out.status = TrackStatus::Lost;
    out.lost_count += 1;
    out.history.push(HistoryEntry {
        frame,
        bbox,
        predicted: true,
    });
    Ok(out)
}

pub fn new_track(model: &TrackModel, det: &Detection, id: u64) -> Result<Track> {
    let appearance_state = det
        .appearance
        .as_ref()
        .map(|f| model.appearance.init_state(f))
        .transpose()?;
    Ok(Track {
        id,
        appearance_state,
        motion_state: model.motion.init_state(&initial_motion_feature(&det.bbox))?,
        last_box: det.bbox,
        status: TrackStatus::Tracked,
        lost_count: 0,
        birth_frame: det.frame,
        last_seen_frame: det.frame,
        history: vec![HistoryEntry {
            frame: det.frame,
            bbox: det.bbox,
            predicted: false,
        }],
    })
}

/// Drops tracks lost for more than `t_terminate` frames and starts a track for
/// every unmatched detection above the confidence floor, with increasing ids.
pub fn lifecycle(
    model: &TrackModel,
    mut tracks: Vec<Track>,
    unmatched: &[&Detection],
    config: &TrackerConfig,
    mut next_id: u64,
) -> Result<(Vec<Track>, u64)> {
    tracks.retain(|t| t.lost_count <= config.t_terminate);
    for det in unmatched {
        if det.confidence < config.min_detection_confidence {
            continue;
        }
        tracks.push(new_track(model, det, next_id)?);
        next_id += 1;
    }
    Ok((tracks, next_id))
}

/// Frame-by-frame tracker state.
#[derive(Clone, Debug)]
pub struct Tracker<'m> {
    model: &'m TrackModel,
    config: TrackerConfig,
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<u32>,
    last_assignment: Assignment,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m TrackModel, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        Ok(Self {
            model,
            config,
            tracks: Vec::new(),
            next_id: 1,
            last_frame: None,
            last_assignment: Assignment::default(),
        })
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn last_assignment(&self) -> &Assignment {
        &self.last_assignment
    }

    /// Gate, score, associate, update matched, update lost, lifecycle; then
    /// report every tracked (not lost) track.
    pub fn step(&mut self, frame: u32, detections: &[Detection]) -> Result<Vec<ResultRow>> {
        if let Some(previous) = self.last_frame {
            if frame <= previous {
                return Err(Error::OutOfOrderFrames {
                    previous,
                    current: frame,
                });
            }
        }
        self.last_frame = Some(frame);

        let gated: Vec<usize> = (0..detections.len())
            .filter(|&i| detections[i].confidence >= self.config.min_detection_confidence)
            .collect();
        let pairs = candidate_pairs(
            &self.tracks,
            detections,
            self.config.gate_factor,
            self.config.min_detection_confidence,
        );

        let model = self.model;
        let modality = self.config.modality;
        let tracks = &self.tracks;
        let scored: Vec<ScoredPair> = pairs
            .par_iter()
            .map(|&(ti, di)| {
                association_score(model, &tracks[ti], &detections[di], modality).map(|score| {
                    ScoredPair {
                        track_id: tracks[ti].id,
                        detection: di,
                        score,
                    }
                })
            })
            .collect::<Result<_>>()?;

        let ids: Vec<u64> = self.tracks.iter().map(|t| t.id).collect();
        let assignment = associate(&scored, self.config.score_threshold, &ids, &gated);

        let mut updated = Vec::with_capacity(self.tracks.len());
        for track in &self.tracks {
            let matched = assignment
                .matches
                .iter()
                .find(|(id, _)| *id == track.id)
                .map(|&(_, di)| di);
            let next = match matched {
                Some(di) => {
                    let mut det = detections[di].clone();
                    det.frame = frame;
                    update_matched(model, track, &det)?
                }
                None => update_lost(model, track, frame)?,
            };
            updated.push(next);
        }

        let unmatched: Vec<&Detection> = assignment
            .unmatched_detections
            .iter()
            .map(|&di| &detections[di])
            .collect();
        let (tracks, next_id) = lifecycle(model, updated, &unmatched, &self.config, self.next_id)?;
        self.tracks = tracks;
        self.next_id = next_id;
        self.last_assignment = assignment;

        Ok(self
            .tracks
            .iter()
            .filter(|t| t.status == TrackStatus::Tracked)
            .map(|t| ResultRow {
                frame,
                track_id: t.id,
                bbox: t.last_box,
            })
            .collect())
    }
}

/// Runs the tracker over every frame from the first to the last frame of
/// `detections`, frames without detections included.
pub fn track_stream(
    detections: &DetectionSet,
    model: &TrackModel,
    config: &TrackerConfig,
) -> Result<Vec<ResultRow>> {
    let mut tracker = Tracker::new(model, config.clone())?;
    let (first, last) = match detections.frame_range() {
        Some(range) => range,
        None => return Ok(Vec::new()),
    };
    let mut rows = Vec::new();
    for frame in first..=last {
        rows.extend(tracker.step(frame, detections.frame(frame))?);
    }
    Ok(rows)
}
