//! Synthetic multi-target scenes: ground truth, noisy detections and
//! identity-bearing appearance features.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, DetectionSet};
use crate::metrics::{GroundTruth, GtObject};
use crate::tracker::{BBox, Detection};
use crate::Vector;

/// How targets are placed and headed at frame 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Random positions and headings.
    #[default]
    Random,
    /// Horizontal lanes, every target moving right.
    Lanes,
    /// Pairs sharing a lane, walking toward each other and crossing mid-scene.
    Crossing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionWindow {
    /// 0-based target index.
    pub target: usize,
    /// First hidden frame (1-based).
    pub start: u32,
    pub length: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_targets: usize,
    pub num_frames: u32,
    pub arena_width: f64,
    pub arena_height: f64,
    pub layout: Layout,
    /// Speed range in pixels per frame.
    pub speed_range: (f64, f64),
    /// Per-frame probability of drawing a fresh velocity.
    pub velocity_change_prob: f64,
    /// Standard deviation of the per-step velocity jitter.
    pub velocity_noise: f64,
    pub width_range: (f64, f64),
    /// Height over width.
    pub aspect_range: (f64, f64),
    pub appearance_dim: usize,
    /// Minimum Euclidean distance between identity embeddings.
    pub embedding_margin: f64,
    pub appearance_noise: f64,
    pub miss_rate: f64,
    /// Mean clutter detections per frame.
    pub clutter_rate: f64,
    pub box_jitter: f64,
    pub occlusions: Vec<OcclusionWindow>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_targets: 6,
            num_frames: 80,
            arena_width: 640.0,
            arena_height: 480.0,
            layout: Layout::Random,
            speed_range: (1.0, 3.0),
            velocity_change_prob: 0.02,
            velocity_noise: 0.2,
            width_range: (20.0, 32.0),
            aspect_range: (1.8, 2.2),
            appearance_dim: 16,
            embedding_margin: 1.0,
            appearance_noise: 0.05,
            miss_rate: 0.05,
            clutter_rate: 0.5,
            box_jitter: 1.0,
            occlusions: Vec::new(),
            seed: 0,
        }
    }
}

fn valid_range(r: (f64, f64), positive: bool) -> bool {
    r.0.is_finite() && r.1.is_finite() && r.0 <= r.1 && (!positive || r.0 > 0.0)
}

impl SceneConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// All noise, miss and clutter parameters set to zero.
    pub fn noise_free(mut self) -> Self {
        self.velocity_noise = 0.0;
        self.appearance_noise = 0.0;
        self.miss_rate = 0.0;
        self.clutter_rate = 0.0;
        self.box_jitter = 0.0;
        self.velocity_change_prob = 0.0;
        self
    }

    /// Every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_targets == 0 {
            out.push("num_targets must be positive".into());
        }
        if self.num_frames == 0 {
            out.push("num_frames must be positive".into());
        }
        if self.appearance_dim == 0 {
            out.push("appearance_dim must be positive".into());
        }
        if !(self.arena_width > 0.0 && self.arena_height > 0.0) {
            out.push("arena dimensions must be positive".into());
        }
        for (name, p) in [
            ("miss_rate", self.miss_rate),
            ("velocity_change_prob", self.velocity_change_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        for (name, v) in [
            ("velocity_noise", self.velocity_noise),
            ("appearance_noise", self.appearance_noise),
            ("clutter_rate", self.clutter_rate),
            ("box_jitter", self.box_jitter),
            ("embedding_margin", self.embedding_margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !valid_range(self.speed_range, false) || self.speed_range.0 < 0.0 {
            out.push(format!("speed_range {:?} is not a valid range", self.speed_range));
        }
        if !valid_range(self.width_range, true) {
            out.push(format!("width_range {:?} is not a positive range", self.width_range));
        }
        if !valid_range(self.aspect_range, true) {
            out.push(format!("aspect_range {:?} is not a positive range", self.aspect_range));
        }
        let tallest = self.width_range.1 * self.aspect_range.1;
        if self.width_range.1 > self.arena_width || tallest > self.arena_height {
            out.push("boxes do not fit inside the arena".into());
        }
        for w in &self.occlusions {
            if w.target >= self.num_targets {
                out.push(format!("occlusion names target {} of {}", w.target, self.num_targets));
            }
            if w.start == 0 || w.length == 0 {
                out.push("occlusion windows need start >= 1 and length >= 1".into());
            }
        }
        if self.num_targets > 0 && self.appearance_dim > 0 {
            if let Err(e) = margin_feasible(self.num_targets, self.appearance_dim, self.embedding_margin) {
                out.push(e.to_string());
            }
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

    fn occluded(&self, target: usize, frame: u32) -> bool {
        self.occlusions
            .iter()
            .any(|w| w.target == target && frame >= w.start && frame < w.start + w.length)
    }
}

/// Rejects margins no set of `n` unit vectors in `dim` dimensions can reach.
fn margin_feasible(n: usize, dim: usize, margin: f64) -> Result<()> {
    if n < 2 {
        return Ok(());
    }
    // regular simplex bound on the minimum pairwise distance
    let mut bound = (2.0 * n as f64 / (n as f64 - 1.0)).sqrt();
    if dim == 1 {
        bound = if n == 2 { 2.0 } else { 0.0 };
    }
    if margin > bound {
        return Err(Error::Config(format!(
            "embedding margin {margin} is infeasible for {n} identities in {dim} dimensions (max {bound:.4})"
        )));
    }
    Ok(())
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

const EMBEDDING_ATTEMPTS: usize = 10_000;

/// Unit-norm identity embeddings, pairwise at least `margin` apart.
pub fn identity_embeddings<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    margin: f64,
    rng: &mut R,
) -> Result<Vec<Vector>> {
    margin_feasible(n, dim, margin)?;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let found = (0..EMBEDDING_ATTEMPTS)
            .map(|_| unit_vector(dim, rng))
            .find(|v| out.iter().all(|e| distance(e, v) >= margin));
        match found {
            Some(v) => out.push(v),
            None => {
                return Err(Error::Config(format!(
                    "could not place {n} identities {margin} apart in {dim} dimensions"
                )))
            }
        }
    }
    Ok(out.into_iter().map(Vector::from).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub ground_truth: GroundTruth,
    /// Detections with appearance features attached.
    pub detections: DetectionSet,
    pub embeddings: Vec<Vector>,
}

struct Mover {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
}

fn random_velocity<R: Rng + ?Sized>(config: &SceneConfig, rng: &mut R) -> (f64, f64) {
    let speed = rng.gen_range(config.speed_range.0..=config.speed_range.1);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    (speed * angle.cos(), speed * angle.sin())
}

fn place<R: Rng + ?Sized>(config: &SceneConfig, rng: &mut R) -> Vec<Mover> {
    let (aw, ah) = (config.arena_width, config.arena_height);
    let n = config.num_targets;
    let size = |rng: &mut R| {
        let w = rng.gen_range(config.width_range.0..=config.width_range.1);
        (w, w * rng.gen_range(config.aspect_range.0..=config.aspect_range.1))
    };
    match config.layout {
        Layout::Random => (0..n)
            .map(|_| {
                let (w, h) = size(rng);
                let (vx, vy) = random_velocity(config, rng);
                Mover {
                    cx: rng.gen_range(w / 2.0..=aw - w / 2.0),
                    cy: rng.gen_range(h / 2.0..=ah - h / 2.0),
                    vx,
                    vy,
                    w,
                    h,
                }
            })
            .collect(),
        Layout::Lanes => (0..n)
            .map(|i| {
                let (w, h) = size(rng);
                let speed = rng.gen_range(config.speed_range.0..=config.speed_range.1);
                Mover {
                    cx: rng.gen_range(w / 2.0..=(aw / 4.0).max(w / 2.0)),
                    cy: ah * (i + 1) as f64 / (n + 1) as f64,
                    vx: speed,
                    vy: 0.0,
                    w,
                    h,
                }
            })
            .collect(),
        Layout::Crossing => {
            let lanes = n.div_ceil(2);
            let meet = config.num_frames as f64 / 2.0;
            let mut out = Vec::with_capacity(n);
            for lane in 0..lanes {
                let (w, h) = size(rng);
                let speed = rng.gen_range(config.speed_range.0..=config.speed_range.1);
                let cy = ah * (lane + 1) as f64 / (lanes + 1) as f64;
                let mid = aw / 2.0;
                let reach = (speed * (meet - 1.0)).min(mid - w / 2.0);
                for dir in [1.0, -1.0] {
                    if out.len() < n {
                        out.push(Mover {
                            cx: mid - dir * reach,
                            cy,
                            vx: dir * speed,
                            vy: 0.0,
                            w,
                            h,
                        });
                    }
                }
            }
            out
        }
    }
}

fn reflect(c: &mut f64, v: &mut f64, half: f64, extent: f64) {
    if *c < half {
        *c = (2.0 * half - *c).min(extent - half);
        *v = v.abs();
    } else if *c > extent - half {
        *c = (2.0 * (extent - half) - *c).max(half);
        *v = -v.abs();
    }
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("finite non-negative deviation")
}

/// Generates a scene; identical configs give identical scenes.
pub fn generate(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.appearance_dim;
    let embeddings =
        identity_embeddings(config.num_targets, dim, config.embedding_margin, &mut rng)?;
    let mut movers = place(config, &mut rng);
    let velocity_jitter = normal(config.velocity_noise);
    let box_jitter = normal(config.box_jitter);
    let feature_noise = normal(config.appearance_noise);
    let clutter = (config.clutter_rate > 0.0)
        .then(|| Poisson::new(config.clutter_rate).expect("positive rate"));

    let mut gt = GroundTruth::new();
    let mut detections = DetectionSet::new();
    for frame in 1..=config.num_frames {
        if frame > 1 {
            for m in movers.iter_mut() {
                if config.velocity_change_prob > 0.0 && rng.gen_bool(config.velocity_change_prob) {
                    (m.vx, m.vy) = random_velocity(config, &mut rng);
                }
                m.cx += m.vx + velocity_jitter.sample(&mut rng);
                m.cy += m.vy + velocity_jitter.sample(&mut rng);
                reflect(&mut m.cx, &mut m.vx, m.w / 2.0, config.arena_width);
                reflect(&mut m.cy, &mut m.vy, m.h / 2.0, config.arena_height);
            }
        }
        let mut frame_dets = Vec::new();
        for (id, m) in movers.iter().enumerate() {
            let bbox = BBox::from_center(m.cx, m.cy, m.w, m.h);
            let visible = !config.occluded(id, frame);
            gt.insert(
                frame,
                GtObject {
                    id: id as u64 + 1,
                    bbox,
                    visible,
                },
            )?;
            if !visible || (config.miss_rate > 0.0 && rng.gen_bool(config.miss_rate)) {
                continue;
            }
            let noisy = if config.box_jitter > 0.0 {
                let w = (m.w + box_jitter.sample(&mut rng)).max(1.0);
                let h = (m.h + box_jitter.sample(&mut rng)).max(1.0);
                BBox::from_center(
                    m.cx + box_jitter.sample(&mut rng),
                    m.cy + box_jitter.sample(&mut rng),
                    w,
                    h,
                )
            } else {
                bbox
            };
            let feature: Vec<f64> = if config.appearance_noise > 0.0 {
                embeddings[id]
                    .iter()
                    .map(|&e| e + feature_noise.sample(&mut rng))
                    .collect()
            } else {
                embeddings[id].to_vec()
            };
            frame_dets.push(Detection {
                frame,
                bbox: noisy,
                confidence: 1.0,
                appearance: Some(feature.into()),
            });
        }
        let count = clutter.map_or(0, |p| p.sample(&mut rng) as usize);
        for _ in 0..count {
            let w = rng.gen_range(config.width_range.0..=config.width_range.1);
            let h = w * rng.gen_range(config.aspect_range.0..=config.aspect_range.1);
            let bbox = BBox {
                x: rng.gen_range(0.0..=config.arena_width - w),
                y: rng.gen_range(0.0..=config.arena_height - h),
                w,
                h,
            };
            frame_dets.push(Detection {
                frame,
                bbox,
                confidence: 0.5,
                appearance: Some(unit_vector(dim, &mut rng).into()),
            });
        }
        // shuffle so detection order carries no identity information
        for i in (1..frame_dets.len()).rev() {
            frame_dets.swap(i, rng.gen_range(0..=i));
        }
        for d in frame_dets {
            detections.push(d);
        }
    }
    Ok(Scene {
        config: config.clone(),
        ground_truth: gt,
        detections,
        embeddings,
    })
}

pub const PRESETS: [&str; 3] = ["parallel", "crossing", "occlusion"];

/// Fixed scenario configs. `parallel` is noise free; `crossing` pairs
/// look-alike walkers on the same lane; `occlusion` hides targets for
/// 6 to 18 frames.
pub fn preset(name: &str) -> Result<SceneConfig> {
    let base = SceneConfig {
        velocity_change_prob: 0.0,
        ..SceneConfig::default()
    };
    match name {
        "parallel" => Ok(SceneConfig {
            num_targets: 4,
            num_frames: 60,
            layout: Layout::Lanes,
            speed_range: (2.0, 3.0),
            ..base
        }
        .noise_free()),
        "crossing" => Ok(SceneConfig {
            num_targets: 6,
            num_frames: 80,
            layout: Layout::Crossing,
            speed_range: (1.5, 2.0),
            velocity_noise: 0.1,
            box_jitter: 2.0,
            miss_rate: 0.05,
            clutter_rate: 0.5,
            ..base
        }),
        "occlusion" => Ok(SceneConfig {
            num_targets: 4,
            num_frames: 80,
            layout: Layout::Lanes,
            speed_range: (1.0, 2.0),
            velocity_noise: 0.1,
            box_jitter: 1.0,
            miss_rate: 0.02,
            clutter_rate: 0.5,
            occlusions: vec![
                OcclusionWindow { target: 0, start: 15, length: 8 },
                OcclusionWindow { target: 1, start: 25, length: 12 },
                OcclusionWindow { target: 2, start: 40, length: 6 },
                OcclusionWindow { target: 3, start: 50, length: 18 },
            ],
            ..base
        }),
        other => Err(Error::Config(format!(
            "unknown preset {other:?}; expected one of {}",
            PRESETS.join(", ")
        ))),
    }
}

pub const GT_FILE: &str = "gt.txt";
pub const DET_FILE: &str = "det.txt";
pub const FEATURE_FILE: &str = "features.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenePaths {
    pub ground_truth: PathBuf,
    pub detections: PathBuf,
    pub features: PathBuf,
}

impl ScenePaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            ground_truth: dir.join(GT_FILE),
            detections: dir.join(DET_FILE),
            features: dir.join(FEATURE_FILE),
        }
    }
}

/// Writes ground truth, detections and the feature sidecar into `dir`.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<ScenePaths> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let paths = ScenePaths::in_dir(dir);
    io::write_ground_truth(&paths.ground_truth, &scene.ground_truth)?;
    io::write_detections(&paths.detections, &scene.detections)?;
    io::write_features(&paths.features, &scene.detections)?;
    Ok(paths)
}

/// Reads a scene directory written by [`write_scene`].
pub fn read_scene(dir: &Path) -> Result<(GroundTruth, DetectionSet)> {
    let paths = ScenePaths::in_dir(dir);
    let gt = io::read_ground_truth(&paths.ground_truth)?;
    let dets = io::read_detections(&paths.detections)?;
    let dets = io::read_features(&paths.features, &dets)?;
    Ok((gt, dets))
}
