//! The sibling appearance/motion predictor pair every track is scored with.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::PredictorKind;
use crate::error::{shape, Error, Result};
use crate::ran_model::ModelDims;
use crate::Predictor;

/// Motion features are `[dx, dy, w, h]`.
pub const MOTION_DIM: usize = 4;

/// Default external memory span for both modalities.
pub const DEFAULT_SPAN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: PredictorKind,
    pub appearance: ModelDims,
    pub motion: ModelDims,
}

impl ModelConfig {
    /// Desk-scale sizes: 16-d synthetic appearance with a 32-d hidden state,
    /// motion with a 16-d hidden state, span 10.
    pub fn desk(kind: PredictorKind) -> Self {
        Self {
            kind,
            appearance: ModelDims {
                input_dim: 16,
                hidden_dim: 32,
                capacity: DEFAULT_SPAN,
            },
            motion: ModelDims {
                input_dim: MOTION_DIM,
                hidden_dim: 16,
                capacity: DEFAULT_SPAN,
            },
        }
    }

    /// Full-size networks: 256-d appearance features with a 128-d hidden
    /// state, motion with a 32-d hidden state, span 10.
    pub fn full_scale(kind: PredictorKind) -> Self {
        Self {
            kind,
            appearance: ModelDims {
                input_dim: 256,
                hidden_dim: 128,
                capacity: DEFAULT_SPAN,
            },
            motion: ModelDims {
                input_dim: MOTION_DIM,
                hidden_dim: 32,
                capacity: DEFAULT_SPAN,
            },
        }
    }

    pub fn with_span(mut self, span: usize) -> Self {
        self.appearance.capacity = span;
        self.motion.capacity = span;
        self
    }

    pub fn with_appearance_dim(mut self, dim: usize) -> Self {
        self.appearance.input_dim = dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ModelDims::new(
            self.appearance.input_dim,
            self.appearance.hidden_dim,
            self.appearance.capacity,
        )?;
        ModelDims::new(MOTION_DIM, self.motion.hidden_dim, self.motion.capacity)?;
        if self.motion.input_dim != MOTION_DIM {
            return Err(Error::InvalidArgument(format!(
                "motion features are {MOTION_DIM}-dimensional, got {}",
                self.motion.input_dim
            )));
        }
        Ok(())
    }
}

/// Appearance and motion predictors of one kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackModel {
    pub appearance: Predictor,
    pub motion: Predictor,
}

impl TrackModel {
    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        Self {
            appearance: Predictor::random(config.kind, config.appearance, rng),
            motion: Predictor::random(config.kind, config.motion, rng),
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            appearance: Predictor::zeros(config.kind, config.appearance),
            motion: Predictor::zeros(config.kind, config.motion),
        }
    }

    pub fn kind(&self) -> PredictorKind {
        self.appearance.kind()
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.kind(),
            appearance: self.appearance.dims(),
            motion: self.motion.dims(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.appearance.num_parameters() + self.motion.num_parameters()
    }

    /// Appearance parameters followed by motion parameters.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.appearance.flatten();
        out.extend(self.motion.flatten());
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let split = self.appearance.num_parameters();
        if values.len() != self.num_parameters() {
            return Err(shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_parameters()
            )));
        }
        self.appearance.set_flat(&values[..split])?;
        self.motion.set_flat(&values[split..])
    }

    pub fn zeroed(&self) -> Self {
        Self {
            appearance: self.appearance.zeroed(),
            motion: self.motion.zeroed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.appearance.validate()?;
        self.motion.validate()?;
        if self.appearance.kind() != self.motion.kind() {
            return Err(Error::InvalidArgument(
                "appearance and motion predictors differ in kind".into(),
            ));
        }
        if self.motion.dims().input_dim != MOTION_DIM {
            return Err(shape("motion predictor must take 4-d features"));
        }
        Ok(())
    }
}
