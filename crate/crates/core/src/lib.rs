//! Recurrent autoregressive networks (RAN) for online multi-object tracking.
//!
//! Each tracked object carries two sibling generative models, one over
//! appearance features and one over box motion. A model couples an external
//! memory (the last `K` inputs) with a GRU hidden state that re-estimates the
//! autoregressive weights and noise scales every step. Detections are scored
//! by their log-likelihood under the predicted diagonal Gaussian and linked
//! greedily, one to one.
//!
//! The math kernel ([`numerics`], [`ran_model`], [`baselines`]) is generic over
//! the scalar type; everything built on top of it runs in double precision
//! through the aliases exported here.

pub mod baselines;
pub mod error;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod ran_model;
pub mod synth;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
pub use numerics::Scalar;

pub type Vector = numerics::Vector<f64>;
pub type Matrix = numerics::Matrix<f64>;

pub type ExternalMemory = ran_model::ExternalMemory<f64>;
pub type GruParams = ran_model::GruParams<f64>;
pub type HeadParams = ran_model::HeadParams<f64>;
pub type RanParams = ran_model::RanParams<f64>;
pub type RanState = ran_model::RanState<f64>;
pub type ArCoefficients = ran_model::ArCoefficients<f64>;
pub type ConditionalGaussian = ran_model::ConditionalGaussian<f64>;

pub type AveParams = baselines::AveParams<f64>;
pub type TivParams = baselines::TivParams<f64>;
pub type GruDirectParams = baselines::GruDirectParams<f64>;
pub type Predictor = baselines::Predictor<f64>;

pub use baselines::PredictorKind;
pub use model::{ModelConfig, TrackModel};
