//! Ablation predictors sharing the RAN interface.
//!
//! * `Ave` averages the valid memory slots with learned, time-invariant
//!   deviations.
//! * `Tiv` is a classic AR model: learned, time-invariant weights over the
//!   memory.
//! * `GruDirect` drops the memory and lets the GRU emit the mean directly.
//!
//! All four kinds consume and produce the same [`RanState`], so tracking and
//! training code never branches on the predictor.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::numerics::{masked_softmax, Matrix, Scalar, Vector};
use crate::ran_model::{
    self, clamped_sigma, gru_step, uniform_matrix, weighted_memory_mean, ConditionalGaussian,
    ExternalMemory, GruParams, ModelDims, RanParams, RanState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    Ran,
    GruDirect,
    Ave,
    Tiv,
}

impl PredictorKind {
    /// Table order: GRU, AVE, TIV, RAN.
    pub const ALL: [PredictorKind; 4] = [Self::GruDirect, Self::Ave, Self::Tiv, Self::Ran];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ran => "RAN",
            Self::GruDirect => "GRU",
            Self::Ave => "AVE",
            Self::Tiv => "TIV",
        }
    }

    /// Whether the predictor carries a recurrent hidden state.
    pub fn is_recurrent(self) -> bool {
        matches!(self, Self::Ran | Self::GruDirect)
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ran" => Ok(Self::Ran),
            "gru" | "gru-direct" | "gru_direct" => Ok(Self::GruDirect),
            "ave" => Ok(Self::Ave),
            "tiv" => Ok(Self::Tiv),
            other => Err(Error::InvalidArgument(format!(
                "unknown predictor `{other}` (expected ran, gru, ave or tiv)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveParams<T> {
    pub log_sigma: Vector<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TivParams<T> {
    pub alpha_logits: Vector<T>,
    pub log_sigma: Vector<T>,
}

/// GRU whose linear head emits `(mu, log_sigma)` directly: `2N x d` plus bias.
/// The memory span is kept only so tracker state looks the same for every kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruDirectParams<T> {
    pub gru: GruParams<T>,
    pub head: Matrix<T>,
    pub bias: Vector<T>,
    pub capacity: usize,
}

impl<T: Scalar> GruDirectParams<T> {
    pub fn input_dim(&self) -> usize {
        self.gru.input_dim()
    }
}

pub fn ave_predict<T: Scalar>(
    memory: &ExternalMemory<T>,
    params: &AveParams<T>,
) -> Result<ConditionalGaussian<T>> {
    let v = memory.valid_count();
    if v == 0 {
        return Err(Error::NoHistory);
    }
    if params.log_sigma.len() != memory.dim() {
        return Err(shape("AVE deviations do not match memory dimension"));
    }
    let weight = T::one() / T::from_usize(v).expect("slot count fits scalar");
    let alpha = vec![weight; v];
    Ok(ConditionalGaussian {
        mu: weighted_memory_mean(memory, &alpha)?,
        sigma: params.log_sigma.map(|s| clamped_sigma(s).0),
    })
}

pub fn tiv_predict<T: Scalar>(
    memory: &ExternalMemory<T>,
    params: &TivParams<T>,
) -> Result<ConditionalGaussian<T>> {
    let v = memory.valid_count();
    if v == 0 {
        return Err(Error::NoHistory);
    }
    if params.alpha_logits.len() != memory.capacity() || params.log_sigma.len() != memory.dim() {
        return Err(shape("TIV parameters do not match memory"));
    }
    let alpha = masked_softmax(&params.alpha_logits, v)?;
    Ok(ConditionalGaussian {
        mu: weighted_memory_mean(memory, &alpha)?,
        sigma: params.log_sigma.map(|s| clamped_sigma(s).0),
    })
}

pub fn gru_direct_predict<T: Scalar>(
    params: &GruDirectParams<T>,
    h_prev: &[T],
) -> Result<ConditionalGaussian<T>> {
    let n = params.input_dim();
    let raw = params.head.matvec(h_prev)?.add(&params.bias)?;
    if raw.len() != 2 * n {
        return Err(shape("GRU head must emit 2N values"));
    }
    Ok(ConditionalGaussian {
        mu: Vector::from_slice(&raw[..n]),
        sigma: raw[n..]
            .iter()
            .map(|&s| clamped_sigma(s).0)
            .collect::<Vec<_>>()
            .into(),
    })
}

/// Parameters of one modality's predictor, tagged by kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum Predictor<T> {
    Ran(RanParams<T>),
    GruDirect(GruDirectParams<T>),
    Ave {
        params: AveParams<T>,
        dims: ModelDims,
    },
    Tiv {
        params: TivParams<T>,
        dims: ModelDims,
    },
}

impl<T: Scalar> Predictor<T> {
    /// All-zero parameters: uniform weights, unit deviations, zero GRU.
    pub fn zeros(kind: PredictorKind, dims: ModelDims) -> Self {
        match kind {
            PredictorKind::Ran => Self::Ran(RanParams::zeros(dims)),
            PredictorKind::GruDirect => Self::GruDirect(GruDirectParams {
                gru: GruParams::zeros(dims.hidden_dim, dims.input_dim),
                head: Matrix::zeros(2 * dims.input_dim, dims.hidden_dim),
                bias: Vector::zeros(2 * dims.input_dim),
                capacity: dims.capacity,
            }),
            PredictorKind::Ave => Self::Ave {
                params: AveParams {
                    log_sigma: Vector::zeros(dims.input_dim),
                },
                dims,
            },
            PredictorKind::Tiv => Self::Tiv {
                params: TivParams {
                    alpha_logits: Vector::zeros(dims.capacity),
                    log_sigma: Vector::zeros(dims.input_dim),
                },
                dims,
            },
        }
    }

    /// Fan-in scaled uniform matrices, zero biases and zero time-invariant
    /// parameters.
    pub fn random<R: Rng + ?Sized>(kind: PredictorKind, dims: ModelDims, rng: &mut R) -> Self {
        match kind {
            PredictorKind::Ran => Self::Ran(RanParams::random(dims, rng)),
            PredictorKind::GruDirect => {
                let gru = GruParams::random(dims.hidden_dim, dims.input_dim, rng);
                let head = uniform_matrix(2 * dims.input_dim, dims.hidden_dim, dims.hidden_dim, rng);
                Self::GruDirect(GruDirectParams {
                    gru,
                    head,
                    bias: Vector::zeros(2 * dims.input_dim),
                    capacity: dims.capacity,
                })
            }
            PredictorKind::Ave | PredictorKind::Tiv => Self::zeros(kind, dims),
        }
    }

    pub fn kind(&self) -> PredictorKind {
        match self {
            Self::Ran(_) => PredictorKind::Ran,
            Self::GruDirect(_) => PredictorKind::GruDirect,
            Self::Ave { .. } => PredictorKind::Ave,
            Self::Tiv { .. } => PredictorKind::Tiv,
        }
    }

    pub fn dims(&self) -> ModelDims {
        match self {
            Self::Ran(p) => p.dims(),
            Self::GruDirect(p) => ModelDims {
                input_dim: p.gru.input_dim(),
                hidden_dim: p.gru.hidden_dim(),
                capacity: p.capacity,
            },
            Self::Ave { dims, .. } | Self::Tiv { dims, .. } => *dims,
        }
    }

    pub fn init_state(&self, first_input: &[T]) -> Result<RanState<T>> {
        RanState::fresh(self.dims(), first_input)
    }

    pub fn predict(&self, state: &RanState<T>) -> Result<ConditionalGaussian<T>> {
        match self {
            Self::Ran(p) => ran_model::predict(p, state),
            Self::GruDirect(p) => {
                if state.memory.is_empty() {
                    return Err(Error::NoHistory);
                }
                gru_direct_predict(p, &state.hidden)
            }
            Self::Ave { params, .. } => ave_predict(&state.memory, params),
            Self::Tiv { params, .. } => tiv_predict(&state.memory, params),
        }
    }

    pub fn score(&self, state: &RanState<T>, x: &[T]) -> Result<T> {
        self.predict(state)?.log_prob(x)
    }

    /// Pushes `x` into the memory and, for recurrent kinds, steps the GRU.
    pub fn advance(&self, state: &RanState<T>, x: &[T]) -> Result<RanState<T>> {
        let hidden = match self {
            Self::Ran(p) => gru_step(&p.gru, x, &state.hidden)?,
            Self::GruDirect(p) => gru_step(&p.gru, x, &state.hidden)?,
            Self::Ave { .. } | Self::Tiv { .. } => state.hidden.clone(),
        };
        let mut memory = state.memory.clone();
        memory.push(Vector::from_slice(x))?;
        Ok(RanState { hidden, memory })
    }

    /// Every trainable tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<&[T]> {
        match self {
            Self::Ran(p) => {
                let mut out: Vec<&[T]> = p.gru.matrices().iter().map(|m| m.as_slice()).collect();
                out.push(p.head.weight.as_slice());
                out.push(p.head.bias.as_slice());
                out
            }
            Self::GruDirect(p) => {
                let mut out: Vec<&[T]> = p.gru.matrices().iter().map(|m| m.as_slice()).collect();
                out.push(p.head.as_slice());
                out.push(p.bias.as_slice());
                out
            }
            Self::Ave { params, .. } => vec![params.log_sigma.as_slice()],
            Self::Tiv { params, .. } => {
                vec![params.alpha_logits.as_slice(), params.log_sigma.as_slice()]
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Self::Ran(p) => {
                let mut out: Vec<&mut [T]> = p
                    .gru
                    .matrices_mut()
                    .into_iter()
                    .map(|m| m.as_mut_slice())
                    .collect();
                out.push(p.head.weight.as_mut_slice());
                out.push(&mut p.head.bias);
                out
            }
            Self::GruDirect(p) => {
                let mut out: Vec<&mut [T]> = p
                    .gru
                    .matrices_mut()
                    .into_iter()
                    .map(|m| m.as_mut_slice())
                    .collect();
                out.push(p.head.as_mut_slice());
                out.push(&mut p.bias);
                out
            }
            Self::Ave { params, .. } => vec![&mut params.log_sigma],
            Self::Tiv { params, .. } => vec![&mut params.alpha_logits, &mut params.log_sigma],
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_parameters()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// Same structure with every entry set to zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(T::zero());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Ran(p) => p.validate(),
            Self::GruDirect(p) => {
                let (n, d) = (p.gru.input_dim(), p.gru.hidden_dim());
                if p.head.rows() != 2 * n || p.head.cols() != d || p.bias.len() != 2 * n {
                    return Err(shape("GRU baseline head inconsistent with GRU"));
                }
                Ok(())
            }
            Self::Ave { params, dims } => {
                if params.log_sigma.len() != dims.input_dim {
                    return Err(shape("AVE deviations inconsistent with dimensions"));
                }
                Ok(())
            }
            Self::Tiv { params, dims } => {
                if params.log_sigma.len() != dims.input_dim
                    || params.alpha_logits.len() != dims.capacity
                {
                    return Err(shape("TIV parameters inconsistent with dimensions"));
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims::new(2, 3, 4).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, d: ModelDims, steps: usize) -> RanState<f64> {
        let params = RanParams::<f64>::random(d, rng);
        let first: Vec<f64> = (0..d.input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut state = ran_model::init_state(&params, &first).unwrap();
        for _ in 0..steps {
            let x: Vec<f64> = (0..d.input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            state = ran_model::advance(&params, &state, &x).unwrap();
        }
        state
    }

    #[test]
    fn kind_parsing_and_names() {
        assert_eq!("ran".parse::<PredictorKind>().unwrap(), PredictorKind::Ran);
        assert_eq!("GRU".parse::<PredictorKind>().unwrap(), PredictorKind::GruDirect);
        assert!("lstm".parse::<PredictorKind>().is_err());
        assert_eq!(PredictorKind::Tiv.to_string(), "TIV");
        assert_eq!(PredictorKind::ALL.len(), 4);
    }

    #[test]
    fn ave_examples() {
        let p = AveParams {
            log_sigma: Vector::from(vec![0.0]),
        };
        let mut m = ExternalMemory::new(3, 1).unwrap();
        m.push(Vector::from(vec![1.0])).unwrap();
        assert_eq!(ave_predict(&m, &p).unwrap().mu.as_slice(), &[1.0]);
        m.push(Vector::from(vec![3.0])).unwrap();
        let g = ave_predict(&m, &p).unwrap();
        assert_eq!(g.mu.as_slice(), &[2.0]);
        assert_eq!(g.sigma.as_slice(), &[1.0]);
        assert!(matches!(
            ave_predict(&ExternalMemory::new(3, 1).unwrap(), &p),
            Err(Error::NoHistory)
        ));
    }

    #[test]
    fn tiv_examples() {
        let mut m = ExternalMemory::new(2, 1).unwrap();
        m.push(Vector::from(vec![0.0])).unwrap();
        m.push(Vector::from(vec![3.0])).unwrap();
        let p = TivParams {
            alpha_logits: Vector::from(vec![2f64.ln(), 0.0]),
            log_sigma: Vector::from(vec![0.0]),
        };
        assert_abs_diff_eq!(tiv_predict(&m, &p).unwrap().mu[0], 2.0, epsilon = 1e-15);

        let mut single = ExternalMemory::new(2, 1).unwrap();
        single.push(Vector::from(vec![7.5])).unwrap();
        let p = TivParams {
            alpha_logits: Vector::from(vec![-4.0, 9.0]),
            log_sigma: Vector::from(vec![0.0]),
        };
        assert_eq!(tiv_predict(&single, &p).unwrap().mu.as_slice(), &[7.5]);
    }

    #[test]
    fn gru_direct_examples() {
        let zero = match Predictor::<f64>::zeros(PredictorKind::GruDirect, dims()) {
            Predictor::GruDirect(p) => p,
            _ => unreachable!(),
        };
        let g = gru_direct_predict(&zero, &[0.3, -0.2, 0.9]).unwrap();
        assert_eq!(g.mu.as_slice(), &[0.0, 0.0]);
        assert_eq!(g.sigma.as_slice(), &[1.0, 1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = match Predictor::<f64>::random(PredictorKind::GruDirect, dims(), &mut rng) {
            Predictor::GruDirect(p) => p,
            _ => unreachable!(),
        };
        let h = [0.4, -0.7, 0.2];
        let g = gru_direct_predict(&p, &h).unwrap();
        let doubled = GruDirectParams {
            head: p.head.scale(2.0),
            ..p.clone()
        };
        let g2 = gru_direct_predict(&doubled, &h).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(g2.mu[j], 2.0 * g.mu[j], epsilon = 1e-14);
            // independent row-by-row evaluation
            let mu_j: f64 = (0..3).map(|c| p.head.get(j, c) * h[c]).sum();
            let ls_j: f64 = (0..3).map(|c| p.head.get(j + 2, c) * h[c]).sum();
            assert_abs_diff_eq!(g.mu[j], mu_j, epsilon = 1e-15);
            assert_abs_diff_eq!(g.sigma[j], ls_j.exp(), epsilon = 1e-15);
        }
    }

    #[test]
    fn dispatch_matches_direct_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = dims();
        let state = random_state(&mut rng, d, 2);
        for kind in PredictorKind::ALL {
            let pred = Predictor::<f64>::random(kind, d, &mut rng);
            let g = pred.predict(&state).unwrap();
            assert_eq!(g.mu.len(), d.input_dim);
            assert_eq!(g.sigma.len(), d.input_dim);
            let direct = match &pred {
                Predictor::Ran(p) => ran_model::predict(p, &state).unwrap(),
                Predictor::GruDirect(p) => gru_direct_predict(p, &state.hidden).unwrap(),
                Predictor::Ave { params, .. } => ave_predict(&state.memory, params).unwrap(),
                Predictor::Tiv { params, .. } => tiv_predict(&state.memory, params).unwrap(),
            };
            assert_eq!(g, direct);
        }
    }

    #[test]
    fn flatten_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in PredictorKind::ALL {
            let p = Predictor::<f64>::random(kind, dims(), &mut rng);
            let flat = p.flatten();
            let mut q = p.zeroed();
            assert!(q.flatten().iter().all(|&v| v == 0.0));
            q.set_flat(&flat).unwrap();
            assert_eq!(p, q);
            assert!(q.set_flat(&flat[1..]).is_err());
            p.validate().unwrap();
        }
    }

    proptest! {
        #[test]
        fn tiv_zero_logits_and_zero_ran_head_equal_ave(seed in 0u64..300, steps in 0usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = dims();
            let state = random_state(&mut rng, d, steps);
            let ave = Predictor::<f64>::zeros(PredictorKind::Ave, d).predict(&state).unwrap();
            let tiv = Predictor::<f64>::zeros(PredictorKind::Tiv, d).predict(&state).unwrap();
            let mut ran = RanParams::<f64>::random(d, &mut rng);
            ran.head = ran_model::HeadParams::zeros(d);
            let ran = ran_model::predict(&ran, &state).unwrap();
            for j in 0..d.input_dim {
                prop_assert!((ave.mu[j] - tiv.mu[j]).abs() < 1e-12);
                prop_assert!((ave.mu[j] - ran.mu[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn unused_components_do_not_matter(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = dims();
            let state = random_state(&mut rng, d, 3);
            let mut other_hidden = state.clone();
            other_hidden.hidden = other_hidden.hidden.map(|h| h + 0.37);
            let mut other_memory = random_state(&mut rng, d, 1);
            other_memory.hidden = state.hidden.clone();
            for kind in [PredictorKind::Ave, PredictorKind::Tiv] {
                let p = Predictor::<f64>::random(kind, d, &mut rng);
                prop_assert_eq!(p.predict(&state).unwrap(), p.predict(&other_hidden).unwrap());
            }
            let p = Predictor::<f64>::random(PredictorKind::GruDirect, d, &mut rng);
            prop_assert_eq!(p.predict(&state).unwrap(), p.predict(&other_memory).unwrap());
        }
    }
}
