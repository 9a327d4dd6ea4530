//! The recurrent autoregressive generative model for one modality.
//!
//! The next input is modeled as a convex combination of the last `K` stored
//! inputs (the external memory) plus diagonal Gaussian noise. Both the
//! combination weights and the noise scales are re-estimated every step by a
//! linear head on the GRU hidden state (the internal memory).

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::numerics::{
    diag_gaussian_logpdf, masked_softmax, sigmoid_scalar, Matrix, Scalar, Vector,
};

/// Lower clamp on every predicted standard deviation.
pub const SIGMA_MIN: f64 = 1e-4;
/// Upper clamp on every predicted standard deviation.
pub const SIGMA_MAX: f64 = 1e4;

/// `exp(log_sigma)` clamped to `[SIGMA_MIN, SIGMA_MAX]`. The flag reports
/// whether the clamp was active, in which case the gradient is zero.
pub fn clamped_sigma<T: Scalar>(log_sigma: T) -> (T, bool) {
    let s = log_sigma.exp();
    let lo = T::lit(SIGMA_MIN);
    let hi = T::lit(SIGMA_MAX);
    if s < lo {
        (lo, true)
    } else if s > hi {
        (hi, true)
    } else {
        (s, false)
    }
}

/// Dimensions of one modality's model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Feature dimension `N`.
    pub input_dim: usize,
    /// Hidden state dimension `d`.
    pub hidden_dim: usize,
    /// External memory time span `K`.
    pub capacity: usize,
}

impl ModelDims {
    pub fn new(input_dim: usize, hidden_dim: usize, capacity: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || capacity == 0 {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive (N={input_dim}, d={hidden_dim}, K={capacity})"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            capacity,
        })
    }
}

/// Sliding window of the last `K` inputs, newest first: slot `k` holds the
/// input from `k + 1` steps ago.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalMemory<T> {
    capacity: usize,
    dim: usize,
    slots: VecDeque<Vector<T>>,
}

impl<T: Scalar> ExternalMemory<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidArgument(
                "external memory needs positive capacity and dimension".into(),
            ));
        }
        Ok(Self {
            capacity,
            dim,
            slots: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn valid_count(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, k: usize) -> Option<&Vector<T>> {
        self.slots.get(k)
    }

    /// Valid slots, newest first.
    pub fn iter(&self) -> impl Iterator<Item = &Vector<T>> {
        self.slots.iter()
    }

    /// Stores `x` as the newest slot, evicting the oldest when full.
    pub fn push(&mut self, x: Vector<T>) -> Result<()> {
        if x.len() != self.dim {
            return Err(shape(format!(
                "memory of dimension {} given input of length {}",
                self.dim,
                x.len()
            )));
        }
        if self.slots.len() == self.capacity {
            self.slots.pop_back();
        }
        self.slots.push_front(x);
        Ok(())
    }
}

/// GRU weights: `W*` are `d x N`, `U*` are `d x d`. The cell is bias free.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams<T> {
    pub w_update: Matrix<T>,
    pub w_reset: Matrix<T>,
    pub w_candidate: Matrix<T>,
    pub u_update: Matrix<T>,
    pub u_reset: Matrix<T>,
    pub u_candidate: Matrix<T>,
}

impl<T: Scalar> GruParams<T> {
    pub fn zeros(hidden_dim: usize, input_dim: usize) -> Self {
        let w = Matrix::zeros(hidden_dim, input_dim);
        let u = Matrix::zeros(hidden_dim, hidden_dim);
        Self {
            w_update: w.clone(),
            w_reset: w.clone(),
            w_candidate: w,
            u_update: u.clone(),
            u_reset: u.clone(),
            u_candidate: u,
        }
    }

    /// Fan-in scaled uniform initialization.
    pub fn random<R: Rng + ?Sized>(hidden_dim: usize, input_dim: usize, rng: &mut R) -> Self {
        let mut w = || uniform_matrix(hidden_dim, input_dim, input_dim, rng);
        let (w_update, w_reset, w_candidate) = (w(), w(), w());
        let mut u = || uniform_matrix(hidden_dim, hidden_dim, hidden_dim, rng);
        let (u_update, u_reset, u_candidate) = (u(), u(), u());
        Self {
            w_update,
            w_reset,
            w_candidate,
            u_update,
            u_reset,
            u_candidate,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_update.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_update.cols()
    }

    pub(crate) fn matrices(&self) -> [&Matrix<T>; 6] {
        [
            &self.w_update,
            &self.w_reset,
            &self.w_candidate,
            &self.u_update,
            &self.u_reset,
            &self.u_candidate,
        ]
    }

    pub(crate) fn matrices_mut(&mut self) -> [&mut Matrix<T>; 6] {
        [
            &mut self.w_update,
            &mut self.w_reset,
            &mut self.w_candidate,
            &mut self.u_update,
            &mut self.u_reset,
            &mut self.u_candidate,
        ]
    }

    fn check(&self) -> Result<()> {
        let (d, n) = (self.hidden_dim(), self.input_dim());
        let ok = self.matrices()[..3]
            .iter()
            .all(|m| m.rows() == d && m.cols() == n)
            && self.matrices()[3..]
                .iter()
                .all(|m| m.rows() == d && m.cols() == d);
        if ok {
            Ok(())
        } else {
            Err(shape("inconsistent GRU matrix shapes"))
        }
    }
}

pub(crate) fn uniform_matrix<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut R,
) -> Matrix<T> {
    let a = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.gen_range(-a..=a)))
}

/// Intermediate activations of one GRU step, kept for backpropagation.
#[derive(Clone, Debug)]
pub(crate) struct GruTrace<T> {
    pub update: Vector<T>,
    pub reset: Vector<T>,
    pub candidate: Vector<T>,
    pub hidden: Vector<T>,
}

pub(crate) fn gru_forward<T: Scalar>(
    params: &GruParams<T>,
    x: &[T],
    h_prev: &[T],
) -> Result<GruTrace<T>> {
    if x.len() != params.input_dim() || h_prev.len() != params.hidden_dim() {
        return Err(shape(format!(
            "GRU step with N={}, d={} given x of length {} and h of length {}",
            params.input_dim(),
            params.hidden_dim(),
            x.len(),
            h_prev.len()
        )));
    }
    let pre = |w: &Matrix<T>, u: &Matrix<T>, h: &[T]| -> Result<Vector<T>> {
        let a = w.matvec(x)?;
        let b = u.matvec(h)?;
        Ok(a.zip_map(&b, |p, q| p + q))
    };
    let update = pre(&params.w_update, &params.u_update, h_prev)?.map(sigmoid_scalar);
    let reset = pre(&params.w_reset, &params.u_reset, h_prev)?.map(sigmoid_scalar);
    let gated: Vec<T> = reset.iter().zip(h_prev).map(|(&r, &h)| r * h).collect();
    let candidate = pre(&params.w_candidate, &params.u_candidate, &gated)?.map(T::tanh);
    let hidden: Vec<T> = (0..h_prev.len())
        .map(|i| (T::one() - update[i]) * h_prev[i] + update[i] * candidate[i])
        .collect();
    Ok(GruTrace {
        update,
        reset,
        candidate,
        hidden: hidden.into(),
    })
}

/// One GRU update: returns the new hidden state for input `x`.
pub fn gru_step<T: Scalar>(params: &GruParams<T>, x: &[T], h_prev: &[T]) -> Result<Vector<T>> {
    Ok(gru_forward(params, x, h_prev)?.hidden)
}

/// Linear map from the hidden state to the AR logits (first `K` rows) and
/// the log standard deviations (last `N` rows).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams<T> {
    pub weight: Matrix<T>,
    pub bias: Vector<T>,
    pub capacity: usize,
}

impl<T: Scalar> HeadParams<T> {
    pub fn zeros(dims: ModelDims) -> Self {
        let rows = dims.capacity + dims.input_dim;
        Self {
            weight: Matrix::zeros(rows, dims.hidden_dim),
            bias: Vector::zeros(rows),
            capacity: dims.capacity,
        }
    }

    pub fn random<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let rows = dims.capacity + dims.input_dim;
        Self {
            weight: uniform_matrix(rows, dims.hidden_dim, dims.hidden_dim, rng),
            bias: Vector::zeros(rows),
            capacity: dims.capacity,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows() - self.capacity
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RanParams<T> {
    pub gru: GruParams<T>,
    pub head: HeadParams<T>,
}

impl<T: Scalar> RanParams<T> {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            gru: GruParams::zeros(dims.hidden_dim, dims.input_dim),
            head: HeadParams::zeros(dims),
        }
    }

    pub fn random<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        Self {
            gru: GruParams::random(dims.hidden_dim, dims.input_dim, rng),
            head: HeadParams::random(dims, rng),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.gru.input_dim(),
            hidden_dim: self.gru.hidden_dim(),
            capacity: self.head.capacity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gru.check()?;
        let d = self.dims();
        if self.head.weight.cols() != d.hidden_dim
            || self.head.weight.rows() != d.capacity + d.input_dim
            || self.head.bias.len() != self.head.weight.rows()
        {
            return Err(shape("head shape inconsistent with GRU dimensions"));
        }
        Ok(())
    }
}

/// Hidden state plus external memory of one trajectory for one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RanState<T> {
    pub hidden: Vector<T>,
    pub memory: ExternalMemory<T>,
}

impl<T: Scalar> RanState<T> {
    /// Zero hidden state and a memory holding only `first_input`.
    pub fn fresh(dims: ModelDims, first_input: &[T]) -> Result<Self> {
        let mut memory = ExternalMemory::new(dims.capacity, dims.input_dim)?;
        memory.push(Vector::from_slice(first_input))?;
        Ok(Self {
            hidden: Vector::zeros(dims.hidden_dim),
            memory,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArCoefficients<T> {
    pub alpha: Vector<T>,
    pub sigma: Vector<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalGaussian<T> {
    pub mu: Vector<T>,
    pub sigma: Vector<T>,
}

impl<T: Scalar> ConditionalGaussian<T> {
    pub fn log_prob(&self, x: &[T]) -> Result<T> {
        diag_gaussian_logpdf(x, &self.mu, &self.sigma)
    }
}

pub fn predict_coefficients<T: Scalar>(
    head: &HeadParams<T>,
    h_prev: &[T],
    valid_count: usize,
) -> Result<ArCoefficients<T>> {
    if valid_count == 0 {
        return Err(Error::NoHistory);
    }
    if valid_count > head.capacity {
        return Err(Error::InvalidArgument(format!(
            "{valid_count} valid slots exceed memory capacity {}",
            head.capacity
        )));
    }
    let raw = head.weight.matvec(h_prev)?.add(&head.bias)?;
    let alpha = masked_softmax(&raw[..head.capacity], valid_count)?;
    let sigma: Vec<T> = raw[head.capacity..]
        .iter()
        .map(|&s| clamped_sigma(s).0)
        .collect();
    Ok(ArCoefficients {
        alpha,
        sigma: sigma.into(),
    })
}

/// Weighted sum of the valid memory slots; weights on invalid slots are ignored.
pub(crate) fn weighted_memory_mean<T: Scalar>(
    memory: &ExternalMemory<T>,
    alpha: &[T],
) -> Result<Vector<T>> {
    if memory.is_empty() {
        return Err(Error::NoHistory);
    }
    if alpha.len() < memory.valid_count() {
        return Err(shape("fewer AR weights than valid memory slots"));
    }
    let mut mu = Vector::zeros(memory.dim());
    for (slot, &a) in memory.iter().zip(alpha) {
        mu.axpy(a, slot)?;
    }
    Ok(mu)
}

pub fn predict_distribution<T: Scalar>(
    memory: &ExternalMemory<T>,
    coeffs: &ArCoefficients<T>,
) -> Result<ConditionalGaussian<T>> {
    if coeffs.alpha.len() != memory.capacity() || coeffs.sigma.len() != memory.dim() {
        return Err(shape("AR coefficients inconsistent with memory"));
    }
    Ok(ConditionalGaussian {
        mu: weighted_memory_mean(memory, &coeffs.alpha)?,
        sigma: coeffs.sigma.clone(),
    })
}

pub fn predict<T: Scalar>(
    params: &RanParams<T>,
    state: &RanState<T>,
) -> Result<ConditionalGaussian<T>> {
    let coeffs = predict_coefficients(&params.head, &state.hidden, state.memory.valid_count())?;
    predict_distribution(&state.memory, &coeffs)
}

/// Log-likelihood of `x` as the next input of the trajectory in `state`.
pub fn score_candidate<T: Scalar>(params: &RanParams<T>, state: &RanState<T>, x: &[T]) -> Result<T> {
    predict(params, state)?.log_prob(x)
}

pub fn advance<T: Scalar>(
    params: &RanParams<T>,
    state: &RanState<T>,
    x: &[T],
) -> Result<RanState<T>> {
    let hidden = gru_step(&params.gru, x, &state.hidden)?;
    let mut memory = state.memory.clone();
    memory.push(Vector::from_slice(x))?;
    Ok(RanState { hidden, memory })
}

pub fn init_state<T: Scalar>(params: &RanParams<T>, first_input: &[T]) -> Result<RanState<T>> {
    RanState::fresh(params.dims(), first_input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(n: usize, d: usize, k: usize) -> ModelDims {
        ModelDims::new(n, d, k).unwrap()
    }

    fn memory_of(slots_oldest_first: &[&[f64]], capacity: usize) -> ExternalMemory<f64> {
        let mut m = ExternalMemory::new(capacity, slots_oldest_first[0].len()).unwrap();
        for s in slots_oldest_first {
            m.push(Vector::from_slice(s)).unwrap();
        }
        m
    }

    #[test]
    fn zero_gru_halves_hidden() {
        let p = GruParams::<f64>::zeros(3, 2);
        let h = [0.8, -0.3, 0.1];
        let out = gru_step(&p, &[5.0, -7.0], &h).unwrap();
        for (o, hv) in out.iter().zip(h) {
            assert_eq!(*o, 0.5 * hv);
        }
        let zero = gru_step(&p, &[0.0, 0.0], &[0.0; 3]).unwrap();
        assert_eq!(zero.as_slice(), &[0.0; 3]);
    }

    #[test]
    fn scalar_gru_matches_hand_evaluation() {
        let one = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let p = GruParams {
            w_update: one.clone(),
            w_reset: one.clone(),
            w_candidate: one.clone(),
            u_update: one.clone(),
            u_reset: one.clone(),
            u_candidate: one,
        };
        let h = gru_step(&p, &[1.0], &[0.5]).unwrap();
        // 30-digit evaluation of the GRU recurrence.
        assert_abs_diff_eq!(h[0], 0.816_594_531_856_201_3, epsilon = 1e-14);
    }

    #[test]
    fn gru_rejects_bad_shapes() {
        let p = GruParams::<f64>::zeros(2, 2);
        assert!(gru_step(&p, &[1.0], &[0.0, 0.0]).is_err());
        assert!(gru_step(&p, &[1.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_alpha_and_unit_sigma() {
        let head = HeadParams::<f64>::zeros(dims(3, 4, 10));
        let c = predict_coefficients(&head, &[0.1, 0.2, 0.3, 0.4], 10).unwrap();
        for &a in c.alpha.iter() {
            assert_abs_diff_eq!(a, 0.1, epsilon = 1e-15);
        }
        assert_eq!(c.sigma.as_slice(), &[1.0, 1.0, 1.0]);

        let c = predict_coefficients(&head, &[0.0; 4], 2).unwrap();
        assert_eq!(&c.alpha[..2], &[0.5, 0.5]);
        assert!(c.alpha[2..].iter().all(|&a| a == 0.0));
    }

    #[test]
    fn head_hand_evaluation() {
        let head = HeadParams {
            weight: Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]).unwrap(),
            bias: Vector::zeros(3),
            capacity: 2,
        };
        let c = predict_coefficients(&head, &[2f64.ln(), 0.0], 2).unwrap();
        assert_abs_diff_eq!(c.alpha[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.alpha[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.sigma[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn no_history_is_an_error() {
        let head = HeadParams::<f64>::zeros(dims(1, 1, 3));
        assert!(matches!(
            predict_coefficients(&head, &[0.0], 0),
            Err(Error::NoHistory)
        ));
        let mem = ExternalMemory::<f64>::new(3, 1).unwrap();
        let coeffs = ArCoefficients {
            alpha: Vector::filled(3, 1.0 / 3.0),
            sigma: Vector::filled(1, 1.0),
        };
        assert!(matches!(
            predict_distribution(&mem, &coeffs),
            Err(Error::NoHistory)
        ));
    }

    #[test]
    fn sigma_is_clamped() {
        let mut head = HeadParams::<f64>::zeros(dims(2, 1, 1));
        head.bias[1] = -50.0;
        head.bias[2] = 50.0;
        let c = predict_coefficients(&head, &[0.0], 1).unwrap();
        assert_eq!(c.sigma.as_slice(), &[SIGMA_MIN, SIGMA_MAX]);
    }

    #[test]
    fn distribution_examples() {
        let single = memory_of(&[&[4.0, -2.0]], 5);
        let coeffs = ArCoefficients {
            alpha: Vector::from(vec![1.0, 0.0, 0.0, 0.0, 0.0]),
            sigma: Vector::filled(2, 1.0),
        };
        let g = predict_distribution(&single, &coeffs).unwrap();
        assert_eq!(g.mu.as_slice(), &[4.0, -2.0]);

        let m = memory_of(&[&[3.0], &[2.0], &[1.0]], 3);
        let coeffs = ArCoefficients {
            alpha: Vector::filled(3, 1.0 / 3.0),
            sigma: Vector::filled(1, 1.0),
        };
        assert_abs_diff_eq!(
            predict_distribution(&m, &coeffs).unwrap().mu[0],
            2.0,
            epsilon = 1e-15
        );

        // slot 0 is the newest.
        let m = memory_of(&[&[1.0, 1.0], &[0.0, 1.0], &[1.0, 0.0]], 3);
        let coeffs = ArCoefficients {
            alpha: Vector::from(vec![0.5, 0.3, 0.2]),
            sigma: Vector::filled(2, 1.0),
        };
        let mu = predict_distribution(&m, &coeffs).unwrap().mu;
        assert_abs_diff_eq!(mu[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(mu[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn score_at_mean_with_unit_sigma() {
        let params = RanParams::<f64>::zeros(dims(1, 2, 4));
        let state = init_state(&params, &[3.5]).unwrap();
        let s = score_candidate(&params, &state, &[3.5]).unwrap();
        assert_abs_diff_eq!(s, -0.918_938_533_204_672_7, epsilon = 1e-12);
        let near = score_candidate(&params, &state, &[3.0]).unwrap();
        let far = score_candidate(&params, &state, &[2.0]).unwrap();
        assert!(s > near && near > far);
    }

    #[test]
    fn score_composes_subsystems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = dims(3, 5, 4);
        let params = RanParams::<f64>::random(d, &mut rng);
        let mut state = init_state(&params, &[0.1, 0.2, 0.3]).unwrap();
        state = advance(&params, &state, &[0.3, -0.1, 0.5]).unwrap();
        state = advance(&params, &state, &[0.2, 0.0, 0.4]).unwrap();
        let x = [0.25, 0.05, 0.45];

        let coeffs =
            predict_coefficients(&params.head, &state.hidden, state.memory.valid_count()).unwrap();
        let mut mu = [0.0; 3];
        for (k, slot) in state.memory.iter().enumerate() {
            for j in 0..3 {
                mu[j] += coeffs.alpha[k] * slot[j];
            }
        }
        let mut expected = 0.0;
        for j in 0..3 {
            let s = coeffs.sigma[j];
            let z = (x[j] - mu[j]) / s;
            expected += -0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln() - 0.5 * z * z;
        }
        let before = state.clone();
        let got = score_candidate(&params, &state, &x).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        assert_eq!(state, before);
    }

    #[test]
    fn advance_and_ring_buffer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = RanParams::<f64>::random(dims(1, 3, 3), &mut rng);
        let fresh = init_state(&params, &[0.0]).unwrap();
        assert_eq!(fresh.hidden.as_slice(), &[0.0; 3]);
        assert_eq!(fresh.memory.valid_count(), 1);

        let s1 = advance(&params, &fresh, &[1.0]).unwrap();
        assert_eq!(fresh.memory.valid_count(), 1);
        assert_eq!(s1.memory.valid_count(), 2);
        assert_eq!(s1.memory.slot(0).unwrap().as_slice(), &[1.0]);
        assert_eq!(s1.hidden, gru_step(&params.gru, &[1.0], &fresh.hidden).unwrap());

        let s2 = advance(&params, &s1, &[2.0]).unwrap();
        let s3 = advance(&params, &s2, &[3.0]).unwrap();
        assert_eq!(s3.memory.valid_count(), 3);
        let stored: Vec<f64> = s3.memory.iter().map(|v| v[0]).collect();
        assert_eq!(stored, vec![3.0, 2.0, 1.0]);
        assert!(advance(&params, &s3, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn init_then_score_predicts_first_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = RanParams::<f64>::random(dims(2, 3, 6), &mut rng);
        let state = init_state(&params, &[1.25, -4.0]).unwrap();
        let g = predict(&params, &state).unwrap();
        assert_eq!(g.mu.as_slice(), &[1.25, -4.0]);
        assert!(init_state(&params, &[1.0]).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let params = RanParams::<f32>::zeros(dims(2, 2, 3));
        let state = init_state(&params, &[1.0f32, 2.0]).unwrap();
        let next = advance(&params, &state, &[3.0, 4.0]).unwrap();
        let g = predict(&params, &next).unwrap();
        assert_eq!(g.mu.as_slice(), &[2.0f32, 3.0]);
    }

    proptest! {
        #[test]
        fn alpha_sums_to_one(seed in 0u64..500, valid in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = dims(2, 4, 6);
            let mut head = HeadParams::<f64>::random(d, &mut rng);
            for b in head.bias.iter_mut() {
                *b = rng.gen_range(-3.0..3.0);
            }
            let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = predict_coefficients(&head, &h, valid).unwrap();
            let total: f64 = c.alpha.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(c.alpha[valid..].iter().all(|&a| a == 0.0));
        }

        #[test]
        fn single_slot_memory_predicts_last_input(
            seed in 0u64..500,
            x in prop::collection::vec(-100.0f64..100.0, 3),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = RanParams::<f64>::random(dims(3, 4, 1), &mut rng);
            let s0 = init_state(&params, &[0.5, 0.5, 0.5]).unwrap();
            let s1 = advance(&params, &s0, &x).unwrap();
            let g = predict(&params, &s1).unwrap();
            prop_assert_eq!(g.mu.as_slice(), x.as_slice());
        }

        #[test]
        fn uniform_alpha_is_the_mean(
            slots in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 1..6),
        ) {
            let refs: Vec<&[f64]> = slots.iter().map(|s| s.as_slice()).collect();
            let mem = memory_of(&refs, 6);
            let v = mem.valid_count();
            let mut alpha = vec![0.0; 6];
            for a in alpha.iter_mut().take(v) {
                *a = 1.0 / v as f64;
            }
            let coeffs = ArCoefficients { alpha: alpha.into(), sigma: Vector::filled(2, 1.0) };
            let mu = predict_distribution(&mem, &coeffs).unwrap().mu;
            for j in 0..2 {
                let mean = slots.iter().map(|s| s[j]).sum::<f64>() / v as f64;
                prop_assert!((mu[j] - mean).abs() < 1e-12);
            }
        }

        #[test]
        fn scoring_is_deterministic(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = RanParams::<f64>::random(dims(2, 3, 4), &mut rng);
            let s = init_state(&params, &[0.3, 0.1]).unwrap();
            let a = advance(&params, &s, &[0.2, 0.2]).unwrap();
            let b = advance(&params, &s, &[0.2, 0.2]).unwrap();
            let sa = score_candidate(&params, &a, &[0.1, 0.4]).unwrap();
            let sb = score_candidate(&params, &b, &[0.1, 0.4]).unwrap();
            prop_assert_eq!(sa.to_bits(), sb.to_bits());
        }
    }
}
