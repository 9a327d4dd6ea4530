//! Dense vector/matrix kernel and the scalar nonlinearities the models use.
//!
//! Everything here is generic over [`Scalar`]; the crate root pins `f64`.

use std::fmt;
use std::iter::Sum;
use std::ops::{Deref, DerefMut};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

/// Floating point scalar the model math is written against.
pub trait Scalar:
    Float + FromPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Lossless-enough conversion of a literal into the scalar type.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `0.5 * ln(2π)`.
pub fn half_ln_two_pi<T: Scalar>() -> T {
    T::lit(0.918_938_533_204_672_7)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector<T>(Vec<T>);

impl<T: Scalar> Vector<T> {
    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn filled(len: usize, value: T) -> Self {
        Self(vec![value; len])
    }

    pub fn from_slice(values: &[T]) -> Self {
        Self(values.to_vec())
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    fn check_len(&self, other: &Self, op: &str) -> Result<()> {
        if self.len() != other.len() {
            return Err(shape(format!(
                "{op}: lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_len(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_len(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_len(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|x| x * factor)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_len(other, "dot")?;
        Ok(self.0.iter().zip(&other.0).map(|(&a, &b)| a * b).sum())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self(self.0.iter().map(|&x| f(x)).collect())
    }

    /// Elementwise combination; callers guarantee equal lengths.
    pub(crate) fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.len(), other.len());
        Self(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect())
    }

    /// `self += factor * other`, in place.
    pub fn axpy(&mut self, factor: T, other: &Self) -> Result<()> {
        self.check_len(other, "axpy")?;
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            *a = *a + factor * b;
        }
        Ok(())
    }
}

impl<T> From<Vec<T>> for Vector<T> {
    fn from(values: Vec<T>) -> Self {
        Self(values)
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for Vector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    /// Entries drawn by `sample` in row-major order.
    pub fn from_fn(rows: usize, cols: usize, mut sample: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(sample(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn scale(&self, factor: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * factor).collect(),
        }
    }

    pub fn matvec(&self, v: &[T]) -> Result<Vector<T>> {
        if v.len() != self.cols {
            return Err(shape(format!(
                "matvec: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        if self.cols == 0 {
            return Ok(Vector::zeros(self.rows));
        }
        Ok(self
            .data
            .chunks_exact(self.cols)
            .take(self.rows)
            .map(|row| row.iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect::<Vec<_>>()
            .into())
    }

    /// `selfᵀ · v`.
    pub fn matvec_transposed(&self, v: &[T]) -> Result<Vector<T>> {
        if v.len() != self.rows {
            return Err(shape(format!(
                "transposed matvec: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![T::zero(); self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == T::zero() {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o = *o + m * vr;
            }
        }
        Ok(out.into())
    }

    /// `self += left ⊗ right`.
    pub fn add_outer(&mut self, left: &[T], right: &[T]) -> Result<()> {
        if left.len() != self.rows || right.len() != self.cols {
            return Err(shape("add_outer: operand lengths do not match matrix"));
        }
        for (r, &l) in left.iter().enumerate() {
            if l == T::zero() {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (m, &x) in row.iter_mut().zip(right) {
                *m = *m + l * x;
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vector<T>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect::<Vec<_>>().into())
}

/// Softmax over the first `valid` logits; the remaining slots get exactly 0.
pub fn masked_softmax<T: Scalar>(logits: &[T], valid: usize) -> Result<Vector<T>> {
    if valid == 0 || valid > logits.len() {
        return Err(Error::InvalidArgument(format!(
            "masked softmax over {valid} of {} logits",
            logits.len()
        )));
    }
    let mut out = softmax(&logits[..valid])?.into_inner();
    out.resize(logits.len(), T::zero());
    Ok(out.into())
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(v: &[T]) -> Vector<T> {
    v.iter().map(|&x| sigmoid_scalar(x)).collect::<Vec<_>>().into()
}

pub fn tanh<T: Scalar>(v: &[T]) -> Vector<T> {
    v.iter().map(|&x| x.tanh()).collect::<Vec<_>>().into()
}

/// Log-density of `x` under `N(mu, diag(sigma²))`. The density itself is
/// never formed, so high dimensions cannot underflow.
pub fn diag_gaussian_logpdf<T: Scalar>(x: &[T], mu: &[T], sigma: &[T]) -> Result<T> {
    if x.len() != mu.len() || x.len() != sigma.len() {
        return Err(shape(format!(
            "logpdf: x {}, mu {}, sigma {}",
            x.len(),
            mu.len(),
            sigma.len()
        )));
    }
    let half = T::lit(0.5);
    let mut total = T::zero();
    for ((&xj, &mj), &sj) in x.iter().zip(mu).zip(sigma) {
        if !(sj > T::zero()) {
            return Err(Error::Domain(format!("non-positive deviation {sj}")));
        }
        let z = (xj - mj) / sj;
        total = total - half_ln_two_pi::<T>() - sj.ln() - half * z * z;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, prop_assume, proptest};

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for &p in s.iter() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(s[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let s = softmax(&[1000.0, 999.0]).unwrap();
        // e/(e+1) evaluated at 50 digits.
        assert_abs_diff_eq!(s[0], 0.731_058_578_630_004_9, epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], 0.268_941_421_369_995_1, epsilon = 1e-15);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(
            softmax::<f64>(&[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn masked_softmax_zeroes_invalid_slots() {
        let s = masked_softmax(&[5.0, 5.0, 100.0, -3.0], 2).unwrap();
        assert_eq!(s.as_slice(), &[0.5, 0.5, 0.0, 0.0]);
        assert!(masked_softmax(&[1.0], 0).is_err());
    }

    #[test]
    fn logpdf_examples() {
        let v = diag_gaussian_logpdf(&[0.0], &[0.0], &[1.0]).unwrap();
        assert_abs_diff_eq!(v, -0.918_938_533_204_672_7, epsilon = 1e-12);
        let v = diag_gaussian_logpdf(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(v, -1.837_877_066_409_345_5, epsilon = 1e-12);
        // -ln 2 - 0.5 ln(2π) - 0.5 (1/2)²
        let expected = -(2f64.ln()) - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.125;
        let v = diag_gaussian_logpdf(&[1.5], &[0.5], &[2.0]).unwrap();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(v, -1.737_085_713_764_618, epsilon = 1e-12);
    }

    #[test]
    fn logpdf_domain_errors() {
        assert!(matches!(
            diag_gaussian_logpdf(&[0.0], &[0.0], &[0.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            diag_gaussian_logpdf(&[0.0], &[0.0], &[-1.0]),
            Err(Error::Domain(_))
        ));
        assert!(diag_gaussian_logpdf(&[0.0, 1.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn nonlinearities() {
        assert_eq!(sigmoid(&[0.0f64])[0], 0.5);
        assert_eq!(tanh(&[0.0f64])[0], 0.0);
        assert_abs_diff_eq!(sigmoid(&[3f64.ln()])[0], 0.75, epsilon = 1e-15);
        assert_eq!(sigmoid(&[-1000.0f64])[0], 0.0);
        assert_eq!(sigmoid(&[1000.0f64])[0], 1.0);
    }

    #[test]
    fn matvec_examples() {
        let v = Vector::from(vec![1.5, -2.0, 7.0]);
        assert_eq!(Matrix::identity(3).matvec(&v).unwrap(), v);
        assert_eq!(
            Matrix::zeros(2, 3).matvec(&v).unwrap().as_slice(),
            &[0.0, 0.0]
        );
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap().as_slice(), &[3.0, 7.0]);
        assert_eq!(
            m.matvec_transposed(&[1.0, 1.0]).unwrap().as_slice(),
            &[4.0, 6.0]
        );
        assert!(m.matvec(&[1.0]).is_err());
    }

    #[test]
    fn vector_ops_check_shapes() {
        let a = Vector::from(vec![1.0, 2.0]);
        let b = Vector::from(vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().as_slice(), &[4.0, 6.0]);
        assert_eq!(a.hadamard(&b).unwrap().as_slice(), &[3.0, 8.0]);
        assert_eq!(a.scale(2.0).as_slice(), &[2.0, 4.0]);
        assert!(a.add(&Vector::zeros(3)).is_err());
    }

    #[test]
    fn generic_over_f32() {
        let s = softmax(&[0.0f32, 0.0]).unwrap();
        assert_eq!(s.as_slice(), &[0.5f32, 0.5]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..20),
            shift in -100.0f64..100.0,
        ) {
            let s = softmax(&logits).unwrap();
            let total: f64 = s.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let t = softmax(&shifted).unwrap();
            for (a, b) in s.iter().zip(t.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn logpdf_peaks_at_mean(
            mu in prop::collection::vec(-10.0f64..10.0, 1..8),
            sigma_raw in prop::collection::vec(0.1f64..5.0, 8),
            delta in -1.0f64..1.0,
            idx in 0usize..8,
        ) {
            prop_assume!(delta.abs() > 1e-6);
            let sigma = &sigma_raw[..mu.len()];
            let at_mean = diag_gaussian_logpdf(&mu, &mu, sigma).unwrap();
            let mut x = mu.clone();
            let j = idx % mu.len();
            x[j] += delta;
            let off = diag_gaussian_logpdf(&x, &mu, sigma).unwrap();
            prop_assert!(off < at_mean);
        }

        #[test]
        fn ops_are_pure(v in prop::collection::vec(-5.0f64..5.0, 1..10)) {
            let a = softmax(&v).unwrap();
            let b = softmax(&v).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(sigmoid(&v), sigmoid(&v));
        }
    }
}
