//! Dense `f64` vectors and the seeded random stream shared by every module.

use std::cmp::Ordering;
use std::ops::Index;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VecError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid value {value} at index {index}")]
    InvalidValue { index: usize, value: f64 },
    #[error("empty input")]
    EmptyInput,
}

/// Fixed-length vector of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    /// Builds a vector, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self, VecError> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(VecError::InvalidValue { index, value });
        }
        Ok(Self(values))
    }

    /// Wraps values without the finiteness check. Callers that feed the
    /// result back into scoring are expected to call [`DenseVector::check_finite`].
    pub fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// First non-finite entry, if any.
    pub fn check_finite(&self) -> Result<(), VecError> {
        match self.0.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(VecError::InvalidValue { index, value: self.0[index] }),
            None => Ok(()),
        }
    }

    pub fn ensure_len(&self, len: usize) -> Result<(), VecError> {
        if self.len() == len {
            Ok(())
        } else {
            Err(VecError::DimensionMismatch { left: self.len(), right: len })
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, VecError> {
        other.ensure_len(self.len())?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn mul(&self, other: &Self) -> Result<Self, VecError> {
        elementwise_mul(self, other)
    }

    pub fn add(&self, other: &Self) -> Result<Self, VecError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, VecError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self(self.0.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64, VecError> {
        other.ensure_len(self.len())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }
}

impl Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

impl<'a> IntoIterator for &'a DenseVector {
    type Item = &'a f64;
    type IntoIter = std::slice::Iter<'a, f64>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

pub fn elementwise_mul(a: &DenseVector, b: &DenseVector) -> Result<DenseVector, VecError> {
    a.zip_with(b, |x, y| x * y)
}

/// Ascending sort under the IEEE total order, with NaN rejected up front.
pub fn sort_ascending(a: &DenseVector) -> Result<DenseVector, VecError> {
    if let Some(index) = a.0.iter().position(|v| v.is_nan()) {
        return Err(VecError::InvalidValue { index, value: f64::NAN });
    }
    let mut out = a.0.clone();
    out.sort_by(f64::total_cmp);
    Ok(DenseVector(out))
}

pub fn minmax(a: &DenseVector) -> Result<(f64, f64), VecError> {
    let (first, rest) = a.0.split_first().ok_or(VecError::EmptyInput)?;
    Ok(rest.iter().fold((*first, *first), |(lo, hi), &v| (lo.min(v), hi.max(v))))
}

/// Coordinatewise mean of equal-length vectors, summed in input order.
pub fn mean_of(vectors: &[DenseVector]) -> Result<DenseVector, VecError> {
    let first = vectors.first().ok_or(VecError::EmptyInput)?;
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        v.ensure_len(first.len())?;
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    Ok(DenseVector(acc.into_iter().map(|s| s / n).collect()))
}

/// Indices ordered by value, ties broken by the lower index.
pub fn argsort_by(values: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = values[a].total_cmp(&values[b]);
        let ord = if descending { ord.reverse() } else { ord };
        match ord {
            Ordering::Equal => a.cmp(&b),
            other => other,
        }
    });
    idx
}

/// Seeded, platform-independent random stream (ChaCha8).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed. Does not
    /// advance `self`.
    pub fn child(&self, stream: u64) -> Rng {
        Rng::new(child_seed(self.seed, stream))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    /// Uniformly random `k`-subset of `0..n`, returned ascending.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.inner, n, k.min(n)).into_vec();
        picked.sort_unstable();
        picked
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// SplitMix64 mix of a parent seed and a stream id.
pub fn child_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
