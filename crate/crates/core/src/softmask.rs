//! Importance-aware soft masks.
//!
//! A task's soft mask holds one value in `[0, 1]` per shared parameter.
//! Only entries equal to exactly `1.0` take part in the forward pass; every
//! entry scales that task's contribution to the parameter update.

use thiserror::Error;

use crate::vecmath::{minmax, DenseVector, VecError};

/// Normalized importance assigned to every coordinate when all raw
/// importances are equal.
pub const DEGENERATE_IMPORTANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("mask value {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("index {index} out of bounds for dimension {dim}")]
    IndexOutOfBounds { index: usize, dim: usize },
    #[error("index {0} selected for both conflict and recovery")]
    Overlap(usize),
    #[error(transparent)]
    Vec(#[from] VecError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskMask {
    soft: DenseVector,
}

impl TaskMask {
    pub fn new(soft: DenseVector) -> Result<Self, MaskError> {
        if let Some((index, &value)) = soft.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(MaskError::OutOfRange { index, value });
        }
        Ok(Self { soft })
    }

    pub fn ones(dim: usize) -> Self {
        Self { soft: DenseVector::filled(dim, 1.0) }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { soft: DenseVector::zeros(dim) }
    }

    pub fn len(&self) -> usize {
        self.soft.len()
    }

    pub fn is_empty(&self) -> bool {
        self.soft.is_empty()
    }

    pub fn soft(&self) -> &DenseVector {
        &self.soft
    }

    pub fn get(&self, j: usize) -> f64 {
        self.soft[j]
    }

    /// Forward mask: 1 where the soft value is exactly 1, else 0.
    pub fn binary(&self) -> DenseVector {
        self.soft.map(|m| if m == 1.0 { 1.0 } else { 0.0 })
    }

    pub fn is_active(&self, j: usize) -> bool {
        self.soft[j] == 1.0
    }

    /// Fraction of entries below 1.
    pub fn sparsity(&self) -> f64 {
        if self.soft.is_empty() {
            return 0.0;
        }
        self.soft.iter().filter(|&&m| m < 1.0).count() as f64 / self.soft.len() as f64
    }

    pub fn zero_count(&self) -> usize {
        self.soft.iter().filter(|&&m| m == 0.0).count()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        self.soft.as_mut_slice()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub raw: DenseVector,
    pub normalized: DenseVector,
}

impl FisherInfo {
    /// Wraps raw importances and derives the min-max normalized form.
    pub fn from_raw(raw: DenseVector) -> Result<Self, VecError> {
        let normalized = min_max_normalize(&raw)?;
        Ok(Self { raw, normalized })
    }
}

/// `(x − min)/(max − min)`, or [`DEGENERATE_IMPORTANCE`] everywhere when
/// `max == min`.
pub fn min_max_normalize(raw: &DenseVector) -> Result<DenseVector, VecError> {
    if raw.is_empty() {
        return Ok(DenseVector::zeros(0));
    }
    let (lo, hi) = minmax(raw)?;
    if hi > lo {
        let span = hi - lo;
        Ok(raw.map(|x| ((x - lo) / span).clamp(0.0, 1.0)))
    } else {
        Ok(DenseVector::filled(raw.len(), DEGENERATE_IMPORTANCE))
    }
}

/// Empirical Fisher importance `(g ⊙ M)²` from the task-loss gradient.
pub fn fisher_information(grad: &DenseVector, mask: &TaskMask) -> Result<FisherInfo, VecError> {
    let masked = grad.mul(mask.soft())?;
    FisherInfo::from_raw(masked.map(|x| x * x))
}

/// Mask built from scratch: conflicting coordinates take their normalized
/// importance, everything else is 1.
pub fn soft_mask_values(fisher: &FisherInfo, conflict_set: &[usize]) -> Result<TaskMask, MaskError> {
    let dim = fisher.normalized.len();
    let mut soft = vec![1.0; dim];
    for &j in conflict_set {
        if j >= dim {
            return Err(MaskError::IndexOutOfBounds { index: j, dim });
        }
        soft[j] = fisher.normalized[j];
    }
    TaskMask::new(DenseVector::from_vec_unchecked(soft))
}

/// `θ ⊙ M̃`: parameters survive only where the soft value is exactly 1.
pub fn masked_forward(theta: &DenseVector, mask: &TaskMask) -> Result<DenseVector, VecError> {
    theta.ensure_len(mask.len())?;
    Ok(DenseVector::from_vec_unchecked(
        theta.iter().zip(mask.soft().iter()).map(|(&t, &m)| if m == 1.0 { t } else { 0.0 }).collect(),
    ))
}

/// Per-coordinate update direction `(1/N) Σ_i g_i ⊙ M_i`, summed in task
/// order and then divided by `N`.
pub fn discounted_mean_gradient(grads: &[DenseVector], masks: &[TaskMask]) -> Result<DenseVector, VecError> {
    if grads.is_empty() {
        return Err(VecError::EmptyInput);
    }
    if masks.len() != grads.len() {
        return Err(VecError::DimensionMismatch { left: grads.len(), right: masks.len() });
    }
    let d = grads[0].len();
    let mut acc = vec![0.0; d];
    for (g, m) in grads.iter().zip(masks) {
        g.ensure_len(d)?;
        m.soft().ensure_len(d)?;
        for ((a, &gj), &mj) in acc.iter_mut().zip(g.iter()).zip(m.soft().iter()) {
            *a += gj * mj;
        }
    }
    let n = grads.len() as f64;
    Ok(DenseVector::from_vec_unchecked(acc.into_iter().map(|s| s / n).collect()))
}

/// `θ' = θ − η · (1/N) Σ_i g_i ⊙ M_i`.
pub fn masked_sgd_step(
    theta: &DenseVector,
    grads: &[DenseVector],
    masks: &[TaskMask],
    lr: f64,
) -> Result<DenseVector, VecError> {
    let dir = discounted_mean_gradient(grads, masks)?;
    theta.ensure_len(dir.len())?;
    Ok(DenseVector::from_vec_unchecked(theta.iter().zip(dir.iter()).map(|(&t, &u)| t - lr * u).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec()).unwrap()
    }

    fn mask(x: &[f64]) -> TaskMask {
        TaskMask::new(v(x)).unwrap()
    }

    #[test]
    fn fisher_examples() {
        let f = fisher_information(&v(&[2.0, -3.0]), &mask(&[1.0, 1.0])).unwrap();
        assert_eq!(f.raw, v(&[4.0, 9.0]));
        assert_eq!(f.normalized, v(&[0.0, 1.0]));

        let f = fisher_information(&v(&[2.0, -3.0]), &mask(&[1.0, 0.0])).unwrap();
        assert_eq!(f.raw, v(&[4.0, 0.0]));
        assert_eq!(f.normalized, v(&[1.0, 0.0]));

        let f = fisher_information(&v(&[1.0, 1.0, 1.0]), &TaskMask::ones(3)).unwrap();
        assert_eq!(f.raw, v(&[1.0, 1.0, 1.0]));
        assert_eq!(f.normalized, v(&[0.5, 0.5, 0.5]));
    }

    #[test]
    fn soft_values_examples() {
        let f = FisherInfo::from_raw(v(&[4.0, 9.0, 0.0])).unwrap();
        assert_eq!(soft_mask_values(&f, &[0, 1, 2]).unwrap().soft(), &v(&[4.0 / 9.0, 1.0, 0.0]));
        assert_eq!(soft_mask_values(&f, &[]).unwrap(), TaskMask::ones(3));

        let flat = FisherInfo::from_raw(v(&[2.0, 2.0, 2.0])).unwrap();
        assert_eq!(soft_mask_values(&flat, &[0, 2]).unwrap().soft(), &v(&[0.5, 1.0, 0.5]));
        assert!(matches!(soft_mask_values(&flat, &[3]), Err(MaskError::IndexOutOfBounds { .. })));
    }

    #[test]
    fn forward_examples() {
        let theta = v(&[1.0, 2.0, 3.0]);
        assert_eq!(masked_forward(&theta, &mask(&[1.0, 0.7, 1.0])).unwrap(), v(&[1.0, 0.0, 3.0]));
        assert_eq!(masked_forward(&theta, &TaskMask::ones(3)).unwrap(), theta);
        assert_eq!(masked_forward(&theta, &TaskMask::zeros(3)).unwrap(), v(&[0.0, 0.0, 0.0]));
    }

    #[test]
    fn sgd_step_examples() {
        let out = masked_sgd_step(&v(&[1.0, 1.0]), &[v(&[1.0, 1.0])], &[mask(&[1.0, 0.5])], 0.1).unwrap();
        assert_eq!(out, v(&[0.9, 0.95]));

        let out = masked_sgd_step(
            &v(&[0.25, -4.0]),
            &[v(&[7.0, 1.0]), v(&[-3.0, 2.0])],
            &[mask(&[0.0, 1.0]), mask(&[0.0, 0.3])],
            0.5,
        )
        .unwrap();
        assert_eq!(out[0], 0.25);

        let out = masked_sgd_step(&v(&[0.0]), &[v(&[2.0]), v(&[-2.0])], &[mask(&[1.0]), mask(&[1.0])], 0.1).unwrap();
        assert_eq!(out, v(&[0.0]));

        assert_eq!(masked_sgd_step(&v(&[0.0]), &[], &[], 0.1), Err(VecError::EmptyInput));
    }

    #[test]
    fn mask_rejects_out_of_range() {
        assert!(TaskMask::new(v(&[0.5, 1.5])).is_err());
        assert!(TaskMask::new(v(&[-0.1])).is_err());
    }

    #[test]
    fn sparsity_counts_entries_below_one() {
        let m = mask(&[1.0, 0.99, 0.0, 1.0]);
        assert_eq!(m.sparsity(), 0.5);
        assert_eq!(m.zero_count(), 1);
        assert_eq!(m.binary(), v(&[1.0, 0.0, 0.0, 1.0]));
    }

    proptest! {
        #[test]
        fn normalized_fisher_stays_in_unit_interval(
            g in prop::collection::vec(-1e3f64..1e3, 1..64),
            seed in 0u64..1000,
        ) {
            let mut rng = crate::vecmath::Rng::new(seed);
            let m = TaskMask::new(DenseVector::new((0..g.len()).map(|_| rng.uniform()).collect()).unwrap()).unwrap();
            let f = fisher_information(&v(&g), &m).unwrap();
            prop_assert!(f.raw.iter().all(|&x| x >= 0.0));
            prop_assert!(f.normalized.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let all: Vec<usize> = (0..g.len()).collect();
            let built = soft_mask_values(&f, &all).unwrap();
            prop_assert!(built.soft().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn forward_keeps_exactly_the_unit_entries(
            pairs in prop::collection::vec((-10.0f64..10.0, prop_oneof![Just(1.0f64), 0.0f64..1.0]), 1..64),
        ) {
            let theta = v(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let m = mask(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let out = masked_forward(&theta, &m).unwrap();
            for (j, &(t, s)) in pairs.iter().enumerate() {
                prop_assert_eq!(out[j], if s == 1.0 { t } else { 0.0 });
            }
        }
    }
}
