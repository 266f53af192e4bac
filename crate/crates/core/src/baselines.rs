//! Reference strategies: plain averaged multi-task SGD and fixed-sparsity
//! binary masks updated by a score-and-swap rule.

use crate::softmask::{masked_sgd_step, TaskMask};
use crate::vecmath::{argsort_by, elementwise_mul, mean_of, DenseVector, VecError};

/// Default sparsity of the hard-mask baseline.
pub const DEFAULT_HARD_SPARSITY: f64 = 0.2;
/// Default swap count per update as a fraction of the dimension.
pub const DEFAULT_SWAP_FRACTION: f64 = 0.01;

/// Binary per-task mask at fixed sparsity. Each update removes and restores
/// the same number of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HardMaskState {
    pub masks: Vec<TaskMask>,
    pub sparsity: f64,
    pub swap_count: usize,
}

impl HardMaskState {
    pub fn new(masks: Vec<TaskMask>, sparsity: f64, swap_count: usize) -> Self {
        Self { masks, sparsity, swap_count }
    }
}

/// Outcome of one task's swap.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SwapReport {
    pub removed: Vec<usize>,
    pub restored: Vec<usize>,
}

/// `g_i ⊙ ḡ`.
pub fn agreement_score(grad: &DenseVector, gbar: &DenseVector) -> Result<DenseVector, VecError> {
    elementwise_mul(grad, gbar)
}

/// `A + λF`.
pub fn combined_harmony(
    agreement: &DenseVector,
    fisher_raw: &DenseVector,
    lambda: f64,
) -> Result<DenseVector, VecError> {
    agreement.add(&fisher_raw.scale(lambda))
}

/// Swaps up to `swap_count` parameters of one task: the lowest-scoring
/// active ones are zeroed and the highest-scoring masked ones restored.
/// Candidates come from the mask before the swap; ties go to the lower
/// index. The count is clamped so the zero count never changes.
pub fn harmodt_update(
    mask: &TaskMask,
    scores: &DenseVector,
    swap_count: usize,
) -> Result<(TaskMask, SwapReport), VecError> {
    scores.ensure_len(mask.len())?;
    let active: Vec<bool> = (0..mask.len()).map(|j| mask.is_active(j)).collect();
    let n_active = active.iter().filter(|&&a| a).count();
    let k = swap_count.min(n_active).min(mask.len() - n_active);
    if k == 0 {
        return Ok((mask.clone(), SwapReport::default()));
    }
    let s = scores.as_slice();
    let removed: Vec<usize> = argsort_by(s, false).into_iter().filter(|&j| active[j]).take(k).collect();
    let restored: Vec<usize> = argsort_by(s, true).into_iter().filter(|&j| !active[j]).take(k).collect();
    let mut values = mask.soft().clone().into_vec();
    for &j in &removed {
        values[j] = 0.0;
    }
    for &j in &restored {
        values[j] = 1.0;
    }
    let out = TaskMask::new(DenseVector::from_vec_unchecked(values)).expect("binary values");
    Ok((out, SwapReport { removed, restored }))
}

/// Scores every task with `A + λF` and swaps its mask in place.
pub fn harmodt_step(
    state: &mut HardMaskState,
    grads: &[DenseVector],
    fisher_raw: &[DenseVector],
    lambda: f64,
) -> Result<Vec<SwapReport>, VecError> {
    let gbar = mean_of(grads)?;
    let mut reports = Vec::with_capacity(grads.len());
    for ((mask, g), f) in state.masks.iter_mut().zip(grads).zip(fisher_raw) {
        let h = combined_harmony(&agreement_score(g, &gbar)?, f, lambda)?;
        let (next, report) = harmodt_update(mask, &h, state.swap_count)?;
        *mask = next;
        reports.push(report);
    }
    Ok(reports)
}

/// `θ − η · (1/N) Σ g_i`.
pub fn nomask_step(theta: &DenseVector, grads: &[DenseVector], lr: f64) -> Result<DenseVector, VecError> {
    let ones = vec![TaskMask::ones(theta.len()); grads.len()];
    masked_sgd_step(theta, grads, &ones, lr)
}
