//! Task-aware mask updates with adaptive sparsity.
//!
//! Each task scores every parameter twice: a conflict score (gradient
//! agreement with the task average plus weighted importance) and a harmony
//! score (agreement damped by a magnitude gate). Interquartile thresholds on
//! each score distribution, widened by an asymmetric cosine schedule, pick
//! the parameters to soft-mask and the ones to restore.

use std::f64::consts::PI;

use thiserror::Error;

use crate::softmask::{FisherInfo, MaskError, TaskMask};
use crate::vecmath::{sort_ascending, DenseVector, VecError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TamuError {
    #[error("invalid TAMU config: {0}")]
    Config(String),
    #[error("quantile level {0} outside (0, 1)")]
    QuantileLevel(f64),
    #[error("total steps must be positive")]
    ZeroHorizon,
    #[error(transparent)]
    Vec(#[from] VecError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TamuConfig {
    /// Weight of raw importance in the conflict score.
    pub lambda: f64,
    /// Magnitude tolerance of the harmony gate.
    pub alpha: f64,
    pub q1: f64,
    pub q3: f64,
    pub beta_left_max: f64,
    pub beta_right_max: f64,
    pub beta_min: f64,
    /// Schedule horizon `T`.
    pub total_steps: usize,
    pub mask_interval: usize,
}

impl Default for TamuConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 20.0,
            q1: 0.05,
            q3: 0.95,
            beta_left_max: 20.0,
            beta_right_max: 30.0,
            beta_min: 5.0,
            total_steps: 1000,
            mask_interval: 10,
        }
    }
}

impl TamuConfig {
    pub fn validate(&self) -> Result<(), TamuError> {
        let all = [self.lambda, self.alpha, self.q1, self.q3, self.beta_left_max, self.beta_right_max, self.beta_min];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(TamuError::Config("all values must be finite".into()));
        }
        if self.lambda < 0.0 {
            return Err(TamuError::Config("lambda must be >= 0".into()));
        }
        if self.alpha <= 0.0 {
            return Err(TamuError::Config("alpha must be > 0".into()));
        }
        if !(0.0 < self.q1 && self.q1 < self.q3 && self.q3 < 1.0) {
            return Err(TamuError::Config("need 0 < q1 < q3 < 1".into()));
        }
        if self.beta_min > self.beta_left_max.min(self.beta_right_max) {
            return Err(TamuError::Config("beta_min must not exceed either beta max".into()));
        }
        if self.total_steps == 0 {
            return Err(TamuError::ZeroHorizon);
        }
        if self.mask_interval == 0 {
            return Err(TamuError::Config("mask_interval must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub conflict: DenseVector,
    pub harmony: DenseVector,
    /// Magnitude gate; 1 wherever the agreement product is not positive.
    pub gate: DenseVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Coordinates to soft-mask, ascending.
    pub conflict_set: Vec<usize>,
    /// Coordinates to restore, ascending, disjoint from `conflict_set`.
    pub recover_set: Vec<usize>,
    pub conflict_threshold: f64,
    pub harmony_threshold: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Conflict,
    Harmony,
}

/// `(g_i ⊙ ḡ)_j + λ F_j` on the raw importance.
pub fn conflict_score(
    grad: &DenseVector,
    gbar: &DenseVector,
    fisher_raw: &DenseVector,
    lambda: f64,
) -> Result<DenseVector, VecError> {
    gbar.ensure_len(grad.len())?;
    fisher_raw.ensure_len(grad.len())?;
    Ok(DenseVector::from_vec_unchecked(
        grad.iter().zip(gbar.iter()).zip(fisher_raw.iter()).map(|((g, b), f)| g * b + lambda * f).collect(),
    ))
}

/// `ReLU((α|ḡ| − |g|) / (α|ḡ|))` for one coordinate. Only meaningful when
/// `g · ḡ > 0`, which keeps the denominator nonzero.
pub fn gate_value(g: f64, gbar: f64, alpha: f64) -> f64 {
    let tol = alpha * gbar.abs();
    ((tol - g.abs()) / tol).max(0.0)
}

pub fn harmony_gate(grad: &DenseVector, gbar: &DenseVector, alpha: f64) -> Result<DenseVector, VecError> {
    gbar.ensure_len(grad.len())?;
    Ok(DenseVector::from_vec_unchecked(
        grad.iter().zip(gbar.iter()).map(|(&g, &b)| if g * b > 0.0 { gate_value(g, b, alpha) } else { 1.0 }).collect(),
    ))
}

/// Agreement scaled by the gate where positive, raw agreement otherwise.
pub fn harmony_score(grad: &DenseVector, gbar: &DenseVector, gate: &DenseVector) -> Result<DenseVector, VecError> {
    gbar.ensure_len(grad.len())?;
    gate.ensure_len(grad.len())?;
    Ok(DenseVector::from_vec_unchecked(
        grad.iter()
            .zip(gbar.iter())
            .zip(gate.iter())
            .map(|((&g, &b), &h)| {
                let p = g * b;
                if p > 0.0 {
                    p * h
                } else {
                    p
                }
            })
            .collect(),
    ))
}

pub fn score(
    grad: &DenseVector,
    gbar: &DenseVector,
    fisher_raw: &DenseVector,
    cfg: &TamuConfig,
) -> Result<ScoreReport, VecError> {
    let conflict = conflict_score(grad, gbar, fisher_raw, cfg.lambda)?;
    let gate = harmony_gate(grad, gbar, cfg.alpha)?;
    let harmony = harmony_score(grad, gbar, &gate)?;
    Ok(ScoreReport { conflict, harmony, gate })
}

/// Interpolated order statistic of an ascending sample. With `k = q·n`
/// (1-based), integral `k` returns `X_(k)`; otherwise the two neighbours are
/// blended by the fractional part. Indices are clamped into `[1, n]`.
pub fn quantile(sorted: &DenseVector, q: f64) -> Result<f64, TamuError> {
    if sorted.is_empty() {
        return Err(VecError::EmptyInput.into());
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(TamuError::QuantileLevel(q));
    }
    let n = sorted.len();
    let at = |k: f64| sorted[(k as usize).clamp(1, n) - 1];
    let k = q * n as f64;
    if k.fract() == 0.0 {
        return Ok(at(k));
    }
    let gamma = k - k.floor();
    Ok((1.0 - gamma) * at(k.floor()) + gamma * at(k.ceil()))
}

/// `Q_q1 − β·IQR` on the conflict side, `Q_q3 + β·IQR` on the harmony side.
pub fn iqr_threshold(scores: &DenseVector, cfg: &TamuConfig, beta: f64, side: Side) -> Result<f64, TamuError> {
    let sorted = sort_ascending(scores)?;
    let lo = quantile(&sorted, cfg.q1)?;
    let hi = quantile(&sorted, cfg.q3)?;
    let iqr = hi - lo;
    Ok(match side {
        Side::Conflict => lo - beta * iqr,
        Side::Harmony => hi + beta * iqr,
    })
}

/// `η_min + ½(η_max − η_min)(1 + cos(2π t/T))`.
pub fn cosine_anneal(max: f64, min: f64, t: f64, total: f64) -> Result<f64, TamuError> {
    if total <= 0.0 {
        return Err(TamuError::ZeroHorizon);
    }
    Ok(min + 0.5 * (max - min) * (1.0 + (2.0 * PI * t / total).cos()))
}

/// Piecewise schedule: the left amplitude up to `T/2`, the right one after.
/// Both halves reach `β_min` at the midpoint.
pub fn beta_schedule(cfg: &TamuConfig, t: usize) -> Result<f64, TamuError> {
    let total = cfg.total_steps as f64;
    let t = t as f64;
    let max = if t <= total / 2.0 { cfg.beta_left_max } else { cfg.beta_right_max };
    cosine_anneal(max, cfg.beta_min, t, total)
}

/// Strict-inequality selection against both IQR thresholds. Conflict wins
/// on overlap.
pub fn select(scores: &ScoreReport, cfg: &TamuConfig, beta: f64) -> Result<SelectionResult, TamuError> {
    let conflict_threshold = iqr_threshold(&scores.conflict, cfg, beta, Side::Conflict)?;
    let harmony_threshold = iqr_threshold(&scores.harmony, cfg, beta, Side::Harmony)?;
    let conflict_set: Vec<usize> =
        scores.conflict.iter().enumerate().filter(|(_, &c)| c < conflict_threshold).map(|(j, _)| j).collect();
    let mut in_conflict = vec![false; scores.conflict.len()];
    for &j in &conflict_set {
        in_conflict[j] = true;
    }
    let recover_set = scores
        .harmony
        .iter()
        .enumerate()
        .filter(|(j, &h)| h > harmony_threshold && !in_conflict[*j])
        .map(|(j, _)| j)
        .collect();
    Ok(SelectionResult { conflict_set, recover_set, conflict_threshold, harmony_threshold, beta })
}

/// Conflicting coordinates take their normalized importance, recovered
/// ones become 1, the rest are left untouched.
pub fn apply_mask_update(mask: &TaskMask, sel: &SelectionResult, fisher: &FisherInfo) -> Result<TaskMask, MaskError> {
    let d = mask.len();
    fisher.normalized.ensure_len(d)?;
    let mut marked = vec![false; d];
    for &j in &sel.conflict_set {
        if j >= d {
            return Err(MaskError::IndexOutOfBounds { index: j, dim: d });
        }
        marked[j] = true;
    }
    for &j in &sel.recover_set {
        if j >= d {
            return Err(MaskError::IndexOutOfBounds { index: j, dim: d });
        }
        if marked[j] {
            return Err(MaskError::Overlap(j));
        }
    }
    let mut out = mask.clone();
    let values = out.values_mut();
    for &j in &sel.conflict_set {
        values[j] = fisher.normalized[j];
    }
    for &j in &sel.recover_set {
        values[j] = 1.0;
    }
    TaskMask::new(out.soft().clone())
}
