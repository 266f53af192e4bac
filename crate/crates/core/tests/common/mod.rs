//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls the library routine it checks.

#![allow(dead_code)]

use soco::model::{Task, TaskObjective};
use soco::softmask::TaskMask;
use soco::vecmath::DenseVector;

/// Interpolated quantile for `q = p / denom`, with the rank split into
/// integer and fractional parts using integer arithmetic only.
pub fn quantile_exact_rank(values: &[f64], p: u64, denom: u64) -> f64 {
    let mut xs = values.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as u64;
    let num = p * n;
    let k = num / denom;
    let rem = num % denom;
    let at = |k: u64| xs[(k.clamp(1, n) - 1) as usize];
    if rem == 0 {
        at(k)
    } else {
        let gamma = rem as f64 / denom as f64;
        (1.0 - gamma) * at(k) + gamma * at(k + 1)
    }
}

/// Central differences of the task loss, one coordinate at a time.
pub fn finite_difference_gradient(task: &Task, params: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|j| {
            let orig = p[j];
            p[j] = orig + h;
            let up = task.loss(&DenseVector::from_vec_unchecked(p.clone())).unwrap();
            p[j] = orig - h;
            let down = task.loss(&DenseVector::from_vec_unchecked(p.clone())).unwrap();
            p[j] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Coordinate-wise relative error `|a − b| / max(|a|, |b|, floor)`. The
/// floor keeps near-zero components from turning difference noise into
/// large ratios.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Per-task count of coordinates where the task opposes the average, with
/// an exactly cancelled average counting as opposition when the task
/// itself is nonzero.
pub fn recount_conflict_ratio(grads: &[DenseVector]) -> Vec<f64> {
    let n = grads.len();
    let d = grads[0].len();
    let mut gbar = vec![0.0; d];
    for g in grads {
        for j in 0..d {
            gbar[j] += g[j];
        }
    }
    for x in &mut gbar {
        *x /= n as f64;
    }
    grads
        .iter()
        .map(|g| {
            let mut hits = 0usize;
            for j in 0..d {
                let opposed = (g[j] > 0.0 && gbar[j] < 0.0) || (g[j] < 0.0 && gbar[j] > 0.0);
                let cancelled = gbar[j] == 0.0 && g[j] != 0.0;
                if opposed || cancelled {
                    hits += 1;
                }
            }
            hits as f64 / d as f64
        })
        .collect()
}

/// Per task, how many of the `round(0.3·d)` largest squared gradients sit
/// on a coordinate whose soft value is below one. Ties rank the lower index
/// first.
pub fn recount_wrongly_masked(grads: &[DenseVector], masks: &[TaskMask]) -> Vec<usize> {
    grads
        .iter()
        .zip(masks)
        .map(|(g, m)| {
            let d = g.len();
            let mut idx: Vec<usize> = (0..d).collect();
            idx.sort_by(|&a, &b| {
                let (fa, fb) = (g[a] * g[a], g[b] * g[b]);
                fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
            });
            let top = (0.3 * d as f64).round() as usize;
            idx[..top].iter().filter(|&&j| m.soft()[j] < 1.0).count()
        })
        .collect()
}

/// One masked step written out coordinate by coordinate: the discounted
/// gradients are summed in task order, divided by the task count, scaled
/// by the step size and subtracted.
pub fn reference_step(theta: &[f64], grads: &[DenseVector], masks: &[TaskMask], lr: f64) -> (Vec<f64>, Vec<f64>) {
    let n = grads.len() as f64;
    let mut next = theta.to_vec();
    let mut dir = vec![0.0; theta.len()];
    for j in 0..theta.len() {
        let mut s = 0.0;
        for (g, m) in grads.iter().zip(masks) {
            s += g[j] * m.soft()[j];
        }
        dir[j] = s / n;
        next[j] = theta[j] - lr * dir[j];
    }
    (next, dir)
}

/// `θ` with every coordinate whose soft value is not exactly one zeroed.
pub fn forward_point(theta: &[f64], mask: &TaskMask) -> DenseVector {
    DenseVector::from_vec_unchecked(
        theta.iter().zip(mask.soft().iter()).map(|(&t, &m)| if m == 1.0 { t } else { 0.0 }).collect(),
    )
}
