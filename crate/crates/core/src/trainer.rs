//! Masked multi-task training loop.
//!
//! Every step evaluates each task at its forward-masked parameters and
//! applies the discounted average update. Every `mask_interval` steps the
//! loop also computes diagnostics and, depending on the strategy, rewrites
//! the masks before the parameter update.

use thiserror::Error;

use crate::baselines::{
    agreement_score, combined_harmony, harmodt_update, DEFAULT_HARD_SPARSITY, DEFAULT_SWAP_FRACTION,
};
use crate::exec::{map_indexed, Execution};
use crate::model::TaskObjective;
use crate::softmask::{fisher_information, masked_forward, masked_sgd_step, MaskError, TaskMask};
use crate::tamu::{apply_mask_update, beta_schedule, score, select, TamuConfig, TamuError};
use crate::vecmath::{argsort_by, mean_of, DenseVector, Rng, VecError};
use crate::workloads::{conflict_ratios_from_gradients, TaskSuite};

/// Fraction of top-importance parameters tracked by the wrongly-masked count.
pub const WRONGLY_MASKED_TOP_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}, task {task:?}, coordinate {coordinate:?}")]
    NonFinite { what: &'static str, step: usize, task: Option<usize>, coordinate: Option<usize> },
    #[error(transparent)]
    Vec(#[from] VecError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Tamu(#[from] TamuError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// Soft masks driven by TAMU.
    Soco,
    /// Fixed-sparsity binary masks with score-and-swap updates.
    Hard,
    /// Plain averaged SGD.
    None,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Soco => "soco",
            Strategy::Hard => "hard",
            Strategy::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "soco" => Some(Strategy::Soco),
            "hard" => Some(Strategy::Hard),
            "none" => Some(Strategy::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Total steps `E`; also the schedule horizon.
    pub epochs: usize,
    pub lr: f64,
    pub mask_interval: usize,
    pub init_sparsity: f64,
    pub hard_sparsity: f64,
    pub hard_swap_frac: f64,
    pub seed: u64,
    pub tamu: TamuConfig,
    /// A task succeeds when its final loss is at most this fraction of its
    /// initial loss.
    pub success_frac: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Soco,
            epochs: 1000,
            lr: 0.1,
            mask_interval: 10,
            init_sparsity: 0.2,
            hard_sparsity: DEFAULT_HARD_SPARSITY,
            hard_swap_frac: DEFAULT_SWAP_FRACTION,
            seed: 0,
            tamu: TamuConfig::default(),
            success_frac: 0.05,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config("lr must be a positive finite number".into()));
        }
        if self.mask_interval == 0 {
            return Err(TrainError::Config("mask_interval must be >= 1".into()));
        }
        for (name, s) in [("init_sparsity", self.init_sparsity), ("hard_sparsity", self.hard_sparsity)] {
            if !(0.0..1.0).contains(&s) {
                return Err(TrainError::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.hard_swap_frac) {
            return Err(TrainError::Config("hard_swap_frac must be in [0, 1]".into()));
        }
        if !(self.success_frac.is_finite() && self.success_frac >= 0.0) {
            return Err(TrainError::Config("success_frac must be >= 0".into()));
        }
        self.effective_tamu().validate()?;
        Ok(())
    }

    /// TAMU settings with the horizon and interval taken from this config.
    pub fn effective_tamu(&self) -> TamuConfig {
        TamuConfig { total_steps: self.epochs, mask_interval: self.mask_interval, ..self.tamu.clone() }
    }

    pub fn swap_count(&self, dim: usize) -> usize {
        (self.hard_swap_frac * dim as f64).round() as usize
    }
}

/// One row per (step, task). Update-only columns are `None` off-update.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub task_id: usize,
    pub loss: f64,
    pub sparsity: f64,
    pub beta_t: Option<f64>,
    pub n_conflict: Option<usize>,
    pub n_recover: Option<usize>,
    pub conflict_ratio: Option<f64>,
    pub wrongly_masked_top30: Option<usize>,
}

/// Per-task log record of one mask update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateLog {
    pub step: usize,
    pub task_id: usize,
    pub beta_t: Option<f64>,
    pub conflict_threshold: Option<f64>,
    pub harmony_threshold: Option<f64>,
    pub n_conflict: usize,
    pub n_recover: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub updates: Vec<UpdateLog>,
    pub initial_losses: Vec<f64>,
    pub final_losses: Vec<f64>,
    pub success: Vec<bool>,
}

impl RunRecord {
    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }

    pub fn mean_final_loss(&self) -> f64 {
        if self.final_losses.is_empty() {
            return 0.0;
        }
        self.final_losses.iter().sum::<f64>() / self.final_losses.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub record: RunRecord,
    pub theta: DenseVector,
    pub masks: Vec<TaskMask>,
}

/// State handed to an observer at every diagnostic step, after the masks
/// were rewritten and before the parameter update.
#[derive(Debug)]
pub struct UpdateSnapshot<'a> {
    pub step: usize,
    pub theta: &'a DenseVector,
    /// Task gradients at the pre-update forward masks.
    pub grads: &'a [DenseVector],
    pub gbar: &'a DenseVector,
    pub masks_before: &'a [TaskMask],
    pub masks_after: &'a [TaskMask],
    pub conflict_ratio: &'a [f64],
    pub wrongly_masked: &'a [usize],
}

/// Per task, a uniformly random `⌊s·d⌋`-subset of coordinates set to 0.
pub fn init_masks(dim: usize, n_tasks: usize, sparsity: f64, rng: &mut Rng) -> Vec<TaskMask> {
    let zeros = (sparsity * dim as f64).floor() as usize;
    (0..n_tasks)
        .map(|_| {
            let mut values = vec![1.0; dim];
            for j in rng.subset(dim, zeros) {
                values[j] = 0.0;
            }
            TaskMask::new(DenseVector::from_vec_unchecked(values)).expect("binary values")
        })
        .collect()
}

/// Number of top-importance coordinates considered for a given fraction.
pub fn top_count(dim: usize, top_fraction: f64) -> usize {
    ((top_fraction * dim as f64).round() as usize).min(dim)
}

/// Per task, how many of the top-`fraction` coordinates by raw importance
/// have a soft value below 1. Ties rank the lower index first.
pub fn wrongly_masked_important(fisher: &[DenseVector], masks: &[TaskMask], top_fraction: f64) -> Vec<usize> {
    fisher
        .iter()
        .zip(masks)
        .map(|(f, m)| {
            let k = top_count(f.len(), top_fraction);
            argsort_by(f.as_slice(), true).into_iter().take(k).filter(|&j| m.get(j) < 1.0).count()
        })
        .collect()
}

fn check_vector(v: &DenseVector, what: &'static str, step: usize, task: Option<usize>) -> Result<(), TrainError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(j) => Err(TrainError::NonFinite { what, step, task, coordinate: Some(j) }),
        None => Ok(()),
    }
}

fn evaluate(
    suite: &TaskSuite,
    theta: &DenseVector,
    masks: &[TaskMask],
    execution: Execution,
    step: usize,
) -> Result<(Vec<f64>, Vec<DenseVector>), TrainError> {
    let evals = map_indexed(execution, &suite.tasks, |i, task| {
        masked_forward(theta, &masks[i]).and_then(|p| task.loss_and_gradient(&p))
    });
    let mut losses = Vec::with_capacity(evals.len());
    let mut grads = Vec::with_capacity(evals.len());
    for (i, e) in evals.into_iter().enumerate() {
        let (loss, grad) = e?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { what: "loss", step, task: Some(i), coordinate: None });
        }
        check_vector(&grad, "gradient", step, Some(i))?;
        losses.push(loss);
        grads.push(grad);
    }
    Ok((losses, grads))
}

struct MaskUpdate {
    masks: Vec<TaskMask>,
    logs: Vec<UpdateLog>,
}

fn soco_update(
    step: usize,
    grads: &[DenseVector],
    gbar: &DenseVector,
    masks: &[TaskMask],
    tamu: &TamuConfig,
    execution: Execution,
) -> Result<MaskUpdate, TrainError> {
    let beta = beta_schedule(tamu, step)?;
    let per_task = map_indexed(execution, grads, |i, g| -> Result<_, TrainError> {
        let fisher = fisher_information(g, &masks[i])?;
        let report = score(g, gbar, &fisher.raw, tamu)?;
        let sel = select(&report, tamu, beta)?;
        let next = apply_mask_update(&masks[i], &sel, &fisher)?;
        Ok((next, sel))
    });
    let mut out = MaskUpdate { masks: Vec::with_capacity(grads.len()), logs: Vec::with_capacity(grads.len()) };
    for (i, r) in per_task.into_iter().enumerate() {
        let (mask, sel) = r?;
        out.logs.push(UpdateLog {
            step,
            task_id: i,
            beta_t: Some(beta),
            conflict_threshold: Some(sel.conflict_threshold),
            harmony_threshold: Some(sel.harmony_threshold),
            n_conflict: sel.conflict_set.len(),
            n_recover: sel.recover_set.len(),
        });
        out.masks.push(mask);
    }
    Ok(out)
}

fn hard_update(
    step: usize,
    grads: &[DenseVector],
    gbar: &DenseVector,
    masks: &[TaskMask],
    lambda: f64,
    swap_count: usize,
    execution: Execution,
) -> Result<MaskUpdate, TrainError> {
    let per_task = map_indexed(execution, grads, |i, g| -> Result<_, TrainError> {
        let fisher = fisher_information(g, &masks[i])?;
        let h = combined_harmony(&agreement_score(g, gbar)?, &fisher.raw, lambda)?;
        Ok(harmodt_update(&masks[i], &h, swap_count)?)
    });
    let mut out = MaskUpdate { masks: Vec::with_capacity(grads.len()), logs: Vec::with_capacity(grads.len()) };
    for (i, r) in per_task.into_iter().enumerate() {
        let (mask, report) = r?;
        out.logs.push(UpdateLog {
            step,
            task_id: i,
            beta_t: None,
            conflict_threshold: None,
            harmony_threshold: None,
            n_conflict: report.removed.len(),
            n_recover: report.restored.len(),
        });
        out.masks.push(mask);
    }
    Ok(out)
}

pub fn train(suite: &TaskSuite, cfg: &TrainConfig) -> Result<RunOutput, TrainError> {
    train_with_observer(suite, cfg, |_| {})
}

pub fn train_with_observer(
    suite: &TaskSuite,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&UpdateSnapshot<'_>),
) -> Result<RunOutput, TrainError> {
    cfg.validate()?;
    let n = suite.n_tasks();
    if n == 0 {
        return Err(TrainError::Config("suite has no tasks".into()));
    }
    let d = suite.dim();
    let tamu = cfg.effective_tamu();
    let exec = cfg.execution;
    let mut theta = suite.initial_params();

    let initial_losses =
        map_indexed(exec, &suite.tasks, |_, t| t.loss(&theta)).into_iter().collect::<Result<Vec<_>, _>>()?;
    if let Some(i) = initial_losses.iter().position(|l| !l.is_finite()) {
        return Err(TrainError::NonFinite { what: "loss", step: 0, task: Some(i), coordinate: None });
    }

    let mut rng = Rng::new(cfg.seed).child(0x6D61_736B);
    let mut masks = match cfg.strategy {
        Strategy::Soco => init_masks(d, n, cfg.init_sparsity, &mut rng),
        Strategy::Hard => init_masks(d, n, cfg.hard_sparsity, &mut rng),
        Strategy::None => vec![TaskMask::ones(d); n],
    };
    let swap_count = cfg.swap_count(d);

    let mut rows = Vec::with_capacity(cfg.epochs * n);
    let mut updates = Vec::new();
    for step in 1..=cfg.epochs {
        let (losses, mut grads) = evaluate(suite, &theta, &masks, exec, step)?;
        let mut diag: Option<(Vec<f64>, Vec<usize>, Vec<UpdateLog>)> = None;

        if step % cfg.mask_interval == 0 {
            let gbar = mean_of(&grads)?;
            let conflict_ratio = conflict_ratios_from_gradients(&grads, &gbar);
            let importance: Vec<DenseVector> = grads.iter().map(|g| g.map(|x| x * x)).collect();
            let update = match cfg.strategy {
                Strategy::Soco => Some(soco_update(step, &grads, &gbar, &masks, &tamu, exec)?),
                Strategy::Hard => Some(hard_update(step, &grads, &gbar, &masks, tamu.lambda, swap_count, exec)?),
                Strategy::None => None,
            };
            let (next_masks, logs) = match update {
                Some(u) => (u.masks, u.logs),
                None => (masks.clone(), Vec::new()),
            };
            let wrongly = wrongly_masked_important(&importance, &next_masks, WRONGLY_MASKED_TOP_FRACTION);
            observer(&UpdateSnapshot {
                step,
                theta: &theta,
                grads: &grads,
                gbar: &gbar,
                masks_before: &masks,
                masks_after: &next_masks,
                conflict_ratio: &conflict_ratio,
                wrongly_masked: &wrongly,
            });
            let changed = next_masks != masks;
            masks = next_masks;
            if changed {
                grads = evaluate(suite, &theta, &masks, exec, step)?.1;
            }
            diag = Some((conflict_ratio, wrongly, logs));
        }

        theta = masked_sgd_step(&theta, &grads, &masks, cfg.lr)?;
        check_vector(&theta, "parameter", step, None)?;

        for (i, &loss) in losses.iter().enumerate() {
            let mut row = MetricRow {
                step,
                task_id: i,
                loss,
                sparsity: masks[i].sparsity(),
                beta_t: None,
                n_conflict: None,
                n_recover: None,
                conflict_ratio: None,
                wrongly_masked_top30: None,
            };
            if let Some((ratio, wrongly, logs)) = &diag {
                row.conflict_ratio = Some(ratio[i]);
                row.wrongly_masked_top30 = Some(wrongly[i]);
                if let Some(log) = logs.get(i) {
                    row.beta_t = log.beta_t;
                    row.n_conflict = Some(log.n_conflict);
                    row.n_recover = Some(log.n_recover);
                }
            }
            rows.push(row);
        }
        if let Some((_, _, logs)) = diag {
            updates.extend(logs);
        }
    }

    let final_losses =
        map_indexed(exec, &suite.tasks, |i, t| masked_forward(&theta, &masks[i]).and_then(|p| t.loss(&p)))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
    let success = final_losses.iter().zip(&initial_losses).map(|(f, i)| *f <= cfg.success_frac * i).collect();

    Ok(RunOutput {
        record: RunRecord {
            strategy: cfg.strategy,
            seed: cfg.seed,
            rows,
            updates,
            initial_losses,
            final_losses,
            success,
        },
        theta,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{QuadraticTask, Task};
    use crate::workloads::{generate_suite, SuiteConfig};

    #[test]
    fn init_mask_examples() {
        let mut rng = Rng::new(1);
        assert!(init_masks(10, 3, 0.0, &mut rng).iter().all(|m| *m == TaskMask::ones(10)));
        let masks = init_masks(100, 4, 0.2, &mut rng);
        assert!(masks.iter().all(|m| m.zero_count() == 20 && m.sparsity() == 0.2));
        let a = init_masks(64, 3, 0.3, &mut Rng::new(9));
        let b = init_masks(64, 3, 0.3, &mut Rng::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn wrongly_masked_examples() {
        let mut rng = Rng::new(2);
        let fisher: Vec<DenseVector> =
            (0..2).map(|_| DenseVector::new((0..100).map(|_| rng.uniform()).collect()).unwrap()).collect();
        assert_eq!(wrongly_masked_important(&fisher, &[TaskMask::ones(100), TaskMask::ones(100)], 0.3), vec![0, 0]);
        assert_eq!(wrongly_masked_important(&fisher, &[TaskMask::zeros(100), TaskMask::zeros(100)], 0.3), vec![30, 30]);
    }

    #[test]
    fn single_task_decays_geometrically() {
        let target = DenseVector::new(vec![1.0, -2.0, 0.5]).unwrap();
        let curvature = DenseVector::new(vec![1.0, 0.5, 1.5]).unwrap();
        let mut suite = generate_suite(&SuiteConfig::quadratic(vec![0.0], 3, 0)).unwrap();
        suite.tasks = vec![Task::Quadratic(QuadraticTask::new(target.clone(), curvature.clone()).unwrap())];
        let lr = 0.2;
        let cfg = TrainConfig { strategy: Strategy::None, epochs: 30, lr, ..TrainConfig::default() };
        let out = train(&suite, &cfg).unwrap();
        for row in &out.record.rows {
            let k = (row.step - 1) as i32;
            let expected: f64 = (0..3)
                .map(|j| {
                    let r = (1.0 - lr * curvature[j]).powi(k);
                    0.5 * curvature[j] * (r * target[j]).powi(2)
                })
                .sum();
            assert!((row.loss - expected).abs() <= 1e-12 * expected.max(1.0));
        }
    }

    #[test]
    fn soco_without_updates_matches_plain_sgd() {
        let suite = generate_suite(&SuiteConfig::quadratic(vec![0.2, 0.3, 0.1], 40, 3)).unwrap();
        let base = TrainConfig { epochs: 50, lr: 0.3, mask_interval: 51, init_sparsity: 0.0, ..TrainConfig::default() };
        let soco = train(&suite, &TrainConfig { strategy: Strategy::Soco, ..base.clone() }).unwrap();
        let none = train(&suite, &TrainConfig { strategy: Strategy::None, ..base }).unwrap();
        assert_eq!(soco.theta, none.theta);
        assert_eq!(
            soco.record.rows.iter().map(|r| r.loss).collect::<Vec<_>>(),
            none.record.rows.iter().map(|r| r.loss).collect::<Vec<_>>()
        );
        assert!(soco.record.updates.is_empty());
    }

    #[test]
    fn updates_happen_only_on_interval() {
        let suite = generate_suite(&SuiteConfig::quadratic(vec![0.2, 0.3], 30, 5)).unwrap();
        let cfg = TrainConfig { epochs: 47, mask_interval: 7, ..TrainConfig::default() };
        let mut seen = Vec::new();
        let out = train_with_observer(&suite, &cfg, |s| {
            seen.push(s.step);
            for m in s.masks_after {
                assert!(m.soft().iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        })
        .unwrap();
        assert_eq!(seen, vec![7, 14, 21, 28, 35, 42]);
        for row in &out.record.rows {
            assert_eq!(row.beta_t.is_some(), row.step % 7 == 0);
        }
        assert_eq!(out.record.rows.len(), 47 * 2);
    }

    #[test]
    fn hard_strategy_keeps_sparsity() {
        let suite = generate_suite(&SuiteConfig::quadratic(vec![0.2, 0.4, 0.1], 100, 6)).unwrap();
        let cfg = TrainConfig {
            strategy: Strategy::Hard,
            epochs: 200,
            mask_interval: 5,
            hard_swap_frac: 0.03,
            ..TrainConfig::default()
        };
        let out = train(&suite, &cfg).unwrap();
        assert!(out.record.rows.iter().all(|r| r.sparsity == 0.2));
        assert!(out.record.updates.iter().any(|u| u.n_conflict > 0));
    }

    #[test]
    fn divergence_is_reported() {
        let suite = generate_suite(&SuiteConfig::quadratic(vec![0.0, 0.0], 8, 1)).unwrap();
        let cfg = TrainConfig { strategy: Strategy::None, epochs: 5000, lr: 50.0, ..TrainConfig::default() };
        assert!(matches!(train(&suite, &cfg), Err(TrainError::NonFinite { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { mask_interval: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { init_sparsity: 1.0, ..TrainConfig::default() }.validate().is_err());
    }
}
