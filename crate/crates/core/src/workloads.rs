//! Synthetic multi-task suites with planted, per-task conflict structure.
//!
//! Every coordinate gets a consensus sign and a shared magnitude; a few
//! heavy coordinates carry most of the mass and the rest are light. Task `i` disagrees with the
//! consensus on exactly `round(r_i * d)` coordinates, chosen so that the
//! number of dissenting tasks per coordinate stays as even as possible. The
//! dissenting magnitudes are then shrunk until both the plain and the
//! curvature-weighted task averages keep the consensus sign, which makes
//! `(g_i ⊙ ḡ)_j < 0` at `θ = 0` hold exactly on the planted coordinates.

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{mlp_param_count, MlpTask, QuadraticTask, Task, TaskObjective};
use crate::softmask::{masked_forward, TaskMask};
use crate::vecmath::{mean_of, DenseVector, Rng, VecError};

/// Samples per MLP task; each step evaluates the full batch.
pub const MLP_BATCH: usize = 32;
/// Input and output widths of generated MLP suites.
pub const MLP_INPUT: usize = 4;
pub const MLP_OUTPUT: usize = 2;

/// Dissenting target magnitude relative to the consensus magnitude.
const DISSENT_SCALE: f64 = 0.25;
/// Fraction of coordinates carrying most of the target mass.
const HEAVY_FRACTION: f64 = 0.04;
/// Magnitude of the remaining coordinates relative to the heavy ones.
const LIGHT_SCALE: f64 = 0.01;
/// Per-task multiplicative spread of target magnitudes.
const TARGET_JITTER: f64 = 0.1;
/// Dissenters may carry at most this fraction of the consenting mass.
const DISSENT_MASS_CAP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SuiteError {
    #[error("invalid suite config: {0}")]
    Config(String),
    #[error(transparent)]
    Vec(#[from] VecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelKind {
    #[default]
    Quadratic,
    Mlp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Quadratic => "quadratic",
            ModelKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    /// Balanced planted dissent against a consensus sign.
    #[default]
    Planted,
    /// Two tasks with identical curvature whose targets are exact negatives
    /// on the planted coordinates and identical elsewhere.
    Mirrored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub n_tasks: usize,
    pub dim: usize,
    pub conflict_ratios: Vec<f64>,
    pub seed: u64,
    pub model: ModelKind,
    pub layout: Layout,
}

impl SuiteConfig {
    pub fn quadratic(conflict_ratios: Vec<f64>, dim: usize, seed: u64) -> Self {
        Self {
            n_tasks: conflict_ratios.len(),
            dim,
            conflict_ratios,
            seed,
            model: ModelKind::Quadratic,
            layout: Layout::Planted,
        }
    }

    pub fn validate(&self) -> Result<(), SuiteError> {
        if self.n_tasks == 0 {
            return Err(SuiteError::Config("n_tasks must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(SuiteError::Config("dim must be at least 1".into()));
        }
        if self.conflict_ratios.len() != self.n_tasks {
            return Err(SuiteError::Config(format!(
                "expected {} conflict ratios, got {}",
                self.n_tasks,
                self.conflict_ratios.len()
            )));
        }
        if let Some(r) = self.conflict_ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(SuiteError::Config(format!("conflict ratio {r} outside [0, 1]")));
        }
        if self.layout == Layout::Mirrored {
            if self.n_tasks != 2 {
                return Err(SuiteError::Config("mirrored layout needs exactly 2 tasks".into()));
            }
            if self.conflict_ratios[0] != self.conflict_ratios[1] {
                return Err(SuiteError::Config("mirrored layout needs equal ratios".into()));
            }
        }
        Ok(())
    }

    /// Parameter count of the generated model.
    pub fn effective_dim(&self) -> usize {
        match self.model {
            ModelKind::Quadratic => self.dim,
            ModelKind::Mlp => mlp_param_count(&mlp_widths_for(self.dim)),
        }
    }
}

/// `[4, h, h, 2]` with the widest `h` whose parameter count fits in `dim`.
pub fn mlp_widths_for(dim: usize) -> Vec<usize> {
    let mut h = 1;
    while mlp_param_count(&[MLP_INPUT, h + 1, h + 1, MLP_OUTPUT]) <= dim {
        h += 1;
    }
    vec![MLP_INPUT, h, h, MLP_OUTPUT]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub config: SuiteConfig,
    pub tasks: Vec<Task>,
    /// Planted conflict coordinates per task, ascending.
    pub conflict_sets: Vec<Vec<usize>>,
    pub task_seeds: Vec<u64>,
}

impl TaskSuite {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn dim(&self) -> usize {
        self.tasks.first().map_or(0, TaskObjective::dim)
    }

    /// Starting point for training: zero for quadratic suites, fan-in
    /// scaled Gaussian weights (zero biases) for MLP suites.
    pub fn initial_params(&self) -> DenseVector {
        match &self.tasks[0] {
            Task::Quadratic(_) => DenseVector::zeros(self.dim()),
            Task::Mlp(m) => {
                let mut rng = Rng::new(self.config.seed).child(u64::MAX - 1);
                let mut p = Vec::with_capacity(self.dim());
                for w in m.widths().windows(2) {
                    let scale = 1.0 / (w[0] as f64).sqrt();
                    p.extend((0..w[0] * w[1]).map(|_| scale * rng.normal()));
                    p.extend(std::iter::repeat_n(0.0, w[1]));
                }
                DenseVector::from_vec_unchecked(p)
            }
        }
    }

    /// Reproducibility manifest: a header line, then one
    /// `task_id,conflict_ratio_target,seed` line per task.
    pub fn manifest(&self) -> String {
        let c = &self.config;
        let layout = match c.layout {
            Layout::Planted => "planted",
            Layout::Mirrored => "mirrored",
        };
        let mut out = format!(
            "# suite model={} n_tasks={} dim={} effective_dim={} seed={} layout={}\ntask_id,conflict_ratio_target,seed\n",
            c.model.as_str(),
            c.n_tasks,
            c.dim,
            self.dim(),
            c.seed,
            layout
        );
        for (i, (r, s)) in c.conflict_ratios.iter().zip(&self.task_seeds).enumerate() {
            let _ = writeln!(out, "{i},{r:.16e},{s}");
        }
        out
    }
}

pub fn generate_suite(cfg: &SuiteConfig) -> Result<TaskSuite, SuiteError> {
    cfg.validate()?;
    let widths = mlp_widths_for(cfg.dim);
    let d = match cfg.model {
        ModelKind::Quadratic => cfg.dim,
        ModelKind::Mlp => mlp_param_count(&widths),
    };
    let root = Rng::new(cfg.seed);
    let task_seeds: Vec<u64> = (0..cfg.n_tasks).map(|i| root.child(i as u64).seed()).collect();
    let planted = match cfg.layout {
        Layout::Planted => plant_targets(cfg, d, &root)?,
        Layout::Mirrored => mirror_targets(cfg, d, &root),
    };

    let tasks = match cfg.model {
        ModelKind::Quadratic => planted
            .targets
            .into_iter()
            .zip(planted.curvatures)
            .map(|(t, a)| QuadraticTask::new(t, a).map(Task::Quadratic))
            .collect::<Result<Vec<_>, _>>()?,
        ModelKind::Mlp => planted
            .targets
            .iter()
            .zip(&task_seeds)
            .map(|(teacher, &seed)| mlp_task(&widths, teacher, seed))
            .collect::<Result<Vec<_>, _>>()?,
    };

    Ok(TaskSuite { config: cfg.clone(), tasks, conflict_sets: planted.conflict_sets, task_seeds })
}

struct Planted {
    targets: Vec<DenseVector>,
    curvatures: Vec<DenseVector>,
    conflict_sets: Vec<Vec<usize>>,
}

fn planted_count(ratio: f64, d: usize) -> usize {
    ((ratio * d as f64).round() as usize).min(d)
}

fn consensus(d: usize, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let signs = (0..d).map(|_| if rng.coin() { 1.0 } else { -1.0 }).collect();
    let heavy = rng.subset(d, ((HEAVY_FRACTION * d as f64).round() as usize).max(1));
    let mut mags: Vec<f64> = (0..d).map(|_| LIGHT_SCALE * (0.25 * rng.normal()).exp()).collect();
    for j in heavy {
        mags[j] = (0.25 * rng.normal()).exp();
    }
    (signs, mags)
}

fn plant_targets(cfg: &SuiteConfig, d: usize, root: &Rng) -> Result<Planted, SuiteError> {
    let n = cfg.n_tasks;
    let mut shared = root.child(u64::MAX);
    let (signs, mags) = consensus(d, &mut shared);

    let counts: Vec<usize> = cfg.conflict_ratios.iter().map(|&r| planted_count(r, d)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));

    let mut dissent = vec![0usize; d];
    let mut conflict_sets = vec![Vec::new(); n];
    for &i in &order {
        let mut keys: Vec<(usize, u64, usize)> = (0..d).map(|j| (dissent[j], shared.next_u64(), j)).collect();
        keys.sort_unstable();
        let mut chosen: Vec<usize> = keys[..counts[i]].iter().map(|k| k.2).collect();
        chosen.sort_unstable();
        for &j in &chosen {
            dissent[j] += 1;
        }
        conflict_sets[i] = chosen;
    }
    if let Some(j) = dissent.iter().position(|&c| c == n && c > 0) {
        return Err(SuiteError::Config(format!("conflict ratios leave no consenting task at coordinate {j}")));
    }

    let mut targets = vec![vec![0.0; d]; n];
    let mut curvatures = vec![vec![0.0; d]; n];
    let mut is_dissent = vec![vec![false; d]; n];
    for (i, set) in conflict_sets.iter().enumerate() {
        for &j in set {
            is_dissent[i][j] = true;
        }
    }
    for i in 0..n {
        let mut rng = root.child(i as u64);
        for j in 0..d {
            let jitter = rng.uniform_range(1.0 - TARGET_JITTER, 1.0 + TARGET_JITTER);
            curvatures[i][j] = rng.uniform_range(0.5, 1.5);
            targets[i][j] = if is_dissent[i][j] {
                -signs[j] * mags[j] * DISSENT_SCALE * jitter
            } else {
                signs[j] * mags[j] * jitter
            };
        }
    }
    for j in 0..d {
        let (mut s_agree, mut w_agree, mut s_dis, mut w_dis) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let (m, a) = (targets[i][j].abs(), curvatures[i][j]);
            if is_dissent[i][j] {
                s_dis += m;
                w_dis += a * m;
            } else {
                s_agree += m;
                w_agree += a * m;
            }
        }
        if s_dis > 0.0 {
            let shrink = (DISSENT_MASS_CAP * s_agree / s_dis).min(DISSENT_MASS_CAP * w_agree / w_dis).min(1.0);
            for i in (0..n).filter(|&i| is_dissent[i][j]) {
                targets[i][j] *= shrink;
            }
        }
    }

    Ok(Planted {
        targets: targets.into_iter().map(DenseVector::from_vec_unchecked).collect(),
        curvatures: curvatures.into_iter().map(DenseVector::from_vec_unchecked).collect(),
        conflict_sets,
    })
}

fn mirror_targets(cfg: &SuiteConfig, d: usize, root: &Rng) -> Planted {
    let mut shared = root.child(u64::MAX);
    let (signs, mags) = consensus(d, &mut shared);
    let set = shared.subset(d, planted_count(cfg.conflict_ratios[0], d));
    let mut rng = root.child(0);
    let curvature: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.5, 1.5)).collect();
    let first: Vec<f64> = (0..d).map(|j| signs[j] * mags[j]).collect();
    let mut second = first.clone();
    for &j in &set {
        second[j] = -first[j];
    }
    let curvature = DenseVector::from_vec_unchecked(curvature);
    Planted {
        targets: vec![DenseVector::from_vec_unchecked(first), DenseVector::from_vec_unchecked(second)],
        curvatures: vec![curvature.clone(), curvature],
        conflict_sets: vec![set.clone(), set],
    }
}

/// Student/teacher regression: targets come from a teacher network whose
/// parameters are the planted vector, scaled per layer by `1/sqrt(fan_in)`.
fn mlp_task(widths: &[usize], teacher: &DenseVector, seed: u64) -> Result<Task, VecError> {
    let mut scaled = teacher.clone().into_vec();
    let mut off = 0;
    for w in widths.windows(2) {
        let scale = 1.0 / (w[0] as f64).sqrt();
        for p in &mut scaled[off..off + w[0] * w[1] + w[1]] {
            *p *= scale;
        }
        off += w[0] * w[1] + w[1];
    }
    let mut rng = Rng::new(seed).child(0);
    let inputs: Vec<f64> = (0..MLP_BATCH * widths[0]).map(|_| rng.normal()).collect();
    let n_out = widths[widths.len() - 1];
    let probe = MlpTask::new(widths.to_vec(), inputs.clone(), vec![0.0; MLP_BATCH * n_out])?;
    let targets: Vec<f64> = inputs.chunks(widths[0]).flat_map(|x| probe.predict(&scaled, x)).collect();
    MlpTask::new(widths.to_vec(), inputs, targets).map(Task::Mlp)
}

/// True when task `i` is in conflict with the average direction at a
/// coordinate: the product with `ḡ` is negative, or `ḡ` cancels exactly
/// while the task still pushes.
pub fn is_conflicting(g: f64, gbar: f64) -> bool {
    g * gbar < 0.0 || (gbar == 0.0 && g != 0.0)
}

/// Per-task fraction of conflicting coordinates given precomputed
/// gradients and their average.
pub fn conflict_ratios_from_gradients(grads: &[DenseVector], gbar: &DenseVector) -> Vec<f64> {
    grads
        .iter()
        .map(|g| {
            let hits = g.iter().zip(gbar.iter()).filter(|(&a, &b)| is_conflicting(a, b)).count();
            if g.is_empty() {
                0.0
            } else {
                hits as f64 / g.len() as f64
            }
        })
        .collect()
}

/// Evaluates every task at `θ ⊙ M̃_i` and reports its conflict fraction
/// against the average gradient.
pub fn measure_conflict_ratio(
    suite: &TaskSuite,
    theta: &DenseVector,
    masks: &[TaskMask],
) -> Result<Vec<f64>, VecError> {
    if masks.len() != suite.n_tasks() {
        return Err(VecError::DimensionMismatch { left: masks.len(), right: suite.n_tasks() });
    }
    let grads = suite
        .tasks
        .iter()
        .zip(masks)
        .map(|(t, m)| t.gradient(&masked_forward(theta, m)?))
        .collect::<Result<Vec<_>, _>>()?;
    let gbar = mean_of(&grads)?;
    Ok(conflict_ratios_from_gradients(&grads, &gbar))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_at_zero(suite: &TaskSuite) -> Vec<DenseVector> {
        let zero = DenseVector::zeros(suite.dim());
        suite.tasks.iter().map(|t| t.gradient(&zero).unwrap()).collect()
    }

    #[test]
    fn zero_ratios_share_sign_pattern() {
        let suite = generate_suite(&SuiteConfig::quadratic(vec![0.0, 0.0], 10, 1)).unwrap();
        let g = grads_at_zero(&suite);
        let gbar = mean_of(&g).unwrap();
        for gi in &g {
            assert!(gi.mul(&gbar).unwrap().iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn mirrored_full_conflict_is_pairwise_opposed() {
        let cfg = SuiteConfig { layout: Layout::Mirrored, ..SuiteConfig::quadratic(vec![1.0, 1.0], 10, 2) };
        let suite = generate_suite(&cfg).unwrap();
        let g = grads_at_zero(&suite);
        assert!(g[0].mul(&g[1]).unwrap().iter().all(|&p| p <= 0.0));
        let ones = vec![TaskMask::ones(10); 2];
        let ratios = measure_conflict_ratio(&suite, &DenseVector::zeros(10), &ones).unwrap();
        assert_eq!(ratios, vec![1.0, 1.0]);
    }

    #[test]
    fn single_task_never_conflicts() {
        let suite = generate_suite(&SuiteConfig::quadratic(vec![0.0], 12, 3)).unwrap();
        let ratios = measure_conflict_ratio(&suite, &DenseVector::zeros(12), &[TaskMask::ones(12)]).unwrap();
        assert_eq!(ratios, vec![0.0]);
    }

    #[test]
    fn planted_signs_disagree_with_target_mean() {
        let ratios = vec![0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45];
        let suite = generate_suite(&SuiteConfig::quadratic(ratios.clone(), 256, 9)).unwrap();
        let targets: Vec<DenseVector> = suite
            .tasks
            .iter()
            .map(|t| match t {
                Task::Quadratic(q) => q.target().clone(),
                Task::Mlp(_) => unreachable!(),
            })
            .collect();
        let mean = mean_of(&targets).unwrap();
        for (i, set) in suite.conflict_sets.iter().enumerate() {
            assert_eq!(set.len(), (ratios[i] * 256.0_f64).round() as usize);
            for &j in set {
                assert_ne!(targets[i][j].signum(), mean[j].signum());
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SuiteConfig::quadratic(vec![0.2, 0.4, 0.3], 50, 77);
        assert_eq!(generate_suite(&cfg).unwrap(), generate_suite(&cfg).unwrap());
        let other = SuiteConfig { seed: 78, ..cfg.clone() };
        assert_ne!(generate_suite(&cfg).unwrap(), generate_suite(&other).unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_suite(&SuiteConfig::quadratic(vec![1.5], 4, 0)).is_err());
        assert!(generate_suite(&SuiteConfig::quadratic(vec![-0.1, 0.0], 4, 0)).is_err());
        assert!(generate_suite(&SuiteConfig::quadratic(vec![], 4, 0)).is_err());
        assert!(generate_suite(&SuiteConfig::quadratic(vec![0.5], 4, 0)).is_err());
        let mut cfg = SuiteConfig::quadratic(vec![0.1, 0.2], 4, 0);
        cfg.layout = Layout::Mirrored;
        assert!(generate_suite(&cfg).is_err());
    }

    #[test]
    fn mlp_suite_has_consistent_dimensions() {
        let cfg = SuiteConfig { model: ModelKind::Mlp, ..SuiteConfig::quadratic(vec![0.1, 0.3], 200, 5) };
        let suite = generate_suite(&cfg).unwrap();
        let d = suite.dim();
        assert_eq!(d, cfg.effective_dim());
        assert!(d <= 200);
        assert_eq!(suite.initial_params().len(), d);
        for t in &suite.tasks {
            assert_eq!(t.gradient(&suite.initial_params()).unwrap().len(), d);
        }
    }

    #[test]
    fn manifest_lists_every_task() {
        let suite = generate_suite(&SuiteConfig::quadratic(vec![0.1, 0.2], 20, 4)).unwrap();
        let m = suite.manifest();
        assert_eq!(m.lines().count(), 4);
        assert!(m.lines().nth(2).unwrap().starts_with("0,1.0000000000000001e-1,"));
    }
}
