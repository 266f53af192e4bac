//! Per-task objectives evaluated at a (masked) shared parameter point.

use crate::vecmath::{DenseVector, VecError};

/// Loss and gradient of one task over the flat shared parameter vector.
pub trait TaskObjective {
    fn dim(&self) -> usize;

    fn loss(&self, params: &DenseVector) -> Result<f64, VecError>;

    fn gradient(&self, params: &DenseVector) -> Result<DenseVector, VecError>;

    /// Loss and gradient from one pass. Defaults to two separate calls.
    fn loss_and_gradient(&self, params: &DenseVector) -> Result<(f64, DenseVector), VecError> {
        Ok((self.loss(params)?, self.gradient(params)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    Quadratic {
        dim: usize,
    },
    /// Layer widths from input to output; hidden layers use tanh.
    Mlp {
        widths: Vec<usize>,
    },
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Quadratic { dim } => *dim,
            ModelSpec::Mlp { widths } => mlp_param_count(widths),
        }
    }
}

/// Weights then biases per layer: `sum(w_in * w_out + w_out)`.
pub fn mlp_param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// `L(θ) = ½ Σ_j a_j (θ_j − θ*_j)²` with strictly positive diagonal curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTask {
    target: DenseVector,
    curvature: DenseVector,
}

impl QuadraticTask {
    pub fn new(target: DenseVector, curvature: DenseVector) -> Result<Self, VecError> {
        curvature.ensure_len(target.len())?;
        target.check_finite()?;
        if let Some((index, &value)) = curvature.iter().enumerate().find(|(_, a)| !(a.is_finite() && **a > 0.0)) {
            return Err(VecError::InvalidValue { index, value });
        }
        Ok(Self { target, curvature })
    }

    pub fn target(&self) -> &DenseVector {
        &self.target
    }

    pub fn curvature(&self) -> &DenseVector {
        &self.curvature
    }
}

impl TaskObjective for QuadraticTask {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn loss(&self, params: &DenseVector) -> Result<f64, VecError> {
        params.ensure_len(self.dim())?;
        Ok(params
            .iter()
            .zip(self.target.iter().zip(self.curvature.iter()))
            .map(|(p, (t, a))| 0.5 * a * (p - t) * (p - t))
            .sum())
    }

    fn gradient(&self, params: &DenseVector) -> Result<DenseVector, VecError> {
        params.ensure_len(self.dim())?;
        let g =
            params.iter().zip(self.target.iter().zip(self.curvature.iter())).map(|(p, (t, a))| a * (p - t)).collect();
        Ok(DenseVector::from_vec_unchecked(g))
    }
}

/// Fully connected regressor with tanh hidden layers, a linear output layer
/// and mean-squared-error loss over a fixed sample batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTask {
    widths: Vec<usize>,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    samples: usize,
}

impl MlpTask {
    /// `inputs` is row-major `samples × widths[0]`, `targets` is
    /// `samples × widths[last]`.
    pub fn new(widths: Vec<usize>, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self, VecError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(VecError::EmptyInput);
        }
        let (n_in, n_out) = (widths[0], widths[widths.len() - 1]);
        if inputs.is_empty() || !inputs.len().is_multiple_of(n_in) {
            return Err(VecError::DimensionMismatch { left: inputs.len(), right: n_in });
        }
        let samples = inputs.len() / n_in;
        if targets.len() != samples * n_out {
            return Err(VecError::DimensionMismatch { left: targets.len(), right: samples * n_out });
        }
        Ok(Self { widths, inputs, targets, samples })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Network output for one input row.
    pub fn predict(&self, params: &[f64], input: &[f64]) -> Vec<f64> {
        self.forward(params, input).pop().unwrap_or_default()
    }

    /// Activations of every layer, input included. The last entry is the
    /// (linear) output.
    fn forward(&self, params: &[f64], input: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(input.to_vec());
        let mut offset = 0;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[offset..offset + n_in * n_out];
            let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let prev = &acts[l];
            let out: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    let z = bias[o] + row.iter().zip(prev).map(|(w, x)| w * x).sum::<f64>();
                    if l + 1 < layers {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    fn sample(&self, s: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.widths[0], self.widths[self.widths.len() - 1]);
        (&self.inputs[s * n_in..(s + 1) * n_in], &self.targets[s * n_out..(s + 1) * n_out])
    }

    fn normalizer(&self) -> f64 {
        (self.samples * self.widths[self.widths.len() - 1]) as f64
    }
}

impl TaskObjective for MlpTask {
    fn dim(&self) -> usize {
        mlp_param_count(&self.widths)
    }

    fn loss(&self, params: &DenseVector) -> Result<f64, VecError> {
        params.ensure_len(self.dim())?;
        let mut total = 0.0;
        for s in 0..self.samples {
            let (x, y) = self.sample(s);
            let out = self.predict(params.as_slice(), x);
            total += out.iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum::<f64>();
        }
        Ok(total / self.normalizer())
    }

    fn gradient(&self, params: &DenseVector) -> Result<DenseVector, VecError> {
        self.loss_and_gradient(params).map(|(_, g)| g)
    }

    fn loss_and_gradient(&self, params: &DenseVector) -> Result<(f64, DenseVector), VecError> {
        params.ensure_len(self.dim())?;
        let p = params.as_slice();
        let layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.widths.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let norm = self.normalizer();
        let mut grad = vec![0.0; p.len()];
        let mut total = 0.0;
        for s in 0..self.samples {
            let (x, y) = self.sample(s);
            let acts = self.forward(p, x);
            let out = &acts[layers];
            total += out.iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum::<f64>();
            // dL/dz at the output layer
            let mut delta: Vec<f64> = out.iter().zip(y).map(|(o, t)| 2.0 * (o - t) / norm).collect();
            for l in (0..layers).rev() {
                let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
                let base = offsets[l];
                let prev = &acts[l];
                for o in 0..n_out {
                    let row = &mut grad[base + o * n_in..base + (o + 1) * n_in];
                    for (g, a) in row.iter_mut().zip(prev) {
                        *g += delta[o] * a;
                    }
                    grad[base + n_in * n_out + o] += delta[o];
                }
                if l > 0 {
                    let weights = &p[base..base + n_in * n_out];
                    delta = (0..n_in)
                        .map(|i| {
                            let back: f64 = (0..n_out).map(|o| weights[o * n_in + i] * delta[o]).sum();
                            back * (1.0 - prev[i] * prev[i])
                        })
                        .collect();
                }
            }
        }
        Ok((total / norm, DenseVector::from_vec_unchecked(grad)))
    }
}

/// Closed set of objectives a suite can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Quadratic(QuadraticTask),
    Mlp(MlpTask),
}

impl TaskObjective for Task {
    fn dim(&self) -> usize {
        match self {
            Task::Quadratic(t) => t.dim(),
            Task::Mlp(t) => t.dim(),
        }
    }

    fn loss(&self, params: &DenseVector) -> Result<f64, VecError> {
        match self {
            Task::Quadratic(t) => t.loss(params),
            Task::Mlp(t) => t.loss(params),
        }
    }

    fn gradient(&self, params: &DenseVector) -> Result<DenseVector, VecError> {
        match self {
            Task::Quadratic(t) => t.gradient(params),
            Task::Mlp(t) => t.gradient(params),
        }
    }

    fn loss_and_gradient(&self, params: &DenseVector) -> Result<(f64, DenseVector), VecError> {
        match self {
            Task::Quadratic(t) => t.loss_and_gradient(params),
            Task::Mlp(t) => t.loss_and_gradient(params),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecmath::Rng;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_loss_examples() {
        let t = QuadraticTask::new(v(&[0.0, 0.0]), v(&[1.0, 1.0])).unwrap();
        assert_eq!(t.loss(&v(&[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(t.loss(&v(&[2.0, 0.0])).unwrap(), 2.0);
    }

    #[test]
    fn quadratic_gradient_example() {
        let t = QuadraticTask::new(v(&[1.0]), v(&[2.0])).unwrap();
        assert_eq!(t.gradient(&v(&[3.0])).unwrap(), v(&[4.0]));
    }

    #[test]
    fn mirrored_targets_give_opposite_gradients_at_origin() {
        let a = v(&[1.5, 0.5, 2.0]);
        let t1 = QuadraticTask::new(v(&[1.0, -2.0, 0.5]), a.clone()).unwrap();
        let t2 = QuadraticTask::new(v(&[-1.0, 2.0, -0.5]), a).unwrap();
        let zero = DenseVector::zeros(3);
        assert_eq!(t1.gradient(&zero).unwrap(), t2.gradient(&zero).unwrap().scale(-1.0));
    }

    #[test]
    fn quadratic_rejects_bad_inputs() {
        assert!(QuadraticTask::new(v(&[0.0]), v(&[0.0])).is_err());
        assert!(QuadraticTask::new(v(&[0.0]), v(&[1.0, 1.0])).is_err());
        let t = QuadraticTask::new(v(&[0.0]), v(&[1.0])).unwrap();
        assert!(matches!(t.loss(&v(&[1.0, 2.0])), Err(VecError::DimensionMismatch { .. })));
    }

    #[test]
    fn mlp_param_count_matches_layout() {
        assert_eq!(mlp_param_count(&[4, 16, 16, 2]), 4 * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2);
        assert_eq!(ModelSpec::Mlp { widths: vec![3, 5, 1] }.dim(), 26);
        assert_eq!(ModelSpec::Quadratic { dim: 9 }.dim(), 9);
    }

    #[test]
    fn plain_gradient_step_lowers_both_losses() {
        let mut rng = Rng::new(11);
        let quad = QuadraticTask::new(
            DenseVector::new((0..8).map(|_| rng.normal()).collect()).unwrap(),
            DenseVector::new((0..8).map(|_| rng.uniform_range(0.5, 1.5)).collect()).unwrap(),
        )
        .unwrap();
        let widths = vec![3, 6, 2];
        let inputs: Vec<f64> = (0..3 * 16).map(|_| rng.normal()).collect();
        let targets: Vec<f64> = (0..2 * 16).map(|_| rng.normal()).collect();
        let mlp = MlpTask::new(widths, inputs, targets).unwrap();

        for task in [Task::Quadratic(quad), Task::Mlp(mlp)] {
            let theta = DenseVector::new((0..task.dim()).map(|_| 0.3 * rng.normal()).collect()).unwrap();
            let (l0, g) = task.loss_and_gradient(&theta).unwrap();
            let stepped = theta.sub(&g.scale(1e-3)).unwrap();
            assert!(task.loss(&stepped).unwrap() < l0);
        }
    }
}
