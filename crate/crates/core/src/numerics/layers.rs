use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor2};

pub const BATCHNORM_EPSILON: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Fully connected layer computing `y = Wᵀx + b` for every row `x`.
///
/// `weight` is stored `in × out`, so a batch `X` maps to `X·W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

/// Input recorded by [`Linear::forward`]; consumed by the matching backward.
#[derive(Debug)]
pub struct LinearTape {
    input: Tensor2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor2::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    /// Weights uniform in `±1/√fan_in`, zero bias.
    pub fn fan_in_uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: fan_in_uniform_matrix(inputs, outputs, rng),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    /// Forward without keeping a tape (inference).
    pub fn apply(&self, x: &Tensor2) -> Result<Tensor2, NumericsError> {
        if x.cols() != self.inputs() {
            return Err(NumericsError::Shape {
                op: "linear_forward",
                expected: format!("{} input features", self.inputs()),
                got: format!("{}", x.cols()),
            });
        }
        let mut y = x.matmul(&self.weight)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor2) -> Result<(Tensor2, LinearTape), NumericsError> {
        let y = self.apply(x)?;
        Ok((y, LinearTape { input: x.clone() }))
    }

    /// Returns the input gradient and the parameter gradients.
    pub fn backward(
        &self,
        tape: LinearTape,
        grad_out: &Tensor2,
    ) -> Result<(Tensor2, LinearGrad), NumericsError> {
        let (grad_weight, bias) = self.param_grads(&tape, grad_out)?;
        let grad_in = grad_out.matmul_nt(&self.weight)?;
        Ok((
            grad_in,
            LinearGrad {
                weight: grad_weight,
                bias,
            },
        ))
    }

    /// Parameter gradients only; for layers whose input needs no gradient.
    pub fn backward_params(
        &self,
        tape: LinearTape,
        grad_out: &Tensor2,
    ) -> Result<LinearGrad, NumericsError> {
        let (weight, bias) = self.param_grads(&tape, grad_out)?;
        Ok(LinearGrad { weight, bias })
    }

    fn param_grads(
        &self,
        tape: &LinearTape,
        grad_out: &Tensor2,
    ) -> Result<(Tensor2, Vec<f64>), NumericsError> {
        if grad_out.cols() != self.outputs() || grad_out.rows() != tape.input.rows() {
            return Err(NumericsError::Shape {
                op: "linear_backward",
                expected: format!("{}x{}", tape.input.rows(), self.outputs()),
                got: format!("{}x{}", grad_out.rows(), grad_out.cols()),
            });
        }
        let grad_weight = tape.input.matmul_tn(grad_out)?;
        let mut bias = vec![0.0; self.outputs()];
        for r in 0..grad_out.rows() {
            for (b, g) in bias.iter_mut().zip(grad_out.row(r)) {
                *b += g;
            }
        }
        Ok((grad_weight, bias))
    }
}

pub fn fan_in_uniform_matrix<R: Rng + ?Sized>(
    inputs: usize,
    outputs: usize,
    rng: &mut R,
) -> Tensor2 {
    let bound = 1.0 / (inputs.max(1) as f64).sqrt();
    let data = (0..inputs * outputs)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor2::from_vec(inputs, outputs, data).expect("sized by construction")
}

/// `y = Wᵀx + b` for a single vector.
pub fn linear_forward(
    x: &[f64],
    weight: &Tensor2,
    bias: &[f64],
) -> Result<Vec<f64>, NumericsError> {
    if bias.len() != weight.cols() {
        return Err(NumericsError::Shape {
            op: "linear_forward",
            expected: format!("bias of length {}", weight.cols()),
            got: format!("{}", bias.len()),
        });
    }
    let layer = Linear {
        weight: weight.clone(),
        bias: bias.to_vec(),
    };
    Ok(layer.apply(&Tensor2::row_vector(x))?.into_data())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug)]
pub struct ActivationTape {
    kind: Activation,
    pre: Tensor2,
}

impl Activation {
    fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn apply(self, x: &Tensor2) -> Tensor2 {
        let mut y = x.clone();
        for v in y.data_mut() {
            *v = self.eval(*v);
        }
        y
    }

    pub fn forward(self, x: &Tensor2) -> (Tensor2, ActivationTape) {
        (
            self.apply(x),
            ActivationTape {
                kind: self,
                pre: x.clone(),
            },
        )
    }
}

impl ActivationTape {
    pub fn backward(self, grad_out: &Tensor2) -> Result<Tensor2, NumericsError> {
        if grad_out.shape() != self.pre.shape() {
            return Err(NumericsError::Shape {
                op: "activation_backward",
                expected: format!("{:?}", self.pre.shape()),
                got: format!("{:?}", grad_out.shape()),
            });
        }
        let mut g = grad_out.clone();
        for (gv, &p) in g.data_mut().iter_mut().zip(self.pre.data()) {
            *gv *= self.kind.derivative(p);
        }
        Ok(g)
    }
}

/// Elementwise activation of a vector.
pub fn activation(x: &[f64], kind: Activation) -> Vec<f64> {
    x.iter().map(|&v| kind.eval(v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-feature batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug)]
pub struct BatchNormTape {
    normalized: Tensor2,
    inv_std: Vec<f64>,
    mode: NormMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrad {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Batch mean and unbiased variance, applied to running stats after a
/// train-mode forward.
#[derive(Debug, Clone)]
pub struct BatchStats {
    mean: Vec<f64>,
    unbiased_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, xs: &Tensor2) -> Result<(), NumericsError> {
        if xs.cols() != self.width() {
            return Err(NumericsError::Shape {
                op: "batchnorm",
                expected: format!("{} features", self.width()),
                got: format!("{}", xs.cols()),
            });
        }
        Ok(())
    }

    /// Normalizes with batch statistics. Running stats are left untouched;
    /// apply the returned [`BatchStats`] with [`BatchNorm::update_running`].
    pub fn forward_train(
        &self,
        xs: &Tensor2,
    ) -> Result<(Tensor2, BatchNormTape, BatchStats), NumericsError> {
        self.check(xs)?;
        let n = xs.rows();
        if n < 2 {
            return Err(NumericsError::InvalidBatch(format!(
                "train-mode batch norm needs at least 2 rows, got {n}"
            )));
        }
        let width = self.width();
        let mut mean = vec![0.0; width];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xs.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; width];
        for r in 0..n {
            for ((acc, v), m) in var.iter_mut().zip(xs.row(r)).zip(&mean) {
                let d = v - m;
                *acc += d * d;
            }
        }
        let sum_sq = var.clone();
        for v in &mut var {
            *v /= n as f64;
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + BATCHNORM_EPSILON).sqrt())
            .collect();
        let (out, normalized) = self.affine(xs, &mean, &inv_std);
        let stats = BatchStats {
            mean,
            unbiased_var: sum_sq.iter().map(|s| s / (n - 1) as f64).collect(),
        };
        Ok((
            out,
            BatchNormTape {
                normalized,
                inv_std,
                mode: NormMode::Train,
            },
            stats,
        ))
    }

    /// Normalizes with running statistics only.
    pub fn forward_eval(&self, xs: &Tensor2) -> Result<(Tensor2, BatchNormTape), NumericsError> {
        self.check(xs)?;
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + BATCHNORM_EPSILON).sqrt())
            .collect();
        let (out, normalized) = self.affine(xs, &self.running_mean, &inv_std);
        Ok((
            out,
            BatchNormTape {
                normalized,
                inv_std,
                mode: NormMode::Eval,
            },
        ))
    }

    pub fn apply_eval(&self, xs: &Tensor2) -> Result<Tensor2, NumericsError> {
        Ok(self.forward_eval(xs)?.0)
    }

    fn affine(&self, xs: &Tensor2, mean: &[f64], inv_std: &[f64]) -> (Tensor2, Tensor2) {
        let mut normalized = xs.clone();
        let mut out = xs.clone();
        for r in 0..xs.rows() {
            let norm_row = normalized.row_mut(r);
            for (j, v) in norm_row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
            let norm_row = normalized.row(r).to_vec();
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = self.gamma[j] * norm_row[j] + self.beta[j];
            }
        }
        (out, normalized)
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = BATCHNORM_MOMENTUM;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.unbiased_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    pub fn backward(
        &self,
        tape: BatchNormTape,
        grad_out: &Tensor2,
    ) -> Result<(Tensor2, BatchNormGrad), NumericsError> {
        if grad_out.shape() != tape.normalized.shape() {
            return Err(NumericsError::Shape {
                op: "batchnorm_backward",
                expected: format!("{:?}", tape.normalized.shape()),
                got: format!("{:?}", grad_out.shape()),
            });
        }
        let n = grad_out.rows();
        let width = self.width();
        let mut grad_gamma = vec![0.0; width];
        let mut grad_beta = vec![0.0; width];
        for r in 0..n {
            for j in 0..width {
                let g = grad_out.get(r, j);
                grad_gamma[j] += g * tape.normalized.get(r, j);
                grad_beta[j] += g;
            }
        }
        let mut grad_in = Tensor2::zeros(n, width);
        match tape.mode {
            NormMode::Eval => {
                for r in 0..n {
                    for j in 0..width {
                        grad_in.set(r, j, grad_out.get(r, j) * self.gamma[j] * tape.inv_std[j]);
                    }
                }
            }
            NormMode::Train => {
                let nf = n as f64;
                for r in 0..n {
                    for j in 0..width {
                        let g = grad_out.get(r, j);
                        let xhat = tape.normalized.get(r, j);
                        let v = self.gamma[j] * tape.inv_std[j] / nf
                            * (nf * g - grad_beta[j] - xhat * grad_gamma[j]);
                        grad_in.set(r, j, v);
                    }
                }
            }
        }
        Ok((
            grad_in,
            BatchNormGrad {
                gamma: grad_gamma,
                beta: grad_beta,
            },
        ))
    }
}

/// Batch normalization of a batch of vectors. Train mode updates the
/// running statistics in place.
pub fn batchnorm(
    xs: &Tensor2,
    norm: &mut BatchNorm,
    mode: NormMode,
) -> Result<Tensor2, NumericsError> {
    match mode {
        NormMode::Train => {
            let (out, _, stats) = norm.forward_train(xs)?;
            norm.update_running(&stats);
            Ok(out)
        }
        NormMode::Eval => norm.apply_eval(xs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_examples() {
        let y = linear_forward(&[1.0, 0.0], &Tensor2::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![1.0, 0.0]);
        let y = linear_forward(&[1.0, 2.0], &Tensor2::identity(2), &[1.0, 1.0]).unwrap();
        assert_eq!(y, vec![2.0, 3.0]);
        assert!(linear_forward(&[1.0, 2.0, 3.0], &Tensor2::identity(2), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn activation_examples() {
        assert_eq!(activation(&[-1.0, 2.0], Activation::Relu), vec![0.0, 2.0]);
        assert_eq!(activation(&[0.0], Activation::Tanh), vec![0.0]);
    }

    #[test]
    fn batchnorm_two_rows() {
        let mut bn = BatchNorm::new(1);
        let xs = Tensor2::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let out = batchnorm(&xs, &mut bn, NormMode::Train).unwrap();
        assert!((out.get(0, 0) + 1.0).abs() < 1e-5);
        assert!((out.get(1, 0) - 1.0).abs() < 1e-5);
        // running stats moved toward mean 2 and unbiased variance 2
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_identity() {
        let mut bn = BatchNorm::new(3);
        let xs = Tensor2::from_rows(&[vec![0.5, -2.0, 7.0]]).unwrap();
        let out = batchnorm(&xs, &mut bn, NormMode::Eval).unwrap();
        for (a, b) in out.data().iter().zip(xs.data()) {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batchnorm_rejects_single_row_in_train() {
        let mut bn = BatchNorm::new(2);
        let xs = Tensor2::zeros(1, 2);
        assert!(matches!(
            batchnorm(&xs, &mut bn, NormMode::Train),
            Err(NumericsError::InvalidBatch(_))
        ));
    }

    #[test]
    fn fan_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Linear::fan_in_uniform(16, 4, &mut rng);
        assert!(l.weight.data().iter().all(|w| w.abs() <= 0.25));
        assert!(l.bias.iter().all(|&b| b == 0.0));
    }
}
