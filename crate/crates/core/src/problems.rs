//! Small differentiable objectives with exact gradients and optional
//! stochastic oracles.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::TensorSpec;
use crate::error::{param_err, Error, Result};
use crate::linalg::{truncated_svd, Matrix};

/// `f(W) = ||W||_F^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticFrob {
    pub rows: usize,
    pub cols: usize,
}

/// `f(x) = 1/2 sum_j curvature_j x_j^2`, with additive Gaussian gradient
/// noise of standard deviation `noise_std_j` per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisyQuadratic {
    pub curvatures: Vec<f64>,
    pub noise_std: Vec<f64>,
    /// Starting point; ones when absent.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

impl NoisyQuadratic {
    pub fn new(curvatures: Vec<f64>, noise_std: Vec<f64>) -> Result<Self> {
        let p = Self {
            curvatures,
            noise_std,
            x0: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.curvatures.len();
        if d == 0 {
            return Err(param_err!("noisy quadratic needs at least one coordinate"));
        }
        if self.noise_std.len() != d || self.x0.as_ref().is_some_and(|x| x.len() != d) {
            return Err(param_err!("curvatures, noise and x0 must have equal length"));
        }
        if self.curvatures.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(param_err!("curvatures must be positive"));
        }
        if self.noise_std.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(param_err!("noise levels must be non-negative"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.curvatures.len()
    }

    pub fn start(&self) -> Vec<f64> {
        self.x0.clone().unwrap_or_else(|| vec![1.0; self.dim()])
    }

    pub fn loss(&self, x: &[f64]) -> f64 {
        0.5 * self
            .curvatures
            .iter()
            .zip(x)
            .map(|(l, xi)| l * xi * xi)
            .sum::<f64>()
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.curvatures.iter().zip(x).map(|(l, xi)| l * xi).collect()
    }

    /// Exact gradient plus zero-mean Gaussian noise.
    pub fn stochastic_grad(&self, x: &[f64], rng: &mut (impl Rng + ?Sized)) -> Vec<f64> {
        self.curvatures
            .iter()
            .zip(&self.noise_std)
            .zip(x)
            .map(|((l, s), xi)| {
                let z: f64 = StandardNormal.sample(rng);
                l * xi + s * z
            })
            .collect()
    }

    /// `sum_j noise_std_j^2`.
    pub fn total_variance(&self) -> f64 {
        self.noise_std.iter().map(|s| s * s).sum()
    }

    pub fn smoothness(&self) -> f64 {
        self.curvatures.iter().cloned().fold(0.0, f64::max)
    }
}

/// `f(w) = (1/n) ||X w - y||^2`; stochastic gradients use minibatches drawn
/// uniformly with replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeastSquares {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub batch_size: usize,
}

impl LeastSquares {
    pub fn new(x: Matrix, y: Vec<f64>, batch_size: usize) -> Result<Self> {
        if x.rows() != y.len() || x.rows() == 0 || x.cols() == 0 {
            return Err(param_err!("design matrix and targets do not match"));
        }
        if batch_size == 0 {
            return Err(param_err!("batch size must be positive"));
        }
        Ok(Self { x, y, batch_size })
    }

    /// Synthetic problem with Gaussian design and a planted solution.
    pub fn synthetic(seed: u64, n: usize, p: usize, noise: f64, batch_size: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let w: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y = (0..n)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                crate::linalg::dot_slices(x.row(i), &w) + noise * z
            })
            .collect();
        Self::new(x, y, batch_size)
    }

    fn residual_grad(&self, w: &[f64], rows: &[usize]) -> (f64, Vec<f64>) {
        let p = self.x.cols();
        let mut grad = vec![0.0; p];
        let mut loss = 0.0;
        for &i in rows {
            let row = self.x.row(i);
            let r = crate::linalg::dot_slices(row, w) - self.y[i];
            loss += r * r;
            for (g, xi) in grad.iter_mut().zip(row) {
                *g += 2.0 * r * xi;
            }
        }
        let scale = 1.0 / rows.len() as f64;
        (loss * scale, grad.into_iter().map(|g| g * scale).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Labelled points, one per row of `inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Two-class Gaussian blobs with unit variance, centred at `±separation`
    /// times the all-ones vector; labels alternate.
    pub fn gaussian_blobs(seed: u64, n: usize, dim: usize, separation: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let inputs = Matrix::from_fn(n, dim, |r, _| {
            let centre = if labels[r] == 0 { -separation } else { separation };
            let z: f64 = StandardNormal.sample(&mut rng);
            centre + z
        });
        Self { inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Fully connected network with softmax cross-entropy loss.
///
/// Parameters are ordered `layer0.weight, layer0.bias, layer1.weight, ...`,
/// weights shaped `out x in` and biases `out x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyMlp {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub data: Dataset,
    pub batch_size: usize,
}

impl TinyMlp {
    pub fn new(dims: Vec<usize>, activation: Activation, data: Dataset, batch_size: usize) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(param_err!("network needs at least an input and an output layer"));
        }
        if data.inputs.cols() != dims[0] {
            return Err(param_err!(
                "inputs have {} features, network expects {}",
                data.inputs.cols(),
                dims[0]
            ));
        }
        if data.labels.iter().any(|&l| l >= *dims.last().unwrap()) {
            return Err(param_err!("label out of range for the output layer"));
        }
        if batch_size == 0 || data.is_empty() {
            return Err(param_err!("empty dataset or batch"));
        }
        Ok(Self {
            dims,
            activation,
            data,
            batch_size,
        })
    }

    /// 2 -> 16 -> 2 tanh network on 512 blob samples.
    pub fn default_classifier(data_seed: u64) -> Self {
        let data = Dataset::gaussian_blobs(data_seed, 512, 2, 0.75);
        Self::new(vec![2, 16, 2], Activation::Tanh, data, 64).expect("valid default network")
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn loss_and_grad(&self, params: &[Matrix], rows: &[usize]) -> (f64, Vec<Matrix>) {
        let layers = self.layers();
        let mut grads: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        let mut total = 0.0;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
        for &i in rows {
            acts.clear();
            acts.push(self.data.inputs.row(i).to_vec());
            for l in 0..layers {
                let (w, b) = (&params[2 * l], &params[2 * l + 1]);
                let prev = &acts[l];
                let out: Vec<f64> = (0..w.rows())
                    .map(|o| {
                        let z = crate::linalg::dot_slices(w.row(o), prev) + b[(o, 0)];
                        if l + 1 < layers {
                            self.activation.apply(z)
                        } else {
                            z
                        }
                    })
                    .collect();
                acts.push(out);
            }
            let logits = &acts[layers];
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let label = self.data.labels[i];
            total += -(exps[label] / sum).ln();

            let mut delta: Vec<f64> = exps.iter().map(|e| e / sum).collect();
            delta[label] -= 1.0;
            for l in (0..layers).rev() {
                let prev = &acts[l];
                {
                    let gw = &mut grads[2 * l];
                    for (o, d) in delta.iter().enumerate() {
                        for (c, a) in prev.iter().enumerate() {
                            gw[(o, c)] += d * a;
                        }
                    }
                }
                {
                    let gb = &mut grads[2 * l + 1];
                    for (o, d) in delta.iter().enumerate() {
                        gb[(o, 0)] += d;
                    }
                }
                if l > 0 {
                    let w = &params[2 * l];
                    delta = (0..w.cols())
                        .map(|c| {
                            let back: f64 = delta.iter().enumerate().map(|(o, d)| d * w[(o, c)]).sum();
                            back * self.activation.derivative(prev[c])
                        })
                        .collect();
                }
            }
        }
        let scale = 1.0 / rows.len() as f64;
        (
            total * scale,
            grads.into_iter().map(|g| g.scale(scale)).collect(),
        )
    }

    /// Fraction of the dataset classified correctly.
    pub fn accuracy(&self, params: &[Matrix]) -> f64 {
        let layers = self.layers();
        let mut correct = 0;
        for i in 0..self.data.len() {
            let mut a = self.data.inputs.row(i).to_vec();
            for l in 0..layers {
                let (w, b) = (&params[2 * l], &params[2 * l + 1]);
                a = (0..w.rows())
                    .map(|o| {
                        let z = crate::linalg::dot_slices(w.row(o), &a) + b[(o, 0)];
                        if l + 1 < layers {
                            self.activation.apply(z)
                        } else {
                            z
                        }
                    })
                    .collect();
            }
            let pred = a
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.total_cmp(y.1))
                .map(|(k, _)| k)
                .unwrap_or(0);
            if pred == self.data.labels[i] {
                correct += 1;
            }
        }
        correct as f64 / self.data.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    QuadraticFrob(QuadraticFrob),
    NoisyQuadratic(NoisyQuadratic),
    LeastSquares(LeastSquares),
    TinyMlp(TinyMlp),
}

/// Loss and per-group gradients from one oracle call.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub grads: Vec<Matrix>,
}

impl Evaluation {
    pub fn grad_norm_sq(&self) -> f64 {
        self.grads.iter().map(Matrix::norm_sq).sum()
    }
}

impl Problem {
    /// Names and shapes of the parameter groups, in evaluation order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let spec = |name: String, rows, cols| TensorSpec {
            name,
            rows,
            cols,
            role: None,
            block: None,
        };
        match self {
            Problem::QuadraticFrob(q) => vec![spec("w".into(), q.rows, q.cols)],
            Problem::NoisyQuadratic(q) => vec![spec("x".into(), q.dim(), 1)],
            Problem::LeastSquares(ls) => vec![spec("w".into(), ls.x.cols(), 1)],
            Problem::TinyMlp(mlp) => (0..mlp.layers())
                .flat_map(|l| {
                    [
                        spec(format!("layer{l}.weight"), mlp.dims[l + 1], mlp.dims[l]),
                        spec(format!("layer{l}.bias"), mlp.dims[l + 1], 1),
                    ]
                })
                .collect(),
        }
    }

    pub fn init_params(&self, seed: u64) -> Vec<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Problem::QuadraticFrob(q) => {
                vec![Matrix::from_fn(q.rows, q.cols, |_, _| StandardNormal.sample(&mut rng))]
            }
            Problem::NoisyQuadratic(q) => vec![Matrix::column_vector(q.start())],
            Problem::LeastSquares(ls) => vec![Matrix::zeros(ls.x.cols(), 1)],
            Problem::TinyMlp(mlp) => (0..mlp.layers())
                .flat_map(|l| {
                    let (out, inp) = (mlp.dims[l + 1], mlp.dims[l]);
                    let normal = Normal::new(0.0, (1.0 / inp as f64).sqrt()).expect("finite std");
                    let w = Matrix::from_fn(out, inp, |_, _| normal.sample(&mut rng));
                    [w, Matrix::zeros(out, 1)]
                })
                .collect(),
        }
    }

    fn check_params(&self, params: &[Matrix]) -> Result<()> {
        let specs = self.tensor_specs();
        if specs.len() != params.len() {
            return Err(param_err!("expected {} parameter groups, got {}", specs.len(), params.len()));
        }
        for (s, p) in specs.iter().zip(params) {
            if p.shape() != (s.rows, s.cols) {
                return Err(param_err!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    s.name,
                    p.shape(),
                    (s.rows, s.cols)
                ));
            }
        }
        Ok(())
    }

    /// Loss and gradient at `params`. With an RNG the gradient is an unbiased
    /// stochastic estimate; without one it is exact.
    pub fn eval(&self, params: &[Matrix], rng: Option<&mut dyn RngCore>) -> Result<Evaluation> {
        self.check_params(params)?;
        match self {
            Problem::QuadraticFrob(_) => Ok(Evaluation {
                loss: params[0].norm_sq(),
                grads: vec![params[0].scale(2.0)],
            }),
            Problem::NoisyQuadratic(q) => {
                let x = params[0].as_slice();
                let g = match rng {
                    Some(rng) => q.stochastic_grad(x, rng),
                    None => q.grad(x),
                };
                Ok(Evaluation {
                    loss: q.loss(x),
                    grads: vec![Matrix::column_vector(g)],
                })
            }
            Problem::LeastSquares(ls) => {
                let n = ls.x.rows();
                let rows: Vec<usize> = match rng {
                    Some(rng) => (0..ls.batch_size).map(|_| rng.random_range(0..n)).collect(),
                    None => (0..n).collect(),
                };
                let (loss, g) = ls.residual_grad(params[0].as_slice(), &rows);
                Ok(Evaluation {
                    loss,
                    grads: vec![Matrix::column_vector(g)],
                })
            }
            Problem::TinyMlp(mlp) => {
                let n = mlp.data.len();
                let rows: Vec<usize> = match rng {
                    Some(rng) => (0..mlp.batch_size).map(|_| rng.random_range(0..n)).collect(),
                    None => (0..n).collect(),
                };
                let (loss, grads) = mlp.loss_and_grad(params, &rows);
                Ok(Evaluation { loss, grads })
            }
        }
    }

    /// Gradient Lipschitz constant for the quadratic family.
    pub fn smoothness_constant(&self) -> Result<f64> {
        match self {
            Problem::QuadraticFrob(_) => Ok(2.0),
            Problem::NoisyQuadratic(q) => Ok(q.smoothness()),
            Problem::LeastSquares(ls) => {
                let s = truncated_svd(&ls.x, 1)?.s[0];
                Ok(2.0 * s * s / ls.x.rows() as f64)
            }
            Problem::TinyMlp(_) => Err(Error::Unsupported(
                "the MLP objective has no global smoothness constant".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frobenius_quadratic_gradient() {
        let p = Problem::QuadraticFrob(QuadraticFrob { rows: 2, cols: 3 });
        let w = p.init_params(1);
        let ev = p.eval(&w, None).unwrap();
        assert_eq!(ev.grads[0], w[0].scale(2.0));
        let zero = p.eval(&[Matrix::zeros(2, 3)], None).unwrap();
        assert_eq!(zero.grads[0].max_abs(), 0.0);
        assert_eq!(p.smoothness_constant().unwrap(), 2.0);
    }

    #[test]
    fn noiseless_quadratic_is_exact() {
        let q = NoisyQuadratic::new(vec![1.0, 4.0], vec![0.0, 0.0]).unwrap();
        let p = Problem::NoisyQuadratic(q);
        let x = vec![Matrix::column_vector(vec![0.5, -1.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = p.eval(&x, Some(&mut rng)).unwrap();
        let exact = p.eval(&x, None).unwrap();
        assert_eq!(noisy.grads, exact.grads);
        assert_eq!(p.smoothness_constant().unwrap(), 4.0);
    }

    #[test]
    fn noisy_quadratic_validation() {
        assert!(NoisyQuadratic::new(vec![], vec![]).is_err());
        assert!(NoisyQuadratic::new(vec![1.0], vec![0.1, 0.2]).is_err());
        assert!(NoisyQuadratic::new(vec![-1.0], vec![0.1]).is_err());
    }

    #[test]
    fn shape_mismatch_is_parameter_error() {
        let p = Problem::QuadraticFrob(QuadraticFrob { rows: 2, cols: 2 });
        assert!(matches!(p.eval(&[Matrix::zeros(3, 2)], None), Err(Error::Parameter(_))));
        assert!(p.eval(&[], None).is_err());
    }

    #[test]
    fn mlp_has_no_global_smoothness() {
        let p = Problem::TinyMlp(TinyMlp::default_classifier(0));
        assert!(matches!(p.smoothness_constant(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn mlp_specs_and_init() {
        let p = Problem::TinyMlp(TinyMlp::default_classifier(0));
        let specs = p.tensor_specs();
        let names: Vec<_> = specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias"]);
        let params = p.init_params(5);
        assert_eq!(params[0].shape(), (16, 2));
        assert_eq!(params[3].shape(), (2, 1));
        let ev = p.eval(&params, None).unwrap();
        assert!(ev.loss > 0.0 && ev.loss.is_finite());
    }

    #[test]
    fn least_squares_orthonormal_design() {
        // Columns of X are orthonormal, so XᵀX = I and L = 2/n.
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let x = Matrix::from_rows(&[&[h, 0.0], &[h, 0.0], &[0.0, 1.0], &[0.0, 0.0]]).unwrap();
        let ls = LeastSquares::new(x, vec![1.0, 0.0, 2.0, -1.0], 2).unwrap();
        let l = Problem::LeastSquares(ls).smoothness_constant().unwrap();
        assert!((l - 2.0 / 4.0).abs() < 1e-14);
    }
}
