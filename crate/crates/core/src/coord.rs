//! Coordinate-wise momentum: SGD with momentum on a changing coordinate set
//! `J_k` and plain SGD on the rest, together with the quantities that enter
//! its non-convex convergence bound.
//!
//! Coordinates leaving `J_k` have their momentum buffer released: the
//! buffer is overwritten with `(1 - beta) g_j`, so a coordinate that
//! re-enters starts a fresh geometric average.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::problems::NoisyQuadratic;
use crate::projection::derive_seed;

/// Iterates diverging beyond this norm abort a run.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordState {
    pub x: Vec<f64>,
    pub m: Vec<f64>,
    /// Steps taken.
    pub k: u64,
}

impl CoordState {
    pub fn new(x: Vec<f64>) -> Self {
        let d = x.len();
        Self {
            x,
            m: vec![0.0; d],
            k: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// Membership mask of an index set in `[0, d)`.
pub fn membership(set: &[usize], d: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; d];
    for &j in set {
        if j >= d {
            return Err(param_err!("index {j} out of range for dimension {d}"));
        }
        mask[j] = true;
    }
    Ok(mask)
}

fn check_step(state: &CoordState, grad: &[f64], alpha: f64, beta: f64) -> Result<()> {
    if grad.len() != state.dim() || state.m.len() != state.dim() {
        return Err(param_err!(
            "gradient length {} does not match dimension {}",
            grad.len(),
            state.dim()
        ));
    }
    if !(alpha > 0.0) {
        return Err(param_err!("step size must be positive, got {alpha}"));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(param_err!("momentum must lie in [0, 1), got {beta}"));
    }
    Ok(())
}

fn update_momentum(m: &mut [f64], grad: &[f64], in_set: &[bool], beta: f64) {
    for ((mj, &gj), &inside) in m.iter_mut().zip(grad).zip(in_set) {
        *mj = if inside {
            (1.0 - beta) * gj + beta * *mj
        } else {
            (1.0 - beta) * gj + beta * 0.0
        };
    }
}

/// Momentum on `J`, plain gradient elsewhere.
pub fn alg2_step_masked(
    state: &mut CoordState,
    grad: &[f64],
    in_set: &[bool],
    alpha: f64,
    beta: f64,
) -> Result<()> {
    check_step(state, grad, alpha, beta)?;
    update_momentum(&mut state.m, grad, in_set, beta);
    for (((xj, &mj), &gj), &inside) in state.x.iter_mut().zip(&state.m).zip(grad).zip(in_set) {
        let u = if inside { mj } else { gj };
        *xj -= alpha * u;
    }
    state.k += 1;
    Ok(())
}

pub fn alg2_step(state: &mut CoordState, grad: &[f64], set: &[usize], alpha: f64, beta: f64) -> Result<()> {
    let mask = membership(set, state.dim())?;
    alg2_step_masked(state, grad, &mask, alpha, beta)
}

/// The constant-step reformulation: every coordinate moves along the
/// momentum, and coordinates not in the next set get the correction
/// `x <- x_half / (1 - beta) - beta x / (1 - beta)`.
pub fn alg3_step_masked(
    state: &mut CoordState,
    grad: &[f64],
    in_set: &[bool],
    in_next: &[bool],
    alpha: f64,
    beta: f64,
) -> Result<()> {
    check_step(state, grad, alpha, beta)?;
    update_momentum(&mut state.m, grad, in_set, beta);
    for ((xj, &mj), &next) in state.x.iter_mut().zip(&state.m).zip(in_next) {
        let half = *xj - alpha * mj;
        *xj = if next {
            half
        } else {
            half / (1.0 - beta) - beta * *xj / (1.0 - beta)
        };
    }
    state.k += 1;
    Ok(())
}

pub fn alg3_step(
    state: &mut CoordState,
    grad: &[f64],
    set: &[usize],
    next: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<()> {
    let mask = membership(set, state.dim())?;
    let next_mask = membership(next, state.dim())?;
    alg3_step_masked(state, grad, &mask, &next_mask, alpha, beta)
}

/// How the momentum set is drawn each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum JSampler {
    /// Every coordinate independently with probability `p`.
    BernoulliEach { p: f64 },
    FixedSet { set: Vec<usize> },
    /// Consecutive blocks of `block_size` coordinates, each active for
    /// `period` steps in turn.
    BlockCyclic { block_size: usize, period: u64 },
}

impl JSampler {
    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            JSampler::BernoulliEach { p } if !(0.0..=1.0).contains(p) => {
                Err(param_err!("selection probability must lie in [0, 1], got {p}"))
            }
            JSampler::FixedSet { set } if set.iter().any(|&j| j >= d) => {
                Err(param_err!("fixed set has an index outside [0, {d})"))
            }
            JSampler::BlockCyclic { block_size, period } if *block_size == 0 || *period == 0 => {
                Err(param_err!("block size and period must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// One draw of the momentum set with the selection probabilities of its round.
#[derive(Debug, Clone, PartialEq)]
pub struct JDraw {
    pub mask: Vec<bool>,
    pub p_min: f64,
    pub p_max: f64,
}

impl JDraw {
    pub fn indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(j, &b)| b.then_some(j))
            .collect()
    }
}

fn deterministic_probabilities(mask: &[bool]) -> (f64, f64) {
    let count = mask.iter().filter(|&&b| b).count();
    let p_min = if count == mask.len() { 1.0 } else { 0.0 };
    let p_max = if count > 0 { 1.0 } else { 0.0 };
    (p_min, p_max)
}

/// Draws `J_k` for step `k >= 1`.
pub fn sample_j(sampler: &JSampler, k: u64, d: usize, rng: &mut impl Rng) -> JDraw {
    match sampler {
        JSampler::BernoulliEach { p } => {
            let mask = (0..d).map(|_| rng.random::<f64>() < *p).collect();
            JDraw {
                mask,
                p_min: *p,
                p_max: *p,
            }
        }
        JSampler::FixedSet { set } => {
            let mut mask = vec![false; d];
            for &j in set {
                if j < d {
                    mask[j] = true;
                }
            }
            let (p_min, p_max) = deterministic_probabilities(&mask);
            JDraw { mask, p_min, p_max }
        }
        JSampler::BlockCyclic { block_size, period } => {
            let blocks = d.div_ceil(*block_size).max(1);
            let b = ((k.saturating_sub(1) / period) % blocks as u64) as usize;
            let lo = b * block_size;
            let hi = (lo + block_size).min(d);
            let mask: Vec<bool> = (0..d).map(|j| j >= lo && j < hi).collect();
            let (p_min, p_max) = deterministic_probabilities(&mask);
            JDraw { mask, p_min, p_max }
        }
    }
}

/// Monte-Carlo estimate of `E||m~ - m||^2` for an exponential moving average
/// of noisy gradients, next to the bound `(1 - beta)/(1 + beta) sigma^2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentumVariance {
    pub estimate: f64,
    pub std_error: f64,
    pub bound: f64,
}

/// Runs `trials` independent momentum buffers for `horizon` steps each. The
/// noise-free buffer follows a fixed smooth gradient path; the noisy one sees
/// the same path plus Gaussian noise of standard deviation `sigma[j]`.
pub fn momentum_variance_mc(
    beta: f64,
    sigma: &[f64],
    horizon: usize,
    trials: usize,
    seed: u64,
) -> Result<MomentumVariance> {
    if !(0.0..1.0).contains(&beta) {
        return Err(param_err!("momentum must lie in [0, 1), got {beta}"));
    }
    if horizon == 0 || trials < 2 {
        return Err(param_err!("need a positive horizon and at least two trials"));
    }
    let d = sigma.len();
    let path = |i: usize, j: usize| (0.1 * i as f64 + j as f64).cos();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = vec![0.0; d];
    let mut clean = vec![0.0; d];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..trials {
        noisy.iter_mut().for_each(|v| *v = 0.0);
        clean.iter_mut().for_each(|v| *v = 0.0);
        for i in 1..=horizon {
            for j in 0..d {
                let g = path(i, j);
                let z: f64 = StandardNormal.sample(&mut rng);
                noisy[j] = beta * noisy[j] + (1.0 - beta) * (g + sigma[j] * z);
                clean[j] = beta * clean[j] + (1.0 - beta) * g;
            }
        }
        let err: f64 = noisy.iter().zip(&clean).map(|(a, b)| (a - b) * (a - b)).sum();
        sum += err;
        sum_sq += err * err;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    let sigma_sq: f64 = sigma.iter().map(|s| s * s).sum();
    Ok(MomentumVariance {
        estimate: mean,
        std_error: (var / n).sqrt(),
        bound: (1.0 - beta) / (1.0 + beta) * sigma_sq,
    })
}

/// Largest step size covered by the convergence bound.
pub fn max_stepsize(beta: f64, smoothness: f64) -> f64 {
    (1.0 - beta) / (smoothness * (4.0 - beta + beta * beta))
}

/// Inputs of the explicit convergence bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// `f(x^1) - f*`.
    pub initial_gap: f64,
    pub steps: u64,
    pub alpha: f64,
    pub beta: f64,
    pub smoothness: f64,
    /// Total gradient noise variance `sigma^2`.
    pub variance: f64,
    pub p_min_avg: f64,
    pub p_max_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundValue {
    pub value: f64,
    /// Noise term `C * L * alpha * sigma^2` alone.
    pub noise_floor: f64,
    /// False when `alpha` exceeds [`max_stepsize`]; the value is still reported.
    pub stepsize_ok: bool,
}

/// Right-hand side of the explicit bound on `1/k sum E||g^i||^2`:
///
/// `2 (f(x^1) - f*) / (k alpha) + C L alpha sigma^2` with
/// `C = (2 beta^2 + 8 p_max) / (2 (1 + beta)) + 1/2 + p_max (1 - p_min) beta / (8 (1 - beta))`.
pub fn bound_rhs(b: &BoundInputs) -> BoundValue {
    let beta = b.beta;
    let p_max = b.p_max_hat;
    let coeff = (2.0 * beta * beta + 8.0 * p_max) / (2.0 * (1.0 + beta))
        + 0.5
        + p_max * (1.0 - b.p_min_avg) * beta / (8.0 * (1.0 - beta));
    let noise_floor = coeff * b.smoothness * b.alpha * b.variance;
    BoundValue {
        value: 2.0 * b.initial_gap / (b.steps as f64 * b.alpha) + noise_floor,
        noise_floor,
        stepsize_ok: b.alpha <= max_stepsize(beta, b.smoothness),
    }
}

/// Outcome of running the coordinate-momentum method on a noisy quadratic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    /// `E||g^i||^2` per step, averaged over seeds.
    pub grad_sq: Vec<f64>,
    /// `1/k sum_i E||g^i||^2`.
    pub mean_grad_sq: f64,
    /// Standard error of `mean_grad_sq` across seeds.
    pub mean_std_error: f64,
    /// Mean `||g||^2` over the second half of the run.
    pub noise_floor: f64,
    pub noise_floor_std_error: f64,
    pub p_min_avg: f64,
    pub p_max_hat: f64,
    pub bound: BoundValue,
    pub seeds: usize,
}

impl RateReport {
    pub fn running_average(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.grad_sq
            .iter()
            .enumerate()
            .map(|(i, g)| {
                acc += g;
                acc / (i + 1) as f64
            })
            .collect()
    }

    pub fn within_bound(&self) -> bool {
        self.mean_grad_sq <= self.bound.value
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RateError {
    #[error(transparent)]
    Invalid(#[from] crate::error::Error),
    #[error("seed {seed} diverged at step {step}")]
    Diverged { seed: u64, step: u64 },
}

/// Squared gradient norms and the `(p_min, p_max)` of each round.
pub type Trajectory = (Vec<f64>, Vec<(f64, f64)>);

/// Per-seed trajectory of `||g^i||^2` (exact gradient norm) under the
/// coordinate-momentum method, with the probabilities of each round.
pub fn run_trajectory(
    problem: &NoisyQuadratic,
    sampler: &JSampler,
    alpha: f64,
    beta: f64,
    steps: u64,
    seed: u64,
) -> std::result::Result<Trajectory, RateError> {
    problem.validate()?;
    let d = problem.dim();
    sampler.validate(d)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0));
    let mut set_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0));
    let mut state = CoordState::new(problem.start());
    let mut series = Vec::with_capacity(steps as usize);
    let mut probs = Vec::with_capacity(steps as usize);
    for k in 1..=steps {
        let g = problem.grad(&state.x);
        series.push(g.iter().map(|v| v * v).sum());
        let noisy = problem.stochastic_grad(&state.x, &mut noise_rng);
        let draw = sample_j(sampler, k, d, &mut set_rng);
        probs.push((draw.p_min, draw.p_max));
        alg2_step_masked(&mut state, &noisy, &draw.mask, alpha, beta)?;
        let norm = state.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(RateError::Diverged { seed, step: k });
        }
    }
    Ok((series, probs))
}

/// Runs `seeds` trajectories of `steps` steps and compares the average
/// squared gradient norm with [`bound_rhs`].
pub fn run_rate_experiment(
    problem: &NoisyQuadratic,
    sampler: &JSampler,
    alpha: f64,
    beta: f64,
    steps: u64,
    seeds: &[u64],
) -> std::result::Result<RateReport, RateError> {
    if steps == 0 || seeds.len() < 2 {
        return Err(param_err!("need at least one step and two seeds").into());
    }
    let mut sum_series = vec![0.0; steps as usize];
    let mut per_seed_mean = Vec::with_capacity(seeds.len());
    let mut per_seed_floor = Vec::with_capacity(seeds.len());
    let (mut p_min_sum, mut p_max_hat, mut rounds) = (0.0, 0.0_f64, 0usize);
    let tail = steps as usize / 2;
    for &seed in seeds {
        let (series, probs) = run_trajectory(problem, sampler, alpha, beta, steps, seed)?;
        for (acc, v) in sum_series.iter_mut().zip(&series) {
            *acc += v;
        }
        per_seed_mean.push(series.iter().sum::<f64>() / steps as f64);
        per_seed_floor.push(series[tail..].iter().sum::<f64>() / (series.len() - tail) as f64);
        for (pmin, pmax) in probs {
            p_min_sum += pmin;
            p_max_hat = p_max_hat.max(pmax);
            rounds += 1;
        }
    }
    let n = seeds.len() as f64;
    let grad_sq: Vec<f64> = sum_series.into_iter().map(|s| s / n).collect();
    let (mean_grad_sq, mean_std_error) = mean_and_se(&per_seed_mean);
    let (noise_floor, noise_floor_std_error) = mean_and_se(&per_seed_floor);
    let p_min_avg = p_min_sum / rounds as f64;
    let x0 = problem.start();
    let bound = bound_rhs(&BoundInputs {
        initial_gap: problem.loss(&x0),
        steps,
        alpha,
        beta,
        smoothness: problem.smoothness(),
        variance: problem.total_variance(),
        p_min_avg,
        p_max_hat,
    });
    Ok(RateReport {
        grad_sq,
        mean_grad_sq,
        mean_std_error,
        noise_floor,
        noise_floor_std_error,
        p_min_avg,
        p_max_hat,
        bound,
        seeds: seeds.len(),
    })
}

/// Sample mean and its standard error.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
