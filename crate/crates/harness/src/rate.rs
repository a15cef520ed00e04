//! Convergence-rate check of coordinate-wise momentum on a calibrated noisy
//! quadratic.

use frugal_core::coord::{run_rate_experiment, JSampler, RateError, RateReport};
use frugal_core::problems::NoisyQuadratic;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    pub dim: usize,
    /// Curvatures are evenly spaced over this interval.
    pub curvature_range: [f64; 2],
    /// Total noise variance, split evenly over coordinates.
    pub variance: f64,
    pub x0: f64,
    pub beta: f64,
    pub steps: u64,
    /// Number of seeds, starting at `first_seed`.
    pub seeds: u64,
    pub first_seed: u64,
    pub alphas: Vec<f64>,
    pub samplers: Vec<JSampler>,
}

impl Default for RateConfig {
    fn default() -> Self {
        let dim = 10;
        Self {
            dim,
            curvature_range: [1.0, 2.0],
            variance: 1.0,
            x0: 1.0,
            beta: 0.9,
            steps: 10_000,
            seeds: 20,
            first_seed: 0,
            alphas: vec![1e-3, 3e-3, 1e-2],
            samplers: vec![
                JSampler::FixedSet { set: (0..dim).collect() },
                JSampler::FixedSet { set: vec![] },
                JSampler::BernoulliEach { p: 0.25 },
                JSampler::BernoulliEach { p: 0.5 },
                JSampler::BlockCyclic { block_size: 5, period: 200 },
            ],
        }
    }
}

impl RateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        let [lo, hi] = self.curvature_range;
        if self.dim == 0 || self.dim > 100_000 {
            return bad("dim must lie in 1..=100000");
        }
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("curvature_range must be 0 < lo <= hi");
        }
        if !(self.variance >= 0.0 && self.variance.is_finite() && self.x0.is_finite()) {
            return bad("variance must be non-negative and x0 finite");
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1)");
        }
        if self.steps < 2 || self.seeds < 2 || self.steps.saturating_mul(self.seeds) > 100_000_000 {
            return bad("need at least 2 steps and 2 seeds, and at most 10^8 steps in total");
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return bad("alphas must be positive");
        }
        if self.samplers.is_empty() {
            return bad("need at least one sampler");
        }
        for s in &self.samplers {
            s.validate(self.dim).map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn problem(&self) -> NoisyQuadratic {
        let [lo, hi] = self.curvature_range;
        let d = self.dim;
        let curvatures = (0..d)
            .map(|j| if d == 1 { lo } else { lo + (hi - lo) * j as f64 / (d - 1) as f64 })
            .collect();
        NoisyQuadratic {
            curvatures,
            noise_std: vec![(self.variance / d as f64).sqrt(); d],
            x0: Some(vec![self.x0; d]),
        }
    }
}

pub fn parse_rate_config(text: &str) -> Result<RateConfig> {
    let cfg: RateConfig = crate::config::parse_json(text, "rate config")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn sampler_label(s: &JSampler) -> String {
    match s {
        JSampler::BernoulliEach { p } => format!("bernoulli({p})"),
        JSampler::FixedSet { set } => format!("fixed({})", set.len()),
        JSampler::BlockCyclic { block_size, period } => format!("block_cyclic({block_size},{period})"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub sampler: String,
    pub alpha: f64,
    pub mean_grad_sq: f64,
    pub mean_std_error: f64,
    pub bound: f64,
    pub bound_noise_floor: f64,
    pub noise_floor: f64,
    pub noise_floor_std_error: f64,
    pub p_min_avg: f64,
    pub p_max_hat: f64,
    pub stepsize_ok: bool,
    pub within_bound: bool,
}

impl RateRow {
    fn from_report(sampler: String, alpha: f64, r: &RateReport) -> Self {
        Self {
            sampler,
            alpha,
            mean_grad_sq: r.mean_grad_sq,
            mean_std_error: r.mean_std_error,
            bound: r.bound.value,
            bound_noise_floor: r.bound.noise_floor,
            noise_floor: r.noise_floor,
            noise_floor_std_error: r.noise_floor_std_error,
            p_min_avg: r.p_min_avg,
            p_max_hat: r.p_max_hat,
            stepsize_ok: r.bound.stepsize_ok,
            within_bound: r.within_bound(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateCheck {
    pub rows: Vec<RateRow>,
    /// Per sampler: the noise floor never drops, across increasing alphas, by
    /// more than one standard error of the difference.
    pub floor_monotone: Vec<(String, bool)>,
}

impl RateCheck {
    pub fn all_within_bound(&self) -> bool {
        self.rows.iter().all(|r| r.within_bound)
    }

    pub fn floors_monotone(&self) -> bool {
        self.floor_monotone.iter().all(|(_, ok)| *ok)
    }
}

pub fn run_rate_check(cfg: &RateConfig) -> Result<RateCheck> {
    cfg.validate()?;
    let problem = cfg.problem();
    let seeds: Vec<u64> = (0..cfg.seeds).map(|i| cfg.first_seed.wrapping_add(i)).collect();
    let mut alphas = cfg.alphas.clone();
    alphas.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    let mut floor_monotone = Vec::new();
    for sampler in &cfg.samplers {
        let label = sampler_label(sampler);
        let mut sampler_rows = Vec::new();
        for &alpha in &alphas {
            let report = run_rate_experiment(&problem, sampler, alpha, cfg.beta, cfg.steps, &seeds)
                .map_err(|e| match e {
                    RateError::Diverged { .. } => HarnessError::Diverged(format!("{label} at alpha {alpha}: {e}")),
                    RateError::Invalid(e) => HarnessError::Core(e),
                })?;
            sampler_rows.push(RateRow::from_report(label.clone(), alpha, &report));
        }
        let monotone = sampler_rows.windows(2).all(|w| {
            let slack = (w[0].noise_floor_std_error.powi(2) + w[1].noise_floor_std_error.powi(2)).sqrt();
            w[1].noise_floor >= w[0].noise_floor - slack
        });
        floor_monotone.push((label, monotone));
        rows.extend(sampler_rows);
    }
    Ok(RateCheck { rows, floor_monotone })
}
