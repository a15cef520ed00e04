//! Projection-only training of `||W||_F^2` with SVD bases, comparing
//! momentum that is re-projected at each refresh against momentum kept in
//! stale coordinates.

use frugal_core::engine::{FrugalConfig, FrugalEngine, ParamGroup, Role, StatePolicy};
use frugal_core::linalg::Matrix;
use frugal_core::projection::ProjectionKind;
use frugal_core::rules::{StateFreeRule, StateFullRule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub size: usize,
    pub ranks: Vec<usize>,
    pub update_gap: u64,
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub lrs: Vec<f64>,
    pub beta: f64,
    pub checkpoint_every: u64,
    /// Checkpoints at or before this step are ignored by the verdict.
    pub burn_in: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            size: 10,
            ranks: vec![3, 6],
            update_gap: 10,
            seeds: (0..5).collect(),
            steps: 500,
            lrs: vec![0.01, 0.03, 0.1],
            beta: 0.9,
            checkpoint_every: 10,
            burn_in: 50,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.size == 0 || self.size > 512 {
            return bad("toy size must lie in 1..=512");
        }
        if self.ranks.is_empty() || self.ranks.iter().any(|&r| r == 0 || r > self.size) {
            return bad("ranks must lie in 1..=size");
        }
        if self.update_gap == 0 || self.steps == 0 || self.checkpoint_every == 0 {
            return bad("update_gap, steps and checkpoint_every must be positive");
        }
        if self.steps > 1_000_000 {
            return bad("at most 10^6 steps");
        }
        if self.seeds.is_empty() || self.lrs.is_empty() {
            return bad("need at least one seed and one learning rate");
        }
        if self.lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyPolicy {
    Reproject,
    NoReproject,
}

impl ToyPolicy {
    fn state_policy(self) -> StatePolicy {
        match self {
            ToyPolicy::Reproject => StatePolicy::ReprojectNormPreserving,
            ToyPolicy::NoReproject => StatePolicy::Keep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyCurve {
    pub rank: usize,
    pub policy: ToyPolicy,
    pub lr: f64,
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub diverged_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyVerdict {
    pub rank: usize,
    /// Learning rates at which re-projection is never worse after burn-in.
    pub passing_lrs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub curves: Vec<ToyCurve>,
    pub verdicts: Vec<ToyVerdict>,
}

impl ToyReport {
    pub fn all_ranks_pass(&self) -> bool {
        self.verdicts.iter().all(|v| !v.passing_lrs.is_empty())
    }

    pub fn curve(&self, rank: usize, policy: ToyPolicy, lr: f64) -> Option<&ToyCurve> {
        self.curves
            .iter()
            .find(|c| c.rank == rank && c.policy == policy && c.lr == lr)
    }
}

/// Loss `||W||^2` at every checkpoint of one run; `None` on divergence.
pub fn toy_trajectory(cfg: &ToyConfig, rank: usize, policy: ToyPolicy, lr: f64, seed: u64) -> Result<Option<Vec<f64>>> {
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = Matrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let engine_cfg = FrugalConfig {
        density: rank as f64 / n as f64,
        update_gap: cfg.update_gap,
        lr_full: lr,
        beta1: cfg.beta,
        projection: ProjectionKind::Svd,
        rule_full: StateFullRule::Sgdm,
        rule_free: StateFreeRule::None,
        state_policy: Some(policy.state_policy()),
        seed,
        ..FrugalConfig::default()
    };
    let initial = w0.norm_sq();
    let mut engine = FrugalEngine::new(engine_cfg, vec![ParamGroup::new("w", w0, Role::Projectable, 0)])?;
    let mut losses = Vec::new();
    for k in 0..=cfg.steps {
        let w = engine.params()[0].clone();
        let loss = w.norm_sq();
        if !loss.is_finite() || loss > 1e12 * initial.max(1.0) {
            return Ok(None);
        }
        if k % cfg.checkpoint_every == 0 {
            losses.push(loss);
        }
        if k < cfg.steps {
            engine.frugal_step(&[w.scale(2.0)])?;
        }
    }
    Ok(Some(losses))
}

/// Runs every rank, policy, learning rate and seed.
pub fn run_reproj_toy(cfg: &ToyConfig) -> Result<ToyReport> {
    cfg.validate()?;
    let checkpoints: Vec<u64> = (0..=cfg.steps).step_by(cfg.checkpoint_every as usize).collect();
    let mut curves = Vec::new();
    for &rank in &cfg.ranks {
        for policy in [ToyPolicy::Reproject, ToyPolicy::NoReproject] {
            for &lr in &cfg.lrs {
                let mut runs = Vec::new();
                let mut diverged_seeds = Vec::new();
                for &seed in &cfg.seeds {
                    match toy_trajectory(cfg, rank, policy, lr, seed)? {
                        Some(l) => runs.push(l),
                        None => diverged_seeds.push(seed),
                    }
                }
                let (mean, std) = mean_std_columns(&runs, checkpoints.len());
                curves.push(ToyCurve {
                    rank,
                    policy,
                    lr,
                    steps: checkpoints.clone(),
                    mean,
                    std,
                    diverged_seeds,
                });
            }
        }
    }
    let verdicts = cfg
        .ranks
        .iter()
        .map(|&rank| ToyVerdict {
            rank,
            passing_lrs: cfg
                .lrs
                .iter()
                .copied()
                .filter(|&lr| {
                    let find = |p| curves.iter().find(|c: &&ToyCurve| c.rank == rank && c.policy == p && c.lr == lr);
                    match (find(ToyPolicy::Reproject), find(ToyPolicy::NoReproject)) {
                        (Some(a), Some(b)) => reproject_never_worse(a, b, cfg.burn_in),
                        _ => false,
                    }
                })
                .collect(),
        })
        .collect();
    Ok(ToyReport { curves, verdicts })
}

fn reproject_never_worse(reproj: &ToyCurve, stale: &ToyCurve, burn_in: u64) -> bool {
    if !reproj.diverged_seeds.is_empty() {
        return false;
    }
    reproj
        .steps
        .iter()
        .zip(reproj.mean.iter().zip(&stale.mean))
        .filter(|(s, _)| **s > burn_in)
        .all(|(_, (a, b))| a <= b || !b.is_finite())
}

fn mean_std_columns(runs: &[Vec<f64>], len: usize) -> (Vec<f64>, Vec<f64>) {
    if runs.is_empty() {
        return (vec![f64::NAN; len], vec![f64::NAN; len]);
    }
    let n = runs.len() as f64;
    (0..len)
        .map(|i| {
            let mean = runs.iter().map(|r| r[i]).sum::<f64>() / n;
            let var = if runs.len() > 1 {
                runs.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(beta: f64) -> ToyConfig {
        ToyConfig {
            steps: 60,
            seeds: vec![0, 1],
            lrs: vec![0.03],
            beta,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn full_rank_policies_coincide() {
        let cfg = short(0.9);
        let a = toy_trajectory(&cfg, 10, ToyPolicy::Reproject, 0.03, 0).unwrap().unwrap();
        let b = toy_trajectory(&cfg, 10, ToyPolicy::NoReproject, 0.03, 0).unwrap().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_momentum_policies_coincide() {
        let cfg = short(0.0);
        let a = toy_trajectory(&cfg, 3, ToyPolicy::Reproject, 0.03, 1).unwrap().unwrap();
        let b = toy_trajectory(&cfg, 3, ToyPolicy::NoReproject, 0.03, 1).unwrap().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(ToyConfig { ranks: vec![11], ..ToyConfig::default() }.validate().is_err());
        assert!(ToyConfig { beta: 1.0, ..ToyConfig::default() }.validate().is_err());
        assert!(ToyConfig::default().validate().is_ok());
    }
}
