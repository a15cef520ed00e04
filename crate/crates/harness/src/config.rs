//! JSON run configurations.

use std::collections::BTreeMap;

use frugal_core::coord::JSampler;
use frugal_core::engine::{classify_params, FrugalConfig, TensorSpec};
use frugal_core::linalg::Matrix;
use frugal_core::problems::{Activation, Dataset, LeastSquares, NoisyQuadratic, Problem, QuadraticFrob, TinyMlp};
use frugal_core::rules::{Hyper, StateFreeRule, StateFullRule};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Upper bound on the number of floats a configured problem may allocate.
pub const MAX_ELEMENTS: usize = 1 << 24;

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    QuadraticFrob {
        rows: usize,
        cols: usize,
    },
    NoisyQuadratic {
        curvatures: Vec<f64>,
        noise_std: Vec<f64>,
        #[serde(default)]
        x0: Option<Vec<f64>>,
    },
    LeastSquares {
        samples: usize,
        features: usize,
        #[serde(default = "default_ls_noise")]
        noise: f64,
        batch_size: usize,
        #[serde(default)]
        data_seed: u64,
    },
    TinyMlp {
        #[serde(default = "default_dims")]
        dims: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default)]
        data_seed: u64,
    },
}

fn default_ls_noise() -> f64 {
    0.1
}
fn default_dims() -> Vec<usize> {
    vec![2, 16, 2]
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_samples() -> usize {
    512
}
fn default_separation() -> f64 {
    0.75
}
fn default_batch() -> usize {
    64
}

impl ProblemSpec {
    fn element_count(&self) -> usize {
        match self {
            ProblemSpec::QuadraticFrob { rows, cols } => rows.saturating_mul(*cols),
            ProblemSpec::NoisyQuadratic { curvatures, .. } => curvatures.len(),
            ProblemSpec::LeastSquares { samples, features, .. } => samples.saturating_mul(*features),
            ProblemSpec::TinyMlp { dims, samples, .. } => {
                let weights = dims
                    .windows(2)
                    .fold(0usize, |acc, w| acc.saturating_add(w[0].saturating_mul(w[1] + 1)));
                weights.saturating_add(samples.saturating_mul(*dims.first().unwrap_or(&0)))
            }
        }
    }

    pub fn build(&self) -> Result<Problem> {
        if self.element_count() > MAX_ELEMENTS {
            return Err(config_err(format!("problem exceeds {MAX_ELEMENTS} elements")));
        }
        let problem = match self {
            ProblemSpec::QuadraticFrob { rows, cols } => {
                if *rows == 0 || *cols == 0 {
                    return Err(config_err("quadratic_frob needs positive rows and cols"));
                }
                Problem::QuadraticFrob(QuadraticFrob { rows: *rows, cols: *cols })
            }
            ProblemSpec::NoisyQuadratic { curvatures, noise_std, x0 } => {
                let q = NoisyQuadratic {
                    curvatures: curvatures.clone(),
                    noise_std: noise_std.clone(),
                    x0: x0.clone(),
                };
                q.validate()?;
                Problem::NoisyQuadratic(q)
            }
            ProblemSpec::LeastSquares { samples, features, noise, batch_size, data_seed } => {
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err(config_err("least_squares noise must be a non-negative number"));
                }
                Problem::LeastSquares(LeastSquares::synthetic(*data_seed, *samples, *features, *noise, *batch_size)?)
            }
            ProblemSpec::TinyMlp { dims, activation, samples, separation, batch_size, data_seed } => {
                if dims.is_empty() || !separation.is_finite() {
                    return Err(config_err("tiny_mlp needs layer dims and a finite separation"));
                }
                if *dims.last().unwrap() < 2 {
                    return Err(config_err("tiny_mlp needs at least two output classes"));
                }
                let data = Dataset::gaussian_blobs(*data_seed, *samples, dims[0], *separation);
                Problem::TinyMlp(TinyMlp::new(dims.clone(), *activation, data, *batch_size)?)
            }
        };
        Ok(problem)
    }
}

/// A non-split optimizer applied to every group, used as a reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlainRule {
    Adamw,
    Sgdm,
    Lion,
    Sgd,
    Signsgd,
}

impl PlainRule {
    pub fn stateful(self) -> Option<StateFullRule> {
        match self {
            PlainRule::Adamw => Some(StateFullRule::AdamW),
            PlainRule::Sgdm => Some(StateFullRule::Sgdm),
            PlainRule::Lion => Some(StateFullRule::Lion),
            PlainRule::Sgd | PlainRule::Signsgd => None,
        }
    }

    pub fn stateless(self) -> Option<StateFreeRule> {
        match self {
            PlainRule::Sgd => Some(StateFreeRule::Sgd),
            PlainRule::Signsgd => Some(StateFreeRule::SignSgd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Frugal {
        engine: FrugalConfig,
        /// Role overrides by tensor name.
        #[serde(default)]
        roles: BTreeMap<String, String>,
    },
    Plain {
        rule: PlainRule,
        #[serde(default)]
        hyper: Hyper,
    },
    /// Coordinate-wise momentum over all parameters flattened into one vector.
    CoordMomentum {
        alpha: f64,
        beta: f64,
        sampler: JSampler,
    },
}

impl OptimizerSpec {
    pub fn label(&self) -> String {
        match self {
            OptimizerSpec::Frugal { engine, .. } => format!(
                "frugal[{}+{},{},rho={}]",
                serde_name(&engine.rule_full),
                serde_name(&engine.rule_free),
                serde_name(&engine.projection),
                engine.density
            ),
            OptimizerSpec::Plain { rule, .. } => serde_name(rule),
            OptimizerSpec::CoordMomentum { .. } => "coord_momentum".to_string(),
        }
    }
}

fn serde_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

fn default_true() -> bool {
    true
}
fn default_metric_every() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub optimizer: OptimizerSpec,
    pub steps: u64,
    pub seeds: Vec<u64>,
    /// Output directory; the CLI `--out` flag overrides it.
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default = "default_metric_every")]
    pub metric_every: u64,
    /// Minibatch/noisy gradients when true, exact gradients otherwise.
    #[serde(default = "default_true")]
    pub stochastic: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<Problem> {
        if self.steps == 0 {
            return Err(config_err("`steps` must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("`seeds` must list at least one seed"));
        }
        if self.metric_every == 0 {
            return Err(config_err("`metric_every` must be positive"));
        }
        let problem = self.problem.build()?;
        match &self.optimizer {
            OptimizerSpec::Frugal { engine, roles } => {
                engine.validate().map_err(|e| config_err(e.to_string()))?;
                classify_params(&problem.tensor_specs(), roles).map_err(|e| config_err(e.to_string()))?;
            }
            OptimizerSpec::Plain { hyper, .. } => hyper.validate().map_err(|e| config_err(e.to_string()))?,
            OptimizerSpec::CoordMomentum { alpha, beta, sampler } => {
                if !(*alpha > 0.0 && alpha.is_finite()) || !(0.0..1.0).contains(beta) {
                    return Err(config_err("coord_momentum needs alpha > 0 and beta in [0, 1)"));
                }
                let d: usize = problem.tensor_specs().iter().map(|s| s.rows * s.cols).sum();
                sampler.validate(d).map_err(|e| config_err(e.to_string()))?;
            }
        }
        Ok(problem)
    }
}

pub fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| config_err(format!("{what}: {e}")))
}

/// Parses and validates a run configuration.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = parse_json(text, "run config")?;
    cfg.validate()?;
    Ok(cfg)
}

/// Named tensors with optional role tags plus role overrides, as accepted by
/// `classify_params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescription {
    pub tensors: Vec<TensorSpec>,
    #[serde(default)]
    pub overrides: BTreeMap<String, String>,
}

pub fn parse_model_description(text: &str) -> Result<Vec<frugal_core::engine::GroupSpec>> {
    let desc: ModelDescription = parse_json(text, "model description")?;
    classify_params(&desc.tensors, &desc.overrides).map_err(|e| config_err(e.to_string()))
}

/// Flattens parameter groups into one vector, in group order.
pub fn flatten(params: &[Matrix]) -> Vec<f64> {
    params.iter().flat_map(|p| p.as_slice().iter().copied()).collect()
}

/// Inverse of [`flatten`] for the given shapes.
pub fn unflatten(values: &[f64], shapes: &[(usize, usize)]) -> Vec<Matrix> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let m = Matrix::new(r, c, values[offset..offset + r * c].to_vec()).expect("consistent shapes");
            offset += r * c;
            m
        })
        .collect()
}
