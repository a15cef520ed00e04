//! The `train` driver: runs one optimizer on one problem for every seed and
//! records metrics.

use std::path::Path;
use std::time::Instant;

use frugal_core::coord::{alg2_step_masked, sample_j, CoordState, JSampler};
use frugal_core::engine::{classify_params, FrugalConfig, FrugalEngine, ParamGroup};
use frugal_core::linalg::Matrix;
use frugal_core::problems::Problem;
use frugal_core::projection::derive_seed;
use frugal_core::rules::{apply_update, Hyper, RuleState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{flatten, unflatten, OptimizerSpec, PlainRule, RunConfig};
use crate::error::{HarnessError, Result};

pub const METRICS_HEADER: [&str; 7] = ["step", "loss", "grad_norm_sq", "lr_full", "lr_free", "selection", "elapsed_ms"];

/// Parameters beyond this magnitude count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub lr_full: f64,
    pub lr_free: f64,
    pub selection: String,
    pub elapsed_ms: Option<f64>,
}

impl MetricsRow {
    fn record(&self) -> [String; 7] {
        [
            self.step.to_string(),
            self.loss.to_string(),
            self.grad_norm_sq.to_string(),
            self.lr_full.to_string(),
            self.lr_free.to_string(),
            self.selection.clone(),
            self.elapsed_ms.map(|t| format!("{t:.3}")).unwrap_or_default(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    #[serde(skip)]
    pub rows: Vec<MetricsRow>,
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    pub diverged_at: Option<u64>,
    /// Optimizer-state floats held at the end (engine runs only).
    pub state_floats: Option<usize>,
    #[serde(skip)]
    pub final_params: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub optimizer: String,
    pub problem: String,
    pub steps: u64,
    pub seeds: Vec<u64>,
    pub final_loss_mean: f64,
    pub final_loss_std: f64,
    pub diverged: bool,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Fill the `elapsed_ms` column; makes output non-reproducible.
    pub wall_clock: bool,
}

enum Runner {
    Engine(FrugalEngine),
    Plain {
        rule: PlainRule,
        hyper: Hyper,
        params: Vec<Matrix>,
        states: Vec<Option<RuleState>>,
    },
    Coord {
        state: CoordState,
        shapes: Vec<(usize, usize)>,
        alpha: f64,
        beta: f64,
        sampler: JSampler,
        rng: ChaCha8Rng,
        last_set: usize,
    },
}

impl Runner {
    fn new(spec: &OptimizerSpec, problem: &Problem, seed: u64) -> Result<Self> {
        let params = problem.init_params(seed);
        Ok(match spec {
            OptimizerSpec::Frugal { engine, roles } => {
                let groups = classify_params(&problem.tensor_specs(), roles)?
                    .into_iter()
                    .zip(params)
                    .map(|(g, p)| ParamGroup::new(g.name, p, g.role, g.block))
                    .collect();
                let cfg = FrugalConfig {
                    seed: derive_seed(engine.seed, seed, 0),
                    ..engine.clone()
                };
                Runner::Engine(FrugalEngine::new(cfg, groups)?)
            }
            OptimizerSpec::Plain { rule, hyper } => Runner::Plain {
                rule: *rule,
                hyper: *hyper,
                states: params
                    .iter()
                    .map(|p| rule.stateful().map(|r| r.init_state(p.rows(), p.cols())))
                    .collect(),
                params,
            },
            OptimizerSpec::CoordMomentum { alpha, beta, sampler } => Runner::Coord {
                shapes: params.iter().map(Matrix::shape).collect(),
                state: CoordState::new(flatten(&params)),
                alpha: *alpha,
                beta: *beta,
                sampler: sampler.clone(),
                rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0)),
                last_set: 0,
            },
        })
    }

    fn params(&self) -> Vec<Matrix> {
        match self {
            Runner::Engine(e) => e.params().into_iter().cloned().collect(),
            Runner::Plain { params, .. } => params.clone(),
            Runner::Coord { state, shapes, .. } => unflatten(&state.x, shapes),
        }
    }

    fn lrs(&self) -> (f64, f64) {
        match self {
            Runner::Engine(e) => (e.config().lr_full, e.config().lr_free()),
            Runner::Plain { hyper, .. } => (hyper.lr, hyper.lr),
            Runner::Coord { alpha, .. } => (*alpha, *alpha),
        }
    }

    fn selection(&self, step: u64) -> String {
        match self {
            Runner::Engine(e) if step > 0 => e.selection_label(),
            Runner::Coord { last_set, .. } if step > 0 => format!("{last_set}"),
            _ => String::new(),
        }
    }

    fn state_floats(&self) -> Option<usize> {
        match self {
            Runner::Engine(e) => Some(e.census().iter().map(|c| c.total()).sum()),
            Runner::Plain { states, .. } => Some(states.iter().flatten().map(RuleState::float_count).sum()),
            Runner::Coord { state, .. } => Some(state.m.len()),
        }
    }

    fn step(&mut self, grads: &[Matrix]) -> Result<()> {
        match self {
            Runner::Engine(e) => e.frugal_step(grads)?,
            Runner::Plain { rule, hyper, params, states } => {
                for ((p, s), g) in params.iter_mut().zip(states.iter_mut()).zip(grads) {
                    let update = match (rule.stateful(), s.as_mut()) {
                        (Some(r), Some(state)) => r.update(state, g, hyper)?,
                        _ => rule.stateless().expect("stateless rule").update(g, hyper.lr),
                    };
                    *p = apply_update(p, &update, hyper.lr, hyper.weight_decay)?;
                }
            }
            Runner::Coord { state, alpha, beta, sampler, rng, last_set, .. } => {
                let g = flatten(grads);
                let draw = sample_j(sampler, state.k + 1, g.len(), rng);
                *last_set = draw.mask.iter().filter(|&&b| b).count();
                alg2_step_masked(state, &g, &draw.mask, *alpha, *beta)?;
            }
        }
        Ok(())
    }
}

fn run_seed(cfg: &RunConfig, problem: &Problem, seed: u64, opts: RunOptions) -> Result<SeedRun> {
    let mut runner = Runner::new(&cfg.optimizer, problem, seed)?;
    let mut grad_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0));
    let (lr_full, lr_free) = runner.lrs();
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut diverged_at = None;
    let mut last = (f64::NAN, f64::NAN);
    for k in 0..=cfg.steps {
        let params = runner.params();
        let blown = params.iter().any(|p| !p.is_finite() || p.max_abs() > DIVERGENCE_LIMIT);
        if k % cfg.metric_every == 0 || k == cfg.steps || blown {
            let exact = problem.eval(&params, None);
            let (loss, gsq) = match &exact {
                Ok(ev) => (ev.loss, ev.grad_norm_sq()),
                Err(_) => (f64::NAN, f64::NAN),
            };
            last = (loss, gsq);
            rows.push(MetricsRow {
                step: k,
                loss,
                grad_norm_sq: gsq,
                lr_full,
                lr_free,
                selection: runner.selection(k),
                elapsed_ms: opts.wall_clock.then(|| start.elapsed().as_secs_f64() * 1e3),
            });
            if blown || !loss.is_finite() || !gsq.is_finite() {
                diverged_at = Some(k);
                break;
            }
        }
        if k == cfg.steps {
            break;
        }
        let ev = if cfg.stochastic {
            problem.eval(&params, Some(&mut grad_rng))?
        } else {
            problem.eval(&params, None)?
        };
        match runner.step(&ev.grads) {
            Ok(()) => {}
            Err(HarnessError::Core(frugal_core::Error::Data(_))) => {
                diverged_at = Some(k);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SeedRun {
        seed,
        rows,
        final_loss: last.0,
        final_grad_norm_sq: last.1,
        diverged_at,
        state_floats: runner.state_floats(),
        final_params: runner.params(),
    })
}

pub fn problem_name(problem: &Problem) -> &'static str {
    match problem {
        Problem::QuadraticFrob(_) => "quadratic_frob",
        Problem::NoisyQuadratic(_) => "noisy_quadratic",
        Problem::LeastSquares(_) => "least_squares",
        Problem::TinyMlp(_) => "tiny_mlp",
    }
}

/// Runs every seed of `cfg`. Divergence is recorded in the summary rather
/// than returned as an error.
pub fn run_experiment(cfg: &RunConfig, opts: RunOptions) -> Result<Summary> {
    let problem = cfg.validate()?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&seed| run_seed(cfg, &problem, seed, opts))
        .collect::<Result<Vec<_>>>()?;
    let finals: Vec<f64> = runs.iter().map(|r| r.final_loss).collect();
    let n = finals.len() as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let std = if finals.len() > 1 {
        (finals.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(Summary {
        optimizer: cfg.optimizer.label(),
        problem: problem_name(&problem).to_string(),
        steps: cfg.steps,
        seeds: cfg.seeds.clone(),
        final_loss_mean: mean,
        final_loss_std: std,
        diverged: runs.iter().any(|r| r.diverged_at.is_some()),
        runs,
    })
}

/// Metrics of one seed as UTF-8 CSV with LF line endings.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Serializes with object keys in sorted order.
pub fn sorted_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&sort_keys(v))?;
    s.push('\n');
    Ok(s)
}

fn sort_keys(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

pub fn metrics_file_name(seed: u64) -> String {
    format!("metrics_seed{seed}.csv")
}

/// Writes one metrics CSV per seed and `summary.json` into `dir`.
pub fn write_outputs(summary: &Summary, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for run in &summary.runs {
        std::fs::write(dir.join(metrics_file_name(run.seed)), metrics_csv(&run.rows)?)?;
    }
    std::fs::write(dir.join("summary.json"), sorted_json(summary)?)?;
    Ok(())
}
