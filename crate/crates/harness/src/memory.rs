//! Optimizer-state accounting: closed forms, rounding-aware predictions and
//! the census of a live engine.

use std::collections::BTreeMap;

use frugal_core::engine::{FrugalConfig, FrugalEngine, ParamGroup, Role};
use frugal_core::linalg::Matrix;
use frugal_core::projection::{density_count, ProjectionKind};
use frugal_core::rules::StateFullRule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMemory {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub block: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub projection: ProjectionKind,
    pub density: f64,
    pub buffers: usize,
    pub parameters: usize,
    pub groups: Vec<GroupMemory>,
    /// Rounding-aware float count, basis storage included.
    pub predicted_floats: usize,
    /// The unrounded formula: `buffers * rho * P` for coordinate-type
    /// projectors, `sum r (long + buffers * short)` with `r = rho * short`
    /// for dense bases.
    pub closed_form: f64,
    /// Census of an engine after its first step, when measured.
    pub measured_floats: Option<usize>,
}

/// The seven matrices of one transformer layer: four `h x h` attention
/// projections, then gate and up (`h_ff x h`) and down (`h x h_ff`).
pub fn llama_layer_shapes(h: usize, h_ff: usize) -> Vec<(usize, usize)> {
    vec![(h, h), (h, h), (h, h), (h, h), (h_ff, h), (h_ff, h), (h, h_ff)]
}

/// `layers` copies of [`llama_layer_shapes`], one block per layer.
pub fn layer_stack(layers: usize, h: usize, h_ff: usize) -> Vec<ShapeSpec> {
    const NAMES: [&str; 7] = ["q", "k", "v", "o", "gate", "up", "down"];
    (0..layers)
        .flat_map(|l| {
            llama_layer_shapes(h, h_ff)
                .into_iter()
                .zip(NAMES)
                .map(move |((rows, cols), n)| ShapeSpec {
                    name: format!("layer{l}.{n}"),
                    rows,
                    cols,
                    block: l,
                })
        })
        .collect()
}

/// Unrounded closed form of the state floats for one group.
fn group_closed_form(kind: ProjectionKind, rho: f64, rows: usize, cols: usize, buffers: usize) -> f64 {
    let b = buffers as f64;
    if kind.stores_basis() {
        let (long, short) = (rows.max(cols) as f64, rows.min(cols) as f64);
        rho * short * (long + b * short)
    } else {
        b * rho * (rows * cols) as f64
    }
}

/// Closed form per transformer layer: `24 rho h^2` for coordinate-type
/// projectors and `26 rho h^2` for dense bases when `h_ff = 8h/3`.
pub fn llama_layer_floats(kind: ProjectionKind, rho: f64, h: usize, h_ff: usize) -> f64 {
    llama_layer_shapes(h, h_ff)
        .into_iter()
        .map(|(r, c)| group_closed_form(kind, rho, r, c, 2))
        .sum()
}

/// Predicts the allocated state floats for `groups`. Blockwise selection
/// needs either equal block sizes or the explicit `active` block set.
pub fn memory_floats(
    kind: ProjectionKind,
    rho: f64,
    groups: &[ShapeSpec],
    buffers: usize,
    active: Option<&[usize]>,
) -> Result<MemoryReport> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(HarnessError::Config(format!("density must lie in [0, 1], got {rho}")));
    }
    if groups.iter().any(|g| g.rows == 0 || g.cols == 0) {
        return Err(HarnessError::Config("group shapes must be positive".into()));
    }
    let mut block_sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for g in groups {
        *block_sizes.entry(g.block).or_default() += g.rows * g.cols;
    }
    let active: Vec<usize> = match (kind, active) {
        (ProjectionKind::Blocks, Some(a)) => a.to_vec(),
        (ProjectionKind::Blocks, None) => {
            let mut sizes = block_sizes.values();
            let first = sizes.next().copied();
            if sizes.any(|s| Some(*s) != first) {
                return Err(HarnessError::Config(
                    "blocks of unequal size need an explicit active set".into(),
                ));
            }
            let count = density_count(rho, block_sizes.len());
            block_sizes.keys().take(count).copied().collect()
        }
        _ => Vec::new(),
    };
    let per_group: Vec<GroupMemory> = groups
        .iter()
        .map(|g| {
            let (long, short) = (g.rows.max(g.cols), g.rows.min(g.cols));
            let predicted = match kind {
                ProjectionKind::Blocks => {
                    if active.contains(&g.block) {
                        buffers * g.rows * g.cols
                    } else {
                        0
                    }
                }
                ProjectionKind::RandK => buffers * density_count(rho, g.rows * g.cols),
                ProjectionKind::Columns => buffers * g.rows * density_count(rho, g.cols),
                ProjectionKind::Svd | ProjectionKind::RandomOrtho => {
                    let r = density_count(rho, short);
                    r * long + buffers * r * short
                }
            };
            GroupMemory {
                name: g.name.clone(),
                rows: g.rows,
                cols: g.cols,
                block: g.block,
                predicted,
            }
        })
        .collect();
    Ok(MemoryReport {
        projection: kind,
        density: rho,
        buffers,
        parameters: groups.iter().map(|g| g.rows * g.cols).sum(),
        predicted_floats: per_group.iter().map(|g| g.predicted).sum(),
        closed_form: groups
            .iter()
            .map(|g| group_closed_form(kind, rho, g.rows, g.cols, buffers))
            .sum(),
        groups: per_group,
        measured_floats: None,
    })
}

/// Builds an engine over `groups`, takes one step on Gaussian gradients and
/// returns the census total together with the blocks that were selected.
pub fn measure_floats(cfg: &FrugalConfig, groups: &[ShapeSpec]) -> Result<(usize, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gaussian = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let params: Vec<ParamGroup> = groups
        .iter()
        .map(|g| ParamGroup::new(g.name.clone(), gaussian(g.rows, g.cols), Role::Projectable, g.block))
        .collect();
    let grads: Vec<Matrix> = groups.iter().map(|g| gaussian(g.rows, g.cols)).collect();
    let mut engine = FrugalEngine::new(cfg.clone(), params)?;
    engine.frugal_step(&grads)?;
    let total = engine.census().iter().map(|c| c.total()).sum();
    Ok((total, engine.active_blocks().to_vec()))
}

fn default_rule() -> StateFullRule {
    StateFullRule::AdamW
}

/// Input of the `memory` subcommand: a stack of transformer-shaped layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub projection: ProjectionKind,
    pub densities: Vec<f64>,
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    #[serde(default = "default_rule")]
    pub rule_full: StateFullRule,
    /// Also build an engine and count its allocations.
    #[serde(default)]
    pub measure: bool,
    #[serde(default)]
    pub seed: u64,
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.ffn == 0 || self.densities.is_empty() {
            return Err(HarnessError::Config(
                "memory config needs positive layers, hidden, ffn and at least one density".into(),
            ));
        }
        let per_layer = (4 * self.hidden).saturating_mul(self.hidden)
            .saturating_add((3 * self.hidden).saturating_mul(self.ffn));
        let limit = if self.measure { crate::config::MAX_ELEMENTS } else { usize::MAX / 8 };
        if per_layer.saturating_mul(self.layers) > limit {
            return Err(HarnessError::Config("model too large to account".into()));
        }
        if self.densities.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(HarnessError::Config("densities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn parse_memory_config(text: &str) -> Result<MemoryConfig> {
    let cfg: MemoryConfig = crate::config::parse_json(text, "memory config")?;
    cfg.validate()?;
    Ok(cfg)
}

/// One report per density.
pub fn run_memory(cfg: &MemoryConfig) -> Result<Vec<MemoryReport>> {
    cfg.validate()?;
    let groups = layer_stack(cfg.layers, cfg.hidden, cfg.ffn);
    cfg.densities
        .iter()
        .map(|&rho| {
            let (measured, active) = if cfg.measure {
                let engine_cfg = FrugalConfig {
                    density: rho,
                    projection: cfg.projection,
                    rule_full: cfg.rule_full,
                    seed: cfg.seed,
                    ..FrugalConfig::default()
                };
                let (m, a) = measure_floats(&engine_cfg, &groups)?;
                (Some(m), Some(a))
            } else {
                (None, None)
            };
            let mut report =
                memory_floats(cfg.projection, rho, &groups, cfg.rule_full.buffers(), active.as_deref())?;
            report.measured_floats = measured;
            Ok(report)
        })
        .collect()
}
