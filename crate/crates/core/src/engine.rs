//! The gradient-splitting optimizer.
//!
//! Each projectable parameter group has its gradient split by a projector:
//! the projected part is updated by a state-full rule whose buffers live in
//! projected coordinates, the residual by a state-free rule, and the two
//! updates are recombined into one full-rank step. Every `update_gap` steps
//! the projectors are rebuilt and optimizer state is carried across
//! according to a [`StatePolicy`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::linalg::Matrix;
use crate::projection::{
    build_projector, density_count, derive_seed, ProjectionKind, Projector, Schedule, Strategy,
};
use crate::rules::{apply_update, AdamState, Hyper, RuleState, StateFreeRule, StateFullRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Split into state-full and state-free parts.
    Projectable,
    /// Always updated by the state-full rule on the whole tensor.
    AlwaysFull,
    /// Never updated.
    Frozen,
}

impl Role {
    pub fn parse(s: &str) -> Result<Role> {
        match s {
            "projectable" => Ok(Role::Projectable),
            "always_full" => Ok(Role::AlwaysFull),
            "frozen" => Ok(Role::Frozen),
            other => Err(Error::Config(format!("unknown parameter role `{other}`"))),
        }
    }
}

/// How optimizer state follows a change of projector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatePolicy {
    /// Zero the buffers.
    Reset,
    /// Map each buffer through the old projector's `proj_up` and the new
    /// projector's `proj_down`.
    Reproject,
    /// As `Reproject`, then rescale the first moment to its old norm.
    ReprojectNormPreserving,
    /// Leave buffers untouched even though the subspace moved.
    Keep,
}

impl StatePolicy {
    pub fn default_for(kind: ProjectionKind) -> StatePolicy {
        if kind.stores_basis() {
            StatePolicy::Reproject
        } else {
            StatePolicy::Reset
        }
    }
}

fn default_update_gap() -> u64 {
    200
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_projection() -> ProjectionKind {
    ProjectionKind::Blocks
}
fn default_rule_full() -> StateFullRule {
    StateFullRule::AdamW
}
fn default_rule_free() -> StateFreeRule {
    StateFreeRule::SignSgd
}
fn default_strategy() -> Strategy {
    Strategy::Random
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrugalConfig {
    /// Fraction of projectable coordinates (or blocks) that are state-full.
    pub density: f64,
    #[serde(default = "default_update_gap")]
    pub update_gap: u64,
    #[serde(default = "default_lr")]
    pub lr_full: f64,
    /// Defaults to `lr_full`.
    #[serde(default)]
    pub lr_free: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_projection")]
    pub projection: ProjectionKind,
    #[serde(default = "default_rule_full")]
    pub rule_full: StateFullRule,
    #[serde(default = "default_rule_free")]
    pub rule_free: StateFreeRule,
    /// Defaults to [`StatePolicy::default_for`] the projection kind.
    #[serde(default)]
    pub state_policy: Option<StatePolicy>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
    /// Restart the AdamW bias-correction counter when state is reset.
    #[serde(default = "default_true")]
    pub restart_bias_correction: bool,
}

impl Default for FrugalConfig {
    fn default() -> Self {
        Self {
            density: 0.25,
            update_gap: default_update_gap(),
            lr_full: default_lr(),
            lr_free: None,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            projection: default_projection(),
            rule_full: default_rule_full(),
            rule_free: default_rule_free(),
            state_policy: None,
            strategy: default_strategy(),
            seed: 0,
            restart_bias_correction: true,
        }
    }
}

impl FrugalConfig {
    pub fn lr_free(&self) -> f64 {
        self.lr_free.unwrap_or(self.lr_full)
    }

    pub fn state_policy(&self) -> StatePolicy {
        self.state_policy
            .unwrap_or_else(|| StatePolicy::default_for(self.projection))
    }

    pub fn hyper_full(&self) -> Hyper {
        Hyper {
            lr: self.lr_full,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.density) {
            return Err(Error::Config(format!(
                "density must lie in [0, 1], got {}",
                self.density
            )));
        }
        if self.update_gap == 0 {
            return Err(Error::Config("update_gap must be at least 1".into()));
        }
        if !(self.lr_free() > 0.0) {
            return Err(Error::Config(format!(
                "lr_free must be positive, got {}",
                self.lr_free()
            )));
        }
        self.hyper_full()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub param: Matrix,
    pub role: Role,
    /// Blocks are the unit of blockwise selection; several groups may share one.
    pub block: usize,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, param: Matrix, role: Role, block: usize) -> Self {
        Self {
            name: name.into(),
            param,
            role,
            block,
        }
    }
}

/// A named tensor in a model description, before roles are settled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub role: Option<String>,
    #[serde(default)]
    pub block: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub role: Role,
    pub block: usize,
}

/// Assigns a role to every tensor: an entry in `overrides` wins, then the
/// tensor's own tag, then the default (projectable for genuine matrices,
/// always-full for vectors and scalars). Tensors without a block id get
/// their position in the list.
pub fn classify_params(
    tensors: &[TensorSpec],
    overrides: &BTreeMap<String, String>,
) -> Result<Vec<GroupSpec>> {
    for name in overrides.keys() {
        if !tensors.iter().any(|t| &t.name == name) {
            return Err(Error::Config(format!("role override for unknown tensor `{name}`")));
        }
    }
    tensors
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.rows == 0 || t.cols == 0 {
                return Err(Error::Config(format!("tensor `{}` has an empty shape", t.name)));
            }
            let role = match overrides.get(&t.name).or(t.role.as_ref()) {
                Some(s) => Role::parse(s)?,
                None if t.rows > 1 && t.cols > 1 => Role::Projectable,
                None => Role::AlwaysFull,
            };
            Ok(GroupSpec {
                name: t.name.clone(),
                rows: t.rows,
                cols: t.cols,
                role,
                block: t.block.unwrap_or(i),
            })
        })
        .collect()
}

/// Carries optimizer state from `old_proj` to `new_proj`.
///
/// Returns `None` when the new projector selects nothing (no state is
/// needed). Missing old state, or an unchanged subspace, short-circuit the
/// policy: the former starts from zeros, the latter keeps the state as is.
pub fn state_transition(
    old_state: Option<&RuleState>,
    old_proj: Option<&Projector>,
    new_proj: &Projector,
    policy: StatePolicy,
    rule: StateFullRule,
    restart_bias_correction: bool,
) -> Result<Option<RuleState>> {
    if new_proj.is_empty() {
        return Ok(None);
    }
    let (rows, cols) = new_proj.projected_shape();
    let (Some(old), Some(old_proj)) = (old_state, old_proj) else {
        return Ok(Some(rule.init_state(rows, cols)));
    };
    if old.shape() != old_proj.projected_shape() {
        return Err(param_err!(
            "state shape {:?} does not match projector output {:?}",
            old.shape(),
            old_proj.projected_shape()
        ));
    }
    if old_proj.same_subspace(new_proj) {
        return Ok(Some(old.clone()));
    }
    let transport = |s: &Matrix| new_proj.proj_down(&old_proj.proj_up(s)?);
    let next = match policy {
        StatePolicy::Reset => {
            let mut fresh = rule.init_state(rows, cols);
            if let (RuleState::Adam(f), RuleState::Adam(o), false) =
                (&mut fresh, old, restart_bias_correction)
            {
                f.step = o.step;
            }
            fresh
        }
        StatePolicy::Keep => {
            if old.shape() == (rows, cols) {
                old.clone()
            } else {
                rule.init_state(rows, cols)
            }
        }
        StatePolicy::Reproject | StatePolicy::ReprojectNormPreserving => {
            let preserve = policy == StatePolicy::ReprojectNormPreserving;
            let moved_m = |m: &Matrix| -> Result<Matrix> {
                let mut out = transport(m)?;
                if preserve {
                    let new_norm = out.frobenius_norm();
                    if new_norm > 0.0 {
                        out = out.scale(m.frobenius_norm() / new_norm);
                    }
                }
                Ok(out)
            };
            match old {
                RuleState::Momentum(s) => RuleState::Momentum(crate::rules::MomentumState {
                    m: moved_m(&s.m)?,
                }),
                RuleState::Adam(s) => RuleState::Adam(AdamState {
                    m: moved_m(&s.m)?,
                    v: transport(&s.v)?.map(|x| x.max(0.0)),
                    step: s.step,
                }),
            }
        }
    };
    Ok(Some(next))
}

#[derive(Debug, Clone, Default)]
struct GroupSlot {
    projector: Option<Projector>,
    state: Option<RuleState>,
}

/// Allocated optimizer memory of one group, in `f64` values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupCensus {
    pub name: String,
    pub role: Role,
    pub state_floats: usize,
    pub basis_floats: usize,
}

impl GroupCensus {
    pub fn total(&self) -> usize {
        self.state_floats + self.basis_floats
    }
}

#[derive(Debug, Clone)]
pub struct FrugalEngine {
    cfg: FrugalConfig,
    groups: Vec<ParamGroup>,
    slots: Vec<GroupSlot>,
    schedule: Schedule,
    active_blocks: Vec<usize>,
    step: u64,
}

impl FrugalEngine {
    pub fn new(cfg: FrugalConfig, groups: Vec<ParamGroup>) -> Result<Self> {
        cfg.validate()?;
        let mut names = std::collections::BTreeSet::new();
        for g in &groups {
            if !names.insert(g.name.as_str()) {
                return Err(Error::Config(format!("duplicate parameter group `{}`", g.name)));
            }
            g.param.ensure_finite(&g.name)?;
        }
        let slots = groups
            .iter()
            .map(|g| GroupSlot {
                projector: None,
                state: (g.role == Role::AlwaysFull)
                    .then(|| cfg.rule_full.init_state(g.param.rows(), g.param.cols())),
            })
            .collect();
        let schedule = Schedule::new(cfg.update_gap, cfg.strategy, derive_seed(cfg.seed, u64::MAX, 0))?;
        Ok(Self {
            cfg,
            groups,
            slots,
            schedule,
            active_blocks: Vec::new(),
            step: 0,
        })
    }

    pub fn config(&self) -> &FrugalConfig {
        &self.cfg
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.groups.iter().map(|g| &g.param).collect()
    }

    /// Steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Current round, `floor(step / update_gap)` of the last refresh.
    pub fn epoch(&self) -> u64 {
        self.step.saturating_sub(1) / self.cfg.update_gap
    }

    pub fn active_blocks(&self) -> &[usize] {
        &self.active_blocks
    }

    pub fn projector(&self, group: usize) -> Option<&Projector> {
        self.slots.get(group).and_then(|s| s.projector.as_ref())
    }

    pub fn state(&self, group: usize) -> Option<&RuleState> {
        self.slots.get(group).and_then(|s| s.state.as_ref())
    }

    /// Block ids of projectable groups, sorted and deduplicated.
    pub fn block_pool(&self) -> Vec<usize> {
        let mut pool: Vec<usize> = self
            .groups
            .iter()
            .filter(|g| g.role == Role::Projectable)
            .map(|g| g.block)
            .collect();
        pool.sort_unstable();
        pool.dedup();
        pool
    }

    pub fn census(&self) -> Vec<GroupCensus> {
        self.groups
            .iter()
            .zip(&self.slots)
            .map(|(g, s)| GroupCensus {
                name: g.name.clone(),
                role: g.role,
                state_floats: s.state.as_ref().map_or(0, RuleState::float_count),
                basis_floats: s.projector.as_ref().map_or(0, Projector::stored_floats),
            })
            .collect()
    }

    fn check_grads(&self, grads: &[Matrix]) -> Result<()> {
        if grads.len() != self.groups.len() {
            return Err(param_err!(
                "expected {} gradients, got {}",
                self.groups.len(),
                grads.len()
            ));
        }
        for (g, grad) in self.groups.iter().zip(grads) {
            if g.param.shape() != grad.shape() {
                return Err(param_err!(
                    "gradient for `{}` has shape {:?}, parameter is {:?}",
                    g.name,
                    grad.shape(),
                    g.param.shape()
                ));
            }
            if g.role != Role::Frozen && !grad.is_finite() {
                return Err(Error::Data(format!("non-finite gradient for group `{}`", g.name)));
            }
        }
        Ok(())
    }

    fn refresh(&mut self, grads: &[Matrix]) -> Result<()> {
        let k = self.step;
        let epoch = k / self.cfg.update_gap;
        if self.cfg.projection == ProjectionKind::Blocks {
            let pool = self.block_pool();
            let count = density_count(self.cfg.density, pool.len());
            let prev = std::mem::take(&mut self.active_blocks);
            self.active_blocks = self.schedule.advance(k, &pool, count, &prev)?;
        }
        let policy = self.cfg.state_policy();
        for (i, (group, slot)) in self.groups.iter().zip(self.slots.iter_mut()).enumerate() {
            if group.role != Role::Projectable {
                continue;
            }
            let new_proj = match self.cfg.projection {
                ProjectionKind::Blocks => {
                    Projector::block(&self.active_blocks, group.block, group.param.shape(), epoch)
                }
                kind => build_projector(
                    kind,
                    &grads[i],
                    self.cfg.density,
                    derive_seed(self.cfg.seed, i as u64, epoch),
                    epoch,
                )?,
            };
            slot.state = state_transition(
                slot.state.as_ref(),
                slot.projector.as_ref(),
                &new_proj,
                policy,
                self.cfg.rule_full,
                self.cfg.restart_bias_correction,
            )?;
            slot.projector = Some(new_proj);
        }
        Ok(())
    }

    /// One optimizer step given per-group gradients, in group order.
    pub fn frugal_step(&mut self, grads: &[Matrix]) -> Result<()> {
        self.check_grads(grads)?;
        if self.step.is_multiple_of(self.cfg.update_gap) {
            self.refresh(grads)?;
        }
        let hyper = self.cfg.hyper_full();
        let lr_free = self.cfg.lr_free();
        let wd = self.cfg.weight_decay;
        for ((group, slot), grad) in self.groups.iter_mut().zip(&mut self.slots).zip(grads) {
            match group.role {
                Role::Frozen => {}
                Role::AlwaysFull => {
                    let state = slot.state.as_mut().ok_or_else(|| {
                        Error::Internal(format!("always-full group `{}` has no state", group.name))
                    })?;
                    let update = self.cfg.rule_full.update(state, grad, &hyper)?;
                    group.param = apply_update(&group.param, &update, hyper.lr, wd)?;
                }
                Role::Projectable => {
                    let proj = slot.projector.as_ref().ok_or_else(|| {
                        Error::Internal(format!("projectable group `{}` has no projector", group.name))
                    })?;
                    let split = proj.split(grad)?;
                    let mut update = self.cfg.rule_free.update(&split.g_free, lr_free);
                    let decay_lr = if proj.is_empty() {
                        lr_free
                    } else {
                        let state = slot.state.as_mut().ok_or_else(|| {
                            Error::Internal(format!("group `{}` lost its state", group.name))
                        })?;
                        let low = self.cfg.rule_full.update(state, &split.g_full, &hyper)?;
                        update = proj.proj_up(&low)?.add(&update)?;
                        hyper.lr
                    };
                    group.param = apply_update(&group.param, &update, decay_lr, wd)?;
                }
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Human-readable identifier of the current state-full selection.
    pub fn selection_label(&self) -> String {
        if self.cfg.projection == ProjectionKind::Blocks {
            self.active_blocks
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(";")
        } else {
            format!("epoch{}", self.epoch())
        }
    }
}
