//! Optimizer that splits each gradient into a low-dimensional part handled
//! by a stateful rule (AdamW, SGD with momentum, Lion) and a residual handled
//! by a state-free rule (SGD, signSGD).
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense matrices, truncated SVD, orthonormal bases.
//! - [`rules`]: the base update rules.
//! - [`projection`]: subspace selectors and the refresh schedule.
//! - [`engine`]: the split-update optimizer over named parameter groups.
//! - [`coord`]: coordinate-wise momentum and its convergence bound.
//! - [`problems`]: small objectives used by tests and experiments.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coord;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod problems;
pub mod projection;
pub mod rules;

pub use engine::{
    classify_params, state_transition, FrugalConfig, FrugalEngine, GroupCensus, ParamGroup, Role,
    StatePolicy, TensorSpec,
};
pub use error::{Error, Result};
pub use linalg::{Matrix, OrthoBasis};
pub use projection::{ProjectionKind, Projector, Schedule, Side, SplitGradient, Strategy};
pub use rules::{Hyper, RuleState, StateFreeRule, StateFullRule};
