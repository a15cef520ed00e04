//! Elementwise update rules.
//!
//! State-free rules ([`StateFreeRule`]) keep no buffers between steps;
//! state-full rules ([`StateFullRule`]) carry a [`RuleState`]. Each rule is
//! split into an `*_update` function that returns the additive update
//! (without weight decay) and a `*_step` convenience that applies it to a
//! parameter together with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl Hyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(param_err!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(param_err!(
                "betas must lie in [0, 1), got ({}, {})",
                self.beta1,
                self.beta2
            ));
        }
        if !(self.eps > 0.0) {
            return Err(param_err!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(param_err!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        Ok(())
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub m: Matrix,
}

impl MomentumState {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
        }
    }
}

/// Optimizer state of a state-full rule.
#[derive(Debug, Clone, PartialEq)]
pub enum RuleState {
    Momentum(MomentumState),
    Adam(AdamState),
}

impl RuleState {
    /// Number of `f64` values held.
    pub fn float_count(&self) -> usize {
        match self {
            RuleState::Momentum(s) => s.m.len(),
            RuleState::Adam(s) => s.m.len() + s.v.len(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            RuleState::Momentum(s) => s.m.shape(),
            RuleState::Adam(s) => s.m.shape(),
        }
    }
}

fn check_shapes(param: &Matrix, grad: &Matrix) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(param_err!(
            "parameter {:?} and gradient {:?} shapes differ",
            param.shape(),
            grad.shape()
        ));
    }
    Ok(())
}

fn check_state(state: &Matrix, grad: &Matrix) -> Result<()> {
    if state.shape() != grad.shape() {
        return Err(param_err!(
            "state {:?} and gradient {:?} shapes differ",
            state.shape(),
            grad.shape()
        ));
    }
    Ok(())
}

/// `param + update - lr * wd * param`.
pub fn apply_update(param: &Matrix, update: &Matrix, lr: f64, weight_decay: f64) -> Result<Matrix> {
    check_shapes(param, update)?;
    if weight_decay == 0.0 {
        return param.add(update);
    }
    let decay = lr * weight_decay;
    param.zip_map(update, |p, u| p + u - decay * p)
}

pub fn sgd_update(grad: &Matrix, lr: f64) -> Matrix {
    grad.map(|g| -lr * g)
}

pub fn signsgd_update(grad: &Matrix, lr: f64) -> Matrix {
    grad.map(|g| -lr * sign(g))
}

pub fn sgdm_update(state: &mut MomentumState, grad: &Matrix, hyper: &Hyper) -> Result<Matrix> {
    check_state(&state.m, grad)?;
    let beta = hyper.beta1;
    state.m = state.m.zip_map(grad, |m, g| (1.0 - beta) * g + beta * m)?;
    Ok(state.m.map(|m| -hyper.lr * m))
}

pub fn adamw_update(state: &mut AdamState, grad: &Matrix, hyper: &Hyper) -> Result<Matrix> {
    check_state(&state.m, grad)?;
    check_state(&state.v, grad)?;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    state.m = state.m.zip_map(grad, |m, g| b1 * m + (1.0 - b1) * g)?;
    state.v = state.v.zip_map(grad, |v, g| b2 * v + (1.0 - b2) * g * g)?;
    let (lr, eps) = (hyper.lr, hyper.eps);
    state.m.zip_map(&state.v, |m, v| {
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        -lr * m_hat / (v_hat.sqrt() + eps)
    })
}

pub fn lion_update(state: &mut MomentumState, grad: &Matrix, hyper: &Hyper) -> Result<Matrix> {
    check_state(&state.m, grad)?;
    let (b1, b2, lr) = (hyper.beta1, hyper.beta2, hyper.lr);
    let update = state.m.zip_map(grad, |m, g| -lr * sign(b1 * m + (1.0 - b1) * g))?;
    state.m = state.m.zip_map(grad, |m, g| b2 * m + (1.0 - b2) * g)?;
    Ok(update)
}

pub fn sgd_step(param: &Matrix, grad: &Matrix, hyper: &Hyper) -> Result<Matrix> {
    check_shapes(param, grad)?;
    apply_update(param, &sgd_update(grad, hyper.lr), hyper.lr, hyper.weight_decay)
}

pub fn signsgd_step(param: &Matrix, grad: &Matrix, hyper: &Hyper) -> Result<Matrix> {
    check_shapes(param, grad)?;
    apply_update(param, &signsgd_update(grad, hyper.lr), hyper.lr, hyper.weight_decay)
}

pub fn sgdm_step(
    param: &Matrix,
    state: &MomentumState,
    grad: &Matrix,
    hyper: &Hyper,
) -> Result<(Matrix, MomentumState)> {
    check_shapes(param, grad)?;
    let mut state = state.clone();
    let update = sgdm_update(&mut state, grad, hyper)?;
    Ok((apply_update(param, &update, hyper.lr, hyper.weight_decay)?, state))
}

pub fn adamw_step(
    param: &Matrix,
    state: &AdamState,
    grad: &Matrix,
    hyper: &Hyper,
) -> Result<(Matrix, AdamState)> {
    check_shapes(param, grad)?;
    let mut state = state.clone();
    let update = adamw_update(&mut state, grad, hyper)?;
    Ok((apply_update(param, &update, hyper.lr, hyper.weight_decay)?, state))
}

pub fn lion_step(
    param: &Matrix,
    state: &MomentumState,
    grad: &Matrix,
    hyper: &Hyper,
) -> Result<(Matrix, MomentumState)> {
    check_shapes(param, grad)?;
    let mut state = state.clone();
    let update = lion_update(&mut state, grad, hyper)?;
    Ok((apply_update(param, &update, hyper.lr, hyper.weight_decay)?, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateFreeRule {
    Sgd,
    #[serde(rename = "signsgd")]
    SignSgd,
    /// No update in the state-free subspace (projection-only training).
    None,
}

impl StateFreeRule {
    pub fn update(self, grad: &Matrix, lr: f64) -> Matrix {
        match self {
            StateFreeRule::Sgd => sgd_update(grad, lr),
            StateFreeRule::SignSgd => signsgd_update(grad, lr),
            StateFreeRule::None => Matrix::zeros(grad.rows(), grad.cols()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateFullRule {
    Sgdm,
    #[serde(rename = "adamw")]
    AdamW,
    Lion,
}

impl StateFullRule {
    pub fn init_state(self, rows: usize, cols: usize) -> RuleState {
        match self {
            StateFullRule::Sgdm | StateFullRule::Lion => {
                RuleState::Momentum(MomentumState::zeros(rows, cols))
            }
            StateFullRule::AdamW => RuleState::Adam(AdamState::zeros(rows, cols)),
        }
    }

    /// Moment buffers per parameter.
    pub fn buffers(self) -> usize {
        match self {
            StateFullRule::Sgdm | StateFullRule::Lion => 1,
            StateFullRule::AdamW => 2,
        }
    }

    pub fn update(self, state: &mut RuleState, grad: &Matrix, hyper: &Hyper) -> Result<Matrix> {
        match (self, state) {
            (StateFullRule::Sgdm, RuleState::Momentum(s)) => sgdm_update(s, grad, hyper),
            (StateFullRule::Lion, RuleState::Momentum(s)) => lion_update(s, grad, hyper),
            (StateFullRule::AdamW, RuleState::Adam(s)) => adamw_update(s, grad, hyper),
            (rule, _) => Err(crate::error::Error::Internal(format!(
                "state kind does not match rule {rule:?}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f64]) -> Matrix {
        Matrix::from_rows(&[values]).unwrap()
    }

    fn hyper(lr: f64) -> Hyper {
        Hyper {
            lr,
            weight_decay: 0.0,
            ..Hyper::default()
        }
    }

    #[test]
    fn sgd_examples() {
        let p = row(&[1.0, -2.0]);
        assert_eq!(sgd_step(&p, &row(&[0.0, 0.0]), &hyper(0.1)).unwrap(), p);
        let out = sgd_step(&p, &row(&[0.5, 0.5]), &hyper(0.1)).unwrap();
        assert!(out.max_abs_diff(&row(&[0.95, -2.05])).unwrap() < 1e-15);
        let decayed = sgd_step(
            &row(&[1.0]),
            &row(&[0.0]),
            &Hyper {
                weight_decay: 0.1,
                ..hyper(0.1)
            },
        )
        .unwrap();
        assert!((decayed[(0, 0)] - 0.99).abs() < 1e-15);
        assert!(sgd_step(&p, &row(&[1.0]), &hyper(0.1)).is_err());
    }

    #[test]
    fn signsgd_examples() {
        let out = signsgd_step(&row(&[0.0; 3]), &row(&[0.3, -7.0, 0.0]), &hyper(0.1)).unwrap();
        assert_eq!(out.as_slice(), &[-0.1, 0.1, 0.0]);
        let g = row(&[0.3, -7.0, 2.0]);
        let a = signsgd_update(&g, 0.1);
        let b = signsgd_update(&g.scale(123.4), 0.1);
        assert_eq!(a, b);
    }

    #[test]
    fn sgdm_hand_recursion() {
        let h = Hyper {
            lr: 1.0,
            beta1: 0.5,
            ..hyper(1.0)
        };
        let g = row(&[1.0]);
        let (x2, s1) = sgdm_step(&row(&[0.0]), &MomentumState::zeros(1, 1), &g, &h).unwrap();
        assert_eq!(s1.m[(0, 0)], 0.5);
        assert_eq!(x2[(0, 0)], -0.5);
        let (x3, s2) = sgdm_step(&x2, &s1, &g, &h).unwrap();
        assert_eq!(s2.m[(0, 0)], 0.75);
        assert_eq!(x3[(0, 0)], -1.25);
    }

    #[test]
    fn sgdm_beta_zero_is_sgd() {
        let h = Hyper {
            beta1: 0.0,
            ..hyper(0.3)
        };
        let p = row(&[0.2, -1.0, 4.0]);
        let g = row(&[1.5, -0.25, 3.0]);
        let (a, _) = sgdm_step(&p, &MomentumState::zeros(1, 3), &g, &h).unwrap();
        assert_eq!(a, sgd_step(&p, &g, &h).unwrap());
    }

    #[test]
    fn sgdm_decays_geometrically_without_gradient() {
        let h = Hyper {
            beta1: 0.8,
            ..hyper(0.1)
        };
        let mut s = MomentumState { m: row(&[1.0, -2.0]) };
        let zero = row(&[0.0, 0.0]);
        for k in 1..=5 {
            sgdm_update(&mut s, &zero, &h).unwrap();
            let expected = 0.8f64.powi(k);
            assert!((s.m[(0, 0)] - expected).abs() < 1e-15);
            assert!((s.m[(0, 1)] + 2.0 * expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_first_step() {
        let (x, s) =
            adamw_step(&row(&[0.0]), &AdamState::zeros(1, 1), &row(&[2.0]), &hyper(0.1)).unwrap();
        let expected = -0.1 * 2.0 / (2.0 + 1e-8);
        assert!((x[(0, 0)] - expected).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adamw_zero_is_fixed_point() {
        let p = row(&[0.7, -0.3]);
        let (x, _) =
            adamw_step(&p, &AdamState::zeros(1, 2), &row(&[0.0, 0.0]), &hyper(0.1)).unwrap();
        assert_eq!(x, p);
    }

    #[test]
    fn adamw_bias_correction_recovers_constant_gradient() {
        let h = hyper(0.01);
        let g = row(&[0.37, -1.2]);
        let mut s = AdamState::zeros(1, 2);
        for _ in 0..50 {
            adamw_update(&mut s, &g, &h).unwrap();
            let t = s.step as i32;
            let m_hat = s.m.scale(1.0 / (1.0 - h.beta1.powi(t)));
            assert!(m_hat.max_abs_diff(&g).unwrap() < 1e-12);
        }
    }

    #[test]
    fn lion_examples() {
        let h = Hyper {
            beta1: 0.9,
            beta2: 0.99,
            ..hyper(0.1)
        };
        let (x, _) = lion_step(&row(&[0.0, 0.0]), &MomentumState::zeros(1, 2), &row(&[4.0, -1.0]), &h)
            .unwrap();
        assert_eq!(x.as_slice(), &[-0.1, 0.1]);
        let (z, _) = lion_step(&row(&[0.5]), &MomentumState::zeros(1, 1), &row(&[0.0]), &h).unwrap();
        assert_eq!(z.as_slice(), &[0.5]);

        let mut s = MomentumState::zeros(1, 1);
        lion_update(&mut s, &row(&[1.0]), &h).unwrap();
        assert!((s.m[(0, 0)] - 0.01).abs() < 1e-15);
        let u2 = lion_update(&mut s, &row(&[-1.0]), &h).unwrap();
        assert_eq!(u2[(0, 0)], 0.1);
    }

    #[test]
    fn hyper_validation() {
        assert!(Hyper::default().validate().is_ok());
        assert!(Hyper { beta1: 1.0, ..Hyper::default() }.validate().is_err());
        assert!(Hyper { lr: 0.0, ..Hyper::default() }.validate().is_err());
        assert!(Hyper { eps: 0.0, ..Hyper::default() }.validate().is_err());
        assert!(Hyper { weight_decay: -1.0, ..Hyper::default() }.validate().is_err());
    }

    #[test]
    fn mismatched_state_is_internal_error() {
        let mut st = StateFullRule::Sgdm.init_state(1, 1);
        let err = StateFullRule::AdamW.update(&mut st, &row(&[1.0]), &Hyper::default());
        assert!(matches!(err, Err(crate::error::Error::Internal(_))));
    }
}
