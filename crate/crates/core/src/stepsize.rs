//! Stepsizes satisfying the two FW step conditions:
//!
//! - lower bound: `η ≥ η̄ = min{η_max, g̃ / (L‖d‖²)}`
//! - sufficient decrease: `f(x) − f(x + ηd) ≥ ρ η̄ g̃`

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::norm_sq;
use crate::oracles::OracleError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepsizeError {
    #[error("gap {0} is not positive; the stopping test should have fired")]
    NonPositiveGap(f64),
    #[error("direction has zero norm")]
    ZeroDirection,
    #[error("η_max must be positive and finite, got {0}")]
    InvalidEtaMax(f64),
    #[error("Lipschitz estimate must be positive, got {0}")]
    InvalidLipschitz(f64),
    #[error("no admissible step after {0} backtracks")]
    LineSearchFailure(u32),
    #[error("invalid stepsize configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

pub type Result<T> = std::result::Result<T, StepsizeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `η = η̄`, the minimizer of the quadratic upper model.
    #[default]
    Exact,
    /// Backtracking from `init · η_max` down to `η̄`.
    Armijo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepsizeConfig {
    #[serde(default)]
    pub rule: StepRule,
    /// Sufficient-decrease constant; `None` picks the rule's default.
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default = "default_shrink")]
    pub shrink: f64,
    #[serde(default = "default_init")]
    pub init: f64,
    #[serde(default = "default_max_backtracks")]
    pub max_backtracks: u32,
}

fn default_shrink() -> f64 {
    0.5
}

fn default_init() -> f64 {
    1.0
}

fn default_max_backtracks() -> u32 {
    60
}

impl Default for StepsizeConfig {
    fn default() -> Self {
        Self {
            rule: StepRule::Exact,
            rho: None,
            shrink: default_shrink(),
            init: default_init(),
            max_backtracks: default_max_backtracks(),
        }
    }
}

/// Default `ρ` for the short step: `(1 − σ) / (2(1 + σ))`.
pub fn exact_rule_rho(sigma: f64) -> f64 {
    (1.0 - sigma) / (2.0 * (1.0 + sigma))
}

pub const ARMIJO_DEFAULT_RHO: f64 = 1e-4;

impl StepsizeConfig {
    pub fn armijo() -> Self {
        Self { rule: StepRule::Armijo, ..Self::default() }
    }

    /// Effective `ρ` for error level `sigma`.
    pub fn rho_for(&self, sigma: f64) -> f64 {
        self.rho.unwrap_or(match self.rule {
            StepRule::Exact => exact_rule_rho(sigma),
            StepRule::Armijo => ARMIJO_DEFAULT_RHO,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(rho) = self.rho {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(StepsizeError::InvalidConfig(format!("rho must lie in (0, 1), got {rho}")));
            }
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(StepsizeError::InvalidConfig(format!("shrink must lie in (0, 1), got {}", self.shrink)));
        }
        if !(self.init > 0.0 && self.init <= 1.0) {
            return Err(StepsizeError::InvalidConfig(format!("init must lie in (0, 1], got {}", self.init)));
        }
        if self.max_backtracks == 0 {
            return Err(StepsizeError::InvalidConfig("max_backtracks must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub eta: f64,
    pub eta_bar: f64,
    /// Objective at the new point, when the rule evaluated it.
    pub f_new: Option<f64>,
    pub backtracks: u32,
}

fn reference_step(g_tilde: f64, d: &[f64], lipschitz: f64, eta_max: f64) -> Result<f64> {
    if !(g_tilde > 0.0) {
        return Err(StepsizeError::NonPositiveGap(g_tilde));
    }
    if !(eta_max > 0.0 && eta_max.is_finite()) {
        return Err(StepsizeError::InvalidEtaMax(eta_max));
    }
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(StepsizeError::InvalidLipschitz(lipschitz));
    }
    let dd = norm_sq(d);
    if dd == 0.0 {
        return Err(StepsizeError::ZeroDirection);
    }
    Ok(eta_max.min(g_tilde / (lipschitz * dd)))
}

/// `η = η̄ = min{η_max, g̃ / (L‖d‖²)}`.
pub fn exact_stepsize(g_tilde: f64, d: &[f64], lipschitz: f64, eta_max: f64) -> Result<StepResult> {
    let eta_bar = reference_step(g_tilde, d, lipschitz, eta_max)?;
    Ok(StepResult { eta: eta_bar, eta_bar, f_new: None, backtracks: 0 })
}

/// True when `f_old − f_new ≥ ρ η̄ g̃`.
pub fn sufficient_decrease(f_old: f64, f_new: f64, rho: f64, eta_bar: f64, g_tilde: f64) -> bool {
    f_old - f_new >= rho * eta_bar * g_tilde
}

/// Backtracks from `init · η_max` by factor `shrink`, never going below `η̄`,
/// until the sufficient-decrease test passes. Failure means `lipschitz` is
/// too small; callers double it and retry.
#[allow(clippy::too_many_arguments)]
pub fn armijo_search<F>(
    mut f: F,
    x: &[f64],
    f_old: f64,
    d: &[f64],
    g_tilde: f64,
    lipschitz: f64,
    eta_max: f64,
    rho: f64,
    cfg: &StepsizeConfig,
) -> Result<StepResult>
where
    F: FnMut(&[f64]) -> std::result::Result<f64, OracleError>,
{
    let eta_bar = reference_step(g_tilde, d, lipschitz, eta_max)?;
    let mut eta = cfg.init * eta_max;
    let mut trial = vec![0.0; x.len()];
    for backtracks in 0..=cfg.max_backtracks {
        if eta <= eta_bar {
            eta = eta_bar;
        }
        for ((t, xi), di) in trial.iter_mut().zip(x).zip(d) {
            *t = xi + eta * di;
        }
        let f_new = f(&trial)?;
        if sufficient_decrease(f_old, f_new, rho, eta_bar, g_tilde) {
            return Ok(StepResult { eta, eta_bar, f_new: Some(f_new), backtracks });
        }
        if eta == eta_bar {
            break;
        }
        eta *= cfg.shrink;
    }
    Err(StepsizeError::LineSearchFailure(cfg.max_backtracks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_rule_branches() {
        let r = exact_stepsize(1.0, &[1.0], 10.0, 1.0).unwrap();
        assert!((r.eta - 0.1).abs() < 1e-15);
        let r = exact_stepsize(5.0, &[1.0], 1.0, 1.0).unwrap();
        assert_eq!(r.eta, 1.0);
        // away step with w = 0.2 caps at w/(1-w) = 0.25
        let w: f64 = 0.2;
        let cap = w / (1.0 - w);
        let r = exact_stepsize(1.0, &[1.0], 1.0, cap).unwrap();
        assert_eq!(r.eta, cap);
        let r = exact_stepsize(0.1, &[1.0], 1.0, cap).unwrap();
        assert!((r.eta - 0.1).abs() < 1e-15);
    }

    #[test]
    fn exact_rule_errors() {
        assert_eq!(exact_stepsize(0.0, &[1.0], 1.0, 1.0), Err(StepsizeError::NonPositiveGap(0.0)));
        assert_eq!(exact_stepsize(1.0, &[0.0, 0.0], 1.0, 1.0), Err(StepsizeError::ZeroDirection));
        assert!(exact_stepsize(1.0, &[1.0], 1.0, f64::INFINITY).is_err());
        assert!(exact_stepsize(1.0, &[1.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn rho_defaults() {
        assert!((exact_rule_rho(0.2) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(StepsizeConfig::default().rho_for(0.0), 0.5);
        assert_eq!(StepsizeConfig::armijo().rho_for(0.2), ARMIJO_DEFAULT_RHO);
    }

    #[test]
    fn armijo_on_linear_accepts_full_step() {
        let c = [1.0, -2.0];
        let f = |x: &[f64]| Ok(c[0] * x[0] + c[1] * x[1]);
        let x = [0.5, 0.5];
        let d = [-0.5, 0.5];
        let g = -(c[0] * d[0] + c[1] * d[1]);
        let r = armijo_search(f, &x, f(&x).unwrap(), &d, g, 1e-12, 1.0, 1e-4, &StepsizeConfig::armijo()).unwrap();
        assert_eq!(r.eta, 1.0);
        assert_eq!(r.backtracks, 0);
    }

    #[test]
    fn armijo_on_quadratic_lands_near_exact_minimizer() {
        // f = ½‖x‖², along d from x: minimizer eta* = -x^T d / ‖d‖² = η̄ with L = 1
        let f = |x: &[f64]| Ok(0.5 * (x[0] * x[0] + x[1] * x[1]));
        let x = [1.0, 0.2];
        let d = [-0.3, -0.05];
        let g = -(x[0] * d[0] + x[1] * d[1]);
        let cfg = StepsizeConfig::armijo();
        let r = armijo_search(f, &x, f(&x).unwrap(), &d, g, 1.0, 1.0, 1e-4, &cfg).unwrap();
        let exact = exact_stepsize(g, &d, 1.0, 1.0).unwrap().eta;
        assert!(r.eta >= exact && r.eta <= exact / cfg.shrink + 1e-12);
    }

    #[test]
    fn armijo_reports_failure_when_lipschitz_is_too_small() {
        let f = |x: &[f64]| Ok(50.0 * x[0] * x[0]);
        let x = [1.0];
        let d = [-2.0];
        let g = 200.0;
        let r = armijo_search(f, &x, 50.0, &d, g, 1e-3, 1.0, 0.5, &StepsizeConfig::armijo());
        assert!(matches!(r, Err(StepsizeError::LineSearchFailure(_))));
    }

    #[test]
    fn config_json_keys() {
        let cfg: StepsizeConfig =
            serde_json::from_str(r#"{"rule":"armijo","rho":0.1,"shrink":0.7,"init":1.0,"max_backtracks":20}"#).unwrap();
        assert_eq!(cfg.rule, StepRule::Armijo);
        assert_eq!(cfg.rho_for(0.0), 0.1);
        cfg.validate().unwrap();
        let bad = StepsizeConfig { shrink: 1.0, ..StepsizeConfig::default() };
        assert!(bad.validate().is_err());
    }
}
