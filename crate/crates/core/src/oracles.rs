//! Gradient oracles: exact, perturbed within a certified error budget, and
//! (in [`crate::hypergrad`]) bilevel hypergradient estimators.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domains::{Domain, DomainError};
use crate::linalg::{all_finite, dist, dot, norm, sub};
use crate::objectives::Objective;

/// Feasibility tolerance for points handed to an oracle.
pub const ORACLE_MEMBERSHIP_TOL: f64 = 1e-8;

/// Smallest Lipschitz estimate ever returned, so `g/(L‖d‖²)` stays finite.
pub const LIPSCHITZ_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("σ must lie in [0, 1/3), got {0}")]
    SigmaOutOfRange(f64),
    #[error("τ must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("point is not feasible (membership tolerance {ORACLE_MEMBERSHIP_TOL})")]
    InfeasiblePoint,
    #[error("oracle has no exact-gradient channel")]
    NoExactChannel,
    #[error("inner solver failed: {0}")]
    InnerSolverFailure(String),
    #[error("all sampled points coincide")]
    DegenerateSamples,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Certified gradient error budget: for all feasible `x, x̄`,
/// `|(∇f(x̄) − ∇̃f(x̄))^T (x − x̄)| ≤ bound = σ τ / (1 + σ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorContract {
    sigma: f64,
    tau: f64,
    bound: f64,
}

impl ErrorContract {
    pub fn new(sigma: f64, tau: f64) -> Result<Self> {
        if !(0.0..1.0 / 3.0).contains(&sigma) {
            return Err(OracleError::SigmaOutOfRange(sigma));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(OracleError::InvalidTau(tau));
        }
        Ok(Self { sigma, tau, bound: sigma * tau / (1.0 + sigma) })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }
}

/// Inner fixed-point work spent by the latest gradient call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerSpend {
    pub t: u64,
    pub k: u64,
}

impl InnerSpend {
    pub fn total(&self) -> u64 {
        self.t + self.k
    }
}

/// Source of (possibly inexact) gradients for the outer solvers.
///
/// Oracles are stateful and owned by a single solver run.
pub trait GradientOracle: Send {
    fn dim(&self) -> usize;
    fn domain(&self) -> &Domain;
    /// `∇̃f(x)`; increments the evaluation counter.
    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>>;
    /// Objective value used by line searches and traces.
    fn value(&mut self, x: &[f64]) -> Result<f64>;
    /// Ground-truth `∇f(x)`, when the oracle has one.
    fn exact_gradient(&mut self, _x: &[f64]) -> Result<Vec<f64>> {
        Err(OracleError::NoExactChannel)
    }
    fn has_exact_channel(&self) -> bool {
        false
    }
    fn eval_count(&self) -> u64;
    fn last_spend(&self) -> InnerSpend {
        InnerSpend::default()
    }
    /// Inner fixed-point iterations spent so far, by gradients and values.
    fn total_inner_iters(&self) -> u64 {
        0
    }
    fn contract(&self) -> Option<ErrorContract> {
        None
    }
    /// Known gradient Lipschitz constant over the domain.
    fn lipschitz_hint(&self) -> Option<f64> {
        None
    }
    /// Certified lower bound on `min f` over the domain.
    fn lower_bound_hint(&self) -> Option<f64> {
        None
    }
}

pub(crate) fn check_point(domain: &Domain, x: &[f64]) -> Result<()> {
    if !domain.membership(x, ORACLE_MEMBERSHIP_TOL)? {
        return Err(OracleError::InfeasiblePoint);
    }
    Ok(())
}

/// Returns `∇f` of an [`Objective`] without error.
#[derive(Clone)]
pub struct ExactOracle {
    objective: Arc<dyn Objective>,
    domain: Domain,
    evals: u64,
}

impl ExactOracle {
    pub fn new(objective: Arc<dyn Objective>, domain: Domain) -> Result<Self> {
        if objective.dim() != domain.dim() {
            return Err(DomainError::DimensionMismatch { expected: domain.dim(), got: objective.dim() }.into());
        }
        Ok(Self { objective, domain, evals: 0 })
    }

    pub fn objective(&self) -> &Arc<dyn Objective> {
        &self.objective
    }
}

impl GradientOracle for ExactOracle {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        check_point(&self.domain, x)?;
        self.evals += 1;
        Ok(self.objective.gradient(x))
    }

    fn value(&mut self, x: &[f64]) -> Result<f64> {
        Ok(self.objective.value(x))
    }

    fn exact_gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.objective.gradient(x))
    }

    fn has_exact_channel(&self) -> bool {
        true
    }

    fn eval_count(&self) -> u64 {
        self.evals
    }

    fn lipschitz_hint(&self) -> Option<f64> {
        self.objective.lipschitz(&self.domain)
    }

    fn lower_bound_hint(&self) -> Option<f64> {
        self.objective.lower_bound(&self.domain)
    }
}

/// How the perturbation of a [`PerturbedOracle`] is drawn. Its norm is
/// always `bound / Δ`, so Cauchy-Schwarz certifies the contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRule {
    /// Uniformly random direction.
    #[default]
    RandomDirection,
    /// Along the exact FW direction `s − x`, which shrinks the estimated
    /// gap as much as the budget allows.
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditRecord {
    pub evaluation: u64,
    pub noise_norm: f64,
    pub bound: f64,
    pub violated: bool,
}

/// Exact oracle plus a bounded perturbation.
pub struct PerturbedOracle {
    inner: ExactOracle,
    contract: ErrorContract,
    rule: NoiseRule,
    rng: ChaCha8Rng,
    audit: Option<Vec<AuditRecord>>,
    last_noise: Vec<f64>,
}

impl PerturbedOracle {
    pub fn new(inner: ExactOracle, contract: ErrorContract, rule: NoiseRule, seed: u64) -> Self {
        let d = inner.dim();
        Self { inner, contract, rule, rng: ChaCha8Rng::seed_from_u64(seed), audit: None, last_noise: vec![0.0; d] }
    }

    pub fn with_audit(mut self) -> Self {
        self.audit = Some(Vec::new());
        self
    }

    pub fn audit_log(&self) -> Option<&[AuditRecord]> {
        self.audit.as_deref()
    }

    /// The perturbation added by the latest [`GradientOracle::gradient`] call.
    pub fn last_noise(&self) -> &[f64] {
        &self.last_noise
    }

    /// `‖e‖` used for every perturbation.
    pub fn noise_norm(&self) -> f64 {
        // shaved by one part in 1e12 so rounding never breaks the contract
        self.contract.bound() / self.inner.domain.diameter() * (1.0 - 1e-12)
    }

    fn random_unit(&mut self, d: usize) -> Vec<f64> {
        loop {
            let z: Vec<f64> = (0..d).map(|_| self.rng.sample(StandardNormal)).collect();
            let n = norm(&z);
            if n > 0.0 {
                return z.into_iter().map(|v| v / n).collect();
            }
        }
    }
}

impl GradientOracle for PerturbedOracle {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn domain(&self) -> &Domain {
        &self.inner.domain
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let g = self.inner.gradient(x)?;
        let eps = self.noise_norm();
        let d = g.len();
        let dir = match self.rule {
            NoiseRule::RandomDirection => self.random_unit(d),
            NoiseRule::Adversarial => {
                let (s, _) = self.inner.domain.lmo(&g)?;
                let fw = sub(&s, x);
                let n = norm(&fw);
                if n > 0.0 {
                    fw.into_iter().map(|v| v / n).collect()
                } else {
                    self.random_unit(d)
                }
            }
        };
        let e: Vec<f64> = dir.into_iter().map(|v| v * eps).collect();
        if let Some(log) = self.audit.as_mut() {
            let noise_norm = norm(&e);
            let bound = self.contract.bound();
            log.push(AuditRecord {
                evaluation: self.inner.evals,
                noise_norm,
                bound,
                violated: noise_norm * self.inner.domain.diameter() > bound,
            });
        }
        let out = g.iter().zip(&e).map(|(a, b)| a + b).collect();
        self.last_noise = e;
        Ok(out)
    }

    fn value(&mut self, x: &[f64]) -> Result<f64> {
        self.inner.value(x)
    }

    fn exact_gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        self.inner.exact_gradient(x)
    }

    fn has_exact_channel(&self) -> bool {
        true
    }

    fn eval_count(&self) -> u64 {
        self.inner.evals
    }

    fn contract(&self) -> Option<ErrorContract> {
        Some(self.contract)
    }

    fn lipschitz_hint(&self) -> Option<f64> {
        self.inner.lipschitz_hint()
    }

    fn lower_bound_hint(&self) -> Option<f64> {
        self.inner.lower_bound_hint()
    }
}

/// Writes audit records as CSV (`iteration,noise_norm,bound,violated`).
pub fn write_audit_csv<W: Write>(mut out: W, records: &[AuditRecord]) -> std::io::Result<()> {
    writeln!(out, "iteration,noise_norm,bound,violated")?;
    for r in records {
        writeln!(out, "{},{},{},{}", r.evaluation, r.noise_norm, r.bound, r.violated)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzMethod {
    Sampling,
    PowerIteration,
    UserSupplied,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub samples: usize,
    pub method: LipschitzMethod,
}

impl LipschitzEstimate {
    pub fn user_supplied(value: f64) -> Self {
        Self { value: value.max(LIPSCHITZ_FLOOR), samples: 0, method: LipschitzMethod::UserSupplied }
    }
}

/// Largest difference quotient `‖∇̃f(x) − ∇̃f(y)‖ / ‖x − y‖` over all pairs of
/// `n_samples` random feasible points.
pub fn estimate_lipschitz_sampling(
    oracle: &mut dyn GradientOracle,
    domain: &Domain,
    n_samples: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if n_samples < 2 {
        return Err(OracleError::TooFewSamples(n_samples));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..n_samples).map(|_| domain.sample_point(&mut rng)).collect();
    let grads = points.iter().map(|p| oracle.gradient(p)).collect::<Result<Vec<_>>>()?;
    let mut best: Option<f64> = None;
    for i in 0..n_samples {
        for j in i + 1..n_samples {
            let dx = dist(&points[i], &points[j]);
            if dx > 0.0 {
                let ratio = dist(&grads[i], &grads[j]) / dx;
                best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
            }
        }
    }
    let value = best.ok_or(OracleError::DegenerateSamples)?;
    if !value.is_finite() {
        return Err(OracleError::InnerSolverFailure("non-finite gradient difference".into()));
    }
    Ok(LipschitzEstimate { value: value.max(LIPSCHITZ_FLOOR), samples: n_samples, method: LipschitzMethod::Sampling })
}

/// Exact FW gap `−∇f(x)^T (lmo(∇f(x)) − x)`.
pub fn exact_gap(oracle: &mut dyn GradientOracle, domain: &Domain, x: &[f64]) -> Result<f64> {
    let g = oracle.exact_gradient(x)?;
    if !all_finite(&g) {
        return Err(OracleError::InnerSolverFailure("non-finite exact gradient".into()));
    }
    Ok(fw_gap(domain, &g, x)?)
}

/// `−g^T (lmo(g) − x)` for a given gradient.
pub fn fw_gap(domain: &Domain, g: &[f64], x: &[f64]) -> std::result::Result<f64, DomainError> {
    let (s, _) = domain.lmo(g)?;
    Ok(dot(g, x) - dot(g, &s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{Linear, Quadratic};
    use nalgebra::DMatrix;

    #[test]
    fn contract_bounds() {
        let c = ErrorContract::new(0.2, 1e-2).unwrap();
        assert!((c.bound() - 0.2 * 1e-2 / 1.2).abs() < 1e-18);
        assert_eq!(ErrorContract::new(1.0 / 3.0, 1.0), Err(OracleError::SigmaOutOfRange(1.0 / 3.0)));
        assert!(ErrorContract::new(-0.1, 1.0).is_err());
        assert!(ErrorContract::new(0.1, 0.0).is_err());
        assert_eq!(ErrorContract::new(0.4, 1.0).unwrap_err().to_string(), "σ must lie in [0, 1/3), got 0.4");
    }

    #[test]
    fn exact_oracle_identity_gradient() {
        let f = Arc::new(Quadratic::squared_distance(&[0.0, 0.0], 1.0));
        let b = Domain::boxed(vec![-5.0; 2], vec![5.0; 2]).unwrap();
        let mut o = ExactOracle::new(f, b).unwrap();
        assert_eq!(o.gradient(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(o.eval_count(), 1);
        assert_eq!(o.gradient(&[9.0, 0.0]), Err(OracleError::InfeasiblePoint));
        assert_eq!(o.eval_count(), 1);
    }

    #[test]
    fn zero_sigma_perturbation_is_exact() {
        let f = Arc::new(Quadratic::squared_distance(&[0.3, 0.3, 0.4], 1.0));
        let s = Domain::unit_simplex(3).unwrap();
        let inner = ExactOracle::new(f.clone(), s).unwrap();
        let mut o = PerturbedOracle::new(inner, ErrorContract::new(0.0, 1e-3).unwrap(), NoiseRule::RandomDirection, 3);
        let x = [0.2, 0.5, 0.3];
        assert_eq!(o.gradient(&x).unwrap(), f.gradient(&x));
    }

    #[test]
    fn exact_gap_examples() {
        let f = Arc::new(Linear::new(vec![1.0, 2.0, 3.0]));
        let s = Domain::unit_simplex(3).unwrap();
        let mut o = ExactOracle::new(f, s.clone()).unwrap();
        assert_eq!(exact_gap(&mut o, &s, &[1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(exact_gap(&mut o, &s, &[0.0, 0.0, 1.0]).unwrap(), 2.0);

        let center = [0.3, 0.3, 0.4];
        let g = Arc::new(Quadratic::squared_distance(&center, 1.0));
        let mut o = ExactOracle::new(g, s.clone()).unwrap();
        assert!(exact_gap(&mut o, &s, &center).unwrap().abs() < 1e-10);
    }

    #[test]
    fn lipschitz_sampling_is_sandwiched() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let f = Arc::new(Quadratic::new(q, vec![0.0; 2]));
        let b = Domain::boxed(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let mut o = ExactOracle::new(f, b.clone()).unwrap();
        let est = estimate_lipschitz_sampling(&mut o, &b, 10, 0).unwrap();
        assert!(est.value >= 1.0 - 1e-12 && est.value <= 4.0 + 1e-12);
        let again = estimate_lipschitz_sampling(&mut o, &b, 10, 0).unwrap();
        assert_eq!(est, again);
    }

    #[test]
    fn lipschitz_of_linear_is_floored() {
        let f = Arc::new(Linear::new(vec![1.0, -1.0]));
        let b = Domain::boxed(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let mut o = ExactOracle::new(f, b.clone()).unwrap();
        let est = estimate_lipschitz_sampling(&mut o, &b, 10, 4).unwrap();
        assert_eq!(est.value, LIPSCHITZ_FLOOR);
        assert_eq!(estimate_lipschitz_sampling(&mut o, &b, 1, 4), Err(OracleError::TooFewSamples(1)));
    }

    #[test]
    fn audit_csv_format() {
        let rec = [AuditRecord { evaluation: 1, noise_norm: 0.5, bound: 1.0, violated: false }];
        let mut buf = Vec::new();
        write_audit_csv(&mut buf, &rec).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,noise_norm,bound,violated\n1,0.5,1,false\n");
    }
}
