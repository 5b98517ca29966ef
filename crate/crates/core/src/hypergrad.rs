//! Hypergradients of `f(x) = E(w(x), x)` where `w(x) = Φ(w(x), x)` is the
//! fixed point of a contraction.
//!
//! ITD differentiates `t` unrolled iterations `w_i = Φ(w_{i−1}, x)` by reverse
//! accumulation. AID solves the adjoint system `(I − ∂₁Φ^T) u = ∇₁E` by `k`
//! fixed-point iterations at `w_t`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domains::Domain;
use crate::linalg::{add, all_finite, dist, dot, norm, scale};
use crate::oracles::{check_point, ErrorContract, GradientOracle, InnerSpend, OracleError};

/// Inner iterates with a norm above this are treated as divergence.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HypergradError {
    #[error("parameter out of range: {0}")]
    ParameterOutOfRange(String),
    #[error("inner iteration diverged at step {step} (norm {norm:e})")]
    DivergenceDetected { step: u64, norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("problem validation failed: {0}")]
    Validation(String),
    #[error("{0}")]
    Problem(String),
}

impl From<HypergradError> for OracleError {
    fn from(e: HypergradError) -> Self {
        OracleError::InnerSolverFailure(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HypergradError>;

/// `Φ(·, x)`, `E(·, x)` and their derivative actions at a fixed outer point.
pub trait LocalMap {
    fn phi(&self, w: &[f64]) -> Vec<f64>;
    /// `∂₁Φ(w, x) v`
    fn phi_jvp1(&self, w: &[f64], v: &[f64]) -> Vec<f64>;
    /// `∂₁Φ(w, x)^T u`
    fn phi_vjp1(&self, w: &[f64], u: &[f64]) -> Vec<f64>;
    /// `∂₂Φ(w, x) v` for an outer direction `v`.
    fn phi_jvp2(&self, w: &[f64], v: &[f64]) -> Vec<f64>;
    /// `∂₂Φ(w, x)^T u`, an outer-dimensional vector.
    fn phi_vjp2(&self, w: &[f64], u: &[f64]) -> Vec<f64>;
    fn outer_loss(&self, w: &[f64]) -> f64;
    fn grad1_outer(&self, w: &[f64]) -> Vec<f64>;
    fn grad2_outer(&self, w: &[f64]) -> Vec<f64>;
}

/// The lower level of a bilevel problem written as a fixed-point equation.
pub trait FixedPointProblem: Send + Sync {
    fn inner_dim(&self) -> usize;
    fn outer_domain(&self) -> &Domain;
    /// Uniform contraction factor `q` of `Φ(·, x)`, when known.
    fn contraction_factor(&self) -> Option<f64>;
    /// Uniform bound `M` on the hypergradient error constants, when known.
    fn bound_constant(&self) -> Option<f64>;
    /// Starting inner point `w_0`.
    fn initial_inner(&self) -> Vec<f64> {
        vec![0.0; self.inner_dim()]
    }
    /// Binds the outer variable. Expensive per-`x` work (graph aggregation,
    /// stepsize estimation) happens here once.
    fn at<'a>(&'a self, x: &[f64]) -> Result<Box<dyn LocalMap + 'a>>;
    /// Binds `x` but reuses per-point auxiliary quantities (an inner stepsize,
    /// say) computed at `anchor`. Finite-difference checks use this so that
    /// those quantities act as constants, matching the Jacobian actions.
    fn at_anchored<'a>(&'a self, x: &[f64], _anchor: &[f64]) -> Result<Box<dyn LocalMap + 'a>> {
        self.at(x)
    }
    /// Analytic `∇f(x)`, for problems that have one.
    fn exact_hypergradient(&self, _x: &[f64]) -> Option<Result<Vec<f64>>> {
        None
    }
    /// Known Lipschitz constant of `∇f` over the outer domain.
    fn outer_lipschitz(&self) -> Option<f64> {
        None
    }
    /// Certified lower bound on `E` (and therefore on `f`).
    fn outer_lower_bound(&self) -> Option<f64> {
        None
    }
}

fn check_iterate(w: &[f64], step: u64) -> Result<()> {
    let n = norm(w);
    if !n.is_finite() || n > DIVERGENCE_NORM {
        return Err(HypergradError::DivergenceDetected { step, norm: n });
    }
    Ok(())
}

fn check_outer(problem: &dyn FixedPointProblem, x: &[f64]) -> Result<()> {
    let d = problem.outer_domain().dim();
    if x.len() != d {
        return Err(HypergradError::DimensionMismatch { expected: d, got: x.len() });
    }
    Ok(())
}

/// Runs `t` fixed-point iterations from [`FixedPointProblem::initial_inner`]
/// and returns the whole trajectory `w_0, ..., w_t`.
pub fn solve_inner(problem: &dyn FixedPointProblem, x: &[f64], t: u64) -> Result<Vec<Vec<f64>>> {
    if t == 0 {
        return Err(HypergradError::ParameterOutOfRange("t must be at least 1".into()));
    }
    check_outer(problem, x)?;
    let map = problem.at(x)?;
    trajectory(map.as_ref(), problem.initial_inner(), t)
}

fn trajectory(map: &dyn LocalMap, w0: Vec<f64>, t: u64) -> Result<Vec<Vec<f64>>> {
    let mut traj = Vec::with_capacity(t as usize + 1);
    traj.push(w0);
    for i in 1..=t {
        let next = map.phi(traj.last().expect("nonempty"));
        check_iterate(&next, i)?;
        traj.push(next);
    }
    Ok(traj)
}

fn final_iterate(map: &dyn LocalMap, mut w: Vec<f64>, t: u64) -> Result<Vec<f64>> {
    for i in 1..=t {
        w = map.phi(&w);
        check_iterate(&w, i)?;
    }
    Ok(w)
}

/// A hypergradient estimate together with `E(w_t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergradEstimate {
    pub gradient: Vec<f64>,
    pub value: f64,
    pub spend: InnerSpend,
}

/// ITD: exact gradient of the truncated objective `f_t(x) = E(w_t(x), x)`.
pub fn itd_hypergradient(problem: &dyn FixedPointProblem, x: &[f64], t: u64) -> Result<HypergradEstimate> {
    if t == 0 {
        return Err(HypergradError::ParameterOutOfRange("t must be at least 1".into()));
    }
    check_outer(problem, x)?;
    let map = problem.at(x)?;
    let traj = trajectory(map.as_ref(), problem.initial_inner(), t)?;
    let w_t = &traj[t as usize];
    let mut adjoint = map.grad1_outer(w_t);
    let mut g = map.grad2_outer(w_t);
    for i in (1..=t as usize).rev() {
        let w_prev = &traj[i - 1];
        let contrib = map.phi_vjp2(w_prev, &adjoint);
        for (gi, ci) in g.iter_mut().zip(&contrib) {
            *gi += ci;
        }
        adjoint = map.phi_vjp1(w_prev, &adjoint);
    }
    Ok(HypergradEstimate { gradient: g, value: map.outer_loss(w_t), spend: InnerSpend { t, k: 0 } })
}

/// AID with fixed-point adjoint iterations: `u_0 = 0`,
/// `u_j = ∂₁Φ(w_t)^T u_{j−1} + ∇₁E(w_t)`, result `∇₂E + ∂₂Φ^T u_k`.
pub fn aid_hypergradient(problem: &dyn FixedPointProblem, x: &[f64], t: u64, k: u64) -> Result<HypergradEstimate> {
    if t == 0 || k == 0 {
        return Err(HypergradError::ParameterOutOfRange("t and k must be at least 1".into()));
    }
    check_outer(problem, x)?;
    let map = problem.at(x)?;
    let w_t = final_iterate(map.as_ref(), problem.initial_inner(), t)?;
    let rhs = map.grad1_outer(&w_t);
    let mut u = vec![0.0; w_t.len()];
    for j in 1..=k {
        u = add(&map.phi_vjp1(&w_t, &u), &rhs);
        check_iterate(&u, j)?;
    }
    let g = add(&map.grad2_outer(&w_t), &map.phi_vjp2(&w_t, &u));
    Ok(HypergradEstimate { gradient: g, value: map.outer_loss(&w_t), spend: InnerSpend { t, k } })
}

/// `E(w_t(x), x)`.
pub fn truncated_value(problem: &dyn FixedPointProblem, x: &[f64], t: u64) -> Result<f64> {
    check_outer(problem, x)?;
    let map = problem.at(x)?;
    let w_t = final_iterate(map.as_ref(), problem.initial_inner(), t)?;
    Ok(map.outer_loss(&w_t))
}

fn check_count_params(sigma: f64, tau: f64, delta: f64, m: f64, q: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma < 1.0 / 3.0) {
        return Err(HypergradError::ParameterOutOfRange(format!(
            "σ must lie in (0, 1/3) to size inner iterations, got {sigma}"
        )));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(HypergradError::ParameterOutOfRange(format!("q must lie in (0, 1), got {q}")));
    }
    for (name, v) in [("tau", tau), ("delta", delta), ("M", m)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(HypergradError::ParameterOutOfRange(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(())
}

fn ceil_positive(v: f64) -> u64 {
    if v.is_nan() || v <= 1.0 {
        1
    } else if v >= u64::MAX as f64 {
        u64::MAX
    } else {
        v.ceil() as u64
    }
}

/// Closed-form ITD iteration count
/// `⌈(1/(1−ε)) log_q(στ/((1+σ)ΔM) · εq ln(1/q) / (1 + 2εq ln(1/q)))⌉`, at least 1.
pub fn itd_iters_closed_form(sigma: f64, tau: f64, delta: f64, m: f64, q: f64, epsilon: f64) -> Result<u64> {
    check_count_params(sigma, tau, delta, m, q)?;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(HypergradError::ParameterOutOfRange(format!("ε must lie in (0, 1), got {epsilon}")));
    }
    let budget = sigma * tau / ((1.0 + sigma) * delta * m);
    let c = epsilon * q * (1.0 / q).ln();
    let arg = budget * c / (1.0 + 2.0 * c);
    Ok(ceil_positive(arg.ln() / q.ln() / (1.0 - epsilon)))
}

/// ITD error bound `M (2q^t + t q^{t−1}) Δ`.
pub fn itd_error_bound(t: u64, delta: f64, m: f64, q: f64) -> f64 {
    let tf = t as f64;
    m * (2.0 * q.powf(tf) + tf * q.powf(tf - 1.0)) * delta
}

/// AID error bound `((M + M/(1−q)) q^t + M q^k) Δ`.
pub fn aid_error_bound(t: u64, k: u64, delta: f64, m: f64, q: f64) -> f64 {
    ((m + m / (1.0 - q)) * q.powf(t as f64) + m * q.powf(k as f64)) * delta
}

/// Smallest closed-form `t` for ITD, bumped upward if rounding left the error
/// bound above `στ/(1+σ)`.
pub fn itd_required_iters(sigma: f64, tau: f64, delta: f64, m: f64, q: f64, epsilon: f64) -> Result<u64> {
    let mut t = itd_iters_closed_form(sigma, tau, delta, m, q, epsilon)?;
    let target = sigma * tau / (1.0 + sigma);
    while itd_error_bound(t, delta, m, q) > target {
        t = t.checked_add(1).ok_or_else(|| HypergradError::ParameterOutOfRange("t overflows".into()))?;
    }
    Ok(t)
}

/// Closed-form AID count `k = t = ⌈log_q(στ/((1+σ)ΔM) · (1−q)/(3−2q))⌉`, at least 1.
pub fn aid_iters_closed_form(sigma: f64, tau: f64, delta: f64, m: f64, q: f64) -> Result<u64> {
    check_count_params(sigma, tau, delta, m, q)?;
    let budget = sigma * tau / ((1.0 + sigma) * delta * m);
    let arg = budget * (1.0 - q) / (3.0 - 2.0 * q);
    Ok(ceil_positive(arg.ln() / q.ln()))
}

/// AID count with the same rounding safeguard as [`itd_required_iters`].
pub fn aid_required_iters(sigma: f64, tau: f64, delta: f64, m: f64, q: f64) -> Result<u64> {
    let mut t = aid_iters_closed_form(sigma, tau, delta, m, q)?;
    let target = sigma * tau / (1.0 + sigma);
    while aid_error_bound(t, t, delta, m, q) > target {
        t = t.checked_add(1).ok_or_else(|| HypergradError::ParameterOutOfRange("t overflows".into()))?;
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypergradMethod {
    Itd,
    Aid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypergradConfig {
    pub method: HypergradMethod,
    /// Inner fixed-point iterations; required unless `auto_iters`.
    #[serde(default)]
    pub t: Option<u64>,
    /// Adjoint iterations for AID; defaults to `t`.
    #[serde(default)]
    pub k: Option<u64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Derive `t` (and `k`) from `σ`, `τ`, `Δ`, `M`, `q`.
    #[serde(default)]
    pub auto_iters: bool,
}

fn default_epsilon() -> f64 {
    0.5
}

impl HypergradConfig {
    pub fn fixed(method: HypergradMethod, t: u64) -> Self {
        Self { method, t: Some(t), k: None, epsilon: default_epsilon(), auto_iters: false }
    }

    pub fn auto(method: HypergradMethod) -> Self {
        Self { method, t: None, k: None, epsilon: default_epsilon(), auto_iters: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(HypergradError::ParameterOutOfRange(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !self.auto_iters && self.t.is_none() {
            return Err(HypergradError::ParameterOutOfRange("t is required unless auto_iters is set".into()));
        }
        if self.t == Some(0) || self.k == Some(0) {
            return Err(HypergradError::ParameterOutOfRange("t and k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gradient oracle backed by ITD or AID.
pub struct HypergradientOracle {
    problem: Arc<dyn FixedPointProblem>,
    method: HypergradMethod,
    t: u64,
    k: u64,
    contract: Option<ErrorContract>,
    evals: u64,
    inner_total: u64,
    last_spend: InnerSpend,
    cache: Option<(Vec<f64>, f64)>,
}

/// Builds a hypergradient oracle. In auto mode the iteration counts certify
/// the contract's error budget, which needs `σ > 0`, `q` and `M`.
pub fn make_hypergradient_oracle(
    problem: Arc<dyn FixedPointProblem>,
    cfg: &HypergradConfig,
    contract: Option<ErrorContract>,
) -> Result<HypergradientOracle> {
    cfg.validate()?;
    let (t, k) = if cfg.auto_iters {
        let contract =
            contract.ok_or_else(|| HypergradError::ParameterOutOfRange("auto_iters needs an error contract".into()))?;
        let q = problem
            .contraction_factor()
            .ok_or_else(|| HypergradError::ParameterOutOfRange("auto_iters needs the contraction factor q".into()))?;
        let m = problem
            .bound_constant()
            .ok_or_else(|| HypergradError::ParameterOutOfRange("auto_iters needs the bound constant M".into()))?;
        let delta = problem.outer_domain().diameter();
        match cfg.method {
            HypergradMethod::Itd => {
                (itd_required_iters(contract.sigma(), contract.tau(), delta, m, q, cfg.epsilon)?, 0)
            }
            HypergradMethod::Aid => {
                let t = aid_required_iters(contract.sigma(), contract.tau(), delta, m, q)?;
                (t, t)
            }
        }
    } else {
        let t = cfg.t.expect("validated");
        (t, if cfg.method == HypergradMethod::Aid { cfg.k.unwrap_or(t) } else { 0 })
    };
    Ok(HypergradientOracle {
        problem,
        method: cfg.method,
        t,
        k,
        contract,
        evals: 0,
        inner_total: 0,
        last_spend: InnerSpend::default(),
        cache: None,
    })
}

impl HypergradientOracle {
    pub fn iterations(&self) -> InnerSpend {
        InnerSpend { t: self.t, k: self.k }
    }

    pub fn method(&self) -> HypergradMethod {
        self.method
    }

    pub fn problem(&self) -> &Arc<dyn FixedPointProblem> {
        &self.problem
    }

    pub fn estimate(&self, x: &[f64]) -> Result<HypergradEstimate> {
        match self.method {
            HypergradMethod::Itd => itd_hypergradient(self.problem.as_ref(), x, self.t),
            HypergradMethod::Aid => aid_hypergradient(self.problem.as_ref(), x, self.t, self.k),
        }
    }
}

impl GradientOracle for HypergradientOracle {
    fn dim(&self) -> usize {
        self.problem.outer_domain().dim()
    }

    fn domain(&self) -> &Domain {
        self.problem.outer_domain()
    }

    fn gradient(&mut self, x: &[f64]) -> std::result::Result<Vec<f64>, OracleError> {
        check_point(self.problem.outer_domain(), x)?;
        let est = self.estimate(x)?;
        if !all_finite(&est.gradient) {
            return Err(OracleError::InnerSolverFailure("non-finite hypergradient".into()));
        }
        self.evals += 1;
        self.inner_total += est.spend.total();
        self.last_spend = est.spend;
        self.cache = Some((x.to_vec(), est.value));
        Ok(est.gradient)
    }

    fn value(&mut self, x: &[f64]) -> std::result::Result<f64, OracleError> {
        if let Some((cx, v)) = &self.cache {
            if cx.as_slice() == x {
                return Ok(*v);
            }
        }
        let v = truncated_value(self.problem.as_ref(), x, self.t)?;
        self.inner_total += self.t;
        self.cache = Some((x.to_vec(), v));
        Ok(v)
    }

    fn exact_gradient(&mut self, x: &[f64]) -> std::result::Result<Vec<f64>, OracleError> {
        match self.problem.exact_hypergradient(x) {
            Some(r) => Ok(r?),
            None => Err(OracleError::NoExactChannel),
        }
    }

    fn has_exact_channel(&self) -> bool {
        let x = self.problem.outer_domain().lmo(&vec![0.0; self.dim()]).map(|(v, _)| v);
        x.is_ok_and(|x| self.problem.exact_hypergradient(&x).is_some())
    }

    fn eval_count(&self) -> u64 {
        self.evals
    }

    fn last_spend(&self) -> InnerSpend {
        self.last_spend
    }

    fn total_inner_iters(&self) -> u64 {
        self.inner_total
    }

    fn contract(&self) -> Option<ErrorContract> {
        self.contract
    }

    fn lipschitz_hint(&self) -> Option<f64> {
        self.problem.outer_lipschitz()
    }

    fn lower_bound_hint(&self) -> Option<f64> {
        self.problem.outer_lower_bound()
    }
}

/// Outcome of [`validate_problem`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// Largest observed `‖Φ(w) − Φ(w')‖ / ‖w − w'‖`.
    pub max_contraction_ratio: f64,
    /// Largest relative mismatch between Jacobian actions and finite differences.
    pub max_jacobian_error: f64,
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Relative mismatch, floored at `1e-3 · floor` so that identically zero
/// actions are not judged against finite-difference rounding noise.
fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    dist(a, b) / norm(a).max(norm(b)).max(1e-3 * floor).max(1e-12)
}

/// Spot-checks contraction on 20 random pairs and the Jacobian actions
/// against central differences (relative tolerance 1e-5).
pub fn validate_problem(problem: &dyn FixedPointProblem, seed: u64) -> Result<ValidationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domain = problem.outer_domain();
    let n = problem.inner_dim();
    let q = problem.contraction_factor();
    let mut max_ratio: f64 = 0.0;
    let mut max_err: f64 = 0.0;
    for _ in 0..20 {
        let x = domain.sample_point(&mut rng);
        let map = problem.at(&x)?;
        let w = random_vec(&mut rng, n, 1.0);
        let w2 = random_vec(&mut rng, n, 1.0);
        let ratio = dist(&map.phi(&w), &map.phi(&w2)) / dist(&w, &w2);
        max_ratio = max_ratio.max(ratio);
        if let Some(q) = q {
            if ratio > q * (1.0 + 1e-9) {
                return Err(HypergradError::Validation(format!("observed contraction ratio {ratio} exceeds q = {q}")));
            }
        }
    }
    for _ in 0..3 {
        let x = domain.sample_point(&mut rng);
        let map = problem.at(&x)?;
        let w = random_vec(&mut rng, n, 1.0);
        let v = random_vec(&mut rng, n, 1.0);
        let u = random_vec(&mut rng, n, 1.0);
        let h = 1e-6;
        let fd1 =
            scale(&crate::linalg::sub(&map.phi(&add(&w, &scale(&v, h))), &map.phi(&add(&w, &scale(&v, -h)))), 0.5 / h);
        max_err = max_err.max(rel_err(&map.phi_jvp1(&w, &v), &fd1, norm(&v)));
        max_err = max_err.max(
            (dot(&u, &map.phi_jvp1(&w, &v)) - dot(&map.phi_vjp1(&w, &u), &v)).abs()
                / (norm(&u) * norm(&fd1).max(1e-3 * norm(&v))).max(1e-12),
        );
        // outer direction: difference of two feasible points stays inside the affine hull
        let x2 = domain.sample_point(&mut rng);
        let dx = crate::linalg::sub(&x2, &x);
        let xp = add(&x, &scale(&dx, h));
        let xm = add(&x, &scale(&dx, -h));
        let (mp, mm) = (problem.at_anchored(&xp, &x)?, problem.at_anchored(&xm, &x)?);
        let fd2 = scale(&crate::linalg::sub(&mp.phi(&w), &mm.phi(&w)), 0.5 / h);
        max_err = max_err.max(rel_err(&map.phi_jvp2(&w, &dx), &fd2, norm(&dx)));
        max_err = max_err.max(
            (dot(&u, &map.phi_jvp2(&w, &dx)) - dot(&map.phi_vjp2(&w, &u), &dx)).abs()
                / (norm(&u) * norm(&fd2).max(1e-3 * norm(&dx))).max(1e-12),
        );
        let e_fd = (mp.outer_loss(&w) - mm.outer_loss(&w)) * 0.5 / h;
        let e_an = dot(&map.grad2_outer(&w), &dx);
        max_err = max_err.max((e_fd - e_an).abs() / e_fd.abs().max(e_an.abs()).max(1e-8));
        let e_fd1 = (map.outer_loss(&add(&w, &scale(&v, h))) - map.outer_loss(&add(&w, &scale(&v, -h)))) * 0.5 / h;
        let e_an1 = dot(&map.grad1_outer(&w), &v);
        max_err = max_err.max((e_fd1 - e_an1).abs() / e_fd1.abs().max(e_an1.abs()).max(1e-8));
    }
    if max_err > 1e-5 {
        return Err(HypergradError::Validation(format!(
            "Jacobian actions disagree with finite differences (relative error {max_err:e})"
        )));
    }
    Ok(ValidationReport { max_contraction_ratio: max_ratio, max_jacobian_error: max_err })
}

/// Sampling estimate of `M`: twice the largest of `‖∇₁E‖`, `‖∇₂E‖`,
/// `‖∂₂Φ‖` and `‖∂₂Φ‖‖∇₁E‖/(1−q)` over `samples` random outer points, with the
/// inner variable at its (near) fixed point. Operator norms come from a few
/// power iterations on `∂₂Φ^T ∂₂Φ`.
pub fn estimate_bound_constant(
    problem: &dyn FixedPointProblem,
    q: f64,
    samples: usize,
    inner_iters: u64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domain = problem.outer_domain();
    let d = domain.dim();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x = domain.sample_point(&mut rng);
        let map = problem.at(&x)?;
        let w = final_iterate(map.as_ref(), problem.initial_inner(), inner_iters)?;
        let g1 = norm(&map.grad1_outer(&w));
        let g2 = norm(&map.grad2_outer(&w));
        let mut v = random_vec(&mut rng, d, 1.0);
        let mut op: f64 = 0.0;
        for _ in 0..20 {
            let nv = norm(&v);
            if nv == 0.0 {
                break;
            }
            v = scale(&v, 1.0 / nv);
            let jv = map.phi_jvp2(&w, &v);
            op = norm(&jv);
            v = map.phi_vjp2(&w, &jv);
        }
        worst = worst.max(g1).max(g2).max(op).max(op * g1 / (1.0 - q));
    }
    Ok(2.0 * worst.max(f64::MIN_POSITIVE))
}
