//! Inexact Frank-Wolfe solvers: vanilla, away-step and pairwise with a cap
//! on swap steps.
//!
//! Every iteration evaluates `∇̃f(x_n)`, builds its directions, and stops
//! before stepping once the relevant estimated gap is at most `τ`. The final
//! trace row is that stopping check; it carries `eta = 0`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domains::{Atom, Domain, DomainError, VertexId, MEMBERSHIP_TOL};
use crate::linalg::{all_finite, axpy, dist, dot, sub};
use crate::oracles::{estimate_lipschitz_sampling, fw_gap, GradientOracle, OracleError, LIPSCHITZ_FLOOR};
use crate::stepsize::{armijo_search, exact_stepsize, sufficient_decrease, StepRule, StepsizeConfig, StepsizeError};

/// Weights below this are removed from the support.
pub const DROP_TOL: f64 = 1e-12;
/// Allowed distance between `x` and its weighted reconstruction.
pub const RECONSTRUCTION_TOL: f64 = 1e-8;
/// Maximum number of times an underestimated `L` is doubled in one step.
pub const MAX_LIPSCHITZ_DOUBLINGS: u32 = 30;
/// Iteration cap when no complexity bound is available.
pub const FALLBACK_MAX_ITERS: u64 = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("σ must lie in [0, 1/3), got {0}")]
    SigmaOutOfRange(f64),
    #[error("invalid starting point: {0}")]
    InvalidStart(String),
    #[error("iterate invariant violated: {0}")]
    InvariantViolation(String),
    #[error("no admissible stepsize after {MAX_LIPSCHITZ_DOUBLINGS} doublings of L (last L = {0})")]
    StepsizeFailure(f64),
    #[error("oracle returned a non-finite gradient")]
    NonFiniteGradient,
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Stepsize(#[from] StepsizeError),
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fw,
    Asfw,
    Pwfw,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Fw => "fw",
            Variant::Asfw => "asfw",
            Variant::Pwfw => "pwfw",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepType {
    FW,
    Away,
    Drop,
    Swap,
    Pairwise,
}

impl StepType {
    pub fn name(&self) -> &'static str {
        match self {
            StepType::FW => "FW",
            StepType::Away => "Away",
            StepType::Drop => "Drop",
            StepType::Swap => "Swap",
            StepType::Pairwise => "Pairwise",
        }
    }
}

/// A feasible point with its convex decomposition over domain vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    x: Vec<f64>,
    atoms: BTreeMap<VertexId, (f64, Vec<f64>)>,
}

impl Iterate {
    pub fn from_vertex(domain: &Domain, id: VertexId) -> Result<Self> {
        let v = domain.vertex(&id)?;
        let mut atoms = BTreeMap::new();
        atoms.insert(id, (1.0, v.clone()));
        Ok(Self { x: v, atoms })
    }

    /// Decomposes a feasible point into vertices.
    pub fn from_point(domain: &Domain, x: &[f64]) -> Result<Self> {
        let atoms = domain.decompose(x, 1e-9)?;
        Self::from_atoms(atoms)
    }

    pub fn from_atoms(atoms: Vec<Atom>) -> Result<Self> {
        let Some(first) = atoms.first() else {
            return Err(SolverError::InvalidStart("empty decomposition".into()));
        };
        let mut map = BTreeMap::new();
        let mut x = vec![0.0; first.vertex.len()];
        for a in atoms {
            if !(a.weight > 0.0) {
                return Err(SolverError::InvalidStart(format!("weight {} is not positive", a.weight)));
            }
            axpy(&mut x, a.weight, &a.vertex);
            map.insert(a.id, (a.weight, a.vertex));
        }
        let mut it = Self { x, atoms: map };
        let total = it.weight_sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(SolverError::InvalidStart(format!("weights sum to {total}")));
        }
        it.x = it.reconstruct();
        Ok(it)
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn support_size(&self) -> usize {
        self.atoms.len()
    }

    pub fn weight(&self, id: &VertexId) -> Option<f64> {
        self.atoms.get(id).map(|a| a.0)
    }

    pub fn contains(&self, id: &VertexId) -> bool {
        self.atoms.contains_key(id)
    }

    /// `(id, weight)` pairs in id order.
    pub fn weights(&self) -> impl Iterator<Item = (&VertexId, f64)> {
        self.atoms.iter().map(|(id, (w, _))| (id, *w))
    }

    pub fn atoms(&self) -> Vec<Atom> {
        self.atoms.iter().map(|(id, (w, v))| Atom { id: id.clone(), vertex: v.clone(), weight: *w }).collect()
    }

    pub fn weight_sum(&self) -> f64 {
        self.atoms.values().map(|a| a.0).sum()
    }

    /// `Σ_j w_j a_j`.
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.x.len()];
        for (w, v) in self.atoms.values() {
            axpy(&mut out, *w, v);
        }
        out
    }

    pub fn reconstruction_error(&self) -> f64 {
        dist(&self.x, &self.reconstruct())
    }

    fn support_iter(&self) -> impl Iterator<Item = (&VertexId, &[f64], f64)> {
        self.atoms.iter().map(|(id, (w, v))| (id, v.as_slice(), *w))
    }

    fn scale_all(&mut self, s: f64) {
        for a in self.atoms.values_mut() {
            a.0 *= s;
        }
    }

    fn add_weight(&mut self, id: &VertexId, vertex: &[f64], delta: f64) {
        self.atoms.entry(id.clone()).or_insert_with(|| (0.0, vertex.to_vec())).0 += delta;
    }

    fn remove(&mut self, id: &VertexId) {
        self.atoms.remove(id);
    }

    fn reset_to(&mut self, id: &VertexId, vertex: &[f64]) {
        self.atoms.clear();
        self.atoms.insert(id.clone(), (1.0, vertex.to_vec()));
    }

    /// Drops tiny weights, renormalizes, and resyncs `x` to the weights after
    /// checking it did not drift from `expected`.
    fn settle(&mut self, expected: Vec<f64>) -> Result<()> {
        self.atoms.retain(|_, a| a.0 > DROP_TOL);
        if self.atoms.is_empty() {
            return Err(SolverError::InvariantViolation("support became empty".into()));
        }
        let total = self.weight_sum();
        if (total - 1.0).abs() > DROP_TOL {
            self.scale_all(1.0 / total);
        }
        let recon = self.reconstruct();
        let drift = dist(&recon, &expected);
        if !(drift <= RECONSTRUCTION_TOL) {
            return Err(SolverError::InvariantViolation(format!("weights reconstruct x only up to {drift:e}")));
        }
        self.x = recon;
        Ok(())
    }
}

/// How the solver obtains the gradient Lipschitz constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LipschitzChoice {
    Fixed(f64),
    Auto(AutoLipschitz),
}

impl Default for LipschitzChoice {
    fn default() -> Self {
        LipschitzChoice::Auto(AutoLipschitz::Auto)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoLipschitz {
    /// Oracle's known constant when it has one, otherwise sampling.
    #[serde(rename = "auto")]
    Auto,
    /// Always the sampling estimate over 10 points.
    #[serde(rename = "auto-sample")]
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub tau: f64,
    #[serde(default)]
    pub sigma: f64,
    /// `None`: ten times the complexity bound when known, else 1e5.
    #[serde(default)]
    pub max_iters: Option<u64>,
    /// Swap cap `R` for the pairwise variant.
    #[serde(default = "default_swap_cap", rename = "R", alias = "swap_cap")]
    pub swap_cap: u32,
    #[serde(default)]
    pub stepsize: StepsizeConfig,
    #[serde(default)]
    pub lipschitz: LipschitzChoice,
    /// Certified lower bound on `min f`, used by the complexity bound.
    #[serde(default)]
    pub f_star: Option<f64>,
    /// Record the exact FW gap when the oracle has an exact channel.
    #[serde(default = "default_true")]
    pub track_exact_gap: bool,
    /// Seed of the sampling Lipschitz estimator.
    #[serde(default)]
    pub lipschitz_seed: u64,
}

fn default_swap_cap() -> u32 {
    1
}

fn default_true() -> bool {
    true
}

impl SolverConfig {
    pub fn new(tau: f64, sigma: f64) -> Self {
        Self {
            tau,
            sigma,
            max_iters: None,
            swap_cap: default_swap_cap(),
            stepsize: StepsizeConfig::default(),
            lipschitz: LipschitzChoice::default(),
            f_star: None,
            track_exact_gap: true,
            lipschitz_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(SolverError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0 / 3.0).contains(&self.sigma) {
            return Err(SolverError::SigmaOutOfRange(self.sigma));
        }
        if self.swap_cap == 0 {
            return Err(SolverError::InvalidConfig("R must be at least 1".into()));
        }
        if self.max_iters == Some(0) {
            return Err(SolverError::InvalidConfig("max_iters must be positive".into()));
        }
        if let LipschitzChoice::Fixed(l) = self.lipschitz {
            if !(l > 0.0 && l.is_finite()) {
                return Err(SolverError::InvalidConfig(format!("lipschitz must be positive, got {l}")));
            }
        }
        self.stepsize.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: u64,
    pub step_type: StepType,
    /// `−∇̃f^T d_n` for the executed (or, on the stopping row, tested) direction.
    pub g_tilde: f64,
    /// `−∇̃f^T h_n` with `h_n` the FW direction.
    pub g_tilde_h: f64,
    pub g_exact: Option<f64>,
    pub eta: f64,
    pub eta_max: f64,
    /// Objective at `x_n`, before the step.
    pub f_value: f64,
    /// Support size after the step.
    pub support_size: usize,
    pub inner_iters: u64,
    pub consecutive_swaps: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GapBelowTau,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub variant: Variant,
    pub final_iterate: Iterate,
    /// Index of the stopping iteration (number of steps taken).
    pub n_iters: u64,
    pub trace: Vec<TraceRecord>,
    pub termination: Termination,
    pub theoretical_bound: Option<u64>,
    /// True when the bound used an exact `L`, a certified `f*` and a
    /// single-vertex start where the variant requires one.
    pub bound_certified: bool,
    pub best_gap: Option<f64>,
    pub lipschitz_initial: f64,
    pub lipschitz_final: f64,
    pub f_star: Option<f64>,
}

impl SolverReport {
    /// Running minimum of the FW gap per row: exact when recorded, else the
    /// estimated FW gap.
    pub fn best_gap_series(&self) -> Vec<f64> {
        best_gap_series(&self.trace)
    }
}

pub fn best_gap_series(trace: &[TraceRecord]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    trace
        .iter()
        .map(|r| {
            best = best.min(r.g_exact.unwrap_or(r.g_tilde_h));
            best
        })
        .collect()
}

/// Complexity bound: `⌈c · max{α₁, α₂}⌉ − 1` with `c = 1, 2, 2(R+1)` for the
/// three variants, where
/// `α₁ = Δ² L (f₀ − f*) (1+σ)² / (τ² ρ (1−σ)²)` and
/// `α₂ = 2 (f₀ − f*) (1+σ) / (τ (1−3σ))`.
#[allow(clippy::too_many_arguments)]
pub fn theoretical_iteration_bound(
    variant: Variant,
    f0_minus_fstar: f64,
    lipschitz: f64,
    delta: f64,
    sigma: f64,
    tau: f64,
    rho: f64,
    swap_cap: u32,
) -> Result<u64> {
    if !(0.0..1.0 / 3.0).contains(&sigma) {
        return Err(SolverError::SigmaOutOfRange(sigma));
    }
    for (name, v) in [("f0 - f*", f0_minus_fstar), ("L", lipschitz), ("delta", delta), ("tau", tau), ("rho", rho)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(SolverError::InvalidConfig(format!("{name} must be positive, got {v}")));
        }
    }
    let alpha1 =
        delta * delta * lipschitz * f0_minus_fstar * (1.0 + sigma).powi(2) / (tau * tau * rho * (1.0 - sigma).powi(2));
    let alpha2 = 2.0 * f0_minus_fstar * (1.0 + sigma) / (tau * (1.0 - 3.0 * sigma));
    let factor = match variant {
        Variant::Fw => 1.0,
        Variant::Asfw => 2.0,
        Variant::Pwfw => 2.0 * (f64::from(swap_cap) + 1.0),
    };
    let n = (factor * alpha1.max(alpha2)).ceil() - 1.0;
    Ok(if n >= u64::MAX as f64 { u64::MAX } else { n.max(0.0) as u64 })
}

pub fn run_fw(
    oracle: &mut dyn GradientOracle,
    domain: &Domain,
    x0: Iterate,
    cfg: &SolverConfig,
) -> Result<SolverReport> {
    run(Variant::Fw, oracle, domain, x0, cfg)
}

pub fn run_asfw(
    oracle: &mut dyn GradientOracle,
    domain: &Domain,
    x0: Iterate,
    cfg: &SolverConfig,
) -> Result<SolverReport> {
    run(Variant::Asfw, oracle, domain, x0, cfg)
}

pub fn run_pwfw(
    oracle: &mut dyn GradientOracle,
    domain: &Domain,
    x0: Iterate,
    cfg: &SolverConfig,
) -> Result<SolverReport> {
    run(Variant::Pwfw, oracle, domain, x0, cfg)
}

/// Runs `variant` and hands every trace row to `observer` together with the
/// iterate right after that row's step (the unchanged iterate on the
/// stopping row).
pub fn run_observed(
    variant: Variant,
    oracle: &mut dyn GradientOracle,
    domain: &Domain,
    x0: Iterate,
    cfg: &SolverConfig,
    observer: &mut dyn FnMut(&TraceRecord, &Iterate),
) -> Result<SolverReport> {
    run_with(variant, oracle, domain, x0, cfg, observer)
}

struct Engine<'a> {
    oracle: &'a mut dyn GradientOracle,
    cfg: &'a SolverConfig,
    rho: f64,
    lipschitz: f64,
}

struct Taken {
    eta: f64,
    f_new: f64,
}

impl Engine<'_> {
    /// Stepsize along `d` meeting both step conditions, doubling `L` when the
    /// current estimate is too small.
    fn step(&mut self, x: &[f64], f_old: f64, d: &[f64], g_tilde: f64, eta_max: f64) -> Result<Taken> {
        for _ in 0..=MAX_LIPSCHITZ_DOUBLINGS {
            match self.cfg.stepsize.rule {
                StepRule::Exact => {
                    let r = exact_stepsize(g_tilde, d, self.lipschitz, eta_max)?;
                    let mut trial = x.to_vec();
                    axpy(&mut trial, r.eta, d);
                    let f_new = self.oracle.value(&trial)?;
                    if sufficient_decrease(f_old, f_new, self.rho, r.eta_bar, g_tilde) {
                        return Ok(Taken { eta: r.eta, f_new });
                    }
                }
                StepRule::Armijo => {
                    let oracle = &mut *self.oracle;
                    let res = armijo_search(
                        |p| oracle.value(p),
                        x,
                        f_old,
                        d,
                        g_tilde,
                        self.lipschitz,
                        eta_max,
                        self.rho,
                        &self.cfg.stepsize,
                    );
                    match res {
                        Ok(r) => return Ok(Taken { eta: r.eta, f_new: r.f_new.expect("armijo evaluates f") }),
                        Err(StepsizeError::LineSearchFailure(_)) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            self.lipschitz *= 2.0;
        }
        Err(SolverError::StepsizeFailure(self.lipschitz))
    }
}

/// Directions and gaps at the current iterate.
struct Directions {
    fw_vertex: Vec<f64>,
    fw_id: VertexId,
    h: Vec<f64>,
    g_h: f64,
    away: Option<(Vec<f64>, VertexId)>,
}

fn directions(domain: &Domain, it: &Iterate, g: &[f64], with_away: bool) -> Result<Directions> {
    let (fw_vertex, fw_id) = domain.lmo(g)?;
    let h = sub(&fw_vertex, it.x());
    let g_h = -dot(g, &h);
    let away = if with_away { Some(domain.away_vertex(g, it.support_iter())?) } else { None };
    Ok(Directions { fw_vertex, fw_id, h, g_h, away })
}

/// Outcome of one executed step.
struct Executed {
    step_type: StepType,
    g_tilde: f64,
    eta: f64,
    eta_max: f64,
    f_new: f64,
}

fn fw_update(it: &mut Iterate, dirs: &Directions, eta: f64, eta_max: f64) -> Result<()> {
    let mut expected = it.x().to_vec();
    axpy(&mut expected, eta, &dirs.h);
    if eta == eta_max && eta_max == 1.0 {
        it.reset_to(&dirs.fw_id, &dirs.fw_vertex);
    } else {
        it.scale_all(1.0 - eta);
        it.add_weight(&dirs.fw_id, &dirs.fw_vertex, eta);
    }
    it.settle(expected)
}

/// One away-step FW iteration on an already computed gradient: choose
/// between the FW and away directions (FW on ties), step, update weights.
fn away_step_iteration(
    engine: &mut Engine<'_>,
    it: &mut Iterate,
    g: &[f64],
    f_val: f64,
    dirs: &Directions,
) -> Result<Executed> {
    let (away_vertex, away_id) = dirs.away.as_ref().expect("away vertex computed");
    let b = sub(it.x(), away_vertex);
    let g_b = -dot(g, &b);
    let away_weight = it.weight(away_id).expect("away vertex is in the support");
    if dirs.g_h >= g_b || away_weight >= 1.0 {
        let taken = engine.step(it.x(), f_val, &dirs.h, dirs.g_h, 1.0)?;
        fw_update(it, dirs, taken.eta, 1.0)?;
        return Ok(Executed {
            step_type: StepType::FW,
            g_tilde: dirs.g_h,
            eta: taken.eta,
            eta_max: 1.0,
            f_new: taken.f_new,
        });
    }
    let eta_max = away_weight / (1.0 - away_weight);
    let taken = engine.step(it.x(), f_val, &b, g_b, eta_max)?;
    let mut expected = it.x().to_vec();
    axpy(&mut expected, taken.eta, &b);
    let dropped = taken.eta == eta_max;
    it.scale_all(1.0 + taken.eta);
    it.add_weight(away_id, away_vertex, -taken.eta);
    if dropped {
        it.remove(away_id);
    }
    it.settle(expected)?;
    let step_type = if dropped { StepType::Drop } else { StepType::Away };
    Ok(Executed { step_type, g_tilde: g_b, eta: taken.eta, eta_max, f_new: taken.f_new })
}

fn run(
    variant: Variant,
    oracle: &mut dyn GradientOracle,
    domain: &Domain,
    x0: Iterate,
    cfg: &SolverConfig,
) -> Result<SolverReport> {
    run_with(variant, oracle, domain, x0, cfg, &mut |_, _| {})
}

fn run_with(
    variant: Variant,
    oracle: &mut dyn GradientOracle,
    domain: &Domain,
    x0: Iterate,
    cfg: &SolverConfig,
    observer: &mut dyn FnMut(&TraceRecord, &Iterate),
) -> Result<SolverReport> {
    cfg.validate()?;
    if oracle.dim() != domain.dim() || x0.x().len() != domain.dim() {
        return Err(DomainError::DimensionMismatch { expected: domain.dim(), got: x0.x().len() }.into());
    }
    if !domain.membership(x0.x(), 1e-8)? {
        return Err(SolverError::InvalidStart("x0 is not feasible".into()));
    }
    if x0.reconstruction_error() > RECONSTRUCTION_TOL {
        return Err(SolverError::InvalidStart("x0 weights do not reconstruct x0".into()));
    }

    let mut inner_mark = oracle.total_inner_iters();
    let (lipschitz, lipschitz_exact) = match cfg.lipschitz {
        LipschitzChoice::Fixed(l) => (l, false),
        LipschitzChoice::Auto(AutoLipschitz::Sample) => {
            (estimate_lipschitz_sampling(oracle, domain, 10, cfg.lipschitz_seed)?.value, false)
        }
        LipschitzChoice::Auto(AutoLipschitz::Auto) => match oracle.lipschitz_hint() {
            Some(l) => (l, true),
            None => (estimate_lipschitz_sampling(oracle, domain, 10, cfg.lipschitz_seed)?.value, false),
        },
    };
    let lipschitz = lipschitz.max(LIPSCHITZ_FLOOR);
    let rho = cfg.stepsize.rho_for(cfg.sigma);

    let mut it = x0;
    let f0 = oracle.value(it.x())?;
    let (f_star, f_star_certified) = match cfg.f_star {
        Some(v) => (Some(v), true),
        None => match oracle.lower_bound_hint() {
            Some(v) => (Some(v), true),
            None => (vertex_minimum(oracle, domain)?, false),
        },
    };
    let theoretical_bound = match f_star {
        Some(fs) if f0 > fs => Some(theoretical_iteration_bound(
            variant,
            f0 - fs,
            lipschitz,
            domain.diameter(),
            cfg.sigma,
            cfg.tau,
            rho,
            cfg.swap_cap,
        )?),
        _ => None,
    };
    let single_start = variant == Variant::Fw || it.support_size() == 1;
    let bound_certified = theoretical_bound.is_some() && f_star_certified && lipschitz_exact && single_start;
    let max_iters = cfg.max_iters.unwrap_or_else(|| match theoretical_bound {
        Some(b) => b.saturating_mul(10).max(1),
        None => FALLBACK_MAX_ITERS,
    });

    let mut engine = Engine { oracle, cfg, rho, lipschitz };
    let mut trace = Vec::new();
    let mut f_val = f0;
    let mut swaps: u32 = 0;
    let mut termination = Termination::MaxIters;
    let mut n: u64 = 0;
    loop {
        if n >= max_iters {
            break;
        }
        let g = engine.oracle.gradient(it.x())?;
        if !all_finite(&g) {
            return Err(SolverError::NonFiniteGradient);
        }
        let g_exact = if cfg.track_exact_gap && engine.oracle.has_exact_channel() {
            let ge = engine.oracle.exact_gradient(it.x())?;
            Some(fw_gap(domain, &ge, it.x())?)
        } else {
            None
        };
        let dirs = directions(domain, &it, &g, variant != Variant::Fw)?;
        let mut record = TraceRecord {
            iter: n,
            step_type: StepType::FW,
            g_tilde: dirs.g_h,
            g_tilde_h: dirs.g_h,
            g_exact,
            eta: 0.0,
            eta_max: 1.0,
            f_value: f_val,
            support_size: it.support_size(),
            inner_iters: 0,
            consecutive_swaps: swaps,
        };
        let spent = |oracle: &dyn GradientOracle, mark: &mut u64| {
            let now = oracle.total_inner_iters();
            let d = now - *mark;
            *mark = now;
            d
        };

        let executed = match variant {
            Variant::Fw => {
                if dirs.g_h <= cfg.tau {
                    record.inner_iters = spent(&*engine.oracle, &mut inner_mark);
                    observer(&record, &it);
                    trace.push(record);
                    termination = Termination::GapBelowTau;
                    break;
                }
                let taken = engine.step(it.x(), f_val, &dirs.h, dirs.g_h, 1.0)?;
                fw_update(&mut it, &dirs, taken.eta, 1.0)?;
                Executed {
                    step_type: StepType::FW,
                    g_tilde: dirs.g_h,
                    eta: taken.eta,
                    eta_max: 1.0,
                    f_new: taken.f_new,
                }
            }
            Variant::Asfw => {
                if dirs.g_h <= cfg.tau {
                    let (a, _) = dirs.away.as_ref().expect("away vertex computed");
                    let g_b = -dot(&g, &sub(it.x(), a));
                    if g_b > dirs.g_h {
                        record.step_type = StepType::Away;
                        record.g_tilde = g_b;
                    }
                    record.inner_iters = spent(&*engine.oracle, &mut inner_mark);
                    observer(&record, &it);
                    trace.push(record);
                    termination = Termination::GapBelowTau;
                    break;
                }
                away_step_iteration(&mut engine, &mut it, &g, f_val, &dirs)?
            }
            Variant::Pwfw => {
                let (away_vertex, away_id) = dirs.away.clone().expect("away vertex computed");
                let d = sub(&dirs.fw_vertex, &away_vertex);
                let g_d = -dot(&g, &d);
                if g_d <= cfg.tau {
                    record.step_type = StepType::Pairwise;
                    record.g_tilde = g_d;
                    record.eta_max = it.weight(&away_id).expect("away vertex is in the support");
                    record.inner_iters = spent(&*engine.oracle, &mut inner_mark);
                    observer(&record, &it);
                    trace.push(record);
                    termination = Termination::GapBelowTau;
                    break;
                }
                let eta_max = it.weight(&away_id).expect("away vertex is in the support");
                let taken = engine.step(it.x(), f_val, &d, g_d, eta_max)?;
                let fw_in_support = it.contains(&dirs.fw_id);
                let at_max = taken.eta == eta_max;
                let is_swap = at_max && !fw_in_support;
                if is_swap {
                    swaps += 1;
                }
                if swaps <= cfg.swap_cap {
                    let mut expected = it.x().to_vec();
                    axpy(&mut expected, taken.eta, &d);
                    it.add_weight(&dirs.fw_id, &dirs.fw_vertex, taken.eta);
                    it.add_weight(&away_id, &away_vertex, -taken.eta);
                    if at_max {
                        it.remove(&away_id);
                    }
                    it.settle(expected)?;
                    let step_type = if is_swap {
                        StepType::Swap
                    } else if at_max {
                        StepType::Drop
                    } else {
                        StepType::Pairwise
                    };
                    Executed { step_type, g_tilde: g_d, eta: taken.eta, eta_max, f_new: taken.f_new }
                } else {
                    // swap budget exhausted: one away-step FW iteration instead,
                    // with the away vertex recomputed on the same gradient
                    let dirs = directions(domain, &it, &g, true)?;
                    let ex = away_step_iteration(&mut engine, &mut it, &g, f_val, &dirs)?;
                    swaps = 0;
                    ex
                }
            }
        };

        record.step_type = executed.step_type;
        record.g_tilde = executed.g_tilde;
        record.eta = executed.eta;
        record.eta_max = executed.eta_max;
        record.support_size = it.support_size();
        record.consecutive_swaps = swaps;
        record.inner_iters = spent(&*engine.oracle, &mut inner_mark);
        observer(&record, &it);
        trace.push(record);
        f_val = executed.f_new;
        n += 1;
    }

    let best_gap = trace.iter().filter_map(|r| r.g_exact).reduce(f64::min);
    Ok(SolverReport {
        variant,
        final_iterate: it,
        n_iters: n,
        trace,
        termination,
        theoretical_bound,
        bound_certified,
        best_gap,
        lipschitz_initial: lipschitz,
        lipschitz_final: engine.lipschitz,
        f_star,
    })
}

/// Smallest objective value over the vertices of an explicit polytope. Not
/// a certified lower bound unless `f` is concave or linear.
fn vertex_minimum(oracle: &mut dyn GradientOracle, domain: &Domain) -> Result<Option<f64>> {
    let crate::domains::DomainKind::ExplicitPolytope { vertices } = domain.kind() else {
        return Ok(None);
    };
    let mut best = f64::INFINITY;
    for v in vertices {
        best = best.min(oracle.value(v)?);
    }
    Ok(Some(best))
}

pub const TRACE_HEADER: &str =
    "iter,step_type,g_tilde,g_tilde_h,g_exact,eta,eta_max,f_value,support_size,inner_iters,consecutive_swaps";

/// Writes the trace as CSV with [`TRACE_HEADER`]; a missing exact gap is an
/// empty cell.
pub fn write_trace_csv<W: Write>(mut out: W, trace: &[TraceRecord]) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in trace {
        let g_exact = r.g_exact.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.iter,
            r.step_type.name(),
            r.g_tilde,
            r.g_tilde_h,
            g_exact,
            r.eta,
            r.eta_max,
            r.f_value,
            r.support_size,
            r.inner_iters,
            r.consecutive_swaps
        )?;
    }
    Ok(())
}

/// True when `x` passes membership and its weights reconstruct it.
pub fn iterate_is_consistent(domain: &Domain, it: &Iterate) -> bool {
    domain.membership(it.x(), 1e-8).unwrap_or(false)
        && it.reconstruction_error() <= RECONSTRUCTION_TOL
        && (it.weight_sum() - 1.0).abs() <= 1e-10
        && it.weights().all(|(_, w)| w > DROP_TOL)
        && domain.membership(&it.reconstruct(), MEMBERSHIP_TOL.max(1e-8)).unwrap_or(false)
}
