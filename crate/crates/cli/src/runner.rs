//! Builds problem instances and oracles and runs seeds on a worker pool.

use std::sync::Arc;

use bilevel_fw::domains::Domain;
use bilevel_fw::hypergrad::{make_hypergradient_oracle, FixedPointProblem, HypergradConfig};
use bilevel_fw::linalg::{norm, sub};
use bilevel_fw::objectives::{Linear, Objective, Quadratic, Quartic};
use bilevel_fw::oracles::{
    AuditRecord, ErrorContract, ExactOracle, GradientOracle, InnerSpend, OracleError, PerturbedOracle,
};
use bilevel_fw::problems::data::load_labeled_csv;
use bilevel_fw::problems::distill::{top_b_selection, DistillationInstance, DistillationProblem};
use bilevel_fw::problems::ssl::{generate_sbm_multilayer, SslProblem};
use bilevel_fw::problems::toy::ToyQuadratic;
use bilevel_fw::solvers::{run_asfw, run_fw, run_pwfw, Iterate, SolverConfig, SolverReport, Variant};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, ObjectiveSpec, OracleSpec, ProblemSpec, RunConfig, StartKind};

/// Largest inner iteration count used when sampling the bound constant `M`.
const BOUND_SAMPLE_ITERS_CAP: u64 = 10_000;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("seed {seed}: {message}")]
    Solver { seed: u64, message: String },
    #[error("cannot write {path}: {source}")]
    Output { path: std::path::PathBuf, source: std::io::Error },
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Output { .. } => 2,
            RunError::Solver { .. } => 3,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> RunError {
    RunError::Config(ConfigError::Invalid(e.to_string()))
}

/// A built problem, shared read-only by all runs of a config.
pub enum Instance {
    Toy(Arc<ToyQuadratic>),
    Ssl(Arc<SslProblem>),
    Distill(Arc<DistillationProblem>),
    Custom { domain: Domain, objective: Arc<dyn Objective>, uniform: Option<Vec<f64>> },
}

fn inner_iters_for(q: f64) -> u64 {
    ((1e-12f64).ln() / q.ln()).ceil().clamp(1.0, BOUND_SAMPLE_ITERS_CAP as f64) as u64
}

impl Instance {
    pub fn build(cfg: &RunConfig) -> Result<Self, RunError> {
        let auto = cfg.hypergrad.and_then(|h| h.method()).is_some_and(|(_, it)| it.auto_iters);
        Ok(match &cfg.problem {
            ProblemSpec::Toy { inner_dim, dim, q, instance_seed } => {
                let domain = Domain::unit_simplex(*dim).map_err(invalid)?;
                Instance::Toy(Arc::new(ToyQuadratic::random(*inner_dim, domain, *q, *instance_seed).map_err(invalid)?))
            }
            ProblemSpec::Ssl { sbm, instance_seed, bound_samples } => {
                let inst = generate_sbm_multilayer(sbm, *instance_seed).map_err(invalid)?;
                let mut p = SslProblem::new(inst).map_err(invalid)?;
                if auto {
                    let iters = inner_iters_for(p.contraction_factor().expect("ssl knows q"));
                    p.estimate_bound(*bound_samples, iters, *instance_seed).map_err(invalid)?;
                }
                Instance::Ssl(Arc::new(p))
            }
            ProblemSpec::Distill {
                data,
                samples,
                val_samples,
                dim,
                classes,
                budget_fraction,
                reg,
                inner_step,
                instance_seed,
                bound_samples,
            } => {
                let (train, val) = match data {
                    Some(path) => {
                        let all = load_labeled_csv(path).map_err(invalid)?;
                        if *val_samples >= all.len() {
                            return Err(invalid(format!(
                                "val_samples {val_samples} leaves no training data in {} rows",
                                all.len()
                            )));
                        }
                        let (mut train, mut val) =
                            all.split(all.len() - val_samples, *instance_seed).map_err(invalid)?;
                        train.standardize_with(&mut [&mut val]);
                        (train, val)
                    }
                    None => {
                        let s = DistillationInstance::synthetic(
                            *samples,
                            *val_samples,
                            *dim,
                            *classes,
                            *budget_fraction,
                            *instance_seed,
                        )
                        .map_err(invalid)?;
                        (s.train, s.val)
                    }
                };
                let budget = budget_fraction * train.len() as f64;
                let inst = DistillationInstance::new(train, val, budget, *reg).map_err(invalid)?;
                let mut p = DistillationProblem::new(inst, *inner_step, *instance_seed).map_err(invalid)?;
                if auto {
                    let iters = inner_iters_for(p.contraction_factor().expect("distillation knows q"));
                    p.estimate_bound(*bound_samples, iters, *instance_seed).map_err(invalid)?;
                }
                Instance::Distill(Arc::new(p))
            }
            ProblemSpec::CustomPolytope { domain, objective } => {
                let uniform = match domain {
                    bilevel_fw::domains::DomainSpec::CappedSimplex { dim, budget, .. } => {
                        Some(vec![budget / *dim as f64; *dim])
                    }
                    _ => None,
                };
                let domain = domain.build().map_err(invalid)?;
                let objective = build_objective(objective);
                if objective.dim() != domain.dim() {
                    return Err(invalid(format!(
                        "objective has dimension {} but the domain has {}",
                        objective.dim(),
                        domain.dim()
                    )));
                }
                Instance::Custom { domain, objective, uniform }
            }
        })
    }

    pub fn domain(&self) -> &Domain {
        match self {
            Instance::Toy(p) => p.outer_domain(),
            Instance::Ssl(p) => p.outer_domain(),
            Instance::Distill(p) => p.outer_domain(),
            Instance::Custom { domain, .. } => domain,
        }
    }

    fn fixed_point(&self) -> Option<Arc<dyn FixedPointProblem>> {
        match self {
            Instance::Toy(p) => Some(p.clone()),
            Instance::Ssl(p) => Some(p.clone()),
            Instance::Distill(p) => Some(p.clone()),
            Instance::Custom { .. } => None,
        }
    }

    fn objective(&self) -> Option<Arc<dyn Objective>> {
        match self {
            Instance::Toy(p) => Some(p.clone()),
            Instance::Custom { objective, .. } => Some(objective.clone()),
            _ => None,
        }
    }

    fn start(&self, kind: StartKind, seed: u64) -> Result<Iterate, RunError> {
        let domain = self.domain();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let it = match kind {
            StartKind::Vertex => Iterate::from_vertex(domain, domain.sample_vertex(&mut rng).1),
            StartKind::Random => Iterate::from_point(domain, &domain.sample_point(&mut rng)),
            StartKind::Uniform => {
                let x = match self {
                    Instance::Distill(p) => p.instance().initial_weights(),
                    Instance::Custom { uniform: Some(u), .. } => u.clone(),
                    _ => return Err(invalid("start `uniform` needs a capped simplex")),
                };
                Iterate::from_point(domain, &x)
            }
        };
        it.map_err(|e| RunError::Solver { seed, message: format!("start point: {e}") })
    }

    /// Problem-specific readout of a final point.
    fn describe(&self, x: &[f64]) -> Value {
        match self {
            Instance::Ssl(p) => {
                let (alpha, beta, lambda) = p.unpack(x);
                json!({ "alpha": alpha, "beta": beta, "lambda": lambda })
            }
            Instance::Distill(p) => {
                let budget = p.instance().budget;
                json!({
                    "budget": budget,
                    "selected": top_b_selection(x, budget),
                    "feasible": p.outer_domain().membership(x, 1e-8).unwrap_or(false),
                })
            }
            _ => Value::Null,
        }
    }
}

fn dense(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

fn build_objective(spec: &ObjectiveSpec) -> Arc<dyn Objective> {
    match spec {
        ObjectiveSpec::Quadratic { q, c } => Arc::new(Quadratic::new(dense(q), c.clone())),
        ObjectiveSpec::Quartic { q, c, gamma } => Arc::new(Quartic::new(Quadratic::new(dense(q), c.clone()), *gamma)),
        ObjectiveSpec::Linear { c } => Arc::new(Linear::new(c.clone())),
    }
}

/// Records `‖∇̃f − ∇f‖` on every gradient call. The contract holds whenever
/// `‖e‖ Δ ≤ bound` (Cauchy-Schwarz), which is what `violated` tests.
struct Auditor<'a> {
    inner: &'a mut dyn GradientOracle,
    bound: f64,
    diameter: f64,
    records: Vec<AuditRecord>,
}

impl GradientOracle for Auditor<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn domain(&self) -> &Domain {
        self.inner.domain()
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, OracleError> {
        let g = self.inner.gradient(x)?;
        let exact = self.inner.exact_gradient(x)?;
        let noise_norm = norm(&sub(&g, &exact));
        self.records.push(AuditRecord {
            evaluation: self.inner.eval_count(),
            noise_norm,
            bound: self.bound,
            violated: noise_norm * self.diameter > self.bound,
        });
        Ok(g)
    }

    fn value(&mut self, x: &[f64]) -> Result<f64, OracleError> {
        self.inner.value(x)
    }

    fn exact_gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, OracleError> {
        self.inner.exact_gradient(x)
    }

    fn has_exact_channel(&self) -> bool {
        self.inner.has_exact_channel()
    }

    fn eval_count(&self) -> u64 {
        self.inner.eval_count()
    }

    fn last_spend(&self) -> InnerSpend {
        self.inner.last_spend()
    }

    fn total_inner_iters(&self) -> u64 {
        self.inner.total_inner_iters()
    }

    fn contract(&self) -> Option<ErrorContract> {
        self.inner.contract()
    }

    fn lipschitz_hint(&self) -> Option<f64> {
        self.inner.lipschitz_hint()
    }

    fn lower_bound_hint(&self) -> Option<f64> {
        self.inner.lower_bound_hint()
    }
}

/// How the inner iteration counts were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMode {
    None,
    Fixed,
    Auto,
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub variant: Variant,
    pub report: SolverReport,
    pub best_gap: Vec<f64>,
    pub inner: InnerSpend,
    pub inner_mode: InnerMode,
    pub total_inner_iters: u64,
    pub audit: Option<Vec<AuditRecord>>,
    pub details: Value,
}

fn solver_failure(seed: u64) -> impl Fn(String) -> RunError {
    move |message| RunError::Solver { seed, message }
}

pub fn run_seed(inst: &Instance, cfg: &RunConfig, variant: Variant, seed: u64) -> Result<SeedRun, RunError> {
    let fail = solver_failure(seed);
    let oracle_spec = cfg.hypergrad.expect("resolved");
    let mut solver_cfg: SolverConfig = cfg.solver_cfg.clone();
    solver_cfg.lipschitz_seed = solver_cfg.lipschitz_seed.wrapping_add(seed);
    let contract = ErrorContract::new(solver_cfg.sigma, solver_cfg.tau).map_err(invalid)?;

    let (mut oracle, inner, inner_mode): (Box<dyn GradientOracle>, InnerSpend, InnerMode) = match oracle_spec {
        OracleSpec::Itd(it) | OracleSpec::Aid(it) => {
            let (method, _) = oracle_spec.method().expect("hypergradient spec");
            let problem = inst.fixed_point().ok_or_else(|| invalid("problem has no inner level"))?;
            let hcfg = HypergradConfig { method, t: it.t, k: it.k, epsilon: it.epsilon, auto_iters: it.auto_iters };
            let h = make_hypergradient_oracle(problem, &hcfg, Some(contract)).map_err(invalid)?;
            let spend = h.iterations();
            (Box::new(h), spend, if it.auto_iters { InnerMode::Auto } else { InnerMode::Fixed })
        }
        OracleSpec::Exact | OracleSpec::Perturbed { .. } => {
            let objective = inst.objective().ok_or_else(|| invalid("problem has no closed-form gradient"))?;
            let exact = ExactOracle::new(objective, inst.domain().clone()).map_err(invalid)?;
            let o: Box<dyn GradientOracle> = match oracle_spec {
                OracleSpec::Perturbed { rule } => Box::new(PerturbedOracle::new(exact, contract, rule, seed)),
                _ => Box::new(exact),
            };
            (o, InnerSpend::default(), InnerMode::None)
        }
    };

    let x0 = inst.start(cfg.start.expect("resolved"), seed)?;
    let domain = inst.domain();
    let run = |o: &mut dyn GradientOracle| -> Result<SolverReport, RunError> {
        match variant {
            Variant::Fw => run_fw(o, domain, x0.clone(), &solver_cfg),
            Variant::Asfw => run_asfw(o, domain, x0.clone(), &solver_cfg),
            Variant::Pwfw => run_pwfw(o, domain, x0.clone(), &solver_cfg),
        }
        .map_err(|e| fail(e.to_string()))
    };
    let (report, audit) = if cfg.audit {
        if !oracle.has_exact_channel() {
            return Err(invalid("audit needs an exact gradient (toy or custom_polytope problems)"));
        }
        let mut auditor =
            Auditor { inner: &mut *oracle, bound: contract.bound(), diameter: domain.diameter(), records: Vec::new() };
        let report = run(&mut auditor)?;
        (report, Some(auditor.records))
    } else {
        (run(&mut *oracle)?, None)
    };
    let best_gap = report.best_gap_series();
    let details = inst.describe(report.final_iterate.x());
    Ok(SeedRun {
        seed,
        variant,
        best_gap,
        inner,
        inner_mode,
        total_inner_iters: oracle.total_inner_iters(),
        audit,
        details,
        report,
    })
}

/// Runs every `(variant, seed)` pair on a pool of `cfg.jobs` threads.
/// Results come back grouped by variant, seeds in config order.
pub fn execute(cfg: &RunConfig, variants: &[Variant]) -> Result<(Instance, Vec<Vec<SeedRun>>), RunError> {
    let inst = Instance::build(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.expect("resolved"))
        .build()
        .map_err(|e| invalid(format!("cannot start worker pool: {e}")))?;
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s))).collect();
    let results: Vec<Result<SeedRun, RunError>> =
        pool.install(|| jobs.par_iter().map(|&(v, s)| run_seed(&inst, cfg, v, s)).collect());
    let mut grouped: Vec<Vec<SeedRun>> = variants.iter().map(|_| Vec::with_capacity(cfg.seeds.len())).collect();
    for (r, (v, _)) in results.into_iter().zip(&jobs) {
        let i = variants.iter().position(|x| x == v).expect("variant listed");
        grouped[i].push(r?);
    }
    Ok((inst, grouped))
}
