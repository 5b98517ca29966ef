//! Run configuration: a JSON file, overridden field by field by flags.

use std::path::{Path, PathBuf};

use bilevel_fw::domains::DomainSpec;
use bilevel_fw::hypergrad::HypergradMethod;
use bilevel_fw::oracles::{ErrorContract, NoiseRule};
use bilevel_fw::problems::distill::{DEFAULT_BUDGET_FRACTION, DEFAULT_INNER_ITERS, DEFAULT_INNER_STEP, DEFAULT_REG};
use bilevel_fw::problems::ssl::SbmConfig;
use bilevel_fw::solvers::{SolverConfig, Variant};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

/// Inner iterations used when neither `t` nor `auto_iters` is given.
/// Fixed inner iteration cap of the SSL experiment.
pub const SSL_MAX_FIXED_ITERS: u64 = 500;
pub const DEFAULT_T: u64 = 50;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// Quadratic bilevel problem with a closed-form hypergradient.
    Toy {
        #[serde(default = "default_toy_inner_dim")]
        inner_dim: usize,
        /// Outer variables live on the unit simplex of this dimension.
        #[serde(default = "default_toy_dim")]
        dim: usize,
        #[serde(default = "default_toy_q")]
        q: f64,
        #[serde(default)]
        instance_seed: u64,
    },
    /// Hyperparameter learning for multilayer label propagation.
    Ssl {
        #[serde(default)]
        sbm: SbmConfig,
        #[serde(default)]
        instance_seed: u64,
        /// Samples used to estimate `M` in auto mode.
        #[serde(default = "default_bound_samples")]
        bound_samples: usize,
    },
    /// Sample reweighting under a budget.
    Distill {
        /// Labeled CSV (label in the last column); synthetic data when absent.
        #[serde(default)]
        data: Option<PathBuf>,
        #[serde(default = "default_distill_samples")]
        samples: usize,
        #[serde(default = "default_distill_val")]
        val_samples: usize,
        #[serde(default = "default_distill_dim")]
        dim: usize,
        #[serde(default = "default_distill_classes")]
        classes: usize,
        #[serde(default = "default_budget_fraction")]
        budget_fraction: f64,
        #[serde(default = "default_reg")]
        reg: f64,
        #[serde(default = "default_inner_step")]
        inner_step: f64,
        #[serde(default)]
        instance_seed: u64,
        #[serde(default = "default_bound_samples")]
        bound_samples: usize,
    },
    /// A smooth objective over any domain the library supports.
    CustomPolytope { domain: DomainSpec, objective: ObjectiveSpec },
}

fn default_toy_inner_dim() -> usize {
    10
}
fn default_toy_dim() -> usize {
    5
}
fn default_toy_q() -> f64 {
    0.5
}
fn default_bound_samples() -> usize {
    50
}
fn default_distill_samples() -> usize {
    500
}
fn default_distill_val() -> usize {
    200
}
fn default_distill_dim() -> usize {
    20
}
fn default_distill_classes() -> usize {
    3
}
fn default_budget_fraction() -> f64 {
    DEFAULT_BUDGET_FRACTION
}
fn default_reg() -> f64 {
    DEFAULT_REG
}
fn default_inner_step() -> f64 {
    DEFAULT_INNER_STEP
}

impl ProblemSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemSpec::Toy { .. } => "toy",
            ProblemSpec::Ssl { .. } => "ssl",
            ProblemSpec::Distill { .. } => "distill",
            ProblemSpec::CustomPolytope { .. } => "custom_polytope",
        }
    }

    pub fn is_bilevel(&self) -> bool {
        !matches!(self, ProblemSpec::CustomPolytope { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    /// `½ x^T Q x + c^T x`
    Quadratic {
        q: Vec<Vec<f64>>,
        c: Vec<f64>,
    },
    /// Quadratic plus `(γ/4) Σ x_i^4`.
    Quartic {
        q: Vec<Vec<f64>>,
        c: Vec<f64>,
        gamma: f64,
    },
    Linear {
        c: Vec<f64>,
    },
}

/// Inner iteration settings for ITD and AID.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerIters {
    #[serde(default)]
    pub t: Option<u64>,
    #[serde(default)]
    pub k: Option<u64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub auto_iters: bool,
}

fn default_epsilon() -> f64 {
    0.5
}

impl Default for InnerIters {
    fn default() -> Self {
        Self { t: None, k: None, epsilon: default_epsilon(), auto_iters: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    Itd(InnerIters),
    Aid(InnerIters),
    Exact,
    /// Exact gradient plus noise at the full error budget of `solver_cfg.sigma`.
    Perturbed {
        #[serde(default)]
        rule: NoiseRule,
    },
}

impl OracleSpec {
    pub fn name(&self) -> &'static str {
        match self {
            OracleSpec::Itd(_) => "itd",
            OracleSpec::Aid(_) => "aid",
            OracleSpec::Exact => "exact",
            OracleSpec::Perturbed { .. } => "perturbed",
        }
    }

    pub fn method(&self) -> Option<(HypergradMethod, InnerIters)> {
        match *self {
            OracleSpec::Itd(it) => Some((HypergradMethod::Itd, it)),
            OracleSpec::Aid(it) => Some((HypergradMethod::Aid, it)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartKind {
    /// A seeded random vertex.
    Vertex,
    /// A seeded random feasible point.
    Random,
    /// `B/m` on every coordinate of a capped simplex.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    #[serde(default = "default_solver")]
    pub solver: Variant,
    /// Defaults to AID with fixed `t` for bilevel problems, exact otherwise.
    #[serde(default)]
    pub hypergrad: Option<OracleSpec>,
    pub solver_cfg: SolverConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads; defaults to the number of seeds.
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub audit: bool,
    #[serde(default)]
    pub start: Option<StartKind>,
}

fn default_solver() -> Variant {
    Variant::Fw
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Flag values; every `Some` replaces the matching JSON field.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub problem: Option<String>,
    pub solver: Option<String>,
    pub hypergrad: Option<String>,
    pub t: Option<u64>,
    pub k: Option<u64>,
    pub auto_iters: bool,
    pub tau: Option<f64>,
    pub sigma: Option<f64>,
    pub swap_cap: Option<u32>,
    pub max_iters: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub jobs: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub audit: bool,
}

/// Parses `3`, `0..4` (inclusive) or `1,5,9`.
pub fn parse_seeds(s: &str) -> std::result::Result<Vec<u64>, String> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| format!("bad seed range `{s}`"))?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| format!("bad seed range `{s}`"))?;
        if a > b {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| p.trim().parse::<u64>().map_err(|_| format!("bad seed `{p}`"))).collect()
}

fn object_at<'a>(root: &'a mut Map<String, Value>, key: &str) -> &'a mut Map<String, Value> {
    let slot = root.entry(key.to_string()).or_insert_with(|| json!({}));
    if !slot.is_object() {
        *slot = json!({});
    }
    slot.as_object_mut().expect("object")
}

/// Replaces `root[key]` by `{"kind": kind}` unless it already has that kind.
fn set_kind(root: &mut Map<String, Value>, key: &str, kind: &str) {
    let obj = object_at(root, key);
    if obj.get("kind").and_then(Value::as_str) != Some(kind) {
        obj.clear();
        obj.insert("kind".into(), json!(kind));
    }
}

impl Overrides {
    fn apply(&self, root: &mut Map<String, Value>) {
        if let Some(p) = &self.problem {
            set_kind(root, "problem", &p.replace('-', "_"));
        }
        if let Some(s) = &self.solver {
            root.insert("solver".into(), json!(s));
        }
        if let Some(h) = &self.hypergrad {
            set_kind(root, "hypergrad", h);
        }
        if self.t.is_some() || self.k.is_some() || self.auto_iters {
            let obj = object_at(root, "hypergrad");
            if !obj.contains_key("kind") {
                obj.insert("kind".into(), json!("aid"));
            }
            if let Some(t) = self.t {
                obj.insert("t".into(), json!(t));
            }
            if let Some(k) = self.k {
                obj.insert("k".into(), json!(k));
            }
            if self.auto_iters {
                obj.insert("auto_iters".into(), json!(true));
            }
        }
        let cfg = [
            ("tau", self.tau.map(|v| json!(v))),
            ("sigma", self.sigma.map(|v| json!(v))),
            ("R", self.swap_cap.map(|v| json!(v))),
            ("max_iters", self.max_iters.map(|v| json!(v))),
        ];
        if cfg.iter().any(|(_, v)| v.is_some()) {
            let obj = object_at(root, "solver_cfg");
            for (key, v) in cfg {
                if let Some(v) = v {
                    if key == "R" {
                        obj.remove("swap_cap");
                    }
                    obj.insert(key.into(), v);
                }
            }
        }
        if let Some(seeds) = &self.seeds {
            root.insert("seeds".into(), json!(seeds));
        }
        if let Some(j) = self.jobs {
            root.insert("jobs".into(), json!(j));
        }
        if let Some(dir) = &self.output_dir {
            root.insert("output_dir".into(), json!(dir));
        }
        if self.audit {
            root.insert("audit".into(), json!(true));
        }
    }
}

/// Reads the optional JSON file, applies the flags and fills defaults.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut root = match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?;
            let v: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
            match v {
                Value::Object(m) => m,
                _ => return Err(ConfigError::Parse("top level must be a JSON object".into())),
            }
        }
        None => Map::new(),
    };
    overrides.apply(&mut root);
    let cfg: RunConfig = serde_json::from_value(Value::Object(root)).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.resolve()
}

impl RunConfig {
    /// Fills problem-dependent defaults and checks cross-field constraints.
    pub fn resolve(mut self) -> Result<Self> {
        let bilevel = self.problem.is_bilevel();
        let oracle = self.hypergrad.get_or_insert(if bilevel {
            OracleSpec::Aid(InnerIters::default())
        } else {
            OracleSpec::Exact
        });
        if let OracleSpec::Itd(it) | OracleSpec::Aid(it) = oracle {
            if !it.auto_iters && it.t.is_none() {
                it.t = Some(match self.problem {
                    ProblemSpec::Distill { .. } => DEFAULT_INNER_ITERS,
                    _ => DEFAULT_T,
                });
            }
        }
        if self.start.is_none() {
            self.start = Some(match self.problem {
                ProblemSpec::Ssl { .. } => StartKind::Random,
                ProblemSpec::Distill { .. } => StartKind::Uniform,
                _ => StartKind::Vertex,
            });
        }
        if self.jobs.is_none() {
            self.jobs = Some(self.seeds.len().max(1));
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.solver_cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".into()));
        }
        if self.jobs == Some(0) {
            return Err(ConfigError::Invalid("jobs must be at least 1".into()));
        }
        let oracle = self.hypergrad.expect("resolved");
        let sigma = self.solver_cfg.sigma;
        match oracle {
            OracleSpec::Itd(it) | OracleSpec::Aid(it) => {
                if !self.problem.is_bilevel() {
                    return Err(ConfigError::Invalid(format!(
                        "hypergrad `{}` needs a bilevel problem, not {}",
                        oracle.name(),
                        self.problem.name()
                    )));
                }
                if it.auto_iters && sigma <= 0.0 {
                    return Err(ConfigError::Invalid(
                        "auto_iters needs solver_cfg.sigma > 0 to bound the inner iterations".into(),
                    ));
                }
                if it.t == Some(0) || it.k == Some(0) {
                    return Err(ConfigError::Invalid("t and k must be at least 1".into()));
                }
                if matches!(self.problem, ProblemSpec::Ssl { .. })
                    && !it.auto_iters
                    && it.t.max(it.k).is_some_and(|n| n > SSL_MAX_FIXED_ITERS)
                {
                    return Err(ConfigError::Invalid(format!(
                        "ssl runs at most {SSL_MAX_FIXED_ITERS} fixed inner iterations; use auto_iters for more"
                    )));
                }
                if !(it.epsilon > 0.0 && it.epsilon < 1.0) {
                    return Err(ConfigError::Invalid(format!("epsilon must lie in (0, 1), got {}", it.epsilon)));
                }
            }
            OracleSpec::Exact | OracleSpec::Perturbed { .. } => {
                if matches!(self.problem, ProblemSpec::Ssl { .. } | ProblemSpec::Distill { .. }) {
                    return Err(ConfigError::Invalid(format!(
                        "problem {} has no closed-form gradient; use itd or aid",
                        self.problem.name()
                    )));
                }
            }
        }
        ErrorContract::new(sigma, self.solver_cfg.tau).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match (self.start.expect("resolved"), &self.problem) {
            (StartKind::Uniform, ProblemSpec::Distill { .. }) => {}
            (StartKind::Uniform, ProblemSpec::CustomPolytope { domain: DomainSpec::CappedSimplex { .. }, .. }) => {}
            (StartKind::Uniform, p) => {
                return Err(ConfigError::Invalid(format!("start `uniform` needs a capped simplex, not {}", p.name())))
            }
            _ => {}
        }
        if let ProblemSpec::CustomPolytope { objective, .. } = &self.problem {
            objective.check_shape()?;
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

impl ObjectiveSpec {
    fn check_shape(&self) -> Result<()> {
        let (q, c) = match self {
            ObjectiveSpec::Quadratic { q, c } | ObjectiveSpec::Quartic { q, c, .. } => (Some(q), c),
            ObjectiveSpec::Linear { c } => (None, c),
        };
        if let Some(q) = q {
            if q.len() != c.len() || q.iter().any(|row| row.len() != c.len()) {
                return Err(ConfigError::Invalid(format!("objective q must be {0}x{0} to match c", c.len())));
            }
        }
        if let ObjectiveSpec::Quartic { gamma, .. } = self {
            if *gamma < 0.0 {
                return Err(ConfigError::Invalid("objective gamma must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_syntax() {
        assert_eq!(parse_seeds("0..4").unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert_eq!(parse_seeds("1, 5,9").unwrap(), vec![1, 5, 9]);
        assert!(parse_seeds("4..1").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn flags_alone_build_a_config() {
        let o = Overrides {
            problem: Some("toy".into()),
            hypergrad: Some("aid".into()),
            tau: Some(1e-3),
            seeds: Some(vec![0, 1]),
            ..Default::default()
        };
        let cfg = load(None, &o).unwrap();
        assert_eq!(cfg.hypergrad, Some(OracleSpec::Aid(InnerIters { t: Some(DEFAULT_T), ..Default::default() })));
        assert_eq!(cfg.start, Some(StartKind::Vertex));
        assert_eq!(cfg.jobs, Some(2));
    }

    #[test]
    fn flag_keeps_matching_problem_fields() {
        let mut root = serde_json::from_str::<Map<String, Value>>(r#"{"problem":{"kind":"toy","q":0.9}}"#).unwrap();
        Overrides { problem: Some("toy".into()), ..Default::default() }.apply(&mut root);
        assert_eq!(root["problem"]["q"], json!(0.9));
        Overrides { problem: Some("ssl".into()), ..Default::default() }.apply(&mut root);
        assert!(root["problem"].get("q").is_none());
    }

    #[test]
    fn perturbed_needs_closed_form() {
        let o = Overrides {
            problem: Some("ssl".into()),
            hypergrad: Some("perturbed".into()),
            tau: Some(1e-3),
            ..Default::default()
        };
        assert!(matches!(load(None, &o), Err(ConfigError::Invalid(_))));
    }
}
