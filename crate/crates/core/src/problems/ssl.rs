//! Multilayer graph semi-supervised learning with learned layer aggregation.
//!
//! Hyperparameters `x = (α, β_1..β_K, λ)`. The layers are merged entrywise by
//! the weighted power mean `W(α, β)`, the lower level is label propagation
//! `min_X ‖X − Y‖² + (λ/2) Tr(X^T L X)` solved by gradient descent, and the
//! upper level is cross-entropy on validation nodes.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ProblemError, Result};
use crate::domains::Domain;
use crate::hypergrad::{self, estimate_bound_constant, FixedPointProblem, LocalMap};
use crate::linalg::{log_sum_exp, softmax_into};

/// `|α|` at or below this uses the weighted geometric mean.
pub const GEOMETRIC_SWITCH: f64 = 1e-8;
pub const POWER_STEPS: usize = 50;
pub const POWER_TOL: f64 = 1e-6;

/// Generalized mean of one entry with its partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryMean {
    pub value: f64,
    pub d_alpha: f64,
    pub d_beta: Vec<f64>,
}

impl EntryMean {
    fn zero(k: usize) -> Self {
        Self { value: 0.0, d_alpha: 0.0, d_beta: vec![0.0; k] }
    }
}

/// `(Σ β_k w_k^α / Σ β_k)^{1/α}` with the geometric mean near `α = 0`.
///
/// An entry that is zero in any layer stays zero when `α` is negative or near
/// zero, whatever `β` is; this keeps the mean continuous in `β` on the whole
/// simplex. Dividing by `Σ β_k` changes nothing on the simplex but keeps the
/// `β` partials bounded as `α → 0`.
pub fn power_mean(ws: &[f64], alpha: f64, beta: &[f64]) -> EntryMean {
    let k = ws.len();
    debug_assert_eq!(k, beta.len());
    let bsum: f64 = beta.iter().sum();
    let any_zero = ws.iter().any(|&w| w <= 0.0);
    if (any_zero && alpha <= GEOMETRIC_SWITCH) || bsum <= 0.0 {
        return EntryMean::zero(k);
    }
    let mut d_beta = vec![0.0; k];
    if any_zero {
        // α > 0: zero entries contribute nothing to the sum.
        let mut s = 0.0;
        let mut s_log = 0.0;
        for i in 0..k {
            if ws[i] > 0.0 {
                let p = ws[i].powf(alpha);
                s += beta[i] * p;
                s_log += beta[i] * p * ws[i].ln();
            }
        }
        if s <= 0.0 {
            return EntryMean::zero(k);
        }
        s /= bsum;
        s_log /= bsum;
        let value = s.powf(1.0 / alpha);
        let dln_alpha = -s.ln() / (alpha * alpha) + s_log / (alpha * s);
        for i in 0..k {
            let p = if ws[i] > 0.0 { ws[i].powf(alpha) } else { 0.0 };
            d_beta[i] = value * (p - s) / (alpha * s * bsum);
        }
        return EntryMean { value, d_alpha: value * dln_alpha, d_beta };
    }
    // All entries positive. Centering the logs at their weighted mean keeps
    // the α → 0 limit free of cancellation.
    let mu = ws.iter().zip(beta).map(|(w, b)| b * w.ln()).sum::<f64>() / bsum;
    let centered: Vec<f64> = ws.iter().map(|w| w.ln() - mu).collect();
    let wsum = |f: &dyn Fn(usize) -> f64| (0..k).map(|i| beta[i] * f(i)).sum::<f64>() / bsum;
    if alpha.abs() <= GEOMETRIC_SWITCH {
        let value = mu.exp();
        let var = wsum(&|i| centered[i].powi(2));
        for i in 0..k {
            d_beta[i] = value * centered[i] / bsum;
        }
        return EntryMean { value, d_alpha: value * 0.5 * var, d_beta };
    }
    let em1: Vec<f64> = centered.iter().map(|c| (alpha * c).exp_m1()).collect();
    let t1 = wsum(&|i| em1[i]);
    let t = 1.0 + t1;
    let ln_t = t1.ln_1p();
    let tp = wsum(&|i| centered[i] * (1.0 + em1[i]));
    let value = (mu + ln_t / alpha).exp();
    let dln_alpha = tp / (t * alpha) - ln_t / (alpha * alpha);
    for i in 0..k {
        d_beta[i] = value * (em1[i] - t1) / (alpha * t * bsum);
    }
    EntryMean { value, d_alpha: value * dln_alpha, d_beta }
}

/// Entrywise [`power_mean`] of dense symmetric `n × n` layers.
pub fn aggregate_layers(layers: &[Vec<f64>], n: usize, alpha: f64, beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let mut ws = vec![0.0; layers.len()];
    for i in 0..n {
        for j in (i + 1)..n {
            for (w, layer) in ws.iter_mut().zip(layers) {
                *w = layer[i * n + j];
            }
            let v = power_mean(&ws, alpha, beta).value;
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

/// Gradient descent on `‖X − Y‖² + (λ/2) Tr(X^T L X)` over a weighted edge
/// list, `X` stored row-major as `nodes × classes`.
#[derive(Debug, Clone)]
pub struct LabelPropagation {
    nodes: usize,
    classes: usize,
    edges: Vec<(usize, usize, f64)>,
    lambda: f64,
    eta: f64,
    power_converged: bool,
}

impl LabelPropagation {
    /// Picks `η = 1/L̂` with `L̂ ≈ ‖2I + λL‖₂` from power iteration, or the
    /// Gershgorin bound when the estimate does not settle.
    pub fn new(nodes: usize, classes: usize, edges: Vec<(usize, usize, f64)>, lambda: f64) -> Self {
        let (l_hat, power_converged) = lower_smoothness(nodes, &edges, lambda);
        Self { nodes, classes, edges, lambda, eta: 1.0 / l_hat, power_converged }
    }

    fn with_eta(nodes: usize, classes: usize, edges: Vec<(usize, usize, f64)>, lambda: f64, eta: f64) -> Self {
        Self { nodes, classes, edges, lambda, eta, power_converged: true }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `1 − 2η`: the fidelity term makes the lower level 2-strongly convex.
    pub fn contraction(&self) -> f64 {
        1.0 - 2.0 * self.eta
    }

    pub fn power_iteration_converged(&self) -> bool {
        self.power_converged
    }

    /// `L X` for the combinatorial Laplacian.
    pub fn laplacian_apply(&self, x: &[f64]) -> Vec<f64> {
        laplacian_apply(self.classes, self.nodes, self.edges.iter().copied(), x)
    }

    /// `X − η(2(X − Y) + λ L X)`
    pub fn step(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let lx = self.laplacian_apply(x);
        x.iter().zip(y).zip(&lx).map(|((xi, yi), li)| xi - self.eta * (2.0 * (xi - yi) + self.lambda * li)).collect()
    }

    /// `(I − η(2I + λL)) v`, the Jacobian of [`step`](Self::step) in `X`.
    pub fn linear_part(&self, v: &[f64]) -> Vec<f64> {
        let lv = self.laplacian_apply(v);
        v.iter().zip(&lv).map(|(vi, li)| vi - self.eta * (2.0 * vi + self.lambda * li)).collect()
    }
}

fn laplacian_apply<I>(classes: usize, nodes: usize, edges: I, x: &[f64]) -> Vec<f64>
where
    I: Iterator<Item = (usize, usize, f64)>,
{
    let mut out = vec![0.0; nodes * classes];
    for (i, j, w) in edges {
        if w == 0.0 {
            continue;
        }
        for c in 0..classes {
            let d = w * (x[i * classes + c] - x[j * classes + c]);
            out[i * classes + c] += d;
            out[j * classes + c] -= d;
        }
    }
    out
}

fn gershgorin(nodes: usize, edges: &[(usize, usize, f64)], lambda: f64) -> f64 {
    let mut deg = vec![0.0; nodes];
    for &(i, j, w) in edges {
        deg[i] += w.abs();
        deg[j] += w.abs();
    }
    2.0 + lambda * 2.0 * deg.iter().fold(0.0f64, |m, &v| m.max(v))
}

/// Power iteration on `2I + λL` from a fixed pseudo-random start (the all-ones
/// vector lies in the kernel of `L` and would stall at 2).
fn lower_smoothness(nodes: usize, edges: &[(usize, usize, f64)], lambda: f64) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e1);
    let mut v: Vec<f64> = (0..nodes).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut prev = f64::NAN;
    for _ in 0..POWER_STEPS {
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nv == 0.0 {
            break;
        }
        v.iter_mut().for_each(|a| *a /= nv);
        let lv = laplacian_apply(1, nodes, edges.iter().copied(), &v);
        let av: Vec<f64> = v.iter().zip(&lv).map(|(a, l)| 2.0 * a + lambda * l).collect();
        let est: f64 = v.iter().zip(&av).map(|(a, b)| a * b).sum();
        if (est - prev).abs() <= POWER_TOL * est.abs() {
            return (est, true);
        }
        prev = est;
        v = av;
    }
    (gershgorin(nodes, edges, lambda), false)
}

/// A multilayer SSL task. Layers are dense symmetric `nodes × nodes` matrices;
/// `y_train` is `nodes × classes` with one-hot rows for revealed nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MultilayerSslInstance {
    pub nodes: usize,
    pub classes: usize,
    pub layers: Vec<Vec<f64>>,
    pub y_train: Vec<f64>,
    pub revealed: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub val_labels: Vec<usize>,
    pub true_communities: Vec<usize>,
    /// Indices of layers without community structure.
    pub noise_layers: Vec<usize>,
}

impl MultilayerSslInstance {
    pub fn validate(&self) -> Result<()> {
        let (n, c) = (self.nodes, self.classes);
        let bad = |m: String| Err(ProblemError::ParameterOutOfRange(m));
        if n == 0 || c < 2 || self.layers.is_empty() {
            return bad("need nodes, at least two classes and one layer".into());
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.len() != n * n {
                return bad(format!("layer {k} has {} entries, expected {}", layer.len(), n * n));
            }
            for i in 0..n {
                if layer[i * n + i] != 0.0 {
                    return bad(format!("layer {k} has a nonzero diagonal at node {i}"));
                }
                for j in (i + 1)..n {
                    let w = layer[i * n + j];
                    if !(w >= 0.0 && w.is_finite()) || w != layer[j * n + i] {
                        return bad(format!("layer {k} entry ({i}, {j}) is not symmetric nonnegative"));
                    }
                }
            }
        }
        if self.y_train.len() != n * c {
            return bad("y_train must be nodes × classes".into());
        }
        for i in 0..n {
            let row = &self.y_train[i * c..(i + 1) * c];
            let s: f64 = row.iter().sum();
            let onehot = row.iter().all(|&v| v == 0.0 || v == 1.0) && (s == 0.0 || s == 1.0);
            if !onehot || (s == 1.0) != self.revealed.contains(&i) {
                return bad(format!("row {i} of y_train disagrees with the revealed set"));
            }
        }
        if self.val_indices.is_empty() || self.val_indices.len() != self.val_labels.len() {
            return bad("validation set must be nonempty with one label per node".into());
        }
        if self.val_indices.iter().any(|v| *v >= n || self.revealed.contains(v)) {
            return bad("validation nodes must be valid and disjoint from revealed nodes".into());
        }
        if self.val_labels.iter().any(|&l| l >= c) {
            return bad("validation label out of range".into());
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn edge_count(&self, k: usize) -> usize {
        let n = self.nodes;
        (0..n).map(|i| ((i + 1)..n).filter(|&j| self.layers[k][i * n + j] > 0.0).count()).sum()
    }
}

/// Stochastic block model generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SbmConfig {
    pub nodes: usize,
    pub communities: usize,
    pub p_in: Vec<f64>,
    pub p_out: Vec<f64>,
    /// Fraction of nodes reassigned between consecutive structured layers.
    pub drift: f64,
    /// Structured layers over total layers.
    pub noise_ratio: f64,
    pub weight_range: (f64, f64),
    pub train_fraction: f64,
    pub reveal_fraction: f64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            nodes: 70,
            communities: 5,
            p_in: vec![0.35, 0.30, 0.25],
            p_out: vec![0.03, 0.04, 0.05],
            drift: 0.10,
            noise_ratio: 0.1,
            weight_range: (0.5, 1.5),
            train_fraction: 0.8,
            reveal_fraction: 0.1,
        }
    }
}

fn sample_layer(
    rng: &mut ChaCha8Rng,
    n: usize,
    (lo, hi): (f64, f64),
    mut prob: impl FnMut(usize, usize) -> f64,
) -> Vec<f64> {
    let mut layer = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < prob(i, j) {
                let w = lo + (hi - lo) * rng.random::<f64>();
                layer[i * n + j] = w;
                layer[j * n + i] = w;
            }
        }
    }
    layer
}

/// Structured layers from an SBM with drifting communities, followed by
/// Erdős–Rényi layers at the mean structured density.
pub fn generate_sbm_multilayer(cfg: &SbmConfig, seed: u64) -> Result<MultilayerSslInstance> {
    let (n, c) = (cfg.nodes, cfg.communities);
    let k_true = cfg.p_in.len();
    let bad = |m: String| Err(ProblemError::ParameterOutOfRange(m));
    if k_true == 0 || cfg.p_out.len() != k_true {
        return bad("p_in and p_out must be nonempty and of equal length".into());
    }
    if n < 2 || c < 2 || c > n {
        return bad(format!("need 2 ≤ communities ≤ nodes, got {c} and {n}"));
    }
    if cfg.p_in.iter().chain(&cfg.p_out).any(|p| !(0.0..=1.0).contains(p)) {
        return bad("edge probabilities must lie in [0, 1]".into());
    }
    if !(0.0..1.0).contains(&cfg.drift) {
        return bad(format!("drift must lie in [0, 1), got {}", cfg.drift));
    }
    if !(cfg.noise_ratio > 0.0 && cfg.noise_ratio <= 1.0) {
        return bad(format!("noise_ratio must lie in (0, 1], got {}", cfg.noise_ratio));
    }
    let (lo, hi) = cfg.weight_range;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return bad("weight range must be positive and ordered".into());
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0)
        || !(cfg.reveal_fraction > 0.0 && cfg.reveal_fraction <= 1.0)
    {
        return bad("train and reveal fractions must lie in (0, 1)".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut base: Vec<usize> = (0..n).map(|i| i % c).collect();
    base.shuffle(&mut rng);
    let moved = (cfg.drift * n as f64).round() as usize;
    let mut assignment = base.clone();
    let mut layers = Vec::new();
    for k in 0..k_true {
        if k > 0 {
            let mut who: Vec<usize> = (0..n).collect();
            who.shuffle(&mut rng);
            for &i in &who[..moved] {
                let shift = rng.random_range(1..c);
                assignment[i] = (assignment[i] + shift) % c;
            }
        }
        let a = &assignment;
        let layer =
            sample_layer(&mut rng, n, cfg.weight_range, |i, j| if a[i] == a[j] { cfg.p_in[k] } else { cfg.p_out[k] });
        layers.push(layer);
    }

    let pairs = (n * (n - 1) / 2) as f64;
    let mut inst = MultilayerSslInstance {
        nodes: n,
        classes: c,
        layers,
        y_train: vec![0.0; n * c],
        revealed: vec![],
        val_indices: vec![],
        val_labels: vec![],
        true_communities: base.clone(),
        noise_layers: vec![],
    };
    let density = (0..k_true).map(|k| inst.edge_count(k) as f64).sum::<f64>() / (k_true as f64 * pairs);
    let total = ((k_true as f64 / cfg.noise_ratio) - 1e-9).ceil() as usize;
    for k in k_true..total.max(k_true) {
        let layer = sample_layer(&mut rng, n, cfg.weight_range, |_, _| density);
        inst.layers.push(layer);
        inst.noise_layers.push(k);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = ((cfg.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let n_reveal = ((cfg.reveal_fraction * n_train as f64).round() as usize).clamp(1, n_train);
    inst.revealed = order[..n_reveal].to_vec();
    inst.revealed.sort_unstable();
    for &i in &inst.revealed {
        inst.y_train[i * c + base[i]] = 1.0;
    }
    inst.val_indices = order[n_train..].to_vec();
    inst.val_indices.sort_unstable();
    inst.val_labels = inst.val_indices.iter().map(|&i| base[i]).collect();
    inst.validate()?;
    Ok(inst)
}

/// Mean validation cross-entropy of logits `x` (`nodes × classes`).
pub fn ssl_upper_loss(x: &[f64], classes: usize, val_indices: &[usize], val_labels: &[usize]) -> f64 {
    let total: f64 = val_indices
        .iter()
        .zip(val_labels)
        .map(|(&i, &y)| {
            let row = &x[i * classes..(i + 1) * classes];
            log_sum_exp(row) - row[y]
        })
        .sum();
    total / val_indices.len() as f64
}

/// The SSL bilevel problem over `Interval(−2, 2) × Δ_K × Interval(0.01, 1)`.
#[derive(Debug, Clone)]
pub struct SslProblem {
    inst: MultilayerSslInstance,
    /// Node pairs with an edge in at least one layer.
    pairs: Vec<(usize, usize)>,
    /// `pair_weights[e * K + k]`
    pair_weights: Vec<f64>,
    domain: Domain,
    q: f64,
    bound: Option<f64>,
}

impl SslProblem {
    pub fn new(inst: MultilayerSslInstance) -> Result<Self> {
        inst.validate()?;
        let (n, k) = (inst.nodes, inst.layer_count());
        if k < 2 {
            return Err(ProblemError::ParameterOutOfRange("need at least two layers".into()));
        }
        let mut pairs = Vec::new();
        let mut pair_weights = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if inst.layers.iter().any(|l| l[i * n + j] > 0.0) {
                    pairs.push((i, j));
                    pair_weights.extend(inst.layers.iter().map(|l| l[i * n + j]));
                }
            }
        }
        let domain = Domain::product(vec![
            Domain::interval(-2.0, 2.0)?,
            Domain::unit_simplex(k)?,
            Domain::interval(0.01, 1.0)?,
        ])?;
        // The power mean never exceeds the largest layer weight and the
        // Laplacian is monotone in edge weights, so λ = 1 with the entrywise
        // maximum bounds ‖2I + λL‖ over the whole domain.
        let max_edges: Vec<(usize, usize, f64)> = pairs
            .iter()
            .enumerate()
            .map(|(e, &(i, j))| (i, j, pair_weights[e * k..(e + 1) * k].iter().fold(0.0f64, |m, &w| m.max(w))))
            .collect();
        let q = 1.0 - 2.0 / gershgorin(n, &max_edges, 1.0);
        Ok(Self { inst, pairs, pair_weights, domain, q, bound: None })
    }

    pub fn instance(&self) -> &MultilayerSslInstance {
        &self.inst
    }

    pub fn layer_count(&self) -> usize {
        self.inst.layer_count()
    }

    /// Splits `x` into `(α, β, λ)`.
    pub fn unpack<'x>(&self, x: &'x [f64]) -> (f64, &'x [f64], f64) {
        let k = self.layer_count();
        (x[0], &x[1..=k], x[k + 1])
    }

    /// `α ~ U[−2, 2]`, `β ~ Dirichlet(1, ..., 1)`, `λ ~ U[0.01, 1]`.
    pub fn random_start(&self, seed: u64) -> Vec<f64> {
        self.domain.sample_point(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Sets `M` by sampling (see [`estimate_bound_constant`]).
    pub fn estimate_bound(&mut self, samples: usize, inner_iters: u64, seed: u64) -> Result<f64> {
        let m = estimate_bound_constant(self, self.q, samples, inner_iters, seed)?;
        self.bound = Some(m);
        Ok(m)
    }

    pub fn with_bound_constant(mut self, m: f64) -> Self {
        self.bound = Some(m);
        self
    }

    fn aggregate(&self, alpha: f64, beta: &[f64]) -> Vec<EntryMean> {
        let k = self.layer_count();
        (0..self.pairs.len()).map(|e| power_mean(&self.pair_weights[e * k..(e + 1) * k], alpha, beta)).collect()
    }

    fn propagation(&self, means: &[EntryMean], lambda: f64, eta: Option<f64>) -> LabelPropagation {
        let edges: Vec<(usize, usize, f64)> =
            self.pairs.iter().zip(means).filter(|(_, m)| m.value > 0.0).map(|(&(i, j), m)| (i, j, m.value)).collect();
        match eta {
            Some(eta) => LabelPropagation::with_eta(self.inst.nodes, self.inst.classes, edges, lambda, eta),
            None => LabelPropagation::new(self.inst.nodes, self.inst.classes, edges, lambda),
        }
    }

    /// Inner stepsize chosen at `x`.
    pub fn inner_stepsize(&self, x: &[f64]) -> f64 {
        let (alpha, beta, lambda) = self.unpack(x);
        self.propagation(&self.aggregate(alpha, beta), lambda, None).eta()
    }

    /// Solves `(2I + λL)X = 2Y` directly; for checks on small graphs.
    pub fn direct_solution(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (alpha, beta, lambda) = self.unpack(x);
        let (n, c) = (self.inst.nodes, self.inst.classes);
        let means = self.aggregate(alpha, beta);
        let mut a = DMatrix::<f64>::identity(n, n) * 2.0;
        for (&(i, j), m) in self.pairs.iter().zip(&means) {
            let w = lambda * m.value;
            a[(i, i)] += w;
            a[(j, j)] += w;
            a[(i, j)] -= w;
            a[(j, i)] -= w;
        }
        let chol = a.cholesky().ok_or(ProblemError::SingularSystem)?;
        let y = DMatrix::from_row_slice(n, c, &self.inst.y_train) * 2.0;
        let sol = chol.solve(&y);
        Ok((0..n).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| sol[(i, j)]).collect())
    }

    fn local(&self, x: &[f64], anchor: Option<&[f64]>) -> SslMap<'_> {
        let (alpha, beta, lambda) = self.unpack(x);
        let means = self.aggregate(alpha, beta);
        let eta = anchor.map(|a| self.inner_stepsize(a));
        let prop = self.propagation(&means, lambda, eta);
        SslMap { problem: self, means, prop, lambda }
    }
}

struct SslMap<'a> {
    problem: &'a SslProblem,
    means: Vec<EntryMean>,
    prop: LabelPropagation,
    lambda: f64,
}

impl SslMap<'_> {
    fn classes(&self) -> usize {
        self.problem.inst.classes
    }

    /// `Σ_c (u_i − u_j)(w_i − w_j)` for every pair.
    fn pair_products(&self, w: &[f64], u: &[f64]) -> Vec<f64> {
        let c = self.classes();
        self.problem
            .pairs
            .iter()
            .map(|&(i, j)| (0..c).map(|a| (u[i * c + a] - u[j * c + a]) * (w[i * c + a] - w[j * c + a])).sum())
            .collect()
    }
}

impl LocalMap for SslMap<'_> {
    fn phi(&self, w: &[f64]) -> Vec<f64> {
        self.prop.step(w, &self.problem.inst.y_train)
    }

    fn phi_jvp1(&self, _w: &[f64], v: &[f64]) -> Vec<f64> {
        self.prop.linear_part(v)
    }

    fn phi_vjp1(&self, _w: &[f64], u: &[f64]) -> Vec<f64> {
        self.prop.linear_part(u)
    }

    fn phi_jvp2(&self, w: &[f64], v: &[f64]) -> Vec<f64> {
        let k = self.problem.layer_count();
        let (d_alpha, d_beta, d_lambda) = (v[0], &v[1..=k], v[k + 1]);
        let dw = self.problem.pairs.iter().zip(&self.means).map(|(&(i, j), m)| {
            let dot_b: f64 = m.d_beta.iter().zip(d_beta).map(|(a, b)| a * b).sum();
            (i, j, self.lambda * (m.d_alpha * d_alpha + dot_b) + d_lambda * m.value)
        });
        let lx = laplacian_apply(self.classes(), self.problem.inst.nodes, dw, w);
        lx.iter().map(|v| -self.prop.eta * v).collect()
    }

    fn phi_vjp2(&self, w: &[f64], u: &[f64]) -> Vec<f64> {
        let k = self.problem.layer_count();
        let s = self.pair_products(w, u);
        let mut g = vec![0.0; k + 2];
        for (m, se) in self.means.iter().zip(&s) {
            g[0] += m.d_alpha * se;
            for (gb, db) in g[1..=k].iter_mut().zip(&m.d_beta) {
                *gb += db * se;
            }
            g[k + 1] += m.value * se;
        }
        let eta = self.prop.eta;
        for gi in g[..=k].iter_mut() {
            *gi *= -eta * self.lambda;
        }
        g[k + 1] *= -eta;
        g
    }

    fn outer_loss(&self, w: &[f64]) -> f64 {
        let inst = &self.problem.inst;
        ssl_upper_loss(w, inst.classes, &inst.val_indices, &inst.val_labels)
    }

    fn grad1_outer(&self, w: &[f64]) -> Vec<f64> {
        let inst = &self.problem.inst;
        let c = inst.classes;
        let scale = 1.0 / inst.val_indices.len() as f64;
        let mut g = vec![0.0; w.len()];
        for (&i, &y) in inst.val_indices.iter().zip(&inst.val_labels) {
            let row = &mut g[i * c..(i + 1) * c];
            softmax_into(&w[i * c..(i + 1) * c], row);
            row[y] -= 1.0;
            row.iter_mut().for_each(|v| *v *= scale);
        }
        g
    }

    fn grad2_outer(&self, _w: &[f64]) -> Vec<f64> {
        vec![0.0; self.problem.layer_count() + 2]
    }
}

impl FixedPointProblem for SslProblem {
    fn inner_dim(&self) -> usize {
        self.inst.nodes * self.inst.classes
    }

    fn outer_domain(&self) -> &Domain {
        &self.domain
    }

    fn contraction_factor(&self) -> Option<f64> {
        Some(self.q)
    }

    fn bound_constant(&self) -> Option<f64> {
        self.bound
    }

    fn at<'a>(&'a self, x: &[f64]) -> hypergrad::Result<Box<dyn LocalMap + 'a>> {
        Ok(Box::new(self.local(x, None)))
    }

    /// The inner stepsize is frozen at `anchor`.
    fn at_anchored<'a>(&'a self, x: &[f64], anchor: &[f64]) -> hypergrad::Result<Box<dyn LocalMap + 'a>> {
        Ok(Box::new(self.local(x, Some(anchor))))
    }

    /// Cross-entropy is nonnegative.
    fn outer_lower_bound(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Dense direct solve of `(2I + λL) X = 2Y` for an explicit edge list.
pub fn label_propagation_direct(
    nodes: usize,
    classes: usize,
    edges: &[(usize, usize, f64)],
    lambda: f64,
    y: &[f64],
) -> Result<Vec<f64>> {
    let mut a = DMatrix::<f64>::identity(nodes, nodes) * 2.0;
    for &(i, j, w) in edges {
        a[(i, i)] += lambda * w;
        a[(j, j)] += lambda * w;
        a[(i, j)] -= lambda * w;
        a[(j, i)] -= lambda * w;
    }
    let chol = a.cholesky().ok_or(ProblemError::SingularSystem)?;
    let mut out = vec![0.0; nodes * classes];
    for c in 0..classes {
        let rhs = DVector::from_iterator(nodes, (0..nodes).map(|i| 2.0 * y[i * classes + c]));
        let col = chol.solve(&rhs);
        for i in 0..nodes {
            out[i * classes + c] = col[i];
        }
    }
    Ok(out)
}
