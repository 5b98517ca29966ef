//! Data distillation: learn sample weights `v` in a capped simplex so that a
//! linear softmax classifier trained on the weighted set does well on
//! validation data.
//!
//! Inner variable `ζ = (W, b)` with `W` stored row-major (`classes × dim`)
//! followed by `b`. The lower level is `(1/m) Σ v_i CE(W x_i + b, y_i) +
//! (s/2)‖ζ‖²`, run by gradient descent with stepsize `γ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::data::{synthetic_surrogate, LabeledData};
use super::{ProblemError, Result};
use crate::domains::Domain;
use crate::hypergrad::{self, estimate_bound_constant, FixedPointProblem, LocalMap};
use crate::linalg::{log_sum_exp, softmax_into};

/// Ridge weight used in the reference experiment.
pub const DEFAULT_REG: f64 = 2e3;
pub const DEFAULT_INNER_STEP: f64 = 1e-7;
pub const DEFAULT_INNER_ITERS: u64 = 50;
/// Budget as a fraction of the training set size.
pub const DEFAULT_BUDGET_FRACTION: f64 = 1e-3;
pub const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct DistillationInstance {
    pub train: LabeledData,
    pub val: LabeledData,
    pub budget: f64,
    pub reg: f64,
}

impl DistillationInstance {
    pub fn new(train: LabeledData, val: LabeledData, budget: f64, reg: f64) -> Result<Self> {
        if train.dim() != val.dim() || train.classes != val.classes {
            return Err(ProblemError::Data("train and validation sets disagree on shape".into()));
        }
        let m = train.len() as f64;
        if !(budget > 0.0 && budget < m) {
            return Err(ProblemError::ParameterOutOfRange(format!("budget must lie in (0, {m}), got {budget}")));
        }
        if !(reg > 0.0 && reg.is_finite()) {
            return Err(ProblemError::ParameterOutOfRange(format!("regularization must be positive, got {reg}")));
        }
        Ok(Self { train, val, budget, reg })
    }

    /// Quantile-thresholded linear-response surrogate, budget
    /// `budget_fraction · m` and the default ridge weight.
    pub fn synthetic(
        m: usize,
        n_val: usize,
        dim: usize,
        classes: usize,
        budget_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let all = synthetic_surrogate(m + n_val, dim, classes, seed)?;
        let (train, val) = all.split(m, seed.wrapping_add(1))?;
        Self::new(train, val, budget_fraction * m as f64, DEFAULT_REG)
    }

    pub fn samples(&self) -> usize {
        self.train.len()
    }

    pub fn inner_dim(&self) -> usize {
        self.train.classes * (self.train.dim() + 1)
    }

    /// Uniform starting weights `v_i = B/m`.
    pub fn initial_weights(&self) -> Vec<f64> {
        vec![self.budget / self.samples() as f64; self.samples()]
    }

    /// `(1/m) Σ v_i CE(W x_i + b, y_i)`, without the ridge term.
    pub fn train_loss(&self, zeta: &[f64], v: &[f64]) -> f64 {
        let m = self.samples() as f64;
        (0..self.samples()).map(|i| v[i] * sample_ce(zeta, &self.train, i)).sum::<f64>() / m
    }

    pub fn val_loss(&self, zeta: &[f64]) -> f64 {
        (0..self.val.len()).map(|i| sample_ce(zeta, &self.val, i)).sum::<f64>() / self.val.len() as f64
    }

    /// Bound on the lower-level smoothness: `s + B max_i(‖x_i‖² + 1) / (2m)`.
    /// The softmax cross-entropy Hessian in the logits is at most ½.
    pub fn smoothness_bound(&self) -> f64 {
        let r2 = self.train.features.iter().map(|x| x.iter().map(|a| a * a).sum::<f64>() + 1.0).fold(0.0, f64::max);
        self.reg + self.budget * r2 / (2.0 * self.samples() as f64)
    }
}

/// `W x + b`; also computes `U x + u_b` for any `ζ`-shaped `u`.
fn logits(zeta: &[f64], x: &[f64], classes: usize, out: &mut [f64]) {
    let d = x.len();
    let b = &zeta[classes * d..];
    for c in 0..classes {
        out[c] = zeta[c * d..(c + 1) * d].iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b[c];
    }
}

fn sample_ce(zeta: &[f64], data: &LabeledData, i: usize) -> f64 {
    let mut z = vec![0.0; data.classes];
    logits(zeta, &data.features[i], data.classes, &mut z);
    log_sum_exp(&z) - z[data.labels[i]]
}

/// `p − onehot(y)` at sample `i`, written into `r`; returns the softmax in `p`.
fn residual(zeta: &[f64], data: &LabeledData, i: usize, p: &mut [f64], r: &mut [f64]) {
    logits(zeta, &data.features[i], data.classes, r);
    softmax_into(r, p);
    r.copy_from_slice(p);
    r[data.labels[i]] -= 1.0;
}

/// Adds `scale · (r x^T, r)` into a `ζ`-shaped buffer.
fn add_outer(acc: &mut [f64], scale: f64, r: &[f64], x: &[f64]) {
    let d = x.len();
    let classes = r.len();
    for c in 0..classes {
        let s = scale * r[c];
        if s == 0.0 {
            continue;
        }
        for (a, xi) in acc[c * d..(c + 1) * d].iter_mut().zip(x) {
            *a += s * xi;
        }
        acc[classes * d + c] += s;
    }
}

/// Indices of the `⌈B⌉` largest weights, ties broken by lower index, sorted.
pub fn top_b_selection(v: &[f64], budget: f64) -> Vec<usize> {
    let k = ((budget - 1e-9).ceil().max(1.0) as usize).min(v.len());
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let mut out = order[..k].to_vec();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone)]
pub struct DistillationProblem {
    inst: DistillationInstance,
    inner_step: f64,
    domain: Domain,
    init: Vec<f64>,
    q: f64,
    bound: Option<f64>,
}

impl DistillationProblem {
    /// `W_0 ~ N(0, 0.01²)` drawn from `init_seed`, `b_0 = 0`.
    pub fn new(inst: DistillationInstance, inner_step: f64, init_seed: u64) -> Result<Self> {
        if !(inner_step > 0.0 && inner_step.is_finite()) {
            return Err(ProblemError::ParameterOutOfRange(format!(
                "inner stepsize must be positive, got {inner_step}"
            )));
        }
        let smooth = inst.smoothness_bound();
        if inner_step * smooth >= 2.0 {
            return Err(ProblemError::NonContractiveStep(format!(
                "stepsize {inner_step} times smoothness bound {smooth} is at least 2"
            )));
        }
        let q = (1.0 - inner_step * inst.reg).abs().max((1.0 - inner_step * smooth).abs());
        let domain = Domain::capped_simplex(inst.samples(), inst.budget, 1.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let wlen = inst.train.classes * inst.train.dim();
        let mut init: Vec<f64> = (0..wlen).map(|_| normal.sample(&mut rng)).collect();
        init.resize(inst.inner_dim(), 0.0);
        Ok(Self { inst, inner_step, domain, init, q, bound: None })
    }

    /// `γ = 1/L`: contracts quickly, for near-exact reference solves.
    pub fn fast(inst: DistillationInstance, init_seed: u64) -> Result<Self> {
        let step = 1.0 / inst.smoothness_bound();
        Self::new(inst, step, init_seed)
    }

    pub fn instance(&self) -> &DistillationInstance {
        &self.inst
    }

    pub fn inner_step(&self) -> f64 {
        self.inner_step
    }

    pub fn estimate_bound(&mut self, samples: usize, inner_iters: u64, seed: u64) -> Result<f64> {
        let m = estimate_bound_constant(self, self.q, samples, inner_iters, seed)?;
        self.bound = Some(m);
        Ok(m)
    }

    /// Draws a random point of the weight domain.
    pub fn random_weights(&self, seed: u64) -> Vec<f64> {
        self.domain.sample_point(&mut ChaCha8Rng::seed_from_u64(seed))
    }
}

struct DistillMap<'a> {
    p: &'a DistillationProblem,
    v: Vec<f64>,
}

impl DistillMap<'_> {
    fn data(&self) -> &LabeledData {
        &self.p.inst.train
    }

    /// Gradient of the weighted training loss plus ridge.
    fn inner_gradient(&self, zeta: &[f64]) -> Vec<f64> {
        let data = self.data();
        let m = data.len() as f64;
        let mut g: Vec<f64> = zeta.iter().map(|z| self.p.inst.reg * z).collect();
        let (mut pr, mut r) = (vec![0.0; data.classes], vec![0.0; data.classes]);
        for i in 0..data.len() {
            if self.v[i] == 0.0 {
                continue;
            }
            residual(zeta, data, i, &mut pr, &mut r);
            add_outer(&mut g, self.v[i] / m, &r, &data.features[i]);
        }
        g
    }

    /// `u − γ H u` with `H` the lower-level Hessian at `ζ`.
    fn hessian_step(&self, zeta: &[f64], u: &[f64]) -> Vec<f64> {
        let data = self.data();
        let (m, c) = (data.len() as f64, data.classes);
        let mut hu: Vec<f64> = u.iter().map(|a| self.p.inst.reg * a).collect();
        let (mut pr, mut z, mut dz) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
        for i in 0..data.len() {
            if self.v[i] == 0.0 {
                continue;
            }
            let x = &data.features[i];
            logits(zeta, x, c, &mut z);
            softmax_into(&z, &mut pr);
            logits(u, x, c, &mut dz);
            let pd: f64 = pr.iter().zip(&dz).map(|(a, b)| a * b).sum();
            for k in 0..c {
                dz[k] = pr[k] * (dz[k] - pd);
            }
            add_outer(&mut hu, self.v[i] / m, &dz, x);
        }
        u.iter().zip(&hu).map(|(a, h)| a - self.p.inner_step * h).collect()
    }
}

impl LocalMap for DistillMap<'_> {
    fn phi(&self, w: &[f64]) -> Vec<f64> {
        let g = self.inner_gradient(w);
        w.iter().zip(&g).map(|(a, b)| a - self.p.inner_step * b).collect()
    }

    fn phi_jvp1(&self, w: &[f64], v: &[f64]) -> Vec<f64> {
        self.hessian_step(w, v)
    }

    fn phi_vjp1(&self, w: &[f64], u: &[f64]) -> Vec<f64> {
        self.hessian_step(w, u)
    }

    fn phi_jvp2(&self, w: &[f64], dv: &[f64]) -> Vec<f64> {
        let data = self.data();
        let m = data.len() as f64;
        let mut out = vec![0.0; w.len()];
        let (mut pr, mut r) = (vec![0.0; data.classes], vec![0.0; data.classes]);
        for i in 0..data.len() {
            if dv[i] == 0.0 {
                continue;
            }
            residual(w, data, i, &mut pr, &mut r);
            add_outer(&mut out, -self.p.inner_step * dv[i] / m, &r, &data.features[i]);
        }
        out
    }

    fn phi_vjp2(&self, w: &[f64], u: &[f64]) -> Vec<f64> {
        let data = self.data();
        let (m, c) = (data.len() as f64, data.classes);
        let (mut pr, mut r, mut ux) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
        (0..data.len())
            .map(|i| {
                residual(w, data, i, &mut pr, &mut r);
                logits(u, &data.features[i], c, &mut ux);
                -self.p.inner_step / m * r.iter().zip(&ux).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    fn outer_loss(&self, w: &[f64]) -> f64 {
        self.p.inst.val_loss(w)
    }

    fn grad1_outer(&self, w: &[f64]) -> Vec<f64> {
        let data = &self.p.inst.val;
        let n = data.len() as f64;
        let mut g = vec![0.0; w.len()];
        let (mut pr, mut r) = (vec![0.0; data.classes], vec![0.0; data.classes]);
        for i in 0..data.len() {
            residual(w, data, i, &mut pr, &mut r);
            add_outer(&mut g, 1.0 / n, &r, &data.features[i]);
        }
        g
    }

    fn grad2_outer(&self, _w: &[f64]) -> Vec<f64> {
        vec![0.0; self.v.len()]
    }
}

impl FixedPointProblem for DistillationProblem {
    fn inner_dim(&self) -> usize {
        self.inst.inner_dim()
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

    fn initial_inner(&self) -> Vec<f64> {
        self.init.clone()
    }

    fn at<'a>(&'a self, x: &[f64]) -> hypergrad::Result<Box<dyn LocalMap + 'a>> {
        Ok(Box::new(DistillMap { p: self, v: x.to_vec() }))
    }

    /// Cross-entropy is nonnegative.
    fn outer_lower_bound(&self) -> Option<f64> {
        Some(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergrad::validate_problem;
    use crate::problems::data::gaussian_blobs;

    fn blobs() -> DistillationInstance {
        let all = gaussian_blobs(30, 3, 2, 2.0, 7).unwrap();
        let (train, val) = all.split(20, 1).unwrap();
        DistillationInstance::new(train, val, 2.0, 0.5).unwrap()
    }

    #[test]
    fn uniform_weights_scale_the_mean_loss() {
        let inst = blobs();
        let p = DistillationProblem::new(inst.clone(), 0.1, 3).unwrap();
        let zeta = p.initial_inner();
        let v = inst.initial_weights();
        let mean = inst.train_loss(&zeta, &vec![1.0; inst.samples()]);
        let ratio = inst.budget / inst.samples() as f64;
        assert!((inst.train_loss(&zeta, &v) - ratio * mean).abs() < 1e-14);
    }

    #[test]
    fn initial_bias_is_zero() {
        let p = DistillationProblem::new(blobs(), 0.1, 3).unwrap();
        let z = p.initial_inner();
        assert!(z[6..].iter().all(|&b| b == 0.0));
        assert!(z[..6].iter().all(|&w| w.abs() < 0.1 && w != 0.0));
    }

    #[test]
    fn jacobian_actions_pass_validation() {
        let p = DistillationProblem::new(blobs(), 0.2, 3).unwrap();
        validate_problem(&p, 9).unwrap();
    }

    #[test]
    fn rejects_large_stepsize() {
        let inst = blobs();
        let big = 2.0 / inst.smoothness_bound();
        assert!(matches!(DistillationProblem::new(inst, big, 0), Err(ProblemError::NonContractiveStep(_))));
    }

    #[test]
    fn top_b_picks_largest_with_low_index_ties() {
        assert_eq!(top_b_selection(&[0.1, 0.5, 0.5, 0.2], 2.0), vec![1, 2]);
        assert_eq!(top_b_selection(&[0.1, 0.5, 0.5, 0.2], 0.5), vec![1]);
        assert_eq!(top_b_selection(&[0.3, 0.3, 0.3], 1.5), vec![0, 1]);
    }
}
