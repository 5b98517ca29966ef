//! Quadratic toy bilevel problem with a closed-form hypergradient.
//!
//! Lower level `ℓ(w, x) = ½ w^T H w − w^T A x` solved by gradient descent
//! `Φ(w, x) = w − α(Hw − Ax)`, upper level `E(w) = ½‖w − target‖²`. The
//! minimizer is `w*(x) = H⁻¹Ax`, so `∇f(x) = A^T H⁻¹ (H⁻¹Ax − target)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ProblemError, Result};
use crate::domains::Domain;
use crate::hypergrad::{self, estimate_bound_constant, FixedPointProblem, LocalMap};
use crate::objectives::Objective;

#[derive(Debug, Clone)]
pub struct ToyQuadratic {
    a: DMatrix<f64>,
    h: DMatrix<f64>,
    target: DVector<f64>,
    alpha: f64,
    domain: Domain,
    chol: Cholesky<f64, Dyn>,
    q: f64,
    outer_lipschitz: f64,
    bound: Option<f64>,
}

impl ToyQuadratic {
    /// `h` must be symmetric positive definite and `alpha` small enough that
    /// `I − αH` contracts. The bound constant is estimated by sampling.
    pub fn new(a: DMatrix<f64>, h: DMatrix<f64>, target: Vec<f64>, alpha: f64, domain: Domain) -> Result<Self> {
        let p = h.nrows();
        if h.ncols() != p || a.nrows() != p || target.len() != p {
            return Err(ProblemError::ParameterOutOfRange(format!(
                "shapes disagree: H is {}x{}, A is {}x{}, target has {}",
                h.nrows(),
                h.ncols(),
                a.nrows(),
                a.ncols(),
                target.len()
            )));
        }
        if a.ncols() != domain.dim() {
            return Err(ProblemError::ParameterOutOfRange(format!(
                "A has {} columns but the domain has dimension {}",
                a.ncols(),
                domain.dim()
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(ProblemError::ParameterOutOfRange(format!("inner stepsize must be positive, got {alpha}")));
        }
        let h = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(h.clone()).eigenvalues;
        if eig.min() <= 0.0 {
            return Err(ProblemError::SingularSystem);
        }
        let q = eig.iter().fold(0.0f64, |m, l| m.max((1.0 - alpha * l).abs()));
        if q >= 1.0 {
            return Err(ProblemError::NonContractiveStep(format!("|1 − αλ| reaches {q} with α = {alpha}")));
        }
        let chol = Cholesky::new(h.clone()).ok_or(ProblemError::SingularSystem)?;
        let hinv_a = chol.solve(&a);
        let outer_lipschitz = SymmetricEigen::new(hinv_a.transpose() * &hinv_a).eigenvalues.max().max(0.0);
        let mut toy =
            Self { a, h, target: DVector::from_vec(target), alpha, domain, chol, q, outer_lipschitz, bound: None };
        let iters = ((1e-12f64).ln() / q.max(1e-3).ln()).ceil().max(1.0) as u64;
        toy.bound = Some(estimate_bound_constant(&toy, q, 50, iters, 0)?);
        Ok(toy)
    }

    /// `H = μI`, so `q = |1 − αμ|`.
    pub fn isotropic(a: DMatrix<f64>, mu: f64, target: Vec<f64>, alpha: f64, domain: Domain) -> Result<Self> {
        let p = a.nrows();
        Self::new(a, DMatrix::identity(p, p) * mu, target, alpha, domain)
    }

    /// Gaussian `A` (scaled by `1/√inner_dim`) and target, `H = I`, `α = 1 − q`.
    pub fn random(inner_dim: usize, domain: Domain, q: f64, seed: u64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(ProblemError::ParameterOutOfRange(format!("q must lie in (0, 1), got {q}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = domain.dim();
        let s = 1.0 / (inner_dim as f64).sqrt();
        let a = DMatrix::from_fn(inner_dim, d, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        let target = (0..inner_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::isotropic(a, 1.0, target, 1.0 - q, domain)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// Override the sampled bound constant.
    pub fn with_bound_constant(mut self, m: f64) -> Self {
        self.bound = Some(m);
        self
    }

    /// `w*(x) = H⁻¹Ax`.
    pub fn optimal_inner(&self, x: &[f64]) -> Vec<f64> {
        let ax = &self.a * DVector::from_column_slice(x);
        self.chol.solve(&ax).iter().copied().collect()
    }

    /// `f(x) = ½‖w*(x) − target‖²`.
    pub fn exact_value(&self, x: &[f64]) -> f64 {
        let w = DVector::from_vec(self.optimal_inner(x));
        0.5 * (w - &self.target).norm_squared()
    }

    fn analytic_gradient(&self, x: &[f64]) -> Vec<f64> {
        let r = DVector::from_vec(self.optimal_inner(x)) - &self.target;
        let z = self.chol.solve(&r);
        (self.a.transpose() * z).iter().copied().collect()
    }
}

struct ToyMap<'a> {
    toy: &'a ToyQuadratic,
    ax: DVector<f64>,
}

impl ToyMap<'_> {
    /// `(I − αH) v`
    fn contract(&self, v: &[f64]) -> Vec<f64> {
        let hv = &self.toy.h * DVector::from_column_slice(v);
        v.iter().zip(hv.iter()).map(|(vi, hi)| vi - self.toy.alpha * hi).collect()
    }
}

impl LocalMap for ToyMap<'_> {
    fn phi(&self, w: &[f64]) -> Vec<f64> {
        let mut out = self.contract(w);
        for (o, ai) in out.iter_mut().zip(self.ax.iter()) {
            *o += self.toy.alpha * ai;
        }
        out
    }

    fn phi_jvp1(&self, _w: &[f64], v: &[f64]) -> Vec<f64> {
        self.contract(v)
    }

    fn phi_vjp1(&self, _w: &[f64], u: &[f64]) -> Vec<f64> {
        self.contract(u)
    }

    fn phi_jvp2(&self, _w: &[f64], v: &[f64]) -> Vec<f64> {
        (&self.toy.a * DVector::from_column_slice(v) * self.toy.alpha).iter().copied().collect()
    }

    fn phi_vjp2(&self, _w: &[f64], u: &[f64]) -> Vec<f64> {
        (self.toy.a.transpose() * DVector::from_column_slice(u) * self.toy.alpha).iter().copied().collect()
    }

    fn outer_loss(&self, w: &[f64]) -> f64 {
        0.5 * w.iter().zip(self.toy.target.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    fn grad1_outer(&self, w: &[f64]) -> Vec<f64> {
        w.iter().zip(self.toy.target.iter()).map(|(a, b)| a - b).collect()
    }

    fn grad2_outer(&self, _w: &[f64]) -> Vec<f64> {
        vec![0.0; self.toy.a.ncols()]
    }
}

impl FixedPointProblem for ToyQuadratic {
    fn inner_dim(&self) -> usize {
        self.h.nrows()
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
        let ax = &self.a * DVector::from_column_slice(x);
        Ok(Box::new(ToyMap { toy: self, ax }))
    }

    fn exact_hypergradient(&self, x: &[f64]) -> Option<hypergrad::Result<Vec<f64>>> {
        Some(Ok(self.analytic_gradient(x)))
    }

    /// `‖A^T H⁻² A‖`
    fn outer_lipschitz(&self) -> Option<f64> {
        Some(self.outer_lipschitz)
    }

    fn outer_lower_bound(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// The exact outer objective `x ↦ f(x)`, for exact and perturbed oracles.
impl Objective for ToyQuadratic {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.exact_value(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.analytic_gradient(x)
    }

    fn lipschitz(&self, _domain: &Domain) -> Option<f64> {
        Some(self.outer_lipschitz)
    }

    fn lower_bound(&self, _domain: &Domain) -> Option<f64> {
        Some(0.0)
    }
}
