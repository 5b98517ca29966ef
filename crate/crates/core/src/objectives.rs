//! Smooth objectives with known gradient Lipschitz constants.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::domains::Domain;
use crate::linalg::{dot, norm};

/// A differentiable function on `R^d`.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    /// Upper bound on the gradient Lipschitz constant over `domain`.
    fn lipschitz(&self, domain: &Domain) -> Option<f64>;
    /// Certified lower bound on `min_{x ∈ domain} f(x)`.
    fn lower_bound(&self, _domain: &Domain) -> Option<f64> {
        None
    }
}

/// `f(x) = ½ x^T Q x + c^T x` with symmetric `Q`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    q: DMatrix<f64>,
    c: Vec<f64>,
    eig_min: f64,
    eig_max_abs: f64,
}

impl Quadratic {
    /// Panics if `q` is not square or does not match `c`; `q` is symmetrized.
    pub fn new(q: DMatrix<f64>, c: Vec<f64>) -> Self {
        assert_eq!(q.nrows(), q.ncols(), "Q must be square");
        assert_eq!(q.nrows(), c.len(), "Q and c disagree on dimension");
        let q = (&q + q.transpose()) * 0.5;
        let eig = SymmetricEigen::new(q.clone()).eigenvalues;
        let eig_min = eig.min();
        let eig_max_abs = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self { q, c, eig_min, eig_max_abs }
    }

    /// `½‖x − center‖²` scaled by `weight`.
    pub fn squared_distance(center: &[f64], weight: f64) -> Self {
        let d = center.len();
        let q = DMatrix::identity(d, d) * weight;
        let c = center.iter().map(|v| -weight * v).collect();
        Self::new(q, c)
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn linear_term(&self) -> &[f64] {
        &self.c
    }

    pub fn smallest_eigenvalue(&self) -> f64 {
        self.eig_min
    }
}

/// Radius bound `max_{x ∈ C} ‖x‖ ≤ ‖v‖ + Δ` for any vertex `v`.
fn radius_bound(domain: &Domain) -> f64 {
    let (v, _) = domain.lmo(&vec![0.0; domain.dim()]).expect("zero cost is valid");
    norm(&v) + domain.diameter()
}

/// `min_{x∈C} c^T x`, attained at a vertex.
fn linear_minimum(domain: &Domain, c: &[f64]) -> f64 {
    let (v, _) = domain.lmo(c).expect("finite cost");
    dot(c, &v)
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        0.5 * xv.dot(&(&self.q * &xv)) + dot(&self.c, x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        let g = &self.q * xv;
        g.iter().zip(&self.c).map(|(a, b)| a + b).collect()
    }

    fn lipschitz(&self, _domain: &Domain) -> Option<f64> {
        Some(self.eig_max_abs)
    }

    fn lower_bound(&self, domain: &Domain) -> Option<f64> {
        let r = radius_bound(domain);
        Some(0.5 * self.eig_min.min(0.0) * r * r + linear_minimum(domain, &self.c))
    }
}

/// `f(x) = c^T x`.
#[derive(Debug, Clone)]
pub struct Linear {
    c: Vec<f64>,
}

impl Linear {
    pub fn new(c: Vec<f64>) -> Self {
        Self { c }
    }
}

impl Objective for Linear {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        dot(&self.c, x)
    }

    fn gradient(&self, _x: &[f64]) -> Vec<f64> {
        self.c.clone()
    }

    fn lipschitz(&self, _domain: &Domain) -> Option<f64> {
        Some(0.0)
    }

    fn lower_bound(&self, domain: &Domain) -> Option<f64> {
        Some(linear_minimum(domain, &self.c))
    }
}

/// `f(x) = ½ x^T Q x + c^T x + (γ/4) Σ x_i^4`, nonconvex when `Q` is indefinite.
#[derive(Debug, Clone)]
pub struct Quartic {
    quad: Quadratic,
    gamma: f64,
}

impl Quartic {
    pub fn new(quad: Quadratic, gamma: f64) -> Self {
        assert!(gamma >= 0.0, "quartic coefficient must be nonnegative");
        Self { quad, gamma }
    }
}

impl Objective for Quartic {
    fn dim(&self) -> usize {
        self.quad.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.quad.value(x) + 0.25 * self.gamma * x.iter().map(|v| v.powi(4)).sum::<f64>()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.quad.gradient(x);
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi += self.gamma * xi.powi(3);
        }
        g
    }

    /// Hessian is `Q + 3γ diag(x²)`, so `‖Q‖ + 3γ r²` bounds it on a ball of
    /// radius `r` containing the domain.
    fn lipschitz(&self, domain: &Domain) -> Option<f64> {
        let r = radius_bound(domain);
        Some(self.quad.eig_max_abs + 3.0 * self.gamma * r * r)
    }

    fn lower_bound(&self, domain: &Domain) -> Option<f64> {
        self.quad.lower_bound(domain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_gradient(f: &dyn Objective, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f.value(&xp) - f.value(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn quadratic_gradient_and_constant() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let f = Quadratic::new(q, vec![0.0, 0.0]);
        assert_eq!(f.gradient(&[1.0, 2.0]), vec![1.0, 8.0]);
        let b = Domain::boxed(vec![0.0; 2], vec![1.0; 2]).unwrap();
        assert!((f.lipschitz(&b).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn quartic_gradient_matches_finite_differences() {
        let q = DMatrix::from_row_slice(3, 3, &[-1.0, 0.3, 0.0, 0.3, 0.5, 0.2, 0.0, 0.2, -2.0]);
        let f = Quartic::new(Quadratic::new(q, vec![0.1, -0.2, 0.3]), 1.5);
        let x = [0.3, -0.7, 1.1];
        let g = f.gradient(&x);
        for (a, b) in g.iter().zip(fd_gradient(&f, &x)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn lower_bounds_hold_on_samples() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let q = DMatrix::from_row_slice(2, 2, &[-3.0, 1.0, 1.0, 0.5]);
        let f = Quartic::new(Quadratic::new(q, vec![1.0, -1.0]), 0.5);
        let d = Domain::boxed(vec![-1.0, -2.0], vec![2.0, 1.0]).unwrap();
        let lb = f.lower_bound(&d).unwrap();
        for _ in 0..500 {
            let x = d.sample_point(&mut rng);
            assert!(f.value(&x) >= lb);
        }
    }
}
