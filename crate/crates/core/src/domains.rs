//! Feasible sets with linear minimization oracles.
//!
//! Every domain here is a polytope. Vertices are never enumerated for the
//! implicit kinds (simplex, box, capped simplex, products); a [`VertexId`] is a
//! canonical encoding from which the vertex vector can be rebuilt on demand.
//! Ties in [`Domain::lmo`] and [`Domain::away_vertex`] go to the lowest id.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{all_finite, dist, dot};

/// Default tolerance for [`Domain::membership`].
pub const MEMBERSHIP_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("input contains NaN or infinite entries")]
    NonFiniteInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("away-vertex search over an empty support")]
    EmptySupport,
    #[error("support weight {0} is not strictly positive")]
    NonPositiveWeight(f64),
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("vertex id {0} does not belong to this domain")]
    UnknownVertex(VertexId),
    #[error("point lies outside the domain")]
    NotMember,
    #[error("vertex file: {0}")]
    VertexFile(String),
}

pub type Result<T> = std::result::Result<T, DomainError>;

/// Canonical identifier of a vertex.
///
/// Equal ids denote the same vertex vector and vice versa.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VertexId {
    /// Row of an explicit vertex list, coordinate of a simplex, or interval
    /// endpoint (0 = lower, 1 = upper).
    Index(usize),
    /// Box corner; `true` selects the upper bound of that coordinate.
    Corner(Vec<bool>),
    /// Capped-simplex vertex: coordinates at the cap plus the coordinate that
    /// carries the fractional remainder of the budget, if any.
    Budget { full: Vec<usize>, partial: Option<usize> },
    /// One id per block of a product domain.
    Product(Vec<VertexId>),
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VertexId::Index(i) => write!(f, "{i}"),
            VertexId::Corner(bits) => {
                for b in bits {
                    write!(f, "{}", u8::from(*b))?;
                }
                Ok(())
            }
            VertexId::Budget { full, partial } => {
                write!(f, "{full:?}")?;
                if let Some(p) = partial {
                    write!(f, "+{p}")?;
                }
                Ok(())
            }
            VertexId::Product(ids) => {
                write!(f, "(")?;
                for (k, id) in ids.iter().enumerate() {
                    if k > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{id}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// A vertex together with its convex-combination weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub id: VertexId,
    pub vertex: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DomainKind {
    ExplicitPolytope { vertices: Vec<Vec<f64>> },
    UnitSimplex,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    CappedSimplex { budget: f64, cap: f64 },
    Interval { lo: f64, hi: f64 },
    Product(Vec<Domain>),
}

/// A compact polytope `C ⊂ R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    kind: DomainKind,
    dim: usize,
    diameter: f64,
}

impl Domain {
    pub fn explicit(vertices: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = vertices.first() else {
            return Err(DomainError::InvalidDomain("empty vertex list".into()));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(DomainError::InvalidDomain("zero-dimensional vertices".into()));
        }
        for v in &vertices {
            if v.len() != dim {
                return Err(DomainError::DimensionMismatch { expected: dim, got: v.len() });
            }
            if !all_finite(v) {
                return Err(DomainError::NonFiniteInput);
            }
        }
        let mut diameter: f64 = 0.0;
        for i in 0..vertices.len() {
            for j in i + 1..vertices.len() {
                let dij = dist(&vertices[i], &vertices[j]);
                if dij == 0.0 {
                    return Err(DomainError::InvalidDomain(format!("vertices {i} and {j} coincide")));
                }
                diameter = diameter.max(dij);
            }
        }
        if diameter <= 0.0 {
            return Err(DomainError::InvalidDomain("a single vertex has zero diameter".into()));
        }
        Ok(Self { kind: DomainKind::ExplicitPolytope { vertices }, dim, diameter })
    }

    pub fn unit_simplex(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(DomainError::InvalidDomain("unit simplex needs dim >= 2".into()));
        }
        Ok(Self { kind: DomainKind::UnitSimplex, dim, diameter: 2f64.sqrt() })
    }

    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(DomainError::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        if lower.is_empty() {
            return Err(DomainError::InvalidDomain("empty box".into()));
        }
        if !all_finite(&lower) || !all_finite(&upper) {
            return Err(DomainError::NonFiniteInput);
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(DomainError::InvalidDomain("box lower bound exceeds upper bound".into()));
        }
        let diameter = dist(&lower, &upper);
        if diameter <= 0.0 {
            return Err(DomainError::InvalidDomain("degenerate box".into()));
        }
        let dim = lower.len();
        Ok(Self { kind: DomainKind::Box { lower, upper }, dim, diameter })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(DomainError::NonFiniteInput);
        }
        if lo >= hi {
            return Err(DomainError::InvalidDomain(format!("interval [{lo}, {hi}] is empty or a point")));
        }
        Ok(Self { kind: DomainKind::Interval { lo, hi }, dim: 1, diameter: hi - lo })
    }

    /// `{x ∈ [0, cap]^dim : Σx = budget}`.
    pub fn capped_simplex(dim: usize, budget: f64, cap: f64) -> Result<Self> {
        if dim == 0 {
            return Err(DomainError::InvalidDomain("capped simplex needs dim >= 1".into()));
        }
        if !(budget.is_finite() && cap.is_finite()) {
            return Err(DomainError::NonFiniteInput);
        }
        if cap <= 0.0 || budget <= 0.0 {
            return Err(DomainError::InvalidDomain("budget and cap must be positive".into()));
        }
        if budget >= dim as f64 * cap {
            return Err(DomainError::InvalidDomain(format!(
                "budget {budget} must be below dim * cap = {}",
                dim as f64 * cap
            )));
        }
        let diameter = capped_diameter(dim, budget, cap);
        if diameter <= 0.0 {
            return Err(DomainError::InvalidDomain("capped simplex reduces to a point".into()));
        }
        Ok(Self { kind: DomainKind::CappedSimplex { budget, cap }, dim, diameter })
    }

    pub fn product(parts: Vec<Domain>) -> Result<Self> {
        if parts.is_empty() {
            return Err(DomainError::InvalidDomain("empty product".into()));
        }
        let dim = parts.iter().map(|p| p.dim).sum();
        let diameter = parts.iter().map(|p| p.diameter * p.diameter).sum::<f64>().sqrt();
        Ok(Self { kind: DomainKind::Product(parts), dim, diameter })
    }

    /// Reads one vertex per line, comma separated. Blank lines and lines
    /// starting with `#` are skipped; a non-numeric first line is a header.
    pub fn explicit_from_csv(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| DomainError::VertexFile(format!("{}: {e}", path.display())))?;
        Self::explicit(parse_vertex_rows(&text)?)
    }

    pub fn kind(&self) -> &DomainKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(DomainError::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        Ok(())
    }

    /// Linear minimization oracle: a vertex minimizing `u^T x` over the domain.
    pub fn lmo(&self, u: &[f64]) -> Result<(Vec<f64>, VertexId)> {
        self.check_len(u)?;
        if !all_finite(u) {
            return Err(DomainError::NonFiniteInput);
        }
        Ok(self.lmo_unchecked(u))
    }

    fn lmo_unchecked(&self, u: &[f64]) -> (Vec<f64>, VertexId) {
        match &self.kind {
            DomainKind::ExplicitPolytope { vertices } => {
                let (best, _) = vertices
                    .iter()
                    .map(|v| dot(u, v))
                    .enumerate()
                    .fold((0, f64::INFINITY), |acc, (j, val)| if val < acc.1 { (j, val) } else { acc });
                (vertices[best].clone(), VertexId::Index(best))
            }
            DomainKind::UnitSimplex => {
                let (best, _) = u
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |acc, (j, &val)| if val < acc.1 { (j, val) } else { acc });
                let mut v = vec![0.0; self.dim];
                v[best] = 1.0;
                (v, VertexId::Index(best))
            }
            DomainKind::Box { lower, upper } => {
                let bits: Vec<bool> =
                    u.iter().zip(lower.iter().zip(upper)).map(|(&ui, (l, h))| ui < 0.0 && l < h).collect();
                let v = corner(lower, upper, &bits);
                (v, VertexId::Corner(bits))
            }
            DomainKind::Interval { lo, hi } => {
                if u[0] < 0.0 {
                    (vec![*hi], VertexId::Index(1))
                } else {
                    (vec![*lo], VertexId::Index(0))
                }
            }
            DomainKind::CappedSimplex { budget, cap } => {
                let mut order: Vec<usize> = (0..self.dim).collect();
                order.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
                let (full_count, rem) = budget_split(*budget, *cap);
                let mut full: Vec<usize> = order[..full_count].to_vec();
                full.sort_unstable();
                let partial = (rem > 0.0).then(|| order[full_count]);
                let id = VertexId::Budget { full, partial };
                (self.vertex_unchecked(&id).expect("lmo builds a valid id"), id)
            }
            DomainKind::Product(parts) => {
                let mut v = Vec::with_capacity(self.dim);
                let mut ids = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let (pv, pid) = p.lmo_unchecked(&u[offset..offset + p.dim]);
                    offset += p.dim;
                    v.extend(pv);
                    ids.push(pid);
                }
                (v, VertexId::Product(ids))
            }
        }
    }

    /// Support vertex maximizing `u^T a_j`; ties go to the lowest id.
    pub fn away_vertex<'a, I>(&self, u: &[f64], support: I) -> Result<(Vec<f64>, VertexId)>
    where
        I: IntoIterator<Item = (&'a VertexId, &'a [f64], f64)>,
    {
        self.check_len(u)?;
        if !all_finite(u) {
            return Err(DomainError::NonFiniteInput);
        }
        let mut best: Option<(&VertexId, &[f64], f64)> = None;
        for (id, v, w) in support {
            if !(w > 0.0) {
                return Err(DomainError::NonPositiveWeight(w));
            }
            self.check_len(v)?;
            let val = dot(u, v);
            best = match best {
                None => Some((id, v, val)),
                Some((bid, _, bval)) if val > bval || (val == bval && id < bid) => Some((id, v, val)),
                keep => keep,
            };
        }
        let (id, v, _) = best.ok_or(DomainError::EmptySupport)?;
        Ok((v.to_vec(), id.clone()))
    }

    /// Rebuilds the vertex vector for `id`.
    pub fn vertex(&self, id: &VertexId) -> Result<Vec<f64>> {
        self.vertex_unchecked(id)
    }

    fn vertex_unchecked(&self, id: &VertexId) -> Result<Vec<f64>> {
        let unknown = || DomainError::UnknownVertex(id.clone());
        match (&self.kind, id) {
            (DomainKind::ExplicitPolytope { vertices }, VertexId::Index(j)) => {
                vertices.get(*j).cloned().ok_or_else(unknown)
            }
            (DomainKind::UnitSimplex, VertexId::Index(j)) if *j < self.dim => {
                let mut v = vec![0.0; self.dim];
                v[*j] = 1.0;
                Ok(v)
            }
            (DomainKind::Box { lower, upper }, VertexId::Corner(bits)) if bits.len() == self.dim => {
                Ok(corner(lower, upper, bits))
            }
            (DomainKind::Interval { lo, .. }, VertexId::Index(0)) => Ok(vec![*lo]),
            (DomainKind::Interval { hi, .. }, VertexId::Index(1)) => Ok(vec![*hi]),
            (DomainKind::CappedSimplex { budget, cap }, VertexId::Budget { full, partial }) => {
                let (full_count, rem) = budget_split(*budget, *cap);
                if full.len() != full_count || partial.is_some() != (rem > 0.0) {
                    return Err(unknown());
                }
                let mut v = vec![0.0; self.dim];
                for &i in full {
                    if i >= self.dim || v[i] != 0.0 {
                        return Err(unknown());
                    }
                    v[i] = *cap;
                }
                if let Some(p) = partial {
                    if *p >= self.dim || v[*p] != 0.0 {
                        return Err(unknown());
                    }
                    v[*p] = rem;
                }
                Ok(v)
            }
            (DomainKind::Product(parts), VertexId::Product(ids)) if ids.len() == parts.len() => {
                let mut v = Vec::with_capacity(self.dim);
                for (p, pid) in parts.iter().zip(ids) {
                    v.extend(p.vertex_unchecked(pid)?);
                }
                Ok(v)
            }
            _ => Err(unknown()),
        }
    }

    /// True iff `x` satisfies every defining constraint within `tol`.
    pub fn membership(&self, x: &[f64], tol: f64) -> Result<bool> {
        self.check_len(x)?;
        if !all_finite(x) {
            return Ok(false);
        }
        Ok(match &self.kind {
            DomainKind::ExplicitPolytope { vertices } => match nnls_convex_weights(vertices, x) {
                Some((_, residual)) => residual <= tol,
                None => false,
            },
            DomainKind::UnitSimplex => x.iter().all(|&v| v >= -tol) && (x.iter().sum::<f64>() - 1.0).abs() <= tol,
            DomainKind::Box { lower, upper } => {
                x.iter().zip(lower.iter().zip(upper)).all(|(&v, (l, h))| v >= l - tol && v <= h + tol)
            }
            DomainKind::Interval { lo, hi } => x[0] >= lo - tol && x[0] <= hi + tol,
            DomainKind::CappedSimplex { budget, cap } => {
                x.iter().all(|&v| v >= -tol && v <= cap + tol) && (x.iter().sum::<f64>() - budget).abs() <= tol
            }
            DomainKind::Product(parts) => {
                let mut offset = 0;
                let mut ok = true;
                for p in parts {
                    ok &= p.membership(&x[offset..offset + p.dim], tol)?;
                    offset += p.dim;
                }
                ok
            }
        })
    }

    /// A uniformly random vertex (the minimizer of a Gaussian cost vector).
    pub fn sample_vertex<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, VertexId) {
        let u: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        self.lmo_unchecked(&u)
    }

    /// A random feasible point.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.kind {
            DomainKind::UnitSimplex => dirichlet_ones(self.dim, rng),
            DomainKind::Box { lower, upper } => {
                lower.iter().zip(upper).map(|(l, h)| l + (h - l) * rng.random::<f64>()).collect()
            }
            DomainKind::Interval { lo, hi } => vec![lo + (hi - lo) * rng.random::<f64>()],
            DomainKind::ExplicitPolytope { vertices } => {
                let w = dirichlet_ones(vertices.len(), rng);
                let mut x = vec![0.0; self.dim];
                for (wj, v) in w.iter().zip(vertices) {
                    crate::linalg::axpy(&mut x, *wj, v);
                }
                x
            }
            DomainKind::CappedSimplex { .. } => {
                let w = dirichlet_ones(4, rng);
                let mut x = vec![0.0; self.dim];
                for wj in w {
                    let (v, _) = self.sample_vertex(rng);
                    crate::linalg::axpy(&mut x, wj, &v);
                }
                x
            }
            DomainKind::Product(parts) => parts.iter().flat_map(|p| p.sample_point(rng)).collect(),
        }
    }

    /// Writes `x` as a convex combination of vertices. Atoms are sorted by id
    /// and their weights sum to one.
    pub fn decompose(&self, x: &[f64], tol: f64) -> Result<Vec<Atom>> {
        self.check_len(x)?;
        if !self.membership(x, tol.max(MEMBERSHIP_TOL))? {
            return Err(DomainError::NotMember);
        }
        let pairs: Vec<(VertexId, f64)> = match &self.kind {
            DomainKind::ExplicitPolytope { vertices } => {
                let (w, _) = nnls_convex_weights(vertices, x).ok_or(DomainError::NotMember)?;
                w.into_iter().enumerate().map(|(j, wj)| (VertexId::Index(j), wj)).collect()
            }
            DomainKind::UnitSimplex => x.iter().enumerate().map(|(j, &v)| (VertexId::Index(j), v.max(0.0))).collect(),
            DomainKind::Interval { lo, hi } => {
                let t = ((x[0] - lo) / (hi - lo)).clamp(0.0, 1.0);
                vec![(VertexId::Index(0), 1.0 - t), (VertexId::Index(1), t)]
            }
            DomainKind::Box { lower, upper } => {
                let columns: Vec<Vec<(bool, f64)>> = x
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(&v, (l, h))| {
                        if l == h {
                            vec![(false, 1.0)]
                        } else {
                            let t = ((v - l) / (h - l)).clamp(0.0, 1.0);
                            vec![(false, 1.0 - t), (true, t)]
                        }
                    })
                    .map(|c| c.into_iter().filter(|(_, w)| *w > 0.0).collect())
                    .collect();
                couple(&columns).into_iter().map(|(bits, w)| (VertexId::Corner(bits), w)).collect()
            }
            DomainKind::CappedSimplex { budget, cap } => capped_decompose(x, *budget, *cap),
            DomainKind::Product(parts) => {
                let mut blocks = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let atoms = p.decompose(&x[offset..offset + p.dim], tol)?;
                    offset += p.dim;
                    blocks.push(atoms.into_iter().map(|a| (a.id, a.weight)).collect::<Vec<_>>());
                }
                couple(&blocks).into_iter().map(|(ids, w)| (VertexId::Product(ids), w)).collect()
            }
        };
        let mut atoms: Vec<Atom> = Vec::new();
        for (id, w) in pairs {
            if w > 1e-14 {
                let vertex = self.vertex_unchecked(&id)?;
                atoms.push(Atom { id, vertex, weight: w });
            }
        }
        let total: f64 = atoms.iter().map(|a| a.weight).sum();
        for a in &mut atoms {
            a.weight /= total;
        }
        atoms.sort_by(|a, b| a.id.cmp(&b.id));
        // merge duplicates produced by couplings
        atoms.dedup_by(|next, prev| {
            if next.id == prev.id {
                prev.weight += next.weight;
                true
            } else {
                false
            }
        });
        Ok(atoms)
    }
}

fn corner(lower: &[f64], upper: &[f64], bits: &[bool]) -> Vec<f64> {
    bits.iter().zip(lower.iter().zip(upper)).map(|(&b, (&l, &h))| if b { h } else { l }).collect()
}

/// Number of coordinates at the cap and the leftover budget of a vertex.
fn budget_split(budget: f64, cap: f64) -> (usize, f64) {
    let ratio = budget / cap;
    let full = (ratio + 1e-12).floor();
    let mut rem = budget - full * cap;
    if rem <= 1e-12 * cap {
        rem = 0.0;
    }
    (full as usize, rem)
}

/// Exact diameter of the capped simplex: vertices are permutations of the
/// pattern `(cap, ..., cap, rem, 0, ..., 0)`, and the smallest inner product
/// of two permutations pairs the sorted pattern against its reverse.
fn capped_diameter(dim: usize, budget: f64, cap: f64) -> f64 {
    let (full, rem) = budget_split(budget, cap);
    let mut pattern = vec![0.0; dim];
    for p in pattern.iter_mut().take(full) {
        *p = cap;
    }
    if rem > 0.0 && full < dim {
        pattern[full] = rem;
    }
    let sq: f64 = pattern.iter().map(|p| p * p).sum();
    let min_inner: f64 = pattern.iter().zip(pattern.iter().rev()).map(|(a, b)| a * b).sum();
    (2.0 * (sq - min_inner)).max(0.0).sqrt()
}

/// Greedy decomposition: peel off the vertex built from the largest
/// coordinates with the largest feasible weight, then recurse on the rest.
fn capped_decompose(x: &[f64], budget: f64, cap: f64) -> Vec<(VertexId, f64)> {
    let (full_count, rem) = budget_split(budget, cap);
    let dim = x.len();
    let mut residual: Vec<f64> = x.iter().map(|v| v.clamp(0.0, cap)).collect();
    let mut mass_left = 1.0;
    let mut out = Vec::new();
    for _ in 0..=dim + 1 {
        if mass_left <= 1e-15 {
            break;
        }
        // residual / mass_left is a point of the capped simplex
        let scaled: Vec<f64> = residual.iter().map(|r| r / mass_left).collect();
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
        let mut v = vec![0.0; dim];
        for &i in &order[..full_count] {
            v[i] = cap;
        }
        let partial = (rem > 0.0).then(|| order[full_count]);
        if let Some(p) = partial {
            v[p] = rem;
        }
        // largest theta with scaled - theta v >= 0 and (scaled - theta v)/(1 - theta) <= cap
        let mut theta: f64 = 1.0;
        for i in 0..dim {
            if v[i] > 0.0 {
                theta = theta.min(scaled[i] / v[i]);
            }
            if v[i] < cap {
                theta = theta.min(((cap - scaled[i]) / (cap - v[i])).max(0.0));
            }
        }
        let theta = theta.clamp(0.0, 1.0);
        let mut full: Vec<usize> = order[..full_count].to_vec();
        full.sort_unstable();
        let w = theta * mass_left;
        if w > 0.0 {
            out.push((VertexId::Budget { full, partial }, w));
        }
        for i in 0..dim {
            residual[i] = (residual[i] - w * v[i]).max(0.0);
        }
        mass_left -= w;
        if theta >= 1.0 - 1e-14 || theta <= 0.0 {
            break;
        }
    }
    out
}

/// Comonotone coupling of several discrete distributions: walks all
/// cumulative distributions at once and emits one joint atom per interval.
fn couple<T: Clone>(blocks: &[Vec<(T, f64)>]) -> Vec<(Vec<T>, f64)> {
    let mut idx = vec![0usize; blocks.len()];
    let mut left: Vec<f64> = blocks.iter().map(|b| b.first().map_or(0.0, |a| a.1)).collect();
    let mut out = Vec::new();
    loop {
        if blocks.iter().zip(&idx).any(|(b, &i)| i >= b.len()) {
            break;
        }
        let m = left.iter().copied().fold(f64::INFINITY, f64::min);
        let ids: Vec<T> = blocks.iter().zip(&idx).map(|(b, &i)| b[i].0.clone()).collect();
        if m > 0.0 {
            out.push((ids, m));
        }
        for (k, b) in blocks.iter().enumerate() {
            left[k] -= m;
            if left[k] <= 1e-15 {
                idx[k] += 1;
                left[k] = b.get(idx[k]).map_or(0.0, |a| a.1);
            }
        }
    }
    out
}

fn dirichlet_ones<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Nonnegative least squares (Lawson-Hanson) on `[V; 1^T] λ ≈ [x; 1]`.
/// Returns the weights and the residual norm.
fn nnls_convex_weights(vertices: &[Vec<f64>], x: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = vertices.len();
    let rows = x.len() + 1;
    let a = DMatrix::from_fn(rows, n, |r, c| if r < x.len() { vertices[c][r] } else { 1.0 });
    let mut b = DVector::from_column_slice(x).resize_vertically(rows, 0.0);
    b[rows - 1] = 1.0;

    let mut lambda = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let eps = 1e-13;
    for _ in 0..3 * n + 10 {
        let grad = a.transpose() * (&b - &a * &lambda);
        let candidate = (0..n).filter(|&j| !passive[j]).max_by(|&i, &j| grad[i].total_cmp(&grad[j]).then(j.cmp(&i)));
        match candidate {
            Some(j) if grad[j] > eps => passive[j] = true,
            _ => break,
        }
        for _ in 0..3 * n + 10 {
            let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let sub = a.select_columns(&cols);
            let sol = sub.clone().svd(true, true).solve(&b, 1e-14).ok()?;
            let mut s = DVector::<f64>::zeros(n);
            for (k, &j) in cols.iter().enumerate() {
                s[j] = sol[k];
            }
            if cols.iter().all(|&j| s[j] > 0.0) {
                lambda = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &j in &cols {
                if s[j] <= 0.0 {
                    let denom = lambda[j] - s[j];
                    if denom > 0.0 {
                        alpha = alpha.min(lambda[j] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            lambda = &lambda + (s - &lambda) * alpha;
            for &j in &cols {
                if lambda[j] <= eps {
                    lambda[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    let residual = (&b - &a * &lambda).norm();
    Some((lambda.iter().copied().collect(), residual))
}

fn parse_vertex_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if rows.is_empty() && lineno == 0 => continue,
            Err(e) => {
                return Err(DomainError::VertexFile(format!("line {}: {e}", lineno + 1)));
            }
        }
    }
    Ok(rows)
}

/// JSON description of a domain, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSpec {
    ExplicitPolytope {
        #[serde(default)]
        vertices: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        csv: Option<std::path::PathBuf>,
    },
    UnitSimplex {
        dim: usize,
    },
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    CappedSimplex {
        dim: usize,
        budget: f64,
        #[serde(default = "default_cap")]
        cap: f64,
    },
    Interval {
        lo: f64,
        hi: f64,
    },
    Product {
        parts: Vec<DomainSpec>,
    },
}

fn default_cap() -> f64 {
    1.0
}

impl DomainSpec {
    pub fn build(&self) -> Result<Domain> {
        match self {
            DomainSpec::ExplicitPolytope { vertices, csv } => match (vertices, csv) {
                (Some(v), None) => Domain::explicit(v.clone()),
                (None, Some(path)) => Domain::explicit_from_csv(path),
                _ => {
                    Err(DomainError::InvalidDomain("explicit_polytope needs exactly one of `vertices` or `csv`".into()))
                }
            },
            DomainSpec::UnitSimplex { dim } => Domain::unit_simplex(*dim),
            DomainSpec::Box { lower, upper } => Domain::boxed(lower.clone(), upper.clone()),
            DomainSpec::CappedSimplex { dim, budget, cap } => Domain::capped_simplex(*dim, *budget, *cap),
            DomainSpec::Interval { lo, hi } => Domain::interval(*lo, *hi),
            DomainSpec::Product { parts } => {
                Domain::product(parts.iter().map(DomainSpec::build).collect::<Result<_>>()?)
            }
        }
    }
}
