//! Small labeled datasets: CSV loading and a synthetic classification surrogate.
//!
//! CSV layout: one sample per row, comma separated, features first and the
//! target in the last column. A first row that does not parse as numbers is
//! treated as a header.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ProblemError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledData {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(ProblemError::Data(format!("{} feature rows but {} labels", features.len(), labels.len())));
        }
        if features.is_empty() {
            return Err(ProblemError::Data("no samples".into()));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|r| r.len() != d) {
            return Err(ProblemError::Data("feature rows must share a positive length".into()));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ProblemError::Data("non-finite feature value".into()));
        }
        if classes < 2 || labels.iter().any(|&l| l >= classes) {
            return Err(ProblemError::Data(format!("labels must lie in 0..{classes} with at least two classes")));
        }
        Ok(Self { features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Shuffles and splits into `first` samples and the rest.
    pub fn split(&self, first: usize, seed: u64) -> Result<(Self, Self)> {
        if first == 0 || first >= self.len() {
            return Err(ProblemError::Data(format!("cannot split {} samples at {first}", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((self.subset(&idx[..first]), self.subset(&idx[first..])))
    }

    /// Centers and scales every feature with this set's statistics and applies
    /// the same map to `others`. Constant features are only centered.
    pub fn standardize_with(&mut self, others: &mut [&mut LabeledData]) {
        let n = self.len() as f64;
        for j in 0..self.dim() {
            let mean = self.features.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = self.features.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for set in std::iter::once(&mut *self).chain(others.iter_mut().map(|o| &mut **o)) {
                for r in set.features.iter_mut() {
                    r[j] = (r[j] - mean) / sd;
                }
            }
        }
    }
}

fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if rows.is_empty() && lineno == 0 => continue,
            Err(e) => return Err(ProblemError::Data(format!("line {}: {e}", lineno + 1))),
        }
    }
    if rows.is_empty() {
        return Err(ProblemError::Data("no data rows".into()));
    }
    let width = rows[0].len();
    if width < 2 || rows.iter().any(|r| r.len() != width) {
        return Err(ProblemError::Data("rows need at least two columns and equal widths".into()));
    }
    Ok(rows)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| ProblemError::Data(format!("{}: {e}", path.display())))
}

/// Integer class labels in the last column.
pub fn load_labeled_csv(path: &Path) -> Result<LabeledData> {
    let rows = parse_rows(&read(path)?)?;
    let mut features = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for mut r in rows {
        let l = r.pop().expect("width checked");
        if l < 0.0 || l.fract() != 0.0 {
            return Err(ProblemError::Data(format!("label {l} is not a nonnegative integer")));
        }
        labels.push(l as usize);
        features.push(r);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledData::new(features, labels, classes)
}

/// Real-valued response in the last column, binned into `classes` quantile
/// classes.
pub fn load_response_csv(path: &Path, classes: usize) -> Result<LabeledData> {
    let rows = parse_rows(&read(path)?)?;
    let response: Vec<f64> = rows.iter().map(|r| r[r.len() - 1]).collect();
    let features = rows.into_iter().map(|mut r| {
        r.pop();
        r
    });
    LabeledData::new(features.collect(), quantile_labels(&response, classes)?, classes)
}

/// Class `c` holds the responses ranked in the `c`-th of `classes` equal
/// slices; ties keep their input order.
pub fn quantile_labels(response: &[f64], classes: usize) -> Result<Vec<usize>> {
    if classes < 2 || response.len() < classes {
        return Err(ProblemError::Data(format!("cannot bin {} responses into {classes} classes", response.len())));
    }
    if response.iter().any(|v| !v.is_finite()) {
        return Err(ProblemError::Data("non-finite response".into()));
    }
    let mut order: Vec<usize> = (0..response.len()).collect();
    order.sort_by(|&a, &b| response[a].total_cmp(&response[b]));
    let mut labels = vec![0; response.len()];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = rank * classes / response.len();
    }
    Ok(labels)
}

/// Gaussian features, a noisy linear response and quantile classes.
pub fn synthetic_surrogate(samples: usize, dim: usize, classes: usize, seed: u64) -> Result<LabeledData> {
    if dim == 0 {
        return Err(ProblemError::Data("dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut features = Vec::with_capacity(samples);
    let mut response = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let noise: f64 = rng.sample(StandardNormal);
        response.push(x.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>() + 0.5 * noise);
        features.push(x);
    }
    LabeledData::new(features, quantile_labels(&response, classes)?, classes)
}

/// Isotropic Gaussian clusters with means drawn from `N(0, separation² I)`,
/// classes assigned round-robin.
pub fn gaussian_blobs(samples: usize, dim: usize, classes: usize, separation: f64, seed: u64) -> Result<LabeledData> {
    if dim == 0 || classes < 2 {
        return Err(ProblemError::Data("need a positive dimension and at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..dim).map(|_| separation * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let mut features = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        features.push(means[c].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect());
        labels.push(c);
    }
    LabeledData::new(features, labels, classes)
}
