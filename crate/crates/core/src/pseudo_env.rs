//! Environmental pseudo classes.
//!
//! Pixel spectra are grouped with Lloyd's k-means from a seeded k-means++
//! start; every sample is then labeled with its nearest center. Labels are
//! 1-based (`1..=lambda`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datacube::Patch;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoModel {
    pub centers: Vec<Vec<f64>>,
    pub lambda: usize,
    /// Sum of squared distances of every fitted spectrum to its nearest center.
    pub objective: f64,
    pub iterations_run: usize,
    /// Objective after seeding and after each accepted Lloyd iteration.
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabeling {
    pub labels: Vec<usize>,
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center, lowest index on ties, and its squared distance.
fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (s, c) in centers.iter().enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (s, d);
        }
    }
    best
}

fn assign_all(spectra: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    spectra.iter().map(|x| nearest(x, centers)).unzip()
}

fn kmeans_plus_plus(spectra: &[Vec<f64>], lambda: usize, seed: u64, stream: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::keyed(seed, stream);
    let n = spectra.len();
    let mut centers = vec![spectra[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = spectra
        .iter()
        .map(|x| squared_distance(x, &centers[0]))
        .collect();
    while centers.len() < lambda {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // Rounding can run off the end onto a zero-weight point.
            if dist[chosen] == 0.0 {
                chosen = dist
                    .iter()
                    .rposition(|&d| d > 0.0)
                    .expect("positive total has a positive entry");
            }
            chosen
        } else {
            // All points coincide with chosen centers.
            rng.random_range(0..n)
        };
        centers.push(spectra[pick].clone());
        for (d, x) in dist.iter_mut().zip(spectra) {
            *d = d.min(squared_distance(x, &centers[centers.len() - 1]));
        }
    }
    centers
}

/// One k-means++ seeding followed by Lloyd iterations.
pub fn fit_centers(
    spectra: &[Vec<f64>],
    lambda: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<PseudoModel> {
    fit_centers_best_of(spectra, lambda, max_iter, tol, seed, 1)
}

/// Runs `restarts` independent seedings (restart `r` draws from stream `r`)
/// and keeps the lowest final objective, earliest restart on ties.
pub fn fit_centers_best_of(
    spectra: &[Vec<f64>],
    lambda: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
    restarts: usize,
) -> Result<PseudoModel> {
    if lambda == 0 {
        return Err(Error::invalid("number of pseudo classes must be at least 1"));
    }
    if spectra.len() < lambda {
        return Err(Error::invalid(format!(
            "{} spectra cannot form {lambda} pseudo classes",
            spectra.len()
        )));
    }
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    if !(tol >= 0.0) {
        return Err(Error::invalid(format!("tolerance {tol} must be >= 0")));
    }
    let dim = spectra[0].len();
    if spectra.iter().any(|x| x.len() != dim) {
        return Err(Error::invalid("spectra differ in length"));
    }
    if spectra.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in spectra"));
    }
    if restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    let mut best: Option<PseudoModel> = None;
    for r in 0..restarts {
        let model = lloyd(spectra, lambda, max_iter, tol, kmeans_plus_plus(spectra, lambda, seed, r as u64));
        if best.as_ref().is_none_or(|b| model.objective < b.objective) {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(spectra: &[Vec<f64>], lambda: usize, max_iter: usize, tol: f64, mut centers: Vec<Vec<f64>>) -> PseudoModel {
    let dim = spectra[0].len();
    let (mut assign, mut dist) = assign_all(spectra, &centers);
    let mut objective: f64 = dist.iter().sum();
    let mut history = vec![objective];
    let mut iterations_run = 0;

    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; lambda];
        let mut counts = vec![0usize; lambda];
        for (x, &s) in spectra.iter().zip(&assign) {
            counts[s] += 1;
            for (acc, v) in sums[s].iter_mut().zip(x) {
                *acc += v;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .zip(&centers)
            .map(|((sum, &count), old)| {
                if count == 0 {
                    old.clone()
                } else {
                    sum.into_iter().map(|v| v / count as f64).collect()
                }
            })
            .collect();
        // Empty clusters move onto the point currently farthest from its center.
        for s in 0..lambda {
            if counts[s] > 0 {
                continue;
            }
            let (_, dists) = assign_all(spectra, &next);
            let far = dists
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &d)| {
                    if d > best.1 {
                        (i, d)
                    } else {
                        best
                    }
                })
                .0;
            next[s] = spectra[far].clone();
        }

        let (next_assign, next_dist) = assign_all(spectra, &next);
        let next_objective: f64 = next_dist.iter().sum();
        if next_objective > objective {
            // Converged to rounding noise; keep the better centers.
            break;
        }
        iterations_run += 1;
        let improvement = objective - next_objective;
        centers = next;
        assign = next_assign;
        dist = next_dist;
        objective = next_objective;
        history.push(objective);
        if improvement < tol {
            break;
        }
    }
    debug_assert_eq!(dist.len(), assign.len());

    PseudoModel {
        centers,
        lambda,
        objective,
        iterations_run,
        objective_history: history,
    }
}

impl PseudoModel {
    /// Recomputes the clustering objective of `spectra` under these centers.
    pub fn objective_for(&self, spectra: &[Vec<f64>]) -> f64 {
        spectra.iter().map(|x| nearest(x, &self.centers).1).sum()
    }
}

pub fn assign_pseudo_labels(spectra: &[Vec<f64>], model: &PseudoModel) -> Result<PseudoLabeling> {
    let dim = model.centers.first().map_or(0, Vec::len);
    if let Some(bad) = spectra.iter().find(|x| x.len() != dim) {
        return Err(Error::invalid(format!(
            "spectrum of length {} does not match centers of length {dim}",
            bad.len()
        )));
    }
    Ok(PseudoLabeling {
        labels: spectra
            .iter()
            .map(|x| nearest(x, &model.centers).0 + 1)
            .collect(),
    })
}

/// The vector that is clustered for a sample: its center-pixel spectrum.
pub fn clustering_spectrum(sample: &Patch) -> Vec<f64> {
    sample.center().to_vec()
}
