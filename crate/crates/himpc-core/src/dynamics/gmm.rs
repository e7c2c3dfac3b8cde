//! Gaussian mixture prior over transition observations, fit with EM across
//! episodes and queried for moment-matched `(mu_p, sigma_p)` at a point.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Observation, COVARIANCE_RIDGE};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

/// Relative log-likelihood improvement below which EM stops.
pub const EM_REL_TOL: f64 = 1e-6;

/// Mixture prior: normalized weights, component means and covariances, and
/// the pseudo-count that sets the prior's strength in the moment blend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPrior {
    pub weights: Vec<f64>,
    pub means: Vec<Vector>,
    pub covariances: Vec<Matrix>,
    pub pseudo_count: f64,
    /// Per-iteration total log-likelihood recorded during the fit.
    pub log_likelihood_trace: Vec<f64>,
}

impl GmmPrior {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vector>,
        covariances: Vec<Matrix>,
        pseudo_count: f64,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || means.len() != covariances.len() {
            return Err(Error::Snapshot("inconsistent GMM component counts".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::Snapshot("GMM weights must sum to a positive value".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self {
            weights,
            means,
            covariances,
            pseudo_count,
            log_likelihood_trace: Vec::new(),
        })
    }

    /// Degenerate single-component prior, mostly for tests and bootstrap.
    pub fn single_component(mean: Vector, covariance: Matrix, pseudo_count: f64) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![mean],
            covariances: vec![covariance],
            pseudo_count,
            log_likelihood_trace: Vec::new(),
        }
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Posterior component responsibilities at a point.
    pub fn responsibilities(&self, point: &Observation) -> Vec<f64> {
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.covariances))
            .map(|(w, (mu, cov))| w.max(1e-300).ln() + gaussian_log_density(point, mu, cov))
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = r.iter().sum();
        for v in &mut r {
            *v /= total;
        }
        r
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let snap = GmmSnapshot::from_prior(self);
        let text = serde_json::to_string_pretty(&snap)
            .map_err(|e| Error::Snapshot(format!("serialize GMM: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let snap: GmmSnapshot = serde_json::from_str(&text)
            .map_err(|e| Error::Snapshot(format!("parse GMM snapshot: {e}")))?;
        snap.into_prior()
    }
}

/// Versioned on-disk form with covariances flattened row-major.
#[derive(Debug, Serialize, Deserialize)]
struct GmmSnapshot {
    version: u32,
    dim: usize,
    k: usize,
    pseudo_count: f64,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances_row_major: Vec<Vec<f64>>,
}

const GMM_SNAPSHOT_VERSION: u32 = 1;

impl GmmSnapshot {
    fn from_prior(prior: &GmmPrior) -> Self {
        let dim = prior.dim();
        Self {
            version: GMM_SNAPSHOT_VERSION,
            dim,
            k: prior.num_components(),
            pseudo_count: prior.pseudo_count,
            weights: prior.weights.clone(),
            means: prior.means.iter().map(|m| m.as_slice().to_vec()).collect(),
            covariances_row_major: prior
                .covariances
                .iter()
                .map(|c| {
                    let mut flat = Vec::with_capacity(dim * dim);
                    for i in 0..dim {
                        for j in 0..dim {
                            flat.push(c[(i, j)]);
                        }
                    }
                    flat
                })
                .collect(),
        }
    }

    fn into_prior(self) -> Result<GmmPrior> {
        if self.version != GMM_SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!(
                "unsupported GMM snapshot version {} (expected {GMM_SNAPSHOT_VERSION})",
                self.version
            )));
        }
        if self.weights.len() != self.k
            || self.means.len() != self.k
            || self.covariances_row_major.len() != self.k
        {
            return Err(Error::Snapshot("GMM snapshot component counts disagree".into()));
        }
        let means: Vec<Vector> = self.means.into_iter().map(Vector::from_vec).collect();
        let mut covariances = Vec::with_capacity(self.k);
        for flat in self.covariances_row_major {
            if flat.len() != self.dim * self.dim {
                return Err(Error::Snapshot("GMM snapshot covariance size mismatch".into()));
            }
            covariances.push(Matrix::from_row_slice(self.dim, self.dim, &flat));
        }
        for m in &means {
            if m.len() != self.dim {
                return Err(Error::Snapshot("GMM snapshot mean size mismatch".into()));
            }
        }
        let mut prior = GmmPrior::new(self.weights, means, covariances, self.pseudo_count)?;
        prior.log_likelihood_trace = Vec::new();
        Ok(prior)
    }
}

fn gaussian_log_density(x: &Vector, mean: &Vector, cov: &Matrix) -> f64 {
    let d = x.len() as f64;
    let chol = linalg::cholesky_ridged(cov, COVARIANCE_RIDGE)
        .expect("component covariance must be positive definite after ridge");
    let l = chol.l();
    let log_det: f64 = 2.0 * (0..cov.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    let diff = x - mean;
    let z = l.solve_lower_triangular(&diff).expect("triangular solve");
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared())
}

/// Fit a K-component GMM with EM, seeded by k-means++ center selection.
///
/// Component covariances are floored with a ridge every M-step, so the
/// log-likelihood trace is monotone up to that regularization.
pub fn fit_gmm(
    dataset: &[Observation],
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<GmmPrior> {
    if dataset.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if k == 0 || dataset.len() < k {
        return Err(Error::TooFewSamples {
            needed: k.max(1),
            got: dataset.len(),
        });
    }
    let dim = dataset[0].len();
    let n = dataset.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp_centers(dataset, k, &mut rng);

    // Shared initial covariance: the dataset covariance plus ridge.
    let global_mean: Vector = dataset.iter().sum::<Vector>() / n as f64;
    let mut global_cov = Matrix::zeros(dim, dim);
    for p in dataset {
        let d = p - &global_mean;
        global_cov += &d * d.transpose();
    }
    global_cov /= n as f64;
    linalg::add_ridge(&mut global_cov, COVARIANCE_RIDGE);

    let mut weights = vec![1.0 / k as f64; k];
    let mut means: Vec<Vector> = centers;
    let mut covariances: Vec<Matrix> = vec![global_cov; k];
    let mut trace = Vec::new();

    let mut responsibilities = vec![vec![0.0f64; k]; n];
    for _ in 0..max_iters {
        // E-step with log-sum-exp normalization.
        let mut log_likelihood = 0.0;
        for (i, p) in dataset.iter().enumerate() {
            let logs: Vec<f64> = (0..k)
                .map(|j| {
                    weights[j].max(1e-300).ln()
                        + gaussian_log_density(p, &means[j], &covariances[j])
                })
                .collect();
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            log_likelihood += lse;
            for j in 0..k {
                responsibilities[i][j] = (logs[j] - lse).exp();
            }
        }
        let converged = trace
            .last()
            .map(|prev: &f64| {
                let denom = prev.abs().max(1.0);
                (log_likelihood - prev) / denom <= EM_REL_TOL
            })
            .unwrap_or(false);
        trace.push(log_likelihood);
        if converged {
            break;
        }

        // M-step.
        for j in 0..k {
            let mass: f64 = (0..n).map(|i| responsibilities[i][j]).sum();
            weights[j] = mass / n as f64;
            if mass < 1e-10 {
                // Starved component: keep its parameters frozen.
                continue;
            }
            let mut mean = Vector::zeros(dim);
            for (i, p) in dataset.iter().enumerate() {
                mean += p * responsibilities[i][j];
            }
            mean /= mass;
            let mut cov = Matrix::zeros(dim, dim);
            for (i, p) in dataset.iter().enumerate() {
                let d = p - &mean;
                cov += &d * d.transpose() * responsibilities[i][j];
            }
            cov /= mass;
            linalg::add_ridge(&mut cov, COVARIANCE_RIDGE);
            means[j] = mean;
            covariances[j] = linalg::symmetrize(&cov);
        }
    }

    let mut prior = GmmPrior::new(weights, means, covariances, 1.0)?;
    prior.log_likelihood_trace = trace;
    Ok(prior)
}

fn kmeans_pp_centers(dataset: &[Observation], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vector> {
    let n = dataset.len();
    let mut centers: Vec<Vector> = Vec::with_capacity(k);
    centers.push(dataset[rng.random_range(0..n)].clone());
    let mut dist2: Vec<f64> = dataset
        .iter()
        .map(|p| (p - &centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a center; pick uniformly.
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in dist2.iter().enumerate() {
                if target <= *d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        };
        centers.push(dataset[next].clone());
        for (i, p) in dataset.iter().enumerate() {
            dist2[i] = dist2[i].min((p - centers.last().unwrap()).norm_squared());
        }
    }
    centers
}

/// Moment-matched prior at a query point: responsibility-weighted mean and
/// the law-of-total-variance covariance.
pub fn query_prior(prior: &GmmPrior, point: &Observation) -> (Vector, Matrix) {
    let r = prior.responsibilities(point);
    let dim = prior.dim();
    let mut mu = Vector::zeros(dim);
    for (rk, mean) in r.iter().zip(&prior.means) {
        mu += mean * *rk;
    }
    let mut sigma = Matrix::zeros(dim, dim);
    for ((rk, mean), cov) in r.iter().zip(&prior.means).zip(&prior.covariances) {
        let d = mean - &mu;
        sigma += (cov + &d * d.transpose()) * *rk;
    }
    (mu, linalg::symmetrize(&sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn synthetic_clusters(seed: u64, n_per: usize, centers: &[Vector], spread: f64) -> Vec<Vector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, spread).unwrap();
        let mut data = Vec::new();
        for c in centers {
            for _ in 0..n_per {
                let noise = Vector::from_fn(c.len(), |_, _| normal.sample(&mut rng));
                data.push(c + noise);
            }
        }
        data
    }

    #[test]
    fn single_component_fit_is_sample_moments_plus_ridge() {
        let data = synthetic_clusters(1, 40, &[Vector::from_vec(vec![1.0, -2.0])], 0.7);
        let prior = fit_gmm(&data, 1, 50, 0).unwrap();
        let n = data.len() as f64;
        let mean: Vector = data.iter().sum::<Vector>() / n;
        let mut cov = Matrix::zeros(2, 2);
        for p in &data {
            let d = p - &mean;
            cov += &d * d.transpose();
        }
        cov /= n;
        linalg::add_ridge(&mut cov, COVARIANCE_RIDGE);
        assert_relative_eq!(prior.means[0], mean, max_relative = 1e-10);
        assert_relative_eq!(prior.covariances[0], cov, max_relative = 1e-10);
        assert_relative_eq!(prior.weights[0], 1.0);
    }

    #[test]
    fn two_separated_clusters_are_recovered() {
        let c1 = Vector::from_vec(vec![-5.0, 0.0, 1.0]);
        let c2 = Vector::from_vec(vec![5.0, 2.0, -1.0]);
        let data = synthetic_clusters(2, 150, &[c1.clone(), c2.clone()], 0.5);
        let prior = fit_gmm(&data, 2, 100, 3).unwrap();
        // Match each generator to its nearest recovered mean.
        for target in [&c1, &c2] {
            let best = prior
                .means
                .iter()
                .map(|m| (m - *target).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "generator not recovered: distance {best}");
        }
        assert_relative_eq!(prior.weights.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let data = synthetic_clusters(
            5,
            80,
            &[
                Vector::from_vec(vec![0.0, 0.0]),
                Vector::from_vec(vec![3.0, -1.0]),
                Vector::from_vec(vec![-2.0, 4.0]),
            ],
            0.8,
        );
        let prior = fit_gmm(&data, 3, 100, 9).unwrap();
        let trace = &prior.log_likelihood_trace;
        assert!(trace.len() >= 2);
        for w in trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-9,
                "log-likelihood decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        assert!(matches!(
            fit_gmm(&[], 1, 10, 0).unwrap_err(),
            Error::TooFewSamples { .. }
        ));
        let data = vec![Vector::zeros(2), Vector::zeros(2)];
        assert!(matches!(
            fit_gmm(&data, 5, 10, 0).unwrap_err(),
            Error::TooFewSamples { needed: 5, got: 2 }
        ));
    }

    #[test]
    fn single_component_query_returns_component() {
        let mean = Vector::from_vec(vec![1.0, 2.0]);
        let cov = Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let prior = GmmPrior::single_component(mean.clone(), cov.clone(), 1.0);
        let (mu, sigma) = query_prior(&prior, &Vector::from_vec(vec![100.0, -50.0]));
        assert_relative_eq!(mu, mean, max_relative = 1e-12);
        assert_relative_eq!(sigma, cov, max_relative = 1e-12);
    }

    #[test]
    fn query_deep_inside_one_cluster_is_dominated_by_it() {
        let mu_a = Vector::from_vec(vec![-6.0, 0.0]);
        let mu_b = Vector::from_vec(vec![6.0, 0.0]);
        let cov = Matrix::identity(2, 2);
        let prior = GmmPrior::new(
            vec![0.5, 0.5],
            vec![mu_a.clone(), mu_b],
            vec![cov.clone(), cov],
            1.0,
        )
        .unwrap();
        let r = prior.responsibilities(&mu_a);
        assert!(r[0] > 0.99, "responsibility {r:?}");
        let (mu, _) = query_prior(&prior, &mu_a);
        assert!((mu - mu_a).norm() < 1e-2);
    }

    #[test]
    fn equidistant_query_splits_evenly() {
        let mu_a = Vector::from_vec(vec![-3.0, 0.0]);
        let mu_b = Vector::from_vec(vec![3.0, 0.0]);
        let cov = Matrix::identity(2, 2);
        let prior =
            GmmPrior::new(vec![0.5, 0.5], vec![mu_a, mu_b], vec![cov.clone(), cov], 1.0).unwrap();
        let r = prior.responsibilities(&Vector::from_vec(vec![0.0, 5.0]));
        assert_relative_eq!(r[0], 0.5, max_relative = 1e-9);
        assert_relative_eq!(r[1], 0.5, max_relative = 1e-9);
    }

    #[test]
    fn snapshot_round_trip() {
        let data = synthetic_clusters(
            8,
            60,
            &[
                Vector::from_vec(vec![0.0, 1.0]),
                Vector::from_vec(vec![4.0, -2.0]),
            ],
            0.6,
        );
        let mut prior = fit_gmm(&data, 2, 60, 1).unwrap();
        prior.pseudo_count = 2.5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.json");
        prior.save(&path).unwrap();
        let loaded = GmmPrior::load(&path).unwrap();
        assert_eq!(loaded.weights, prior.weights);
        assert_eq!(loaded.means, prior.means);
        assert_eq!(loaded.covariances, prior.covariances);
        assert_eq!(loaded.pseudo_count, prior.pseudo_count);
    }

    #[test]
    fn snapshot_rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.json");
        std::fs::write(
            &path,
            r#"{"version":99,"dim":1,"k":1,"pseudo_count":1.0,"weights":[1.0],"means":[[0.0]],"covariances_row_major":[[1.0]]}"#,
        )
        .unwrap();
        assert!(matches!(
            GmmPrior::load(&path).unwrap_err(),
            Error::Snapshot(_)
        ));
    }
}
