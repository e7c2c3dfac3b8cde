//! Online dynamics estimation.
//!
//! Within an episode, an exponential moving average tracks the mean and
//! second moment of transition observations `p_t = [x_{t-1}; u_{t-1}; x_t]`.
//! Across episodes, a GMM prior over the same observations supplies
//! `(mu_p, sigma_p)` at a query point. The two are blended with
//! normalized-inverse-Wishart-style coefficients and the blended joint
//! Gaussian is conditioned on `[x; u]` to produce an affine one-step model.

pub mod gmm;

pub use gmm::{fit_gmm, query_prior, GmmPrior};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ControlVec, Matrix, StateVec, Vector};
use crate::lqr::ControlLaw;

/// Ridge added to covariances before inversion and as a floor on GMM
/// component covariances.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

/// Transition observation `[x_{t-1}; u_{t-1}; x_t]`.
pub type Observation = Vector;

/// Task dimensions shared by the estimation and planning layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDims {
    pub state_dim: usize,
    pub control_dim: usize,
}

impl TaskDims {
    pub fn new(state_dim: usize, control_dim: usize) -> Self {
        Self {
            state_dim,
            control_dim,
        }
    }

    /// Dimension of `[x; u]`.
    pub fn xu_dim(&self) -> usize {
        self.state_dim + self.control_dim
    }

    /// Dimension of an observation `[x; u; x']`.
    pub fn obs_dim(&self) -> usize {
        2 * self.state_dim + self.control_dim
    }
}

/// Concatenate a transition into an observation vector.
pub fn make_observation(prev_state: &StateVec, prev_control: &ControlVec, state: &StateVec) -> Observation {
    let mut data = Vec::with_capacity(prev_state.len() + prev_control.len() + state.len());
    data.extend_from_slice(prev_state.as_slice());
    data.extend_from_slice(prev_control.as_slice());
    data.extend_from_slice(state.as_slice());
    Observation::from_vec(data)
}

/// Exponentially discounted running mean and second moment of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingStats {
    pub mean: Vector,
    pub second_moment: Matrix,
    pub beta: f64,
    pub count: u64,
}

impl MovingStats {
    pub fn new(dim: usize, beta: f64) -> Self {
        assert!((0.0..=1.0).contains(&beta), "beta must be in [0, 1]");
        Self {
            mean: Vector::zeros(dim),
            second_moment: Matrix::zeros(dim, dim),
            beta,
            count: 0,
        }
    }

    /// Effective sample count of the discounted average: sum of beta^i over
    /// absorbed steps.
    pub fn effective_count(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        if self.beta >= 1.0 {
            return self.count as f64;
        }
        (1.0 - self.beta.powi(self.count as i32)) / (1.0 - self.beta)
    }

    /// Pseudo-covariance formed from the discounted moments.
    pub fn empirical_covariance(&self) -> Matrix {
        &self.second_moment - &self.mean * self.mean.transpose()
    }
}

/// One EMA update: `mu <- beta*mu + (1-beta)*p`, same recursion for the
/// second moment with the observation outer product.
pub fn update_stats(stats: &MovingStats, obs: &Observation) -> Result<MovingStats> {
    let dim = stats.mean.len();
    if obs.len() != dim {
        return Err(Error::DimensionMismatch {
            context: "update_stats observation",
            expected: dim,
            got: obs.len(),
        });
    }
    let b = stats.beta;
    let mean = &stats.mean * b + obs * (1.0 - b);
    let second_moment = &stats.second_moment * b + obs * obs.transpose() * (1.0 - b);
    Ok(MovingStats {
        mean,
        second_moment,
        beta: stats.beta,
        count: stats.count + 1,
    })
}

/// Blend weights for combining within-episode statistics with the prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixCoefficients {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
}

impl MixCoefficients {
    /// Normalized-inverse-Wishart-style blend from the effective EMA count
    /// `n` and the prior pseudo-count `n_p`: prior-dominated at episode
    /// start, data-dominated once the EMA has absorbed enough steps.
    pub fn from_counts(n: f64, n_p: f64) -> Self {
        assert!(n >= 0.0 && n_p >= 0.0);
        let total = n + n_p;
        if total <= 0.0 {
            // Degenerate: no data and no prior mass; fall back to the prior.
            return Self {
                a1: 0.0,
                a2: 1.0,
                a3: 0.0,
                a4: 0.0,
            };
        }
        Self {
            a1: n / total,
            a2: n_p / total,
            a3: n / total,
            a4: n * n_p / (total * total),
        }
    }

    /// Pure-data limit: ignore the prior entirely.
    pub fn data_only() -> Self {
        Self {
            a1: 1.0,
            a2: 0.0,
            a3: 1.0,
            a4: 0.0,
        }
    }

    /// Pure-prior limit.
    pub fn prior_only() -> Self {
        Self {
            a1: 0.0,
            a2: 1.0,
            a3: 0.0,
            a4: 0.0,
        }
    }
}

/// Affine one-step model `x' = A x + B u + c` with process-noise covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDynamics {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Vector,
    pub w: Matrix,
}

impl LinearDynamics {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn predict(&self, x: &StateVec, u: &ControlVec) -> StateVec {
        &self.a * x + &self.b * u + &self.c
    }

    /// Noise-free model, handy for constructing exact test systems.
    pub fn deterministic(a: Matrix, b: Matrix, c: Vector) -> Self {
        let n = a.nrows();
        Self {
            a,
            b,
            c,
            w: Matrix::zeros(n, n),
        }
    }
}

/// Blend the EMA statistics with prior moments and condition the resulting
/// joint Gaussian of `[x; u; x']` on `[x; u]`.
///
/// The covariance blend uses the pseudo-covariance `second_moment - mean
/// mean^T` for the data term so every term of the blend is a covariance:
/// `sigma = a2*sigma_p + a3*cov_hat + a4*(mu_p - mu_hat)(mu_p - mu_hat)^T`.
pub fn mix_and_condition(
    stats: &MovingStats,
    mu_p: &Vector,
    sigma_p: &Matrix,
    coeffs: &MixCoefficients,
    dims: &TaskDims,
) -> Result<LinearDynamics> {
    let d = dims.obs_dim();
    if stats.mean.len() != d || mu_p.len() != d {
        return Err(Error::DimensionMismatch {
            context: "mix_and_condition moments",
            expected: d,
            got: if stats.mean.len() != d {
                stats.mean.len()
            } else {
                mu_p.len()
            },
        });
    }
    let mu = &stats.mean * coeffs.a1 + mu_p * (1.0 - coeffs.a1);
    let diff = mu_p - &stats.mean;
    let sigma = sigma_p * coeffs.a2
        + stats.empirical_covariance() * coeffs.a3
        + &diff * diff.transpose() * coeffs.a4;
    condition_joint(&mu, &linalg::symmetrize(&sigma), dims)
}

/// Condition a joint Gaussian over `[x; u; x']` on `[x; u]`:
/// `[A B] = Sigma_{x',xu} Sigma_{xu,xu}^{-1}`, `c = mu_{x'} - [A B] mu_{xu}`,
/// `W` the Schur complement.
pub fn condition_joint(mu: &Vector, sigma: &Matrix, dims: &TaskDims) -> Result<LinearDynamics> {
    let n = dims.state_dim;
    let xu = dims.xu_dim();
    let sigma_xuxu = sigma.view((0, 0), (xu, xu)).into_owned();
    let sigma_y_xu = sigma.view((xu, 0), (n, xu)).into_owned();
    let sigma_yy = sigma.view((xu, xu), (n, n)).into_owned();

    let chol = linalg::cholesky_ridged(&sigma_xuxu, COVARIANCE_RIDGE).ok_or_else(|| {
        Error::SingularConditioning {
            context: format!("{xu}x{xu} [x; u] covariance block"),
        }
    })?;
    // F = Sigma_{y,xu} Sigma_{xu,xu}^{-1}, solved as Sigma_{xu,xu} F^T = Sigma_{xu,y}.
    let f = chol.solve(&sigma_y_xu.transpose()).transpose();
    let a = f.view((0, 0), (n, n)).into_owned();
    let b = f.view((0, n), (n, dims.control_dim)).into_owned();
    let mu_xu = mu.rows(0, xu).into_owned();
    let mu_y = mu.rows(xu, n).into_owned();
    let c = mu_y - &f * mu_xu;
    let w = linalg::symmetrize(&(sigma_yy - &f * sigma_y_xu.transpose()));
    Ok(LinearDynamics { a, b, c, w })
}

/// Predict the time-varying models for an H-step horizon from time t.
///
/// The first model is the blend at the latest real observation. Each later
/// model rolls the predicted mean state forward with the previous MPC
/// policy's action, re-queries the prior at the predicted pseudo-observation
/// `[x_hat; u_hat; x_hat_next]`, and re-mixes with the same EMA statistics.
/// Returns H+1 models.
pub fn predict_horizon(
    stats: &MovingStats,
    prior: &GmmPrior,
    coeffs: &MixCoefficients,
    x_t: &StateVec,
    last_obs: &Observation,
    prev_policy: &[ControlLaw],
    horizon: usize,
    dims: &TaskDims,
) -> Result<Vec<LinearDynamics>> {
    let mut models = Vec::with_capacity(horizon + 1);
    let (mu_p, sigma_p) = query_prior(prior, last_obs);
    models.push(mix_and_condition(stats, &mu_p, &sigma_p, coeffs, dims)?);

    let mut x_hat = x_t.clone();
    for i in 1..=horizon {
        let model = &models[i - 1];
        let u_hat = if prev_policy.is_empty() {
            ControlVec::zeros(dims.control_dim)
        } else {
            prev_policy[i.min(prev_policy.len() - 1)].action(&x_hat)
        };
        let x_next = model.predict(&x_hat, &u_hat);
        let pseudo_obs = make_observation(&x_hat, &u_hat, &x_next);
        let (mu_p, sigma_p) = query_prior(prior, &pseudo_obs);
        models.push(mix_and_condition(stats, &mu_p, &sigma_p, coeffs, dims)?);
        x_hat = x_next;
    }
    Ok(models)
}
