//! Finite-horizon LQR on affine time-varying models.
//!
//! The backward recursion works on the exact quadratic problem (costs are
//! quadratic around a goal, dynamics affine), so no Taylor expansion is
//! involved anywhere. The affine offset `c` is folded into the linear
//! value-function terms. A full-horizon iterative solver on refitted
//! time-varying least-squares models backs the episodic baseline.

use nalgebra::{Cholesky, Dyn};
use serde::{Deserialize, Serialize};

use crate::dynamics::LinearDynamics;
use crate::error::{Error, Result};
use crate::linalg::{self, ControlVec, Matrix, StateVec, Vector};

/// Trace-scaled Tikhonov factor applied to Q_uu before inversion.
const QUU_REG_SCALE: f64 = 1e-8;

/// Per-step quadratic cost `(x - x*)^T Q (x - x*) + u^T R u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    pub q: Matrix,
    pub r: Matrix,
    pub goal: StateVec,
}

impl QuadraticCost {
    /// Validates definiteness: Q PSD and R PD, by smallest eigenvalue.
    pub fn new(q: Matrix, r: Matrix, goal: StateVec) -> Result<Self> {
        let min_q = linalg::min_symmetric_eigenvalue(&q);
        if min_q < -1e-9 {
            return Err(Error::CostNotDefinite {
                name: "Q",
                min_eig: min_q,
            });
        }
        let min_r = linalg::min_symmetric_eigenvalue(&r);
        if min_r <= 0.0 {
            return Err(Error::CostNotDefinite {
                name: "R",
                min_eig: min_r,
            });
        }
        Ok(Self { q, r, goal })
    }

    pub fn with_goal(&self, goal: StateVec) -> Self {
        Self {
            q: self.q.clone(),
            r: self.r.clone(),
            goal,
        }
    }

    pub fn stage_cost(&self, x: &StateVec, u: &ControlVec) -> f64 {
        let dx = x - &self.goal;
        (dx.transpose() * &self.q * &dx)[(0, 0)] + (u.transpose() * &self.r * u)[(0, 0)]
    }
}

/// Task-level cost description expanded into per-step costs at plan time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub q: Matrix,
    pub r: Matrix,
    pub goal: StateVec,
    /// Multiplier on Q at the last step of each planning problem.
    pub terminal_weight: f64,
}

impl CostModel {
    pub fn new(q: Matrix, r: Matrix, goal: StateVec, terminal_weight: f64) -> Result<Self> {
        // Reuse the definiteness checks.
        let probe = QuadraticCost::new(q, r, goal)?;
        Ok(Self {
            q: probe.q,
            r: probe.r,
            goal: probe.goal,
            terminal_weight,
        })
    }

    /// Per-step costs for a horizon of `len` steps around `goal`, applying
    /// the terminal weight to the last step's Q.
    pub fn stage_costs(&self, goal: &StateVec, len: usize) -> Vec<QuadraticCost> {
        let mut costs = Vec::with_capacity(len);
        for s in 0..len {
            let q = if s + 1 == len {
                &self.q * self.terminal_weight
            } else {
                self.q.clone()
            };
            costs.push(QuadraticCost {
                q,
                r: self.r.clone(),
                goal: goal.clone(),
            });
        }
        costs
    }

    pub fn original_cost(&self, x: &StateVec, u: &ControlVec) -> f64 {
        let dx = x - &self.goal;
        (dx.transpose() * &self.q * &dx)[(0, 0)] + (u.transpose() * &self.r * u)[(0, 0)]
    }
}

/// Quadratic value function `V(x) = 1/2 x^T V_xx x + x^T v_x + const`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub vxx: Matrix,
    pub vx: Vector,
}

/// Affine feedback law `u = offset + gain * x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlLaw {
    pub gain: Matrix,
    pub offset: ControlVec,
}

impl ControlLaw {
    pub fn action(&self, x: &StateVec) -> ControlVec {
        &self.offset + &self.gain * x
    }

    pub fn zero(control_dim: usize, state_dim: usize) -> Self {
        Self {
            gain: Matrix::zeros(control_dim, state_dim),
            offset: ControlVec::zeros(control_dim),
        }
    }
}

/// Backward-pass output: time-indexed laws and value terms, plus the
/// regularized first-step Q_uu (exploration noise shaping and the goal
/// Jacobian both need it).
#[derive(Debug, Clone)]
pub struct BackwardPassResult {
    pub laws: Vec<ControlLaw>,
    pub values: Vec<ValueFunction>,
    pub quu_first: Matrix,
    pub quu_chol_first: Cholesky<f64, Dyn>,
}

/// Dynamic-programming backward recursion over `len = H+1` steps.
///
/// Using hessians/gradients of the stage cost (`l_xx = 2Q`, `l_x = -2Q x*`,
/// `l_uu = 2R`) and the value function of the next step:
/// `Q_xx = l_xx + A^T V_xx A`, `Q_ux = B^T V_xx A`, `Q_uu = l_uu + B^T V_xx B`,
/// `Q_x = l_x + A^T (V_xx c + v_x)`, `Q_u = B^T (V_xx c + v_x)`,
/// then `K = -Q_uu^{-1} Q_ux`, `k = -Q_uu^{-1} Q_u` and the value update.
pub fn backward_pass(
    models: &[LinearDynamics],
    costs: &[QuadraticCost],
) -> Result<BackwardPassResult> {
    backward_pass_with_reg(models, costs, QUU_REG_SCALE)
}

pub(crate) fn backward_pass_with_reg(
    models: &[LinearDynamics],
    costs: &[QuadraticCost],
    reg_scale: f64,
) -> Result<BackwardPassResult> {
    assert_eq!(
        models.len(),
        costs.len(),
        "backward pass needs one model and one cost per step"
    );
    let len = costs.len();
    assert!(len >= 1);
    let n = costs[0].q.nrows();
    let m = costs[0].r.nrows();

    let mut laws = vec![ControlLaw::zero(m, n); len];
    let mut values = Vec::with_capacity(len);
    let mut vxx = Matrix::zeros(n, n);
    let mut vx = Vector::zeros(n);
    let mut quu_first = Matrix::zeros(m, m);
    let mut quu_chol_first = None;

    for s in (0..len).rev() {
        let cost = &costs[s];
        let model = &models[s];
        let lxx = &cost.q * 2.0;
        let lx = -(&cost.q * &cost.goal) * 2.0;
        let luu = &cost.r * 2.0;

        let a = &model.a;
        let b = &model.b;
        let vc = &vxx * &model.c + &vx;
        let vxx_a = &vxx * a;
        let qxx = &lxx + a.transpose() * &vxx_a;
        let qux = b.transpose() * &vxx_a;
        let quu = &luu + b.transpose() * &vxx * b;
        let qx = &lx + a.transpose() * &vc;
        let qu = b.transpose() * &vc;

        let quu_sym = {
            let mut q = linalg::symmetrize(&quu);
            let reg = reg_scale * (q.trace().abs() / m as f64).max(1.0);
            linalg::add_ridge(&mut q, reg);
            q
        };
        let chol = Cholesky::new(quu_sym.clone())
            .ok_or(Error::QuuNotPositiveDefinite { step: s })?;
        let gain = -chol.solve(&qux);
        let offset = -chol.solve(&qu);

        vxx = linalg::symmetrize(&(&qxx + qux.transpose() * &gain));
        vx = &qx + qux.transpose() * &offset;
        values.push(ValueFunction {
            vxx: vxx.clone(),
            vx: vx.clone(),
        });
        laws[s] = ControlLaw { gain, offset };
        if s == 0 {
            quu_first = quu_sym;
            quu_chol_first = Some(chol);
        }
    }
    values.reverse();
    Ok(BackwardPassResult {
        laws,
        values,
        quu_first,
        quu_chol_first: quu_chol_first.expect("len >= 1"),
    })
}

/// Closed-loop rollout on the planning models: `u_s = k_s + K_s x_s`,
/// `x_{s+1} = A_s x_s + B_s u_s + c_s`. Returns `laws.len() + 1` states and
/// `laws.len()` controls.
pub fn forward_rollout(
    x0: &StateVec,
    models: &[LinearDynamics],
    laws: &[ControlLaw],
) -> (Vec<StateVec>, Vec<ControlVec>) {
    assert!(models.len() >= laws.len());
    let mut states = Vec::with_capacity(laws.len() + 1);
    let mut controls = Vec::with_capacity(laws.len());
    let mut x = x0.clone();
    states.push(x.clone());
    for (law, model) in laws.iter().zip(models) {
        let u = law.action(&x);
        x = model.predict(&x, &u);
        controls.push(u);
        states.push(x.clone());
    }
    (states, controls)
}

/// Total stage cost of a trajectory prefix under per-step costs.
pub fn trajectory_cost(
    states: &[StateVec],
    controls: &[ControlVec],
    costs: &[QuadraticCost],
) -> f64 {
    assert!(states.len() >= costs.len() && controls.len() >= costs.len());
    costs
        .iter()
        .enumerate()
        .map(|(s, c)| c.stage_cost(&states[s], &controls[s]))
        .sum()
}

/// Jacobian of the first planned action with respect to the (shared) goal.
///
/// Gains are goal-independent; only the linear value terms depend on the
/// goal, so a single backward sweep of `D_s = -2 Q_s + (A_s + B_s K_s)^T
/// D_{s+1}` (with D past the horizon zero) gives
/// `du_0/dgoal = -Q_uu0^{-1} B_0^T D_1`.
pub fn goal_jacobian(
    models: &[LinearDynamics],
    costs: &[QuadraticCost],
    pass: &BackwardPassResult,
) -> Matrix {
    let len = costs.len();
    let n = costs[0].q.nrows();
    let mut d_next = Matrix::zeros(n, n);
    for s in (1..len).rev() {
        let closed = &models[s].a + &models[s].b * &pass.laws[s].gain;
        d_next = -(&costs[s].q * 2.0) + closed.transpose() * d_next;
    }
    let bt_d = models[0].b.transpose() * d_next;
    -pass.quu_chol_first.solve(&bt_d)
}

/// One executed rollout used for time-varying model fitting:
/// `states.len() == controls.len() + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledTrajectory {
    pub states: Vec<StateVec>,
    pub controls: Vec<ControlVec>,
}

/// Per-step least-squares fit of `x' = A x + B u + c` pooled over a
/// `±window`-step neighborhood across all sampled rollouts.
pub fn fit_time_varying(
    samples: &[SampledTrajectory],
    len: usize,
    window: usize,
) -> Result<Vec<LinearDynamics>> {
    assert!(!samples.is_empty());
    let n = samples[0].states[0].len();
    let m = samples[0].controls[0].len();
    let cols = n + m + 1;
    let mut models = Vec::with_capacity(len);
    for s in 0..len {
        let mut rows: Vec<(Vector, StateVec)> = Vec::new();
        for traj in samples {
            let last = traj.controls.len().saturating_sub(1);
            let lo = s.saturating_sub(window).min(last);
            let hi = (s + window).min(last);
            for tau in lo..=hi {
                let mut z = Vector::zeros(cols);
                z.rows_mut(0, n).copy_from(&traj.states[tau]);
                z.rows_mut(n, m).copy_from(&traj.controls[tau]);
                z[cols - 1] = 1.0;
                rows.push((z, traj.states[tau + 1].clone()));
            }
        }
        if rows.len() < cols {
            return Err(Error::UnderdeterminedFit {
                step: s,
                rows: rows.len(),
                needed: cols,
            });
        }
        let mut ztz = Matrix::zeros(cols, cols);
        let mut zty = Matrix::zeros(cols, n);
        for (z, y) in &rows {
            ztz += z * z.transpose();
            zty += z * y.transpose();
        }
        linalg::add_ridge(&mut ztz, 1e-9);
        let chol = Cholesky::new(linalg::symmetrize(&ztz)).ok_or_else(|| {
            Error::SingularConditioning {
                context: format!("time-varying fit normal equations at step {s}"),
            }
        })?;
        let theta = chol.solve(&zty); // cols x n
        let f = theta.transpose(); // n x cols
        let a = f.view((0, 0), (n, n)).into_owned();
        let b = f.view((0, n), (n, m)).into_owned();
        let c = f.column(cols - 1).into_owned();
        let mut resid_cov = Matrix::zeros(n, n);
        for (z, y) in &rows {
            let r = y - &f * z;
            resid_cov += &r * r.transpose();
        }
        resid_cov /= rows.len() as f64;
        models.push(LinearDynamics {
            a,
            b,
            c,
            w: resid_cov,
        });
    }
    Ok(models)
}

/// Full-horizon iterative LQR solution on models refit from samples.
#[derive(Debug, Clone)]
pub struct IlqgSolution {
    /// Open-loop controls of the accepted trajectory.
    pub controls: Vec<ControlVec>,
    /// Feedback laws from the last backward pass (zero laws when
    /// `iterations == 0`).
    pub laws: Vec<ControlLaw>,
    /// Nominal states of the accepted trajectory on the fitted models.
    pub nominal_states: Vec<StateVec>,
    pub models: Vec<LinearDynamics>,
    /// Model-predicted cost after each accepted iteration (first entry is
    /// the cost of the initialization controls).
    pub predicted_costs: Vec<f64>,
}

/// Fit time-varying models from the sampled rollouts, then iterate
/// backward pass + line-searched rollout on those models. The line search
/// interpolates the feedforward between the current controls and the
/// optimizer's, keeping the accepted cost sequence non-increasing.
pub fn solve_ilqg_full_horizon(
    samples: &[SampledTrajectory],
    costs: &[QuadraticCost],
    iterations: usize,
    init_controls: &[ControlVec],
) -> Result<IlqgSolution> {
    let len = costs.len();
    assert_eq!(init_controls.len(), len);
    let models = fit_time_varying(samples, len, 2)?;
    let n = samples[0].states[0].len();
    let m = samples[0].controls[0].len();
    let x0 = samples[0].states[0].clone();

    let mut controls = init_controls.to_vec();
    let mut nominal = roll_open_loop(&x0, &models, &controls);
    let mut cost = trajectory_cost(&nominal, &controls, costs);
    let mut predicted_costs = vec![cost];
    let mut laws = vec![ControlLaw::zero(m, n); len];

    for _ in 0..iterations {
        let pass = backward_pass(&models, costs)?;
        let mut improved = false;
        for halvings in 0..8 {
            let alpha = 0.5f64.powi(halvings);
            let mut x = x0.clone();
            let mut cand_states = Vec::with_capacity(len + 1);
            let mut cand_controls = Vec::with_capacity(len);
            cand_states.push(x.clone());
            for s in 0..len {
                let u_star_nominal = pass.laws[s].action(&nominal[s]);
                let feedback = &pass.laws[s].gain * (&x - &nominal[s]);
                let u = &controls[s] + (u_star_nominal - &controls[s]) * alpha + feedback;
                x = models[s].predict(&x, &u);
                cand_controls.push(u);
                cand_states.push(x.clone());
            }
            let cand_cost = trajectory_cost(&cand_states, &cand_controls, costs);
            if cand_cost < cost - 1e-12 * cost.abs().max(1.0) {
                controls = cand_controls;
                nominal = cand_states;
                cost = cand_cost;
                predicted_costs.push(cost);
                improved = true;
                break;
            }
        }
        laws = pass.laws;
        if !improved {
            break;
        }
    }
    Ok(IlqgSolution {
        controls,
        laws,
        nominal_states: nominal,
        models,
        predicted_costs,
    })
}

fn roll_open_loop(
    x0: &StateVec,
    models: &[LinearDynamics],
    controls: &[ControlVec],
) -> Vec<StateVec> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut x = x0.clone();
    states.push(x.clone());
    for (s, u) in controls.iter().enumerate() {
        x = models[s].predict(&x, u);
        states.push(x.clone());
    }
    states
}
