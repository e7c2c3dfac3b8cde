//! 2D point-mass environment with axis-aligned rectangular obstacles.
//!
//! Obstacles exert penalty (spring-damper) normal forces plus Coulomb
//! friction, which lets a controller glide along a wall toward an opening.
//! Integration is semi-implicit Euler, which stays stable under the stiff
//! penalty forces at the default time step.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::linalg::{ControlVec, StateVec};

/// Particle state: position and velocity in meters / meters per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub position: Vector2<f64>,
    pub velocity: Vector2<f64>,
}

impl ParticleState {
    pub fn new(position: Vector2<f64>, velocity: Vector2<f64>) -> Self {
        Self { position, velocity }
    }

    /// Pack as the 4-dim state vector [px, py, vx, vy].
    pub fn to_state_vec(&self) -> StateVec {
        StateVec::from_vec(vec![
            self.position.x,
            self.position.y,
            self.velocity.x,
            self.velocity.y,
        ])
    }

    pub fn from_state_vec(x: &StateVec) -> Self {
        assert_eq!(x.len(), 4, "particle state vector must be 4-dim");
        Self {
            position: Vector2::new(x[0], x[1]),
            velocity: Vector2::new(x[2], x[3]),
        }
    }
}

/// Axis-aligned rectangular obstacle with penalty-contact parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub min_corner: Vector2<f64>,
    pub max_corner: Vector2<f64>,
    /// Normal spring stiffness, N/m.
    pub stiffness: f64,
    /// Normal damping, N.s/m.
    pub damping: f64,
    /// Coulomb friction coefficient.
    pub friction_coeff: f64,
}

impl Obstacle {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.min_corner.x < self.max_corner.x && self.min_corner.y < self.max_corner.y) {
            return Err("obstacle min_corner must be < max_corner elementwise".into());
        }
        if self.stiffness <= 0.0 {
            return Err("obstacle stiffness must be > 0".into());
        }
        if self.damping < 0.0 {
            return Err("obstacle damping must be >= 0".into());
        }
        if self.friction_coeff < 0.0 {
            return Err("obstacle friction_coeff must be >= 0".into());
        }
        Ok(())
    }

    fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x > self.min_corner.x
            && p.x < self.max_corner.x
            && p.y > self.min_corner.y
            && p.y < self.max_corner.y
    }
}

/// Environment parameters for one task instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Particle mass, kg.
    pub mass: f64,
    /// Integration step, seconds (0.05 = 20 Hz control).
    pub dt: f64,
    /// Symmetric per-axis control limit, N.
    pub control_limit: f64,
    pub obstacles: Vec<Obstacle>,
    /// Goal position, meters.
    pub goal: Vector2<f64>,
    /// Default start position, meters.
    pub start: Vector2<f64>,
    /// Episode length T: controls are executed at t = 0..=T.
    pub episode_length: usize,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.mass <= 0.0 {
            return Err("mass must be > 0".into());
        }
        if self.dt <= 0.0 {
            return Err("dt must be > 0".into());
        }
        if self.episode_length < 1 {
            return Err("episode_length must be >= 1".into());
        }
        if self.control_limit <= 0.0 {
            return Err("control_limit must be > 0".into());
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            o.validate().map_err(|e| format!("obstacle {i}: {e}"))?;
        }
        Ok(())
    }

    /// Goal as a full state vector [goal, zero velocity].
    pub fn goal_state(&self) -> StateVec {
        StateVec::from_vec(vec![self.goal.x, self.goal.y, 0.0, 0.0])
    }

    /// The shipped navigation task: a horizontal wall split by an opening,
    /// start above-left of the wall, goal below it. The straight start-goal
    /// line hits the left wall segment, so a short-horizon controller detours
    /// along the wall while the opening admits a faster route.
    pub fn default_task() -> Self {
        let wall = |x0: f64, x1: f64| Obstacle {
            min_corner: Vector2::new(x0, -0.2),
            max_corner: Vector2::new(x1, 0.2),
            stiffness: 500.0,
            damping: 10.0,
            friction_coeff: 0.5,
        };
        Self {
            mass: 1.0,
            dt: 0.05,
            control_limit: 10.0,
            obstacles: vec![wall(-3.0, 0.2), wall(0.7, 3.0)],
            goal: Vector2::new(1.0, -1.0),
            start: Vector2::new(-1.0, 1.0),
            episode_length: 200,
        }
    }

    /// Same constants but no obstacles; used for the linear sanity tasks.
    pub fn free_space() -> Self {
        Self {
            obstacles: Vec::new(),
            ..Self::default_task()
        }
    }
}

/// Total contact force on the particle from all penetrated obstacles.
///
/// Inside an obstacle the nearest face defines the outward normal and the
/// penetration depth. The normal force is `stiffness * depth - damping * v_n`
/// clamped to push outward only; tangential Coulomb friction of magnitude
/// `friction_coeff * |F_n|` opposes the tangential velocity.
pub fn contact_force(state: &ParticleState, obstacles: &[Obstacle]) -> Vector2<f64> {
    let mut total = Vector2::zeros();
    let p = &state.position;
    let v = &state.velocity;
    for obs in obstacles {
        if !obs.contains(p) {
            continue;
        }
        // Distance to each face from the inside; the smallest picks the
        // exit direction and the penetration depth.
        let faces = [
            (p.x - obs.min_corner.x, Vector2::new(-1.0, 0.0)),
            (obs.max_corner.x - p.x, Vector2::new(1.0, 0.0)),
            (p.y - obs.min_corner.y, Vector2::new(0.0, -1.0)),
            (obs.max_corner.y - p.y, Vector2::new(0.0, 1.0)),
        ];
        let (depth, normal) = faces
            .iter()
            .min_by(|a, b| a.0.partial_cmp(&b.0).expect("finite depths"))
            .cloned()
            .expect("four faces");

        let v_n = v.dot(&normal);
        let normal_mag = (obs.stiffness * depth - obs.damping * v_n).max(0.0);
        total += normal * normal_mag;

        let v_t = v - normal * v_n;
        let speed_t = v_t.norm();
        if speed_t > 1e-12 {
            total -= v_t * (obs.friction_coeff * normal_mag / speed_t);
        }
    }
    total
}

/// Clip a control vector elementwise to the configured limit.
pub fn clip_control(control: &ControlVec, limit: f64) -> ControlVec {
    control.map(|u| u.clamp(-limit, limit))
}

/// One semi-implicit Euler step of the true dynamics.
///
/// The control is clipped elementwise to the limit before integration:
/// `v' = v + dt * (u + f_contact) / m`, `p' = p + dt * v'`.
pub fn step(state: &ParticleState, control: &ControlVec, config: &EnvConfig) -> ParticleState {
    assert_eq!(control.len(), 2, "2D task takes a 2-dim control");
    let u = clip_control(control, config.control_limit);
    let f = Vector2::new(u[0], u[1]) + contact_force(state, &config.obstacles);
    let velocity = state.velocity + f * (config.dt / config.mass);
    let position = state.position + velocity * config.dt;
    ParticleState { position, velocity }
}

/// Reset to the configured start (or an override) with zero velocity.
pub fn reset(config: &EnvConfig, start_override: Option<Vector2<f64>>) -> ParticleState {
    ParticleState {
        position: start_override.unwrap_or(config.start),
        velocity: Vector2::zeros(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_box() -> Obstacle {
        Obstacle {
            min_corner: Vector2::new(0.0, 0.0),
            max_corner: Vector2::new(1.0, 1.0),
            stiffness: 500.0,
            damping: 10.0,
            friction_coeff: 0.5,
        }
    }

    #[test]
    fn no_contact_outside_all_obstacles() {
        let s = ParticleState::new(Vector2::new(-0.5, 0.5), Vector2::new(1.0, -2.0));
        let f = contact_force(&s, &[unit_box()]);
        assert_eq!(f, Vector2::zeros());
    }

    #[test]
    fn left_face_penetration_pushes_out_through_left_face() {
        // Penetrating the left face by 0.05 with zero velocity: the penalty
        // formula gives exactly (-stiffness * depth, 0).
        let s = ParticleState::new(Vector2::new(0.05, 0.5), Vector2::zeros());
        let f = contact_force(&s, &[unit_box()]);
        assert_relative_eq!(f.x, -500.0 * 0.05, max_relative = 1e-12);
        assert_relative_eq!(f.y, 0.0);
    }

    #[test]
    fn friction_opposes_tangential_velocity() {
        let s = ParticleState::new(Vector2::new(0.05, 0.5), Vector2::new(0.0, 1.5));
        let f = contact_force(&s, &[unit_box()]);
        assert!(f.y < 0.0, "friction must oppose +y sliding, got {}", f.y);
        // Coulomb cap: |F_t| <= mu * |F_n|.
        assert!(f.y.abs() <= 0.5 * f.x.abs() + 1e-12);
    }

    #[test]
    fn friction_magnitude_equals_cap_when_sliding() {
        let s = ParticleState::new(Vector2::new(0.1, 0.5), Vector2::new(0.0, 2.0));
        let f = contact_force(&s, &[unit_box()]);
        let fn_mag = 500.0 * 0.1;
        assert_relative_eq!(f.x, -fn_mag, max_relative = 1e-12);
        assert_relative_eq!(f.y, -0.5 * fn_mag, max_relative = 1e-12);
    }

    #[test]
    fn normal_force_clamped_to_push_outward_only() {
        // Moving outward fast: damping would exceed the spring term, so the
        // total normal force clamps at zero instead of sucking inward.
        let s = ParticleState::new(Vector2::new(0.01, 0.5), Vector2::new(-5.0, 0.0));
        let f = contact_force(&s, &[unit_box()]);
        assert_eq!(f, Vector2::zeros());
    }

    #[test]
    fn contact_force_vanishes_with_depth() {
        let obs = [unit_box()];
        let mut last = f64::INFINITY;
        for depth in [0.04, 0.02, 0.01, 0.005, 0.0025] {
            let s = ParticleState::new(Vector2::new(depth, 0.5), Vector2::zeros());
            let mag = contact_force(&s, &obs).norm();
            assert!(mag < last);
            last = mag;
        }
        assert!(last < 500.0 * 0.003);
    }

    #[test]
    fn step_is_identity_at_equilibrium() {
        let cfg = EnvConfig::free_space();
        let s = ParticleState::new(Vector2::new(0.3, -0.7), Vector2::zeros());
        let s2 = step(&s, &ControlVec::zeros(2), &cfg);
        assert_eq!(s, s2);
    }

    #[test]
    fn constant_force_matches_discrete_kinematics() {
        // Semi-implicit Euler closed form for constant force F on a free
        // particle: v_n = n*dt*F/m, p_n = p_0 + dt^2*F/m * n(n+1)/2.
        let cfg = EnvConfig::free_space();
        let force = ControlVec::from_vec(vec![2.0, -1.0]);
        let mut s = reset(&cfg, None);
        let n = 17;
        for _ in 0..n {
            s = step(&s, &force, &cfg);
        }
        let nf = n as f64;
        let scale = cfg.dt * nf / cfg.mass;
        assert_relative_eq!(s.velocity.x, 2.0 * scale, max_relative = 1e-12);
        assert_relative_eq!(s.velocity.y, -1.0 * scale, max_relative = 1e-12);
        let pos_scale = cfg.dt * cfg.dt / cfg.mass * nf * (nf + 1.0) / 2.0;
        assert_relative_eq!(s.position.x, cfg.start.x + 2.0 * pos_scale, max_relative = 1e-12);
        assert_relative_eq!(s.position.y, cfg.start.y - pos_scale, max_relative = 1e-12);
    }

    #[test]
    fn oversized_control_equals_clipped_control() {
        let cfg = EnvConfig::default_task();
        let big = ControlVec::from_vec(vec![1e4, -1e4]);
        let clipped = ControlVec::from_vec(vec![cfg.control_limit, -cfg.control_limit]);
        let mut a = reset(&cfg, None);
        let mut b = reset(&cfg, None);
        for _ in 0..25 {
            a = step(&a, &big, &cfg);
            b = step(&b, &clipped, &cfg);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn reset_is_deterministic_and_honors_override() {
        let cfg = EnvConfig::default_task();
        let a = reset(&cfg, None);
        let b = reset(&cfg, None);
        assert_eq!(a, b);
        assert_eq!(a.position, cfg.start);
        assert_eq!(a.velocity, Vector2::zeros());
        let c = reset(&cfg, Some(Vector2::new(0.1, 0.2)));
        assert_eq!(c.position, Vector2::new(0.1, 0.2));
    }

    #[test]
    fn trajectories_are_bit_deterministic() {
        let cfg = EnvConfig::default_task();
        let controls: Vec<ControlVec> = (0..120)
            .map(|i| {
                let a = (i as f64) * 0.37;
                ControlVec::from_vec(vec![9.0 * a.sin(), 9.0 * a.cos()])
            })
            .collect();
        let run = || {
            let mut s = reset(&cfg, None);
            let mut trace = Vec::new();
            for u in &controls {
                s = step(&s, u, &cfg);
                trace.push(s.clone());
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn kinetic_energy_constant_without_forces() {
        let cfg = EnvConfig::free_space();
        let mut s = ParticleState::new(Vector2::new(0.0, 0.0), Vector2::new(1.3, -0.4));
        let ke0 = s.velocity.norm_squared();
        for _ in 0..200 {
            s = step(&s, &ControlVec::zeros(2), &cfg);
        }
        assert_eq!(s.velocity.norm_squared(), ke0);
    }

    #[test]
    fn penetration_depth_stays_bounded_under_max_push() {
        // Push straight into the wall at the control limit the whole time.
        // Static bound is control_limit/stiffness = 0.02 m; the margin covers
        // the dynamic overshoot of the impact at this dt.
        let cfg = EnvConfig::default_task();
        let mut s = reset(&cfg, None);
        let push = ControlVec::from_vec(vec![0.0, -cfg.control_limit]);
        let mut max_depth: f64 = 0.0;
        for _ in 0..400 {
            s = step(&s, &push, &cfg);
            for o in &cfg.obstacles {
                if o.contains(&s.position) {
                    let d = (s.position.y - o.min_corner.y)
                        .min(o.max_corner.y - s.position.y)
                        .min(s.position.x - o.min_corner.x)
                        .min(o.max_corner.x - s.position.x);
                    max_depth = max_depth.max(d);
                }
            }
        }
        assert!(max_depth > 0.0, "the test must actually reach the wall");
        let static_bound = cfg.control_limit / 500.0;
        assert!(
            max_depth <= static_bound + 0.1,
            "max depth {max_depth} exceeded the empirical bound"
        );
    }

    #[test]
    fn state_vec_round_trip() {
        let s = ParticleState::new(Vector2::new(1.0, 2.0), Vector2::new(-0.5, 0.25));
        let packed = s.to_state_vec();
        assert_eq!(packed.as_slice(), &[1.0, 2.0, -0.5, 0.25]);
        assert_eq!(ParticleState::from_state_vec(&packed), s);
    }
}
