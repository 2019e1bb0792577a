//! Kinematic refinement: track a reference path with a bicycle model under
//! box-constrained controls and a control-smoothness penalty.
//!
//! The program is solved by single shooting over the control sequence with a
//! bound-constrained Levenberg–Marquardt iteration: variables pinned at a bound
//! with the gradient pointing outwards are frozen, the damped Gauss–Newton
//! system is solved for the rest, and the step is clipped to the box. A step is
//! only accepted if it lowers the cost; when damping runs out a projected
//! gradient step with backtracking is tried before giving up.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Vec2};
use crate::scene::AgentHistory;
use crate::FRAME_DT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    pub x: f64,
    pub y: f64,
    /// Heading in (−π, π].
    pub phi: f64,
    /// Speed, m/s, never negative.
    pub v: f64,
}

impl KinematicState {
    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Acceleration (m/s²) and steering angle (rad).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub a: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Weight of the control-smoothness term.
    pub lambda: f64,
    pub wheelbase: f64,
    /// Lower bounds (a, γ).
    pub u_min: [f64; 2],
    /// Upper bounds (a, γ).
    pub u_max: [f64; 2],
    pub iterations: usize,
    /// Initial step of the projected-gradient fallback.
    pub step_size: f64,
    pub dt: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            lambda: 0.1,
            wheelbase: 2.7,
            u_min: [-6.0, -0.6],
            u_max: [4.0, 0.6],
            iterations: 200,
            step_size: 1e-2,
            dt: FRAME_DT,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.wheelbase > 0.0 && self.dt > 0.0 && self.step_size > 0.0) {
            return Err(Error::Config(format!(
                "MPC needs lambda >= 0 and positive wheelbase, dt and step size, got {self:?}"
            )));
        }
        if !(self.u_min[0] < self.u_max[0] && self.u_min[1] < self.u_max[1]) {
            return Err(Error::Config(format!(
                "MPC control bounds must satisfy u_min < u_max, got {:?} / {:?}",
                self.u_min, self.u_max
            )));
        }
        Ok(())
    }

    pub fn clamp(&self, u: Control) -> Control {
        Control {
            a: u.a.clamp(self.u_min[0], self.u_max[0]),
            gamma: u.gamma.clamp(self.u_min[1], self.u_max[1]),
        }
    }

    fn in_bounds(&self, u: &Control) -> bool {
        (self.u_min[0]..=self.u_max[0]).contains(&u.a)
            && (self.u_min[1]..=self.u_max[1]).contains(&u.gamma)
    }
}

pub fn bicycle_step(s: &KinematicState, u: &Control, dt: f64, wheelbase: f64) -> KinematicState {
    let (sin, cos) = s.phi.sin_cos();
    KinematicState {
        x: s.x + s.v * cos * dt,
        y: s.y + s.v * sin * dt,
        phi: wrap_angle(s.phi + s.v / wheelbase * u.gamma.tan() * dt),
        v: (s.v + u.a * dt).max(0.0),
    }
}

/// States after each control, excluding the initial state.
pub fn rollout(s_init: &KinematicState, controls: &[Control], cfg: &MpcConfig) -> Vec<KinematicState> {
    let mut s = *s_init;
    controls
        .iter()
        .map(|u| {
            s = bicycle_step(&s, u, cfg.dt, cfg.wheelbase);
            s
        })
        .collect()
}

pub fn init_state_from_history(ego: &AgentHistory) -> KinematicState {
    let p = ego.last();
    let step = ego.last_step();
    KinematicState {
        x: p.x,
        y: p.y,
        phi: ego.heading(),
        v: step.norm() / FRAME_DT,
    }
}

/// Control that explains the last observed step: speed change and heading
/// rate mapped through the bicycle model, clamped to the bounds.
pub fn initial_control_from_history(ego: &AgentHistory, cfg: &MpcConfig) -> Control {
    let p = ego.positions();
    let n = p.len();
    let (s1, s0) = (p[n - 1] - p[n - 2], p[n - 2] - p[n - 3]);
    let (v1, v0) = (s1.norm() / cfg.dt, s0.norm() / cfg.dt);
    let gamma = if s1.norm() > 0.0 && s0.norm() > 0.0 && v0 > 1e-6 {
        let dphi = wrap_angle(s1.angle() - s0.angle());
        (cfg.wheelbase * dphi / (v0 * cfg.dt)).atan()
    } else {
        0.0
    };
    cfg.clamp(Control {
        a: (v1 - v0) / cfg.dt,
        gamma,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub states: Vec<KinematicState>,
    pub controls: Vec<Control>,
    pub cost: f64,
    pub warm_start_cost: f64,
    pub iterations: usize,
}

impl MpcSolution {
    pub fn positions(&self) -> Vec<Vec2> {
        self.states.iter().map(KinematicState::pos).collect()
    }
}

struct Problem<'a> {
    reference: &'a [Vec2],
    s_init: KinematicState,
    u_prev: Control,
    cfg: &'a MpcConfig,
}

#[cfg(test)]
fn pack(u: &[Control]) -> DVector<f64> {
    DVector::from_iterator(2 * u.len(), u.iter().flat_map(|c| [c.a, c.gamma]))
}

fn unpack(z: &DVector<f64>) -> Vec<Control> {
    z.as_slice()
        .chunks(2)
        .map(|c| Control { a: c[0], gamma: c[1] })
        .collect()
}

impl Problem<'_> {
    fn residuals(&self, u: &[Control]) -> DVector<f64> {
        let t = u.len();
        let states = rollout(&self.s_init, u, self.cfg);
        let sl = self.cfg.lambda.sqrt();
        let mut r = DVector::zeros(4 * t);
        for j in 0..t {
            r[2 * j] = states[j].x - self.reference[j].x;
            r[2 * j + 1] = states[j].y - self.reference[j].y;
            let prev = if j == 0 { self.u_prev } else { u[j - 1] };
            r[2 * t + 2 * j] = sl * (u[j].a - prev.a);
            r[2 * t + 2 * j + 1] = sl * (u[j].gamma - prev.gamma);
        }
        r
    }

    fn cost(&self, u: &[Control]) -> f64 {
        self.residuals(u).norm_squared()
    }

    /// Residuals and their Jacobian with respect to the packed controls,
    /// by forward sensitivity propagation through the rollout.
    fn linearize(&self, u: &[Control]) -> (DVector<f64>, DMatrix<f64>) {
        let t = u.len();
        let (dt, l) = (self.cfg.dt, self.cfg.wheelbase);
        let mut jac = DMatrix::zeros(4 * t, 2 * t);
        // sensitivity of the current state (x, y, φ, v) to every control
        let mut sens = DMatrix::<f64>::zeros(4, 2 * t);
        let mut s = self.s_init;
        for j in 0..t {
            let (sin, cos) = s.phi.sin_cos();
            let tg = u[j].gamma.tan();
            let v_active = s.v + u[j].a * dt > 0.0;
            let mut next = DMatrix::<f64>::zeros(4, 2 * t);
            for k in 0..2 * t {
                let (x, y, phi, v) = (sens[(0, k)], sens[(1, k)], sens[(2, k)], sens[(3, k)]);
                next[(0, k)] = x - s.v * sin * dt * phi + cos * dt * v;
                next[(1, k)] = y + s.v * cos * dt * phi + sin * dt * v;
                next[(2, k)] = phi + tg * dt / l * v;
                next[(3, k)] = if v_active { v } else { 0.0 };
            }
            next[(2, 2 * j + 1)] += s.v / l * (1.0 + tg * tg) * dt;
            if v_active {
                next[(3, 2 * j)] += dt;
            }
            sens = next;
            s = bicycle_step(&s, &u[j], dt, l);
            for k in 0..2 * t {
                jac[(2 * j, k)] = sens[(0, k)];
                jac[(2 * j + 1, k)] = sens[(1, k)];
            }
            let sl = self.cfg.lambda.sqrt();
            for c in 0..2 {
                jac[(2 * t + 2 * j + c, 2 * j + c)] = sl;
                if j > 0 {
                    jac[(2 * t + 2 * j + c, 2 * (j - 1) + c)] = -sl;
                }
            }
        }
        (self.residuals(u), jac)
    }

    fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(z.len(), |i, _| {
            let c = i % 2;
            z[i].clamp(self.cfg.u_min[c], self.cfg.u_max[c])
        })
    }
}

/// Bound-constrained Levenberg–Marquardt from `z`, returning the final
/// controls, their cost and the iterations spent.
fn descend(problem: &Problem, mut z: DVector<f64>, budget: usize) -> Result<(DVector<f64>, f64, usize)> {
    let cfg = problem.cfg;
    let t = z.len() / 2;
    let start_cost = problem.cost(&unpack(&z));
    let mut cost = start_cost;
    let mut mu = 1e-3;
    let mut iterations = 0;
    while iterations < budget && cost > 1e-24 {
        iterations += 1;
        let (r, jac) = problem.linearize(&unpack(&z));
        let grad = jac.transpose() * &r;
        let jtj = jac.transpose() * &jac;
        let lo = |i: usize| cfg.u_min[i % 2];
        let hi = |i: usize| cfg.u_max[i % 2];
        let free: Vec<usize> = (0..2 * t)
            .filter(|&i| !((z[i] <= lo(i) && grad[i] > 0.0) || (z[i] >= hi(i) && grad[i] < 0.0)))
            .collect();

        let mut accepted = None;
        while mu < 1e12 {
            let n = free.len();
            let mut h = DMatrix::from_fn(n, n, |a, b| jtj[(free[a], free[b])]);
            for a in 0..n {
                h[(a, a)] += mu * (jtj[(free[a], free[a])] + 1e-9);
            }
            let rhs = DVector::from_fn(n, |a, _| -grad[free[a]]);
            if let Some(step) = h.cholesky().map(|c| c.solve(&rhs)) {
                let mut cand = z.clone();
                for (a, &i) in free.iter().enumerate() {
                    cand[i] += step[a];
                }
                let cand = problem.project(&cand);
                let c = problem.cost(&unpack(&cand));
                if !c.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "MPC cost became {c} at iteration {iterations} (damping {mu:e})"
                    )));
                }
                if c < cost {
                    mu = (mu / 3.0).max(1e-12);
                    accepted = Some((cand, c));
                    break;
                }
            }
            mu *= 4.0;
        }

        if accepted.is_none() {
            // damping exhausted: projected gradient with backtracking
            let mut alpha = cfg.step_size / grad.norm().max(1e-300);
            for _ in 0..60 {
                let cand = problem.project(&(&z - &grad * alpha));
                let c = problem.cost(&unpack(&cand));
                if c < cost {
                    accepted = Some((cand, c));
                    break;
                }
                alpha *= 0.5;
            }
            mu = 1e-3;
        }

        match accepted {
            Some((cand, c)) => {
                let rel = (cost - c) / cost.max(1e-300);
                z = cand;
                cost = c;
                if rel < 1e-8 && cost < start_cost {
                    break;
                }
            }
            None => break,
        }
    }
    Ok((z, cost, iterations))
}

/// Controls that reproduce the reference step by step: speed and heading of
/// each reference displacement mapped back through the bicycle model.
fn inversion_start(reference: &[Vec2], s_init: &KinematicState, cfg: &MpcConfig) -> DVector<f64> {
    let t = reference.len();
    // speeds and headings of the states the controls act on, p_k -> p_{k+1}
    let (mut v, mut phi) = (vec![s_init.v], vec![s_init.phi]);
    for k in 0..t - 1 {
        let d = reference[k + 1] - reference[k];
        v.push(d.norm() / cfg.dt);
        phi.push(if d.norm() > 1e-9 { d.angle() } else { phi[k] });
    }
    let mut z = DVector::zeros(2 * t);
    for k in 0..t - 1 {
        z[2 * k] = (v[k + 1] - v[k]) / cfg.dt;
        z[2 * k + 1] = if v[k] > 1e-6 {
            (cfg.wheelbase * wrap_angle(phi[k + 1] - phi[k]) / (v[k] * cfg.dt)).atan()
        } else {
            0.0
        };
    }
    z
}

/// Solves the tracking program by descending from a zero-control warm start
/// and from the kinematic inversion of the reference, keeping the cheaper one.
/// `u_prev` is the control preceding the horizon, paired with the first
/// control in the smoothness term. `warm_start_cost` is the zero-control cost.
pub fn solve_mpc(
    reference: &[Vec2],
    s_init: &KinematicState,
    u_prev: Control,
    cfg: &MpcConfig,
) -> Result<MpcSolution> {
    cfg.validate()?;
    let t = reference.len();
    if t == 0 {
        return Err(Error::InvalidInput("MPC reference is empty".into()));
    }
    let problem = Problem {
        reference,
        s_init: *s_init,
        u_prev,
        cfg,
    };
    let z = DVector::zeros(2 * t);
    let warm_start_cost = problem.cost(&unpack(&z));
    if !warm_start_cost.is_finite() {
        return Err(Error::NonFinite(format!(
            "MPC warm-start cost is {warm_start_cost} (non-finite reference or initial state)"
        )));
    }
    let (mut z, mut cost, mut iterations) = descend(&problem, z, cfg.iterations)?;
    // Shooting from rest can stall in a local minimum on sharply turning
    // references, so a second descent starts from the controls that replay the
    // reference through the bicycle model.
    let inverted = problem.project(&inversion_start(reference, s_init, cfg));
    let (z2, cost2, it2) = descend(&problem, inverted, cfg.iterations)?;
    iterations += it2;
    if cost2 < cost {
        (z, cost) = (z2, cost2);
    }
    let controls = unpack(&z);
    debug_assert!(controls.iter().all(|u| cfg.in_bounds(u)));
    Ok(MpcSolution {
        states: rollout(s_init, &controls, cfg),
        controls,
        cost,
        warm_start_cost,
        iterations,
    })
}
