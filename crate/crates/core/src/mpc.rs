//! Nonlinear MPC baselines on the rigid-body model without motor dynamics.
//!
//! Multiple shooting over `N` RK4 intervals, one Gauss-Newton SQP iteration per
//! control update (real-time iteration), condensed into a box-constrained QP in
//! the input increments and solved with a primal active-set method.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::actuation::{ActionSpace, Command, Mixer};
use crate::dynamics::{rigid_body_accel, PhysParams, QuadState};
use crate::error::{Error, Result};
use crate::math::{Quat, Vec3};
use crate::trajgen::{ReferencePoint, Trajectory};

pub const NX: usize = 13;
pub const NU: usize = 4;
const NR: usize = 12;

pub type ModelState = SVector<f64, NX>;
pub type Input = SVector<f64, NU>;
pub type StateJac = SMatrix<f64, NX, NX>;
pub type InputJac = SMatrix<f64, NX, NU>;

/// Which command the controller hands to the plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MpcVariant {
    Srt,
    Ctbr,
}

impl MpcVariant {
    pub fn action_space(self) -> ActionSpace {
        match self {
            MpcVariant::Srt => ActionSpace::Srt,
            MpcVariant::Ctbr => ActionSpace::Ctbr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon_steps: usize,
    pub horizon_time: f64,
    /// Position, attitude, velocity and body-rate weights.
    pub q_position: f64,
    pub q_attitude: f64,
    pub q_velocity: f64,
    pub q_rates: f64,
    pub r_thrust: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub variant: MpcVariant,
    pub control_dt: f64,
    pub kkt_tol: f64,
    pub max_qp_iterations: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 20,
            horizon_time: 1.0,
            q_position: 100.0,
            q_attitude: 10.0,
            q_velocity: 10.0,
            q_rates: 1.0,
            r_thrust: 0.1,
            u_min: 0.0,
            u_max: 8.0,
            variant: MpcVariant::Ctbr,
            control_dt: 0.01,
            kkt_tol: 1e-8,
            max_qp_iterations: 200,
        }
    }
}

impl MpcConfig {
    pub fn dt(&self) -> f64 {
        self.horizon_time / self.horizon_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidValue {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.horizon_steps == 0 {
            return bad("horizon_steps", "must be positive");
        }
        if !(self.horizon_time > 0.0) {
            return bad("horizon_time", "must be positive");
        }
        if !(0.0 <= self.u_min && self.u_min < self.u_max) {
            return bad("u_min", "need 0 <= u_min < u_max");
        }
        if [self.q_position, self.q_attitude, self.q_velocity, self.q_rates, self.r_thrust]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return bad("weights", "must be non-negative");
        }
        if !(self.r_thrust > 0.0) {
            return bad("r_thrust", "must be positive for a strictly convex QP");
        }
        if !(self.control_dt > 0.0) || !(self.kkt_tol > 0.0) {
            return bad("control_dt", "must be positive");
        }
        Ok(())
    }

    fn stage_weights(&self) -> [f64; NR] {
        let (p, a, v, w) = (self.q_position, self.q_attitude, self.q_velocity, self.q_rates);
        [p, p, p, a, a, a, v, v, v, w, w, w]
    }
}

pub fn to_model(x: &QuadState) -> ModelState {
    let mut m = ModelState::zeros();
    m.fixed_rows_mut::<3>(0).copy_from(&x.p);
    m.fixed_rows_mut::<4>(3).copy_from(&SVector::from(x.q.to_array()));
    m.fixed_rows_mut::<3>(7).copy_from(&x.v);
    m.fixed_rows_mut::<3>(10).copy_from(&x.w);
    m
}

fn quat_of(m: &ModelState) -> Quat {
    Quat::new(m[3], m[4], m[5], m[6])
}

/// Continuous model: rigid body with rotor thrusts as direct inputs.
pub fn model_derivative(m: &ModelState, u: &Input, params: &PhysParams, mixer: &Mixer) -> ModelState {
    let q = quat_of(m);
    let v = Vec3::new(m[7], m[8], m[9]);
    let w = Vec3::new(m[10], m[11], m[12]);
    let (collective, torque) = mixer.wrench(&[u[0], u[1], u[2], u[3]]);
    // RK4 stages and difference quotients leave the unit sphere slightly
    let (v_dot, w_dot) = rigid_body_accel(&q.normalized(), &v, &w, &Vec3::new(0.0, 0.0, collective), &torque, params);
    let q_dot = (q * Quat::new(0.0, w.x, w.y, w.z)).scale(0.5);
    let mut d = ModelState::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&v);
    d.fixed_rows_mut::<4>(3).copy_from(&SVector::from(q_dot.to_array()));
    d.fixed_rows_mut::<3>(7).copy_from(&v_dot);
    d.fixed_rows_mut::<3>(10).copy_from(&w_dot);
    d
}

fn normalize_quat(m: &mut ModelState) {
    let q = quat_of(m).normalized();
    m.fixed_rows_mut::<4>(3).copy_from(&SVector::from(q.to_array()));
}

/// Classical RK4 step with the quaternion renormalized afterwards.
pub fn rk4_step(m: &ModelState, u: &Input, dt: f64, params: &PhysParams, mixer: &Mixer) -> ModelState {
    let f = |x: &ModelState| model_derivative(x, u, params, mixer);
    let k1 = f(m);
    let k2 = f(&(m + k1 * (dt / 2.0)));
    let k3 = f(&(m + k2 * (dt / 2.0)));
    let k4 = f(&(m + k3 * dt));
    let mut out = m + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    normalize_quat(&mut out);
    out
}

/// Central-difference Jacobians of the RK4 map.
pub fn linearize(m: &ModelState, u: &Input, dt: f64, params: &PhysParams, mixer: &Mixer) -> (StateJac, InputJac) {
    let mut a = StateJac::zeros();
    let mut b = InputJac::zeros();
    for j in 0..NX {
        let h = 1e-6 * (1.0 + m[j].abs());
        let (mut xp, mut xm) = (*m, *m);
        xp[j] += h;
        xm[j] -= h;
        let col = (rk4_step(&xp, u, dt, params, mixer) - rk4_step(&xm, u, dt, params, mixer)) / (2.0 * h);
        a.set_column(j, &col);
    }
    for j in 0..NU {
        let h = 1e-6 * (1.0 + u[j].abs());
        let (mut up, mut um) = (*u, *u);
        up[j] += h;
        um[j] -= h;
        let col = (rk4_step(m, &up, dt, params, mixer) - rk4_step(m, &um, dt, params, mixer)) / (2.0 * h);
        b.set_column(j, &col);
    }
    (a, b)
}

/// Tracking residual selector: position, quaternion error vector part, velocity, rates.
/// The attitude rows are linear in the model quaternion: `vec(q_ref* ⊗ q)`.
fn residual_map(q_ref: &Quat) -> SMatrix<f64, NR, NX> {
    let mut c = SMatrix::<f64, NR, NX>::zeros();
    for i in 0..3 {
        c[(i, i)] = 1.0;
        c[(6 + i, 7 + i)] = 1.0;
        c[(9 + i, 10 + i)] = 1.0;
    }
    // rows 1..3 of the left-multiplication matrix of conj(q_ref)
    let (w, x, y, z) = (q_ref.w, -q_ref.x, -q_ref.y, -q_ref.z);
    let l = [[x, w, -z, y], [y, z, w, -x], [z, -y, x, w]];
    for (r, row) in l.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            c[(3 + r, 3 + k)] = *v;
        }
    }
    c
}

fn reference_target(r: &ReferencePoint) -> SVector<f64, NR> {
    let mut t = SVector::<f64, NR>::zeros();
    t.fixed_rows_mut::<3>(0).copy_from(&r.p);
    t.fixed_rows_mut::<3>(6).copy_from(&r.v);
    t.fixed_rows_mut::<3>(9).copy_from(&r.w);
    t
}

/// Box-constrained convex QP `min ½ xᵀHx + gᵀx, lb ≤ x ≤ ub`.
#[derive(Debug, Clone)]
pub struct BoxQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Bound multipliers: positive for active lower bounds, negative for upper.
    pub multipliers: DVector<f64>,
    pub active: usize,
    pub iterations: usize,
    pub kkt_residual: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Bound {
    Free,
    Lower,
    Upper,
}

impl BoxQp {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    /// Projected-gradient stationarity measure.
    pub fn kkt_residual(&self, x: &DVector<f64>) -> f64 {
        let grad = &self.h * x + &self.g;
        let mut r: f64 = 0.0;
        for i in 0..x.len() {
            let proj = (x[i] - grad[i]).clamp(self.lb[i], self.ub[i]);
            r = r.max((x[i] - proj).abs());
        }
        r
    }

    /// Primal active-set method started from the projection of `start`.
    pub fn solve(&self, start: &DVector<f64>, tol: f64, max_iter: usize) -> Result<QpSolution> {
        let n = self.g.len();
        for i in 0..n {
            if !(self.lb[i] <= self.ub[i]) {
                return Err(Error::Solver(format!("empty bound interval at {i}")));
            }
        }
        let mut x = DVector::from_fn(n, |i, _| start[i].clamp(self.lb[i], self.ub[i]));
        let mut set: Vec<Bound> = (0..n)
            .map(|i| {
                if self.lb[i] == self.ub[i] || x[i] <= self.lb[i] {
                    Bound::Lower
                } else if x[i] >= self.ub[i] {
                    Bound::Upper
                } else {
                    Bound::Free
                }
            })
            .collect();
        for it in 1..=max_iter {
            let free: Vec<usize> = (0..n).filter(|&i| set[i] == Bound::Free).collect();
            // Newton point on the free subspace with the bound variables fixed.
            let mut target = x.clone();
            if !free.is_empty() {
                let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| self.h[(free[a], free[b])]);
                let rhs = DVector::from_fn(free.len(), |a, _| {
                    let i = free[a];
                    let mut s = -self.g[i];
                    for j in 0..n {
                        if set[j] != Bound::Free {
                            s -= self.h[(i, j)] * x[j];
                        }
                    }
                    s
                });
                let sol = hff
                    .cholesky()
                    .ok_or_else(|| Error::Solver("reduced Hessian is not positive definite".into()))?
                    .solve(&rhs);
                for (a, &i) in free.iter().enumerate() {
                    target[i] = sol[a];
                }
            }
            // Longest feasible step toward the Newton point.
            let mut alpha = 1.0;
            let mut blocking = None;
            for &i in &free {
                let d = target[i] - x[i];
                if d < 0.0 && target[i] < self.lb[i] {
                    let a = (self.lb[i] - x[i]) / d;
                    if a < alpha {
                        alpha = a;
                        blocking = Some((i, Bound::Lower));
                    }
                } else if d > 0.0 && target[i] > self.ub[i] {
                    let a = (self.ub[i] - x[i]) / d;
                    if a < alpha {
                        alpha = a;
                        blocking = Some((i, Bound::Upper));
                    }
                }
            }
            for &i in &free {
                x[i] += alpha.max(0.0) * (target[i] - x[i]);
            }
            if let Some((i, b)) = blocking {
                x[i] = if b == Bound::Lower { self.lb[i] } else { self.ub[i] };
                set[i] = b;
                continue;
            }
            // Full step taken: release the bound with the most negative multiplier.
            let grad = &self.h * &x + &self.g;
            let mut worst = (0.0, None);
            for i in 0..n {
                let wrong_sign = match set[i] {
                    Bound::Lower if self.lb[i] < self.ub[i] => -grad[i],
                    Bound::Upper if self.lb[i] < self.ub[i] => grad[i],
                    _ => 0.0,
                };
                if wrong_sign > worst.0 {
                    worst = (wrong_sign, Some(i));
                }
            }
            match worst.1 {
                Some(i) if worst.0 > tol => set[i] = Bound::Free,
                _ => {
                    let multipliers = DVector::from_fn(n, |i, _| match set[i] {
                        Bound::Free => 0.0,
                        _ => grad[i],
                    });
                    let kkt = self.kkt_residual(&x);
                    return Ok(QpSolution {
                        active: set.iter().filter(|s| **s != Bound::Free).count(),
                        x,
                        multipliers,
                        iterations: it,
                        kkt_residual: kkt,
                    });
                }
            }
        }
        Err(Error::Solver(format!("active set did not converge in {max_iter} iterations")))
    }
}

/// Diagnostics of one control update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveInfo {
    pub kkt_residual: f64,
    pub active_set: usize,
    pub qp_iterations: usize,
    pub solve_time_s: f64,
    /// Quadratic-model cost at the previous iterate and after the step.
    pub model_cost_before: f64,
    pub model_cost_after: f64,
    /// True when the solver failed and the reference feed-forward was used.
    pub fallback: bool,
}

/// Per-agent solver holding the warm start.
#[derive(Debug, Clone)]
pub struct Mpc {
    pub config: MpcConfig,
    params: PhysParams,
    mixer: Mixer,
    xs: Vec<ModelState>,
    us: Vec<Input>,
    warm: bool,
}

/// Result of one control update.
#[derive(Debug, Clone)]
pub struct MpcStep {
    pub command: Command,
    pub inputs: Vec<Input>,
    pub states: Vec<ModelState>,
    pub info: SolveInfo,
}

impl Mpc {
    /// `params` is the controller's model, normally the nominal platform.
    pub fn new(config: MpcConfig, params: PhysParams) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        let n = config.horizon_steps;
        Ok(Self {
            mixer: Mixer::new(&params),
            params,
            xs: vec![ModelState::zeros(); n + 1],
            us: vec![Input::zeros(); n],
            warm: false,
            config,
        })
    }

    pub fn params(&self) -> &PhysParams {
        &self.params
    }

    pub fn reset(&mut self) {
        self.warm = false;
    }

    pub fn predicted_states(&self) -> &[ModelState] {
        &self.xs
    }

    pub fn predicted_inputs(&self) -> &[Input] {
        &self.us
    }

    fn clamp_input(&self, u: [f64; 4]) -> Input {
        Input::from_fn(|i, _| u[i].clamp(self.config.u_min, self.config.u_max))
    }

    /// Reference window of `N + 1` points spaced `T / N` from `t`.
    pub fn reference_window(&self, traj: &Trajectory, t: f64) -> Vec<ReferencePoint> {
        let dt = self.config.dt();
        (0..=self.config.horizon_steps).map(|k| traj.at(t + k as f64 * dt)).collect()
    }

    fn cold_start(&mut self, x0: &ModelState, refs: &[ReferencePoint]) {
        let dt = self.config.dt();
        self.xs[0] = *x0;
        for k in 0..self.config.horizon_steps {
            self.us[k] = self.clamp_input(refs[k].thrusts);
            self.xs[k + 1] = rk4_step(&self.xs[k], &self.us[k], dt, &self.params, &self.mixer);
        }
        self.warm = true;
    }

    /// Shift the previous solution by one shooting interval.
    fn shift(&mut self) {
        let n = self.config.horizon_steps;
        self.xs.rotate_left(1);
        self.us.rotate_left(1);
        self.us[n - 1] = self.us[n.saturating_sub(2)];
        self.xs[n] = rk4_step(&self.xs[n - 1], &self.us[n - 1], self.config.dt(), &self.params, &self.mixer);
    }

    /// One real-time iteration from the measured state `x`.
    pub fn solve(&mut self, x: &QuadState, refs: &[ReferencePoint], shift: bool) -> Result<MpcStep> {
        let n = self.config.horizon_steps;
        if refs.len() != n + 1 {
            return Err(Error::DimMismatch {
                what: "reference window",
                expected: n + 1,
                got: refs.len(),
            });
        }
        let started = Instant::now();
        let x0 = to_model(x);
        if !self.warm {
            self.cold_start(&x0, refs);
        } else if shift {
            self.shift();
        }
        let dt = self.config.dt();
        let weights = self.config.stage_weights();
        let r = self.config.r_thrust;
        // Keep the warm-start quaternions in the reference hemisphere.
        for k in 0..=n {
            if quat_of(&self.xs[k]).dot(&refs[k].q) < 0.0 {
                let flipped = -self.xs[k].fixed_rows::<4>(3);
                self.xs[k].fixed_rows_mut::<4>(3).copy_from(&flipped);
            }
        }
        let mut x0m = x0;
        if quat_of(&x0m).dot(&quat_of(&self.xs[0])) < 0.0 {
            let flipped = -x0m.fixed_rows::<4>(3);
            x0m.fixed_rows_mut::<4>(3).copy_from(&flipped);
        }

        // Condensing: dx_k = e_k + G_k dU.
        let nv = NU * n;
        let mut e = vec![ModelState::zeros(); n + 1];
        let mut g_mats = vec![DMatrix::<f64>::zeros(NX, nv); n + 1];
        e[0] = x0m - self.xs[0];
        for k in 0..n {
            let (a, b) = linearize(&self.xs[k], &self.us[k], dt, &self.params, &self.mixer);
            let defect = rk4_step(&self.xs[k], &self.us[k], dt, &self.params, &self.mixer) - self.xs[k + 1];
            e[k + 1] = a * e[k] + defect;
            let a_dyn = DMatrix::from_column_slice(NX, NX, a.as_slice());
            let mut next = &a_dyn * &g_mats[k];
            for i in 0..NX {
                for j in 0..NU {
                    next[(i, NU * k + j)] += b[(i, j)];
                }
            }
            g_mats[k + 1] = next;
        }
        let mut hess = DMatrix::<f64>::zeros(nv, nv);
        let mut grad = DVector::<f64>::zeros(nv);
        let mut const_cost = 0.0;
        for k in 0..=n {
            let c = residual_map(&refs[k].q);
            let res0 = c * (self.xs[k] + e[k]) - reference_target(&refs[k]);
            let c_dyn = DMatrix::from_column_slice(NR, NX, c.as_slice());
            let m = &c_dyn * &g_mats[k];
            let mut wm = m.clone();
            for i in 0..NR {
                wm.row_mut(i).scale_mut(weights[i]);
                const_cost += 0.5 * weights[i] * res0[i] * res0[i];
            }
            hess += m.tr_mul(&wm);
            let wres = DVector::from_fn(NR, |i, _| weights[i] * res0[i]);
            grad += m.tr_mul(&wres);
        }
        for k in 0..n {
            for j in 0..NU {
                let i = NU * k + j;
                let du = self.us[k][j] - refs[k].thrusts[j];
                hess[(i, i)] += r;
                grad[i] += r * du;
                const_cost += 0.5 * r * du * du;
            }
        }
        let lb = DVector::from_fn(nv, |i, _| self.config.u_min - self.us[i / NU][i % NU]);
        let ub = DVector::from_fn(nv, |i, _| self.config.u_max - self.us[i / NU][i % NU]);
        let qp = BoxQp { h: hess, g: grad, lb, ub };
        let sol = qp.solve(&DVector::zeros(nv), self.config.kkt_tol, self.config.max_qp_iterations)?;
        if !(sol.kkt_residual <= self.config.kkt_tol.max(1e-12) * 10.0) || sol.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!("KKT residual {:e}", sol.kkt_residual)));
        }
        let model_cost_after = const_cost + qp.objective(&sol.x);

        // Full step on inputs and states.
        for k in 0..n {
            for j in 0..NU {
                let u = self.us[k][j] + sol.x[NU * k + j];
                self.us[k][j] = u.clamp(self.config.u_min, self.config.u_max);
            }
        }
        for k in 0..=n {
            self.xs[k] += e[k] + &g_mats[k] * &sol.x;
            normalize_quat(&mut self.xs[k]);
        }
        self.xs[0] = x0m;

        let info = SolveInfo {
            kkt_residual: sol.kkt_residual,
            active_set: sol.active,
            qp_iterations: sol.iterations,
            solve_time_s: started.elapsed().as_secs_f64(),
            model_cost_before: const_cost,
            model_cost_after,
            fallback: false,
        };
        Ok(MpcStep {
            command: self.command(),
            inputs: self.us.clone(),
            states: self.xs.clone(),
            info,
        })
    }

    /// Command of the current solution: first thrusts, or collective thrust
    /// with the first predicted body rates.
    pub fn command(&self) -> Command {
        let u = self.us[0];
        match self.config.variant {
            MpcVariant::Srt => Command::Srt([u[0], u[1], u[2], u[3]]),
            MpcVariant::Ctbr => Command::Ctbr {
                thrust: u.sum() / self.params.mass,
                rates: Vec3::new(self.xs[1][10], self.xs[1][11], self.xs[1][12]),
            },
        }
    }

    /// Control update at time `t`; solver failures fall back to the reference feed-forward.
    pub fn control(&mut self, x: &QuadState, traj: &Trajectory, t: f64) -> MpcStep {
        let refs = self.reference_window(traj, t);
        let shift = self.warm;
        match self.solve(x, &refs, shift) {
            Ok(step) => step,
            Err(e) => {
                log::warn!("mpc fallback at t = {t:.3}: {e}");
                self.warm = false;
                let r = &refs[0];
                let command = match self.config.variant {
                    MpcVariant::Srt => {
                        Command::Srt(r.thrusts.map(|f| f.clamp(self.config.u_min, self.config.u_max)))
                    }
                    MpcVariant::Ctbr => Command::Ctbr {
                        thrust: r.collective,
                        rates: r.w,
                    },
                };
                MpcStep {
                    command,
                    inputs: Vec::new(),
                    states: Vec::new(),
                    info: SolveInfo {
                        fallback: true,
                        ..SolveInfo::default()
                    },
                }
            }
        }
    }
}
