//! Rigid-body quadrotor model with propeller wrench, linear body-frame drag and
//! first-order motor lag, integrated with a symplectic Euler step.
//!
//! State layout (17): position (3), attitude quaternion (4), world velocity (3),
//! body rates (3), rotor speeds (4).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Quat, Vec3};

pub const STATE_DIM: usize = 17;

/// Physical constants of the simulated platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysParams {
    /// kg
    pub mass: f64,
    /// Diagonal inertia, kg·m².
    pub inertia: Vec3,
    /// m/s²
    pub gravity: Vec3,
    /// Linear drag coefficients (k_vx, k_vy, k_vz), N·s/m.
    pub drag: Vec3,
    /// Rotor thrust coefficient c_l, N/(rad/s)².
    pub thrust_coeff: f64,
    /// Rotor drag-torque coefficient c_d, N·m/(rad/s)².
    pub torque_coeff: f64,
    /// Motor time constant k_mot, s.
    pub motor_time_constant: f64,
    /// Arm length of the X-configuration, m.
    pub arm_length: f64,
    /// Sign of each rotor's yaw drag torque.
    pub spin: [f64; 4],
    /// Per-rotor thrust limit, N.
    pub max_thrust: f64,
    /// Multiplicative per-rotor thrust variation (1.0 is nominal).
    pub thrust_scale: [f64; 4],
}

impl Default for PhysParams {
    fn default() -> Self {
        Self {
            mass: 0.768,
            inertia: Vec3::new(2.5e-3, 2.1e-3, 4.3e-3),
            gravity: Vec3::new(0.0, 0.0, -9.81),
            drag: Vec3::new(0.3, 0.3, 0.15),
            thrust_coeff: 1.563e-6,
            torque_coeff: 1.909e-8,
            motor_time_constant: 0.033,
            arm_length: 0.125,
            spin: [1.0, 1.0, -1.0, -1.0],
            max_thrust: 8.0,
            thrust_scale: [1.0; 4],
        }
    }
}

impl PhysParams {
    /// Rotor positions in the body frame: 1 front-right, 2 back-left, 3 back-right, 4 front-left.
    pub fn rotor_positions(&self) -> [Vec3; 4] {
        let a = self.arm_length * std::f64::consts::FRAC_1_SQRT_2;
        [
            Vec3::new(a, -a, 0.0),
            Vec3::new(-a, a, 0.0),
            Vec3::new(-a, -a, 0.0),
            Vec3::new(a, a, 0.0),
        ]
    }

    pub fn max_rotor_speed(&self) -> f64 {
        (self.max_thrust / self.thrust_coeff).sqrt()
    }

    /// Rotor speed at which four equal rotors carry the weight.
    pub fn hover_rotor_speed(&self) -> f64 {
        (self.mass * self.gravity.norm() / (4.0 * self.thrust_coeff)).sqrt()
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity.norm() / 4.0
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("inertia.x", self.inertia.x),
            ("inertia.y", self.inertia.y),
            ("inertia.z", self.inertia.z),
            ("thrust_coeff", self.thrust_coeff),
            ("motor_time_constant", self.motor_time_constant),
            ("max_thrust", self.max_thrust),
            ("arm_length", self.arm_length),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidValue {
                    key: key.into(),
                    reason: format!("must be positive and finite, got {v}"),
                });
            }
        }
        if !(self.torque_coeff >= 0.0) {
            return Err(Error::InvalidValue {
                key: "torque_coeff".into(),
                reason: "must be non-negative".into(),
            });
        }
        if self.drag.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::InvalidValue {
                key: "drag".into(),
                reason: "coefficients must be non-negative".into(),
            });
        }
        if self.thrust_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidValue {
                key: "thrust_scale".into(),
                reason: "scales must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    pub p: Vec3,
    pub q: Quat,
    pub v: Vec3,
    pub w: Vec3,
    pub rotor_speeds: [f64; 4],
}

impl Default for QuadState {
    fn default() -> Self {
        Self {
            p: Vec3::zeros(),
            q: Quat::identity(),
            v: Vec3::zeros(),
            w: Vec3::zeros(),
            rotor_speeds: [0.0; 4],
        }
    }
}

impl QuadState {
    /// Hover at `p` with rotors spinning at the hover speed of `params`.
    pub fn hover(p: Vec3, params: &PhysParams) -> Self {
        Self {
            p,
            rotor_speeds: [params.hover_rotor_speed(); 4],
            ..Self::default()
        }
    }

    pub fn to_vector(&self) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        out[0..3].copy_from_slice(self.p.as_slice());
        out[3..7].copy_from_slice(&self.q.to_array());
        out[7..10].copy_from_slice(self.v.as_slice());
        out[10..13].copy_from_slice(self.w.as_slice());
        out[13..17].copy_from_slice(&self.rotor_speeds);
        out
    }

    pub fn from_vector(x: &[f64; STATE_DIM]) -> Self {
        Self {
            p: Vec3::new(x[0], x[1], x[2]),
            q: Quat::new(x[3], x[4], x[5], x[6]),
            v: Vec3::new(x[7], x[8], x[9]),
            w: Vec3::new(x[10], x[11], x[12]),
            rotor_speeds: [x[13], x[14], x[15], x[16]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Time derivative of a [`QuadState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateRate {
    pub p: Vec3,
    pub q: Quat,
    pub v: Vec3,
    pub w: Vec3,
    pub rotor_speeds: [f64; 4],
}

impl StateRate {
    pub fn to_vector(&self) -> [f64; STATE_DIM] {
        QuadState {
            p: self.p,
            q: self.q,
            v: self.v,
            w: self.w,
            rotor_speeds: self.rotor_speeds,
        }
        .to_vector()
    }
}

/// Single-rotor thrust in the body frame (scalar z-component), N.
pub fn rotor_thrust(speed: f64, i: usize, params: &PhysParams) -> f64 {
    params.thrust_scale[i] * params.thrust_coeff * speed * speed
}

/// Collective propeller force and torque in the body frame.
pub fn prop_wrench(rotor_speeds: &[f64; 4], params: &PhysParams) -> (Vec3, Vec3) {
    let positions = params.rotor_positions();
    let mut force = Vec3::zeros();
    let mut torque = Vec3::zeros();
    for i in 0..4 {
        let o2 = rotor_speeds[i] * rotor_speeds[i];
        let f = Vec3::new(0.0, 0.0, params.thrust_scale[i] * params.thrust_coeff * o2);
        let yaw = params.spin[i] * params.thrust_scale[i] * params.torque_coeff * o2;
        force += f;
        torque += Vec3::new(0.0, 0.0, yaw) + positions[i].cross(&f);
    }
    (force, torque)
}

/// Linear drag force in the body frame for a world-frame velocity.
pub fn drag_force_body(q: &Quat, v_world: &Vec3, params: &PhysParams) -> Vec3 {
    let v_body = q.rotate_inv(v_world);
    -params.drag.component_mul(&v_body)
}

/// Rigid-body part of the model: translational and rotational acceleration for a body wrench.
pub fn rigid_body_accel(
    q: &Quat,
    v: &Vec3,
    w: &Vec3,
    force_body: &Vec3,
    torque_body: &Vec3,
    params: &PhysParams,
) -> (Vec3, Vec3) {
    let f = force_body + drag_force_body(q, v, params);
    let v_dot = q.rotate(&f) / params.mass + params.gravity;
    let jw = params.inertia.component_mul(w);
    let w_dot = (torque_body - w.cross(&jw)).component_div(&params.inertia);
    (v_dot, w_dot)
}

pub fn state_derivative(x: &QuadState, params: &PhysParams, rotor_cmd: &[f64; 4]) -> StateRate {
    let (f_prop, tau_prop) = prop_wrench(&x.rotor_speeds, params);
    let (v_dot, w_dot) = rigid_body_accel(&x.q, &x.v, &x.w, &f_prop, &tau_prop, params);
    let k = params.motor_time_constant;
    let mut rotor_dot = [0.0; 4];
    for i in 0..4 {
        rotor_dot[i] = (rotor_cmd[i] - x.rotor_speeds[i]) / k;
    }
    StateRate {
        p: x.v,
        q: x.q.derivative(&x.w),
        v: v_dot,
        w: w_dot,
        rotor_speeds: rotor_dot,
    }
}

/// One symplectic Euler step: velocities and rotor speeds first, then position and
/// attitude with the updated velocities.
///
/// The motor lag is discretized exactly (`exp(-dt/k_mot)`), which matches the
/// explicit update to first order and stays stable for `dt > k_mot`.
pub fn step_symplectic_euler(
    x: &QuadState,
    params: &PhysParams,
    rotor_cmd: &[f64; 4],
    dt: f64,
) -> QuadState {
    if dt == 0.0 {
        return *x;
    }
    debug_assert!(dt > 0.0);
    let rate = state_derivative(x, params, rotor_cmd);
    let v = x.v + rate.v * dt;
    let w = x.w + rate.w * dt;

    let max_speed = params.max_rotor_speed();
    let decay = (-dt / params.motor_time_constant).exp();
    let mut rotor_speeds = [0.0; 4];
    for i in 0..4 {
        let cmd = rotor_cmd[i].clamp(0.0, max_speed);
        rotor_speeds[i] = (cmd + (x.rotor_speeds[i] - cmd) * decay).clamp(0.0, max_speed);
    }

    let p = x.p + v * dt;
    let q = (x.q * Quat::from_rotation_vector(&(w * dt))).normalized();
    QuadState {
        p,
        q,
        v,
        w,
        rotor_speeds,
    }
}

/// Uniform half-widths around the nominal parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizationSpec {
    /// Relative half-width of the mass interval.
    pub mass_rel: f64,
    /// Relative half-width per inertia axis.
    pub inertia_rel: f64,
    /// Absolute half-width of the gravity z-component, m/s².
    pub gravity_abs: f64,
    /// Absolute half-widths of (k_vx, k_vy, k_vz).
    pub drag_abs: Vec3,
    pub thrust_coeff_abs: f64,
    pub torque_coeff_abs: f64,
    /// Relative half-width of the per-rotor thrust scale; zero disables thrust variations.
    pub thrust_scale_rel: f64,
}

impl Default for RandomizationSpec {
    fn default() -> Self {
        Self {
            mass_rel: 0.30,
            inertia_rel: 0.30,
            gravity_abs: 0.4,
            drag_abs: Vec3::new(0.3, 0.3, 0.15),
            thrust_coeff_abs: 0.0,
            torque_coeff_abs: 0.0,
            thrust_scale_rel: 0.0,
        }
    }
}

impl RandomizationSpec {
    pub fn none() -> Self {
        Self {
            mass_rel: 0.0,
            inertia_rel: 0.0,
            gravity_abs: 0.0,
            drag_abs: Vec3::zeros(),
            thrust_coeff_abs: 0.0,
            torque_coeff_abs: 0.0,
            thrust_scale_rel: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("mass_rel", self.mass_rel),
            ("inertia_rel", self.inertia_rel),
            ("gravity_abs", self.gravity_abs),
            ("drag_abs.x", self.drag_abs.x),
            ("drag_abs.y", self.drag_abs.y),
            ("drag_abs.z", self.drag_abs.z),
            ("thrust_coeff_abs", self.thrust_coeff_abs),
            ("torque_coeff_abs", self.torque_coeff_abs),
            ("thrust_scale_rel", self.thrust_scale_rel),
        ];
        for (key, v) in widths {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidValue {
                    key: key.into(),
                    reason: format!("half-width must be non-negative, got {v}"),
                });
            }
        }
        Ok(())
    }
}

fn uniform_around<R: Rng + ?Sized>(rng: &mut R, center: f64, half_width: f64) -> f64 {
    if half_width == 0.0 {
        return center;
    }
    rng.random_range(center - half_width..=center + half_width)
}

/// Draws one parameter set; widths of zero return the nominal field untouched.
pub fn sample_params_with<R: Rng + ?Sized>(
    nominal: &PhysParams,
    spec: &RandomizationSpec,
    rng: &mut R,
) -> PhysParams {
    let mut p = nominal.clone();
    p.mass = uniform_around(rng, nominal.mass, nominal.mass * spec.mass_rel);
    for i in 0..3 {
        p.inertia[i] = uniform_around(rng, nominal.inertia[i], nominal.inertia[i] * spec.inertia_rel);
    }
    p.gravity.z = uniform_around(rng, nominal.gravity.z, spec.gravity_abs);
    for i in 0..3 {
        p.drag[i] = uniform_around(rng, nominal.drag[i], spec.drag_abs[i]).max(0.0);
    }
    p.thrust_coeff = uniform_around(rng, nominal.thrust_coeff, spec.thrust_coeff_abs);
    p.torque_coeff = uniform_around(rng, nominal.torque_coeff, spec.torque_coeff_abs);
    for i in 0..4 {
        p.thrust_scale[i] = uniform_around(
            rng,
            nominal.thrust_scale[i],
            nominal.thrust_scale[i] * spec.thrust_scale_rel,
        );
    }
    p
}

pub fn sample_params(nominal: &PhysParams, spec: &RandomizationSpec, seed: u64) -> PhysParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_params_with(nominal, spec, &mut rng)
}
