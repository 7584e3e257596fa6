//! Action-space abstraction layers.
//!
//! - SRT: rotor thrusts pass straight to the motors.
//! - CTBR: mass-normalized collective thrust and bodyrates, closed by a PD rate loop
//!   running at the simulation rate, then allocated to rotors.
//! - LV: velocity and yaw-rate setpoints, turned into CTBR by a cascaded
//!   velocity/attitude stack.
//!
//! Controllers use the *nominal* parameters they were built with; the simulated
//! plant may be randomized away from them.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{PhysParams, QuadState};
use crate::error::{Error, Result};
use crate::math::{Mat3, Quat, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionSpace {
    Srt,
    Ctbr,
    Lv,
}

impl ActionSpace {
    pub const ALL: [ActionSpace; 3] = [ActionSpace::Srt, ActionSpace::Ctbr, ActionSpace::Lv];

    pub fn name(&self) -> &'static str {
        match self {
            ActionSpace::Srt => "srt",
            ActionSpace::Ctbr => "ctbr",
            ActionSpace::Lv => "lv",
        }
    }
}

impl std::str::FromStr for ActionSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "srt" => Ok(ActionSpace::Srt),
            "ctbr" => Ok(ActionSpace::Ctbr),
            "lv" => Ok(ActionSpace::Lv),
            other => Err(Error::InvalidValue {
                key: "action_space".into(),
                reason: format!("unknown action space `{other}` (expected srt, ctbr or lv)"),
            }),
        }
    }
}

impl std::fmt::Display for ActionSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Command {
    /// Individual rotor thrusts, N.
    Srt([f64; 4]),
    /// Mass-normalized collective thrust (m/s²) and body rates (rad/s).
    Ctbr { thrust: f64, rates: Vec3 },
    /// World-frame velocity (m/s) and yaw rate (rad/s).
    Lv { velocity: Vec3, yaw_rate: f64 },
}

impl Command {
    pub fn space(&self) -> ActionSpace {
        match self {
            Command::Srt(_) => ActionSpace::Srt,
            Command::Ctbr { .. } => ActionSpace::Ctbr,
            Command::Lv { .. } => ActionSpace::Lv,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        match *self {
            Command::Srt(f) => f,
            Command::Ctbr { thrust, rates } => [thrust, rates.x, rates.y, rates.z],
            Command::Lv { velocity, yaw_rate } => [velocity.x, velocity.y, velocity.z, yaw_rate],
        }
    }

    pub fn from_array(space: ActionSpace, a: [f64; 4]) -> Self {
        match space {
            ActionSpace::Srt => Command::Srt(a),
            ActionSpace::Ctbr => Command::Ctbr {
                thrust: a[0],
                rates: Vec3::new(a[1], a[2], a[3]),
            },
            ActionSpace::Lv => Command::Lv {
                velocity: Vec3::new(a[0], a[1], a[2]),
                yaw_rate: a[3],
            },
        }
    }
}

/// Per-dimension box of admissible commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandBox {
    pub lo: [f64; 4],
    pub hi: [f64; 4],
}

impl CommandBox {
    pub fn for_space(space: ActionSpace, params: &PhysParams, limits: &CommandLimits) -> Self {
        match space {
            ActionSpace::Srt => Self {
                lo: [0.0; 4],
                hi: [params.max_thrust; 4],
            },
            ActionSpace::Ctbr => {
                let r = limits.max_rates;
                Self {
                    lo: [0.0, -r.x, -r.y, -r.z],
                    hi: [4.0 * params.max_thrust / params.mass, r.x, r.y, r.z],
                }
            }
            ActionSpace::Lv => {
                let v = limits.max_velocity;
                let y = limits.max_yaw_rate;
                Self {
                    lo: [-v, -v, -v, -y],
                    hi: [v, v, v, y],
                }
            }
        }
    }

    pub fn center(&self) -> [f64; 4] {
        std::array::from_fn(|i| 0.5 * (self.lo[i] + self.hi[i]))
    }

    pub fn half_width(&self) -> [f64; 4] {
        std::array::from_fn(|i| 0.5 * (self.hi[i] - self.lo[i]))
    }

    pub fn clamp(&self, a: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|i| a[i].clamp(self.lo[i], self.hi[i]))
    }

    /// Maps `[-1, 1]` per dimension affinely onto the box (values outside are clipped).
    pub fn from_normalized(&self, n: &[f64]) -> [f64; 4] {
        let (c, h) = (self.center(), self.half_width());
        std::array::from_fn(|i| c[i] + h[i] * n[i].clamp(-1.0, 1.0))
    }

    pub fn to_normalized(&self, a: &[f64; 4]) -> [f64; 4] {
        let (c, h) = (self.center(), self.half_width());
        std::array::from_fn(|i| if h[i] > 0.0 { (a[i] - c[i]) / h[i] } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommandLimits {
    /// Bodyrate box half-widths, rad/s.
    pub max_rates: Vec3,
    pub max_velocity: f64,
    pub max_yaw_rate: f64,
}

impl Default for CommandLimits {
    fn default() -> Self {
        Self {
            max_rates: Vec3::new(12.0, 12.0, 6.0),
            max_velocity: 20.0,
            max_yaw_rate: 3.0,
        }
    }
}

/// Rotor-speed setpoint producing thrust `f` under the static model. Negative thrust clamps to zero.
pub fn thrust_to_speed(f: f64, params: &PhysParams) -> f64 {
    (f.max(0.0) / params.thrust_coeff).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Allocation {
    pub thrusts: [f64; 4],
    /// True when clamping changed the requested wrench.
    pub saturated: bool,
}

/// Linear map between rotor thrusts and (collective thrust, body torque).
#[derive(Debug, Clone, PartialEq)]
pub struct Mixer {
    forward: Matrix4<f64>,
    inverse: Matrix4<f64>,
    max_thrust: f64,
}

impl Mixer {
    pub fn new(params: &PhysParams) -> Self {
        let r = params.rotor_positions();
        let kappa = params.torque_coeff / params.thrust_coeff;
        let mut forward = Matrix4::zeros();
        for i in 0..4 {
            forward[(0, i)] = 1.0;
            forward[(1, i)] = r[i].y;
            forward[(2, i)] = -r[i].x;
            forward[(3, i)] = params.spin[i] * kappa;
        }
        let inverse = forward
            .try_inverse()
            .expect("rotor layout yields a singular mixer");
        Self {
            forward,
            inverse,
            max_thrust: params.max_thrust,
        }
    }

    pub fn wrench(&self, thrusts: &[f64; 4]) -> (f64, Vec3) {
        let w = self.forward * Vector4::from_column_slice(thrusts);
        (w[0], Vec3::new(w[1], w[2], w[3]))
    }

    /// Exact inverse of [`Mixer::wrench`] without any limits.
    pub fn invert(&self, collective: f64, torque: &Vec3) -> [f64; 4] {
        let f = self.inverse * Vector4::new(collective, torque.x, torque.y, torque.z);
        [f[0], f[1], f[2], f[3]]
    }

    /// Exact inverse of [`Mixer::wrench`] inside the actuator box. Outside it the
    /// collective thrust is kept and roll/pitch torque, then yaw torque, is scaled
    /// back until every rotor is within `[0, max_thrust]`.
    pub fn allocate(&self, collective: f64, torque: &Vec3) -> Allocation {
        let raw = self.inverse * Vector4::new(collective, torque.x, torque.y, torque.z);
        if raw.iter().all(|f| (0.0..=self.max_thrust).contains(f)) {
            return Allocation {
                thrusts: [raw[0], raw[1], raw[2], raw[3]],
                saturated: false,
            };
        }

        let t = collective.clamp(0.0, 4.0 * self.max_thrust);
        let base = self.inverse * Vector4::new(t, 0.0, 0.0, 0.0);
        let rp = self.inverse * Vector4::new(0.0, torque.x, torque.y, 0.0);
        let yaw = self.inverse * Vector4::new(0.0, 0.0, 0.0, torque.z);
        let alpha = self.feasible_fraction(&base, &rp);
        let with_rp = base + rp * alpha;
        let beta = self.feasible_fraction(&with_rp, &yaw);
        let f = with_rp + yaw * beta;
        Allocation {
            thrusts: std::array::from_fn(|i| f[i].clamp(0.0, self.max_thrust)),
            saturated: true,
        }
    }

    /// Largest `s` in `[0, 1]` such that `base + s * dir` stays inside the thrust box.
    fn feasible_fraction(&self, base: &Vector4<f64>, dir: &Vector4<f64>) -> f64 {
        let mut s: f64 = 1.0;
        for i in 0..4 {
            let b = base[i].clamp(0.0, self.max_thrust);
            if dir[i] > 0.0 {
                s = s.min((self.max_thrust - b) / dir[i]);
            } else if dir[i] < 0.0 {
                s = s.min(-b / dir[i]);
            }
        }
        s.max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowLevelGains {
    /// Rate-error gain, 1/s.
    pub kp: Vec3,
    /// Rate-derivative gain.
    pub kd: Vec3,
    pub scale_p: f64,
    pub scale_d: f64,
}

impl Default for LowLevelGains {
    fn default() -> Self {
        Self {
            kp: Vec3::new(25.0, 25.0, 8.0),
            kd: Vec3::new(0.5, 0.5, 0.15),
            scale_p: 1.0,
            scale_d: 1.0,
        }
    }
}

impl LowLevelGains {
    pub fn scaled(&self, scale_p: f64, scale_d: f64) -> Self {
        Self {
            scale_p,
            scale_d,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kp.iter().chain(self.kd.iter()).any(|g| !(*g >= 0.0)) {
            return Err(Error::InvalidValue {
                key: "gains".into(),
                reason: "gains must be non-negative".into(),
            });
        }
        for (key, s) in [("scale_p", self.scale_p), ("scale_d", self.scale_d)] {
            if !(0.0..=100.0).contains(&s) {
                return Err(Error::InvalidValue {
                    key: key.into(),
                    reason: format!("scale must lie in [0, 100], got {s}"),
                });
            }
        }
        Ok(())
    }
}

/// PD bodyrate loop: CTBR setpoints to rotor thrusts.
#[derive(Debug, Clone)]
pub struct RateController {
    gains: LowLevelGains,
    mass: f64,
    inertia: Vec3,
    mixer: Mixer,
    dt: f64,
    prev_rates: Option<Vec3>,
}

impl RateController {
    pub fn new(gains: LowLevelGains, nominal: &PhysParams, dt: f64) -> Self {
        Self {
            gains,
            mass: nominal.mass,
            inertia: nominal.inertia,
            mixer: Mixer::new(nominal),
            dt,
            prev_rates: None,
        }
    }

    pub fn gains(&self) -> &LowLevelGains {
        &self.gains
    }

    pub fn reset(&mut self) {
        self.prev_rates = None;
    }

    /// One loop update from measured body rates. `thrust` is mass-normalized.
    pub fn update(&mut self, rates: &Vec3, thrust: f64, rates_des: &Vec3) -> Allocation {
        let rate_dot = match self.prev_rates {
            Some(prev) => (rates - prev) / self.dt,
            None => Vec3::zeros(),
        };
        self.prev_rates = Some(*rates);
        let g = &self.gains;
        let p_term = g.kp.component_mul(&(rates_des - rates)) * g.scale_p;
        let d_term = g.kd.component_mul(&rate_dot) * g.scale_d;
        let torque = self.inertia.component_mul(&(p_term - d_term));
        self.mixer.allocate(self.mass * thrust, &torque)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityGains {
    /// Velocity loop gain, 1/s.
    pub k_vel: f64,
    /// Attitude loop gain, 1/s.
    pub k_att: f64,
}

impl Default for VelocityGains {
    fn default() -> Self {
        Self {
            k_vel: 3.0,
            k_att: 8.0,
        }
    }
}

/// Attitude whose body z-axis is `z_b` and whose heading is `yaw`.
pub fn attitude_from_thrust_and_yaw(z_b: &Vec3, yaw: f64) -> Quat {
    let x_c = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
    let y_b = {
        let y = z_b.cross(&x_c);
        let n = y.norm();
        if n < 1e-9 {
            // thrust axis horizontal along the heading; fall back to world y
            Vec3::new(-yaw.sin(), yaw.cos(), 0.0)
        } else {
            y / n
        }
    };
    let x_b = y_b.cross(z_b);
    Quat::from_rotmat(&Mat3::from_columns(&[x_b, y_b, *z_b]))
}

/// Cascaded velocity → attitude → bodyrate stack producing CTBR setpoints.
#[derive(Debug, Clone)]
pub struct VelocityController {
    gains: VelocityGains,
    gravity: Vec3,
    limits: CommandBox,
    yaw_target: Option<f64>,
    attitude_target: Quat,
}

impl VelocityController {
    pub fn new(gains: VelocityGains, nominal: &PhysParams, limits: &CommandLimits) -> Self {
        Self {
            gains,
            gravity: nominal.gravity,
            limits: CommandBox::for_space(ActionSpace::Ctbr, nominal, limits),
            yaw_target: None,
            attitude_target: Quat::identity(),
        }
    }

    pub fn reset(&mut self) {
        self.yaw_target = None;
    }

    pub fn yaw_target(&self) -> Option<f64> {
        self.yaw_target
    }

    /// Returns (mass-normalized thrust, desired body rates).
    pub fn update(&mut self, x: &QuadState, v_des: &Vec3, yaw_rate: f64, dt: f64) -> (f64, Vec3) {
        let yaw = match self.yaw_target {
            Some(y) => y + yaw_rate * dt,
            None => {
                self.attitude_target = x.q;
                x.q.yaw()
            }
        };
        self.yaw_target = Some(yaw);

        let a_des = (v_des - x.v) * self.gains.k_vel - self.gravity;
        let c = a_des.norm();
        let target = if c < 1e-6 {
            self.attitude_target
        } else {
            attitude_from_thrust_and_yaw(&(a_des / c), yaw)
        };
        self.attitude_target = target;

        let err = (x.q.conj() * target).canonical();
        let mut rates = err.vec() * (2.0 * self.gains.k_att);
        rates.z += yaw_rate;
        let out = self.limits.clamp([c, rates.x, rates.y, rates.z]);
        (out[0], Vec3::new(out[1], out[2], out[3]))
    }
}

/// Result of pushing one command through the actuation layer for one simulation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Actuated {
    pub rotor_speed_cmd: [f64; 4],
    pub thrusts: [f64; 4],
    pub saturated: bool,
}

/// The full actuation layer for one agent; holds the stateful rate and velocity loops.
#[derive(Debug, Clone)]
pub struct ActuationStack {
    nominal: PhysParams,
    rate: RateController,
    velocity: VelocityController,
    dt: f64,
}

impl ActuationStack {
    pub fn new(
        nominal: &PhysParams,
        gains: LowLevelGains,
        vel_gains: VelocityGains,
        limits: &CommandLimits,
        dt: f64,
    ) -> Self {
        Self {
            nominal: nominal.clone(),
            rate: RateController::new(gains, nominal, dt),
            velocity: VelocityController::new(vel_gains, nominal, limits),
            dt,
        }
    }

    pub fn reset(&mut self) {
        self.rate.reset();
        self.velocity.reset();
    }

    pub fn rate_controller(&self) -> &RateController {
        &self.rate
    }

    pub fn apply(&mut self, x: &QuadState, cmd: &Command) -> Actuated {
        match *cmd {
            Command::Srt(f) => {
                let thrusts: [f64; 4] = std::array::from_fn(|i| f[i].clamp(0.0, self.nominal.max_thrust));
                self.to_rotors(Allocation {
                    saturated: thrusts != f,
                    thrusts,
                })
            }
            Command::Ctbr { thrust, rates } => {
                let alloc = self.rate.update(&x.w, thrust, &rates);
                self.to_rotors(alloc)
            }
            Command::Lv { velocity, yaw_rate } => {
                let (c, rates) = self.velocity.update(x, &velocity, yaw_rate, self.dt);
                let alloc = self.rate.update(&x.w, c, &rates);
                self.to_rotors(alloc)
            }
        }
    }

    fn to_rotors(&self, alloc: Allocation) -> Actuated {
        Actuated {
            rotor_speed_cmd: alloc.thrusts.map(|f| thrust_to_speed(f, &self.nominal)),
            thrusts: alloc.thrusts,
            saturated: alloc.saturated,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{prop_wrench, step_symplectic_euler};

    #[test]
    fn hover_allocation() {
        let params = PhysParams::default();
        let mixer = Mixer::new(&params);
        let a = mixer.allocate(7.534, &Vec3::zeros());
        assert!(!a.saturated);
        for f in a.thrusts {
            assert!((f - 1.88352).abs() < 1e-4, "{f}");
        }
        let z = mixer.allocate(0.0, &Vec3::zeros());
        assert_eq!(z.thrusts.map(|f| f.abs()), [0.0; 4]);
    }

    #[test]
    fn yaw_torque_follows_spin_pattern() {
        let params = PhysParams::default();
        let mixer = Mixer::new(&params);
        let base = 7.534;
        let a = mixer.allocate(base, &Vec3::new(0.0, 0.0, 0.01));
        let sum: f64 = a.thrusts.iter().sum();
        assert!((sum - base).abs() < 1e-12);
        for i in 0..4 {
            let delta = a.thrusts[i] - base / 4.0;
            assert_eq!(delta.signum(), params.spin[i]);
        }
    }

    #[test]
    fn saturated_allocation_keeps_collective() {
        let params = PhysParams::default();
        let mixer = Mixer::new(&params);
        let a = mixer.allocate(10.0, &Vec3::new(5.0, 0.0, 0.0));
        assert!(a.saturated);
        assert!(a.thrusts.iter().all(|f| (0.0..=params.max_thrust).contains(f)));
        assert!((a.thrusts.iter().sum::<f64>() - 10.0).abs() < 1e-9);
        let (_, tau) = mixer.wrench(&a.thrusts);
        assert!(tau.x > 0.0);
    }

    #[test]
    fn thrust_speed_inverse() {
        let params = PhysParams::default();
        assert_eq!(thrust_to_speed(0.0, &params), 0.0);
        assert_eq!(thrust_to_speed(-1.0, &params), 0.0);
        assert!((thrust_to_speed(1.88352, &params) - 1097.8).abs() < 0.05);
        for f in [0.1, 1.0, 3.3, 7.9] {
            let o = thrust_to_speed(f, &params);
            assert!((params.thrust_coeff * o * o - f).abs() <= 1e-12);
        }
    }

    #[test]
    fn ctbr_hover_is_balanced() {
        let params = PhysParams::default();
        let mut ctrl = RateController::new(LowLevelGains::default(), &params, 1e-3);
        let a = ctrl.update(&Vec3::zeros(), 9.81, &Vec3::zeros());
        for f in a.thrusts {
            assert!((f - params.hover_thrust()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gain_scales_kill_torque() {
        let params = PhysParams::default();
        let gains = LowLevelGains::default().scaled(0.0, 0.0);
        let mut ctrl = RateController::new(gains, &params, 1e-3);
        ctrl.update(&Vec3::new(0.1, 0.0, 0.0), 9.81, &Vec3::new(3.0, -2.0, 1.0));
        let a = ctrl.update(&Vec3::new(0.5, 0.2, 0.0), 9.81, &Vec3::new(3.0, -2.0, 1.0));
        let (t, tau) = Mixer::new(&params).wrench(&a.thrusts);
        assert!((t - params.mass * 9.81).abs() < 1e-12);
        assert!(tau.norm() < 1e-12);
    }

    #[test]
    fn roll_rate_step_raises_positive_roll_rotors() {
        let params = PhysParams::default();
        let mut ctrl = RateController::new(LowLevelGains::default(), &params, 1e-3);
        let a = ctrl.update(&Vec3::zeros(), 9.81, &Vec3::new(2.0, 0.0, 0.0));
        let r = params.rotor_positions();
        for i in 0..4 {
            let delta = a.thrusts[i] - params.hover_thrust();
            // positive roll torque comes from rotors with positive y arm
            assert_eq!(delta > 0.0, r[i].y > 0.0, "rotor {i}: {delta}");
        }
        let (_, tau) = prop_wrench(&a.thrusts.map(|f| thrust_to_speed(f, &params)), &params);
        assert!(tau.x > 0.0);
    }

    #[test]
    fn lv_equilibrium_at_hover() {
        let params = PhysParams::default();
        let mut lv = VelocityController::new(VelocityGains::default(), &params, &CommandLimits::default());
        let x = QuadState::hover(Vec3::new(0.0, 0.0, 1.0), &params);
        let (c, w) = lv.update(&x, &Vec3::zeros(), 0.0, 1e-3);
        assert!((c - 9.81).abs() < 1e-12);
        assert!(w.norm() < 1e-12);
    }

    #[test]
    fn lv_forward_velocity_pitches_forward() {
        let params = PhysParams::default();
        let mut lv = VelocityController::new(VelocityGains::default(), &params, &CommandLimits::default());
        let x = QuadState::hover(Vec3::new(0.0, 0.0, 1.0), &params);
        let (c, w) = lv.update(&x, &Vec3::new(1.0, 0.0, 0.0), 0.0, 1e-3);
        assert!(w.y > 0.0, "{w:?}");
        assert!(w.x.abs() < 1e-12);
        assert!(c > 9.81);
    }

    #[test]
    fn lv_yaw_rate_decoupled() {
        let params = PhysParams::default();
        let mut lv = VelocityController::new(VelocityGains::default(), &params, &CommandLimits::default());
        let x = QuadState::hover(Vec3::new(0.0, 0.0, 1.0), &params);
        let (c, w) = lv.update(&x, &Vec3::zeros(), 0.8, 1e-3);
        assert!((c - 9.81).abs() < 1e-12);
        assert!((w.z - 0.8).abs() < 0.01, "{w:?}");
        assert!(w.x.abs() < 1e-9 && w.y.abs() < 1e-9);
    }

    #[test]
    fn lv_degenerate_thrust_keeps_previous_target() {
        let params = PhysParams::default();
        let mut lv = VelocityController::new(
            VelocityGains {
                k_vel: 1.0,
                k_att: 8.0,
            },
            &params,
            &CommandLimits::default(),
        );
        let x = QuadState::hover(Vec3::new(0.0, 0.0, 1.0), &params);
        // k_vel * (v_des - v) exactly cancels -g
        let (c, w) = lv.update(&x, &Vec3::new(0.0, 0.0, -9.81), 0.0, 1e-3);
        assert_eq!(c, 0.0);
        assert!(w.norm() < 1e-12);
    }

    #[test]
    fn command_box_round_trip() {
        let params = PhysParams::default();
        let limits = CommandLimits::default();
        for space in ActionSpace::ALL {
            let b = CommandBox::for_space(space, &params, &limits);
            assert_eq!(b.from_normalized(&[0.0; 4]), b.center());
            let a = b.from_normalized(&[0.5, -0.25, 1.0, -1.0]);
            let n = b.to_normalized(&a);
            assert!((n[0] - 0.5).abs() < 1e-12 && (n[3] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn srt_clamps_and_flags() {
        let params = PhysParams::default();
        let mut stack = ActuationStack::new(
            &params,
            LowLevelGains::default(),
            VelocityGains::default(),
            &CommandLimits::default(),
            1e-3,
        );
        let x = QuadState::hover(Vec3::new(0.0, 0.0, 1.0), &params);
        let out = stack.apply(&x, &Command::Srt([1.0, 20.0, -1.0, 2.0]));
        assert!(out.saturated);
        assert_eq!(out.thrusts, [1.0, 8.0, 0.0, 2.0]);
        let y = step_symplectic_euler(&x, &params, &out.rotor_speed_cmd, 1e-3);
        assert!(y.is_finite());
    }
}
