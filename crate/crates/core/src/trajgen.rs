//! Reference trajectories: analytic flat-output signals (hover, circles,
//! exponential-sine-squared random motions), the flatness map to full-state
//! references with per-action-space feed-forward, and trajectory metrics.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actuation::{thrust_to_speed, ActionSpace, Mixer};
use crate::dynamics::{prop_wrench, PhysParams, QuadState};
use crate::error::{Error, Result};
use crate::math::{Mat3, Quat, Vec3};

/// Default reference sampling interval, s.
pub const SAMPLE_DT: f64 = 0.02;

/// Position and its derivatives up to jerk, plus heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatOutput {
    pub p: Vec3,
    pub v: Vec3,
    pub a: Vec3,
    pub j: Vec3,
    pub yaw: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hover {
    pub position: Vec3,
    pub yaw: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: Vec3,
    pub radius: f64,
    /// Tilt of the circle plane about the world x-axis, rad.
    pub inclination: f64,
    /// Steady tangential speed, m/s.
    pub speed: f64,
    /// Smooth speed ramp-in from hover, s.
    pub ramp_time: f64,
    pub duration: f64,
    pub yaw: f64,
    pub yaw_rate: f64,
}

/// Periodic random motion whose per-axis harmonic variances follow the
/// spectrum of an exponential-sine-squared kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssRandom {
    pub origin: Vec3,
    /// Per-axis amplitude (standard deviation of the stationary process), m.
    pub amplitude: Vec3,
    pub base_period: f64,
    pub length_scale: f64,
    /// `[axis][harmonic] = (cos, sin)` coefficients with unit total variance per axis.
    pub coefficients: Vec<Vec<(f64, f64)>>,
    pub duration: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlatSignal {
    Hover(Hover),
    Circle(Circle),
    Ess(EssRandom),
}

impl FlatSignal {
    pub fn duration(&self) -> f64 {
        match self {
            FlatSignal::Hover(h) => h.duration,
            FlatSignal::Circle(c) => c.duration,
            FlatSignal::Ess(e) => e.duration,
        }
    }

    pub fn eval(&self, t: f64) -> FlatOutput {
        match self {
            FlatSignal::Hover(h) => FlatOutput {
                p: h.position,
                v: Vec3::zeros(),
                a: Vec3::zeros(),
                j: Vec3::zeros(),
                yaw: h.yaw,
                yaw_rate: 0.0,
            },
            FlatSignal::Circle(c) => c.eval(t),
            FlatSignal::Ess(e) => e.eval(t),
        }
    }
}

pub fn hover(position: Vec3, duration: f64) -> FlatSignal {
    FlatSignal::Hover(Hover {
        position,
        yaw: 0.0,
        duration,
    })
}

/// Septic smoothstep (zero first three derivatives at both ends, so the
/// reference snap and the rotor feed-forward stay continuous) with its first
/// three derivatives, plus its integral.
fn smoothstep(u: f64) -> (f64, f64, f64, f64, f64) {
    if u <= 0.0 {
        return (0.0, 0.0, 0.0, 0.0, 0.0);
    }
    if u >= 1.0 {
        return (0.5 + (u - 1.0), 1.0, 0.0, 0.0, 0.0);
    }
    let u2 = u * u;
    let u3 = u2 * u;
    let u4 = u3 * u;
    let integral = u4 * u * (7.0 - 14.0 * u + 10.0 * u2 - 2.5 * u3);
    let s = u4 * (35.0 - 84.0 * u + 70.0 * u2 - 20.0 * u3);
    let d1 = u3 * (140.0 - 420.0 * u + 420.0 * u2 - 140.0 * u3);
    let d2 = u2 * (420.0 - 1680.0 * u + 2100.0 * u2 - 840.0 * u3);
    let d3 = u * (840.0 - 5040.0 * u + 8400.0 * u2 - 4200.0 * u3);
    (integral, s, d1, d2, d3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleOptions {
    pub center: Option<Vec3>,
    pub ramp_time: f64,
    pub yaw: f64,
    pub yaw_rate: f64,
    /// Largest admissible acceleration magnitude, m/s².
    pub accel_limit: f64,
}

impl Default for CircleOptions {
    fn default() -> Self {
        Self {
            center: None,
            ramp_time: 2.0,
            yaw: 0.0,
            yaw_rate: 0.0,
            accel_limit: 35.0,
        }
    }
}

pub fn gen_circle(radius: f64, inclination: f64, speed: f64, duration: f64) -> Result<FlatSignal> {
    gen_circle_with(radius, inclination, speed, duration, &CircleOptions::default())
}

pub fn gen_circle_with(
    radius: f64,
    inclination: f64,
    speed: f64,
    duration: f64,
    opts: &CircleOptions,
) -> Result<FlatSignal> {
    if !(radius > 0.0) {
        return Err(Error::InvalidValue {
            key: "radius".into(),
            reason: format!("must be positive, got {radius}"),
        });
    }
    if !(speed >= 0.0) {
        return Err(Error::InvalidValue {
            key: "speed".into(),
            reason: format!("must be non-negative, got {speed}"),
        });
    }
    if !(duration > 0.0) || !(opts.ramp_time > 0.0) {
        return Err(Error::InvalidValue {
            key: "duration".into(),
            reason: "duration and ramp time must be positive".into(),
        });
    }
    let centripetal = speed * speed / radius;
    if centripetal > opts.accel_limit {
        return Err(Error::Infeasible(format!(
            "acceleration limit exceeded: circle needs {centripetal:.2} m/s² > {:.2} m/s²",
            opts.accel_limit
        )));
    }
    let center = opts
        .center
        .unwrap_or_else(|| Vec3::new(0.0, 0.0, 2.0 + radius * inclination.sin().abs()));
    let circle = Circle {
        center,
        radius,
        inclination,
        speed,
        ramp_time: opts.ramp_time,
        duration,
        yaw: opts.yaw,
        yaw_rate: opts.yaw_rate,
    };
    let peak = (0..=((duration / 0.01) as usize))
        .map(|k| circle.eval(k as f64 * 0.01).a.norm())
        .fold(0.0, f64::max);
    if peak > opts.accel_limit {
        return Err(Error::Infeasible(format!(
            "acceleration limit exceeded: circle ramp needs {peak:.2} m/s² > {:.2} m/s²",
            opts.accel_limit
        )));
    }
    Ok(FlatSignal::Circle(circle))
}

impl Circle {
    fn basis(&self) -> (Vec3, Vec3) {
        let (s, c) = self.inclination.sin_cos();
        (Vec3::x(), Vec3::new(0.0, c, s))
    }

    /// Phase angle and its first three derivatives.
    fn phase(&self, t: f64) -> (f64, f64, f64, f64) {
        let w = self.speed / self.radius;
        let tr = self.ramp_time;
        let (int, s, d1, d2, _) = smoothstep(t / tr);
        (w * tr * int, w * s, w * d1 / tr, w * d2 / (tr * tr))
    }

    fn eval(&self, t: f64) -> FlatOutput {
        let (e1, e2) = self.basis();
        let (th, th1, th2, th3) = self.phase(t);
        let (s, c) = th.sin_cos();
        let u = e1 * c + e2 * s;
        let up = -e1 * s + e2 * c;
        let r = self.radius;
        FlatOutput {
            p: self.center + u * r,
            v: up * (r * th1),
            a: (up * th2 - u * (th1 * th1)) * r,
            j: (up * (th3 - th1 * th1 * th1) - u * (3.0 * th1 * th2)) * r,
            yaw: self.yaw + self.yaw_rate * t,
            yaw_rate: self.yaw_rate,
        }
    }
}

/// Modified Bessel function of the first kind, integer order, by power series.
pub fn bessel_i(order: u32, x: f64) -> f64 {
    let half = 0.5 * x;
    let mut term = 1.0;
    for k in 1..=order {
        term *= half / k as f64;
    }
    let mut sum = term;
    let q = half * half;
    for m in 1..500u32 {
        term *= q / (m as f64 * (m + order) as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Normalized harmonic variances of the exponential-sine-squared kernel
/// `exp(-2 sin²(π τ / P) / ℓ²)` for harmonics `1..=n`.
pub fn ess_harmonic_variances(num_harmonics: usize, length_scale: f64) -> Vec<f64> {
    let x = 1.0 / (length_scale * length_scale);
    let raw: Vec<f64> = (1..=num_harmonics as u32)
        .map(|k| 2.0 * (-x).exp() * bessel_i(k, x))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|c| c / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EssOptions {
    /// Per-axis amplitude weights multiplied by the amplitude scale.
    pub axis_weights: Vec3,
    pub start: Vec3,
    /// Lowest altitude the generated path may reach, m.
    pub min_altitude: f64,
    pub duration: f64,
}

impl Default for EssOptions {
    fn default() -> Self {
        Self {
            axis_weights: Vec3::new(1.0, 1.0, 0.5),
            start: Vec3::new(0.0, 0.0, 2.0),
            min_altitude: 1.0,
            duration: 10.0,
        }
    }
}

pub fn gen_ess_random(
    num_harmonics: usize,
    base_period: f64,
    amplitude_scale: f64,
    length_scale: f64,
    seed: u64,
) -> Result<FlatSignal> {
    gen_ess_random_with(
        num_harmonics,
        base_period,
        amplitude_scale,
        length_scale,
        seed,
        &EssOptions::default(),
    )
}

pub fn gen_ess_random_with(
    num_harmonics: usize,
    base_period: f64,
    amplitude_scale: f64,
    length_scale: f64,
    seed: u64,
    opts: &EssOptions,
) -> Result<FlatSignal> {
    if !(base_period > 0.0) {
        return Err(Error::InvalidValue {
            key: "base_period".into(),
            reason: format!("must be positive, got {base_period}"),
        });
    }
    if !(length_scale > 0.0) || num_harmonics == 0 {
        return Err(Error::InvalidValue {
            key: "length_scale".into(),
            reason: "length scale must be positive and at least one harmonic used".into(),
        });
    }
    let variances = ess_harmonic_variances(num_harmonics, length_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coefficients: Vec<Vec<(f64, f64)>> = (0..3)
        .map(|_| {
            variances
                .iter()
                .map(|var| {
                    let sd = var.sqrt();
                    let a: f64 = StandardNormal.sample(&mut rng);
                    let b: f64 = StandardNormal.sample(&mut rng);
                    (a * sd, b * sd)
                })
                .collect()
        })
        .collect();
    let mut ess = EssRandom {
        origin: opts.start,
        amplitude: opts.axis_weights * amplitude_scale,
        base_period,
        length_scale,
        coefficients,
        duration: opts.duration,
        seed,
    };
    let lowest = (0..=((opts.duration / 0.01) as usize))
        .map(|k| ess.eval(k as f64 * 0.01).p.z)
        .fold(f64::INFINITY, f64::min);
    if lowest < opts.min_altitude {
        ess.origin.z += opts.min_altitude - lowest;
    }
    Ok(FlatSignal::Ess(ess))
}

impl EssRandom {
    fn eval(&self, t: f64) -> FlatOutput {
        let w0 = 2.0 * std::f64::consts::PI / self.base_period;
        let mut d = [[0.0f64; 3]; 4];
        let mut d0 = [0.0f64; 3];
        for (axis, coeffs) in self.coefficients.iter().enumerate() {
            for (k, (a, b)) in coeffs.iter().enumerate() {
                let w = w0 * (k + 1) as f64;
                let (s, c) = (w * t).sin_cos();
                // derivatives of a cos(wt) + b sin(wt)
                d[0][axis] += a * c + b * s;
                d[1][axis] += w * (-a * s + b * c);
                d[2][axis] += -w * w * (a * c + b * s);
                d[3][axis] += w * w * w * (a * s - b * c);
                d0[axis] += a;
            }
        }
        let amp = self.amplitude;
        let vec = |v: [f64; 3]| Vec3::new(v[0], v[1], v[2]).component_mul(&amp);
        FlatOutput {
            p: self.origin + vec([d[0][0] - d0[0], d[0][1] - d0[1], d[0][2] - d0[2]]),
            v: vec(d[1]),
            a: vec(d[2]),
            j: vec(d[3]),
            yaw: 0.0,
            yaw_rate: 0.0,
        }
    }
}

/// Full-state reference sample with feed-forward inputs for every action space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    pub a: Vec3,
    pub q: Quat,
    pub w: Vec3,
    /// Rotor thrusts realizing the reference, N.
    pub thrusts: [f64; 4],
    /// Mass-normalized collective thrust, m/s².
    pub collective: f64,
    pub yaw_rate: f64,
}

impl ReferencePoint {
    pub fn u_ref(&self, space: ActionSpace) -> [f64; 4] {
        match space {
            ActionSpace::Srt => self.thrusts,
            ActionSpace::Ctbr => [self.collective, self.w.x, self.w.y, self.w.z],
            ActionSpace::Lv => [self.v.x, self.v.y, self.v.z, self.yaw_rate],
        }
    }

    /// Simulator state matching this reference, rotors at the feed-forward speeds.
    pub fn to_state(&self, params: &PhysParams) -> QuadState {
        QuadState {
            p: self.p,
            q: self.q,
            v: self.v,
            w: self.w,
            rotor_speeds: self.thrusts.map(|f| thrust_to_speed(f, params).min(params.max_rotor_speed())),
        }
    }
}

/// Attitude and body rates from thrust direction, jerk and heading.
fn attitude_and_rates(flat: &FlatOutput, gravity: &Vec3, t: f64) -> Result<(Mat3, Vec3, f64)> {
    let thrust = flat.a - gravity;
    let c = thrust.norm();
    if c < 1e-6 {
        return Err(Error::FreeFall { t });
    }
    let z_b = thrust / c;
    let (sy, cy) = flat.yaw.sin_cos();
    let x_c = Vec3::new(cy, sy, 0.0);
    let y_c = Vec3::new(-sy, cy, 0.0);
    let y_raw = z_b.cross(&x_c);
    let n = y_raw.norm();
    if n < 1e-9 {
        return Err(Error::Infeasible(format!(
            "thrust axis aligned with heading at t = {t} s"
        )));
    }
    let y_b = y_raw / n;
    let x_b = y_b.cross(&z_b);
    let z_dot = (flat.j - z_b * z_b.dot(&flat.j)) / c;
    let wx = -z_dot.dot(&y_b);
    let wy = z_dot.dot(&x_b);
    // from d/dt (y_b · x_c) = 0
    let wz = (wx * z_b.dot(&x_c) + flat.yaw_rate * y_b.dot(&y_c)) / x_b.dot(&x_c);
    Ok((Mat3::from_columns(&[x_b, y_b, z_b]), Vec3::new(wx, wy, wz), c))
}

/// Step used for the central difference of body rates in the torque feed-forward.
const RATE_FD_STEP: f64 = 1e-4;

/// Differential-flatness map from the flat outputs at `t` to a full reference.
///
/// Drag is ignored and rotor thrusts are not clipped, so [`validate`] can report
/// references the airframe cannot fly. Rotor thrusts include the torque feed-forward
/// `J ω̇ + ω × J ω`; `ω̇` comes from a central difference of the analytic rates.
pub fn flatness_map(sig: &FlatSignal, params: &PhysParams, t: f64) -> Result<ReferencePoint> {
    let flat = sig.eval(t);
    let (rot, w, c) = attitude_and_rates(&flat, &params.gravity, t)?;
    let h = RATE_FD_STEP;
    let (_, w_plus, _) = attitude_and_rates(&sig.eval(t + h), &params.gravity, t + h)?;
    let (_, w_minus, _) = attitude_and_rates(&sig.eval(t - h), &params.gravity, t - h)?;
    let w_dot = (w_plus - w_minus) / (2.0 * h);
    let jw = params.inertia.component_mul(&w);
    let torque = params.inertia.component_mul(&w_dot) + w.cross(&jw);
    let thrusts = Mixer::new(params).invert(params.mass * c, &torque);
    Ok(ReferencePoint {
        t,
        p: flat.p,
        v: flat.v,
        a: flat.a,
        q: Quat::from_rotmat(&rot),
        w,
        thrusts,
        collective: c,
        yaw_rate: flat.yaw_rate,
    })
}

/// Open-loop rotor-speed command sequence realizing the SRT feed-forward of a
/// signal in the 1 kHz simulator.
///
/// The generator keeps its own prediction of body rates and rotor speeds from
/// the commands it issued (never from the plant) and inverts the motor lag so
/// the rates entering each attitude update equal the reference rates at the
/// middle of the step. Starts from the reference state at `t0`.
#[derive(Debug, Clone)]
pub struct FeedforwardReplay<'a> {
    sig: &'a FlatSignal,
    params: &'a PhysParams,
    mixer: Mixer,
    dt: f64,
    t: f64,
    v_pred: Vec3,
    w_pred: Vec3,
    rotor_pred: [f64; 4],
}

impl<'a> FeedforwardReplay<'a> {
    pub fn new(sig: &'a FlatSignal, params: &'a PhysParams, t0: f64, dt: f64) -> Result<Self> {
        let start = flatness_map(sig, params, t0)?.to_state(params);
        Ok(Self {
            sig,
            params,
            mixer: Mixer::new(params),
            dt,
            t: t0,
            v_pred: start.v,
            w_pred: start.w,
            rotor_pred: start.rotor_speeds,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// Rotor-speed command for the step starting at [`Self::time`].
    pub fn next_command(&mut self) -> Result<[f64; 4]> {
        let (params, dt) = (self.params, self.dt);
        let now = flatness_map(self.sig, params, self.t)?;
        let (force, torque) = prop_wrench(&self.rotor_pred, params);
        let j = params.inertia;
        let w = self.w_pred;
        let w_next = w + (torque - w.cross(&j.component_mul(&w))).component_div(&j) * dt;
        let v_next = self.v_pred + (now.q.rotate(&force) / params.mass + params.gravity) * dt;

        let t_next = self.t + dt;
        let next = flatness_map(self.sig, params, t_next)?;
        let mid = flatness_map(self.sig, params, t_next + 0.5 * dt)?;
        // collective that brings the along-thrust velocity to the mid-step reference
        let z_b = next.q.rotate(&Vec3::z());
        let accel = (mid.v - v_next) / dt - params.gravity;
        let thrust = params.mass * accel.dot(&z_b).max(0.0);
        let target = mid.w;
        let tau = j.component_mul(&((target - w_next) / dt)) + w_next.cross(&j.component_mul(&w_next));
        let thrusts = self.mixer.invert(thrust, &tau);

        let max_speed = params.max_rotor_speed();
        let decay = (-dt / params.motor_time_constant).exp();
        let mut cmd = [0.0; 4];
        for i in 0..4 {
            let want = thrust_to_speed(thrusts[i], params);
            cmd[i] = ((want - self.rotor_pred[i] * decay) / (1.0 - decay)).clamp(0.0, max_speed);
            self.rotor_pred[i] = (cmd[i] + (self.rotor_pred[i] - cmd[i]) * decay).clamp(0.0, max_speed);
        }
        self.v_pred = v_next;
        self.w_pred = w_next;
        self.t = t_next;
        Ok(cmd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrajMeta {
    pub name: String,
    pub dt: f64,
    pub duration: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub c_max: f64,
    pub omega_max: f64,
    pub seed: Option<u64>,
    pub generator: Option<FlatSignal>,
}

/// Uniformly sampled reference trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<ReferencePoint>,
    pub meta: TrajMeta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub v_max: f64,
    pub a_max: f64,
    pub c_max: f64,
    pub omega_max: f64,
}

pub fn traj_metrics(points: &[ReferencePoint]) -> Metrics {
    let mut m = Metrics {
        v_max: 0.0,
        a_max: 0.0,
        c_max: 0.0,
        omega_max: 0.0,
    };
    for p in points {
        m.v_max = m.v_max.max(p.v.norm());
        m.a_max = m.a_max.max(p.a.norm());
        m.c_max = m.c_max.max(p.collective);
        m.omega_max = m.omega_max.max(p.w.norm());
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub v_max: f64,
    pub a_max: f64,
    pub max_thrust: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            v_max: 20.0,
            a_max: 35.0,
            max_thrust: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Velocity { max: f64, limit: f64 },
    Acceleration { max: f64, limit: f64 },
    RotorThrust { t: f64, rotor: usize, thrust: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Velocity { max, limit } => write!(f, "velocity limit: {max:.2} > {limit:.2} m/s"),
            Violation::Acceleration { max, limit } => {
                write!(f, "acceleration limit: {max:.2} > {limit:.2} m/s²")
            }
            Violation::RotorThrust { t, rotor, thrust } => {
                write!(f, "rotor thrust limit: rotor {} at t = {t:.2} s needs {thrust:.3} N", rotor + 1)
            }
        }
    }
}

pub fn validate(points: &[ReferencePoint], limits: &Limits) -> Vec<Violation> {
    let m = traj_metrics(points);
    let mut out = Vec::new();
    if m.v_max > limits.v_max {
        out.push(Violation::Velocity {
            max: m.v_max,
            limit: limits.v_max,
        });
    }
    if m.a_max > limits.a_max {
        out.push(Violation::Acceleration {
            max: m.a_max,
            limit: limits.a_max,
        });
    }
    'outer: for p in points {
        for (i, f) in p.thrusts.iter().enumerate() {
            if !(0.0..=limits.max_thrust).contains(f) {
                out.push(Violation::RotorThrust {
                    t: p.t,
                    rotor: i,
                    thrust: *f,
                });
                break 'outer;
            }
        }
    }
    out
}

impl Trajectory {
    /// Samples `sig` every `dt` seconds over its duration.
    pub fn sample(sig: &FlatSignal, params: &PhysParams, dt: f64, name: &str) -> Result<Self> {
        let n = (sig.duration() / dt + 1e-9).floor() as usize;
        let points = (0..=n)
            .map(|k| flatness_map(sig, params, k as f64 * dt))
            .collect::<Result<Vec<_>>>()?;
        let seed = match sig {
            FlatSignal::Ess(e) => Some(e.seed),
            _ => None,
        };
        Ok(Self::from_points(points, dt, name, seed, Some(sig.clone())))
    }

    pub fn from_points(
        points: Vec<ReferencePoint>,
        dt: f64,
        name: &str,
        seed: Option<u64>,
        generator: Option<FlatSignal>,
    ) -> Self {
        let m = traj_metrics(&points);
        let duration = points.last().map_or(0.0, |p| p.t);
        Self {
            meta: TrajMeta {
                name: name.to_string(),
                dt,
                duration,
                v_max: m.v_max,
                a_max: m.a_max,
                c_max: m.c_max,
                omega_max: m.omega_max,
                seed,
                generator,
            },
            points,
        }
    }

    pub fn duration(&self) -> f64 {
        self.meta.duration
    }

    pub fn metrics(&self) -> Metrics {
        traj_metrics(&self.points)
    }

    pub fn validate(&self, limits: &Limits) -> Vec<Violation> {
        validate(&self.points, limits)
    }

    /// Reference at an arbitrary time: cubic Hermite in position and velocity,
    /// linear in everything else, normalized linear blend for attitude. Clamped to the ends.
    pub fn at(&self, t: f64) -> ReferencePoint {
        let n = self.points.len();
        debug_assert!(n > 0);
        if n == 1 || t <= self.points[0].t {
            let mut p = self.points[0];
            p.t = t;
            return p;
        }
        let last = self.points[n - 1];
        if t >= last.t {
            let mut p = last;
            p.t = t;
            return p;
        }
        let dt = self.meta.dt;
        let k = (((t - self.points[0].t) / dt).floor() as usize).min(n - 2);
        let (a, b) = (&self.points[k], &self.points[k + 1]);
        let h = b.t - a.t;
        let s = ((t - a.t) / h).clamp(0.0, 1.0);
        let lerp = |x: &Vec3, y: &Vec3| x + (y - x) * s;
        let (s2, s3) = (s * s, s * s * s);
        let (h00, h10, h01, h11) = (
            2.0 * s3 - 3.0 * s2 + 1.0,
            s3 - 2.0 * s2 + s,
            -2.0 * s3 + 3.0 * s2,
            s3 - s2,
        );
        let p = a.p * h00 + a.v * (h10 * h) + b.p * h01 + b.v * (h11 * h);
        let v = a.v * h00 + a.a * (h10 * h) + b.v * h01 + b.a * (h11 * h);
        let qb = if a.q.dot(&b.q) < 0.0 { -b.q } else { b.q };
        let q = (a.q.scale(1.0 - s) + qb.scale(s)).normalized();
        ReferencePoint {
            t,
            p,
            v,
            a: lerp(&a.a, &b.a),
            q,
            w: lerp(&a.w, &b.w),
            thrusts: std::array::from_fn(|i| a.thrusts[i] + (b.thrusts[i] - a.thrusts[i]) * s),
            collective: a.collective + (b.collective - a.collective) * s,
            yaw_rate: a.yaw_rate + (b.yaw_rate - a.yaw_rate) * s,
        }
    }
}

pub const CSV_HEADER: [&str; 21] = [
    "t", "px", "py", "pz", "vx", "vy", "vz", "ax", "ay", "az", "qw", "qx", "qy", "qz", "wx", "wy",
    "wz", "u1", "u2", "u3", "u4",
];

pub fn write_csv<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for p in &traj.points {
        let row = [
            p.t, p.p.x, p.p.y, p.p.z, p.v.x, p.v.y, p.v.z, p.a.x, p.a.y, p.a.z, p.q.w, p.q.x,
            p.q.y, p.q.z, p.w.x, p.w.y, p.w.z, p.thrusts[0], p.thrusts[1], p.thrusts[2],
            p.thrusts[3],
        ];
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the trajectory CSV format. Collective thrust is recomputed from the
/// acceleration and `params.gravity`, yaw rate from the sampled attitudes.
pub fn read_csv<R: Read>(input: R, params: &PhysParams, name: &str) -> Result<Trajectory> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers()?.clone();
    if header.len() != CSV_HEADER.len() || header.iter().zip(CSV_HEADER).any(|(a, b)| a.trim() != b) {
        return Err(Error::TrajectoryFormat(format!(
            "expected header `{}`",
            CSV_HEADER.join(",")
        )));
    }
    let mut points: Vec<ReferencePoint> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::TrajectoryFormat(format!(
                "row {}: expected {} fields, got {}",
                line + 1,
                CSV_HEADER.len(),
                rec.len()
            )));
        }
        let mut v = [0.0; 21];
        for (i, field) in rec.iter().enumerate() {
            v[i] = field.trim().parse::<f64>().map_err(|_| {
                Error::TrajectoryFormat(format!("row {}: column `{}` is not a number", line + 1, CSV_HEADER[i]))
            })?;
            if !v[i].is_finite() {
                return Err(Error::TrajectoryFormat(format!(
                    "row {}: column `{}` is not finite",
                    line + 1,
                    CSV_HEADER[i]
                )));
            }
        }
        let q = Quat::new(v[10], v[11], v[12], v[13]);
        if !q.is_unit(1e-6) {
            return Err(Error::TrajectoryFormat(format!("row {}: quaternion is not unit-norm", line + 1)));
        }
        let a = Vec3::new(v[7], v[8], v[9]);
        points.push(ReferencePoint {
            t: v[0],
            p: Vec3::new(v[1], v[2], v[3]),
            v: Vec3::new(v[4], v[5], v[6]),
            a,
            q: q.normalized(),
            w: Vec3::new(v[14], v[15], v[16]),
            thrusts: [v[17], v[18], v[19], v[20]],
            collective: (a - params.gravity).norm(),
            yaw_rate: 0.0,
        });
    }
    if points.is_empty() {
        return Err(Error::TrajectoryFormat("no samples".into()));
    }
    let dt = if points.len() > 1 { points[1].t - points[0].t } else { SAMPLE_DT };
    if !(dt > 0.0) {
        return Err(Error::TrajectoryFormat("time column must be strictly increasing".into()));
    }
    for (k, pair) in points.windows(2).enumerate() {
        let step = pair[1].t - pair[0].t;
        if !(step > 0.0) || (step - dt).abs() > 1e-6 * dt.max(1.0) {
            return Err(Error::TrajectoryFormat(format!(
                "row {}: sampling must be uniform (dt = {dt})",
                k + 2
            )));
        }
    }
    // heading of the horizontal axis orthogonal to the body y-axis
    let yaws: Vec<f64> = points
        .iter()
        .map(|p| {
            let y_b = p.q.rotate(&Vec3::y());
            (-y_b.x).atan2(y_b.y)
        })
        .collect();
    let n = points.len();
    for k in 0..n {
        let (i, j) = (k.saturating_sub(1), (k + 1).min(n - 1));
        if i != j {
            let mut d = yaws[j] - yaws[i];
            d = (d + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
            points[k].yaw_rate = d / (points[j].t - points[i].t);
        }
    }
    Ok(Trajectory::from_points(points, dt, name, None, None))
}

pub fn write_meta<W: Write>(meta: &TrajMeta, mut out: W) -> Result<()> {
    let text = toml::to_string(meta).map_err(|e| Error::Config(e.to_string()))?;
    out.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_meta(text: &str) -> Result<TrajMeta> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

/// Sampling ranges of the training-set generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSetConfig {
    pub duration: f64,
    /// Share of circles among non-hover trajectories.
    pub circle_fraction: f64,
    pub radius_range: (f64, f64),
    pub period_range: (f64, f64),
    pub length_scale_range: (f64, f64),
    pub num_harmonics: usize,
    pub max_speed: f64,
    pub limits: Limits,
}

impl Default for TrainingSetConfig {
    fn default() -> Self {
        Self {
            duration: 10.0,
            circle_fraction: 0.35,
            radius_range: (1.5, 12.0),
            period_range: (6.0, 16.0),
            length_scale_range: (0.6, 1.5),
            num_harmonics: 8,
            max_speed: 20.0,
            limits: Limits::default(),
        }
    }
}

fn random_circle(rng: &mut ChaCha8Rng, cfg: &TrainingSetConfig) -> Result<FlatSignal> {
    let radius = rng.random_range(cfg.radius_range.0..=cfg.radius_range.1);
    let inclination = rng.random_range(-0.6..=0.6);
    let v_cap = cfg.max_speed.min((cfg.limits.a_max * 0.95 * radius).sqrt());
    let speed = rng.random_range(0.0..=v_cap);
    let opts = CircleOptions {
        ramp_time: (speed / 3.0).max(1.5),
        accel_limit: cfg.limits.a_max,
        ..CircleOptions::default()
    };
    gen_circle_with(radius, inclination, speed, cfg.duration, &opts)
}

fn random_ess(rng: &mut ChaCha8Rng, cfg: &TrainingSetConfig, seed: u64) -> Result<FlatSignal> {
    let period = rng.random_range(cfg.period_range.0..=cfg.period_range.1);
    let ell = rng.random_range(cfg.length_scale_range.0..=cfg.length_scale_range.1);
    let target_speed = rng.random_range(0.3..=cfg.max_speed);
    ess_with_peak_speed(cfg, period, ell, target_speed, seed)
}

/// ESS path rescaled so its peak speed is `target_speed`, or less if acceleration binds.
fn ess_with_peak_speed(cfg: &TrainingSetConfig, period: f64, ell: f64, target_speed: f64, seed: u64) -> Result<FlatSignal> {
    let opts = EssOptions {
        duration: cfg.duration,
        ..EssOptions::default()
    };
    let unit = gen_ess_random_with(cfg.num_harmonics, period, 1.0, ell, seed, &opts)?;
    let (mut v1, mut a1) = (0.0f64, 0.0f64);
    for k in 0..=((cfg.duration / 0.01) as usize) {
        let f = unit.eval(k as f64 * 0.01);
        v1 = v1.max(f.v.norm());
        a1 = a1.max(f.a.norm());
    }
    let scale = (target_speed / v1).min(cfg.limits.a_max * 0.95 / a1);
    gen_ess_random_with(cfg.num_harmonics, period, scale, ell, seed, &opts)
}

/// Aggressiveness bins of the evaluation trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalBin {
    Slow,
    Mid,
    Aggressive,
}

impl EvalBin {
    pub const ALL: [EvalBin; 3] = [EvalBin::Slow, EvalBin::Mid, EvalBin::Aggressive];

    pub fn name(self) -> &'static str {
        match self {
            EvalBin::Slow => "slow",
            EvalBin::Mid => "mid",
            EvalBin::Aggressive => "aggressive",
        }
    }

    /// Target peak speed, m/s.
    pub fn peak_speed(self) -> f64 {
        match self {
            EvalBin::Slow => 3.0,
            EvalBin::Mid => 8.0,
            EvalBin::Aggressive => 15.0,
        }
    }
}

/// Random evaluation trajectory of the given bin. Seeds that give an infeasible path
/// are skipped deterministically.
pub fn eval_trajectory(bin: EvalBin, seed: u64, params: &PhysParams, cfg: &TrainingSetConfig) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE7A1_0000 ^ bin as u64);
    for attempt in 0..64u64 {
        let period = rng.random_range(cfg.period_range.0..=cfg.period_range.1);
        let ell = rng.random_range(cfg.length_scale_range.0..=cfg.length_scale_range.1);
        let Ok(sig) = ess_with_peak_speed(cfg, period, ell, bin.peak_speed(), seed.wrapping_add(attempt << 32)) else {
            continue;
        };
        let Ok(traj) = Trajectory::sample(&sig, params, SAMPLE_DT, &format!("eval_{}_{seed}", bin.name())) else {
            continue;
        };
        if traj.validate(&cfg.limits).is_empty() {
            return Ok(traj);
        }
    }
    Err(Error::Infeasible(format!("no feasible {} trajectory for seed {seed}", bin.name())))
}

/// Flat output and sampled trajectory for index `i` of the training set with `seed`.
/// Index 0 is a hover.
pub fn training_signal(
    i: usize,
    seed: u64,
    params: &PhysParams,
    cfg: &TrainingSetConfig,
) -> Result<(FlatSignal, Trajectory)> {
    if i == 0 {
        let sig = hover(Vec3::new(0.0, 0.0, 2.0), cfg.duration);
        let traj = Trajectory::sample(&sig, params, SAMPLE_DT, "train_0000_hover")?;
        return Ok((sig, traj));
    }
    let sub_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
    for attempt in 0..64u64 {
        let is_circle = rng.random_bool(cfg.circle_fraction);
        let sig = if is_circle {
            random_circle(&mut rng, cfg)
        } else {
            random_ess(&mut rng, cfg, sub_seed.wrapping_add(attempt << 32))
        };
        let Ok(sig) = sig else { continue };
        let kind = if is_circle { "circle" } else { "ess" };
        let Ok(traj) = Trajectory::sample(&sig, params, SAMPLE_DT, &format!("train_{i:04}_{kind}")) else {
            continue;
        };
        if traj.validate(&cfg.limits).is_empty() {
            return Ok((sig, traj));
        }
    }
    Err(Error::Infeasible(format!("no feasible trajectory found for index {i}")))
}

/// Deterministic batch of feasible training trajectories. The first one is a hover.
pub fn training_set(
    count: usize,
    seed: u64,
    params: &PhysParams,
    cfg: &TrainingSetConfig,
) -> Result<Vec<Trajectory>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| training_signal(i, seed, params, cfg).map(|(_, traj)| traj))
        .collect()
}
