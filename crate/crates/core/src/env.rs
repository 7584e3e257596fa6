//! Tracking environment: a 50 Hz control loop over the 1 kHz simulator with
//! sliding-window observations, quadratic tracking reward, crash termination,
//! optional observation noise, actuation latency and domain randomization.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::actuation::{
    ActionSpace, Actuated, ActuationStack, Command, CommandBox, CommandLimits, LowLevelGains,
    VelocityGains,
};
use crate::dynamics::{
    sample_params_with, step_symplectic_euler, PhysParams, QuadState, RandomizationSpec,
};
use crate::error::{Error, Result};
use crate::math::{Quat, Vec3};
use crate::trajgen::{ReferencePoint, Trajectory};

/// Values per history entry: z, velocity, attitude matrix, body rates.
pub const STATE_ENTRY: usize = 16;
/// Values per reference entry: relative position, relative velocity, attitude matrix, body rates.
pub const REF_ENTRY: usize = 18;
pub const ACTION_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub enabled: bool,
    /// Standard deviations: m, m/s, rad/s, degrees.
    pub position: f64,
    pub velocity: f64,
    pub rates: f64,
    pub attitude_deg: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            position: 0.005,
            velocity: 0.01,
            rates: 0.01,
            attitude_deg: 0.3,
        }
    }
}

/// Uniform bounds of the initial-state perturbation at reset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Perturbation {
    pub position: f64,
    pub velocity: f64,
    /// Largest rotation angle, degrees.
    pub attitude_deg: f64,
    pub rates: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            position: 0.2,
            velocity: 0.2,
            attitude_deg: 10.0,
            rates: 0.2,
        }
    }
}

impl Perturbation {
    pub fn none() -> Self {
        Self {
            position: 0.0,
            velocity: 0.0,
            attitude_deg: 0.0,
            rates: 0.0,
        }
    }

    /// Adds a uniform draw within the bounds; attitude turns about a random axis.
    pub fn apply<R: Rng>(&self, x: &mut QuadState, rng: &mut R) {
        let mut uniform_vec = |h: f64| -> Vec3 {
            if h == 0.0 {
                Vec3::zeros()
            } else {
                Vec3::new(
                    rng.random_range(-h..=h),
                    rng.random_range(-h..=h),
                    rng.random_range(-h..=h),
                )
            }
        };
        x.p += uniform_vec(self.position);
        x.v += uniform_vec(self.velocity);
        x.w += uniform_vec(self.rates);
        if self.attitude_deg > 0.0 {
            let axis = loop {
                let a = uniform_vec(1.0);
                let n = a.norm();
                if n > 1e-3 && n <= 1.0 {
                    break a / n;
                }
            };
            let angle = rng.random_range(0.0..=self.attitude_deg.to_radians());
            x.q = (x.q * Quat::from_axis_angle(&axis, angle)).normalized();
        }
    }
}

/// Diagonal reward weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub position: f64,
    pub attitude: f64,
    pub velocity: f64,
    pub rates: f64,
    pub action: f64,
    pub crash_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            position: 0.1,
            attitude: 0.02,
            velocity: 0.002,
            rates: 0.01,
            action: 0.001,
            crash_penalty: 500.0,
        }
    }
}

/// Fixed per-group observation scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObsScales {
    pub position: f64,
    pub velocity: f64,
    pub rates: f64,
    pub attitude: f64,
}

impl Default for ObsScales {
    fn default() -> Self {
        Self {
            position: 0.1,
            velocity: 0.05,
            rates: 1.0 / 12.0,
            attitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub action_space: ActionSpace,
    /// History length H.
    pub history: usize,
    /// Reference window length R.
    pub reference: usize,
    pub control_dt: f64,
    pub sim_dt: f64,
    /// Actuation latency, s; a multiple of `sim_dt`.
    pub latency: f64,
    pub action_history: bool,
    /// Include the gravity bias in the privileged block (8 values instead of 7).
    pub privileged_gravity: bool,
    pub randomize: bool,
    pub randomization: RandomizationSpec,
    pub perturbation: Perturbation,
    pub noise: NoiseConfig,
    pub reward: RewardConfig,
    pub scales: ObsScales,
    pub nominal: PhysParams,
    pub gains: LowLevelGains,
    pub velocity_gains: VelocityGains,
    pub limits: CommandLimits,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            action_space: ActionSpace::Ctbr,
            history: 10,
            reference: 10,
            control_dt: 0.02,
            sim_dt: 0.001,
            latency: 0.0,
            action_history: true,
            privileged_gravity: true,
            randomize: false,
            randomization: RandomizationSpec::default(),
            perturbation: Perturbation::default(),
            noise: NoiseConfig::default(),
            reward: RewardConfig::default(),
            scales: ObsScales::default(),
            nominal: PhysParams::default(),
            gains: LowLevelGains::default(),
            velocity_gains: VelocityGains::default(),
            limits: CommandLimits::default(),
        }
    }
}

fn steps_of(span: f64, dt: f64, key: &str) -> Result<usize> {
    let n = span / dt;
    let r = n.round();
    if !(n >= 0.0) || (n - r).abs() > 1e-6 {
        return Err(Error::InvalidValue {
            key: key.into(),
            reason: format!("{span} s is not a non-negative multiple of {dt} s"),
        });
    }
    Ok(r as usize)
}

impl EnvConfig {
    /// Training preset with domain randomization, perturbed starts and observation noise.
    pub fn randomized(action_space: ActionSpace) -> Self {
        Self {
            action_space,
            randomize: true,
            noise: NoiseConfig {
                enabled: true,
                ..NoiseConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.reference == 0 {
            return Err(Error::InvalidValue {
                key: if self.history == 0 { "history" } else { "reference" }.into(),
                reason: "window length must be at least 1".into(),
            });
        }
        if !(self.sim_dt > 0.0) {
            return Err(Error::InvalidValue {
                key: "sim_dt".into(),
                reason: "must be positive".into(),
            });
        }
        if steps_of(self.control_dt, self.sim_dt, "control_dt")? == 0 {
            return Err(Error::InvalidValue {
                key: "control_dt".into(),
                reason: "must be at least one simulation step".into(),
            });
        }
        steps_of(self.latency, self.sim_dt, "latency")?;
        self.nominal.validate()?;
        self.randomization.validate()?;
        self.gains.validate()
    }

    pub fn substeps(&self) -> usize {
        steps_of(self.control_dt, self.sim_dt, "control_dt").unwrap_or(1).max(1)
    }

    pub fn latency_steps(&self) -> usize {
        steps_of(self.latency, self.sim_dt, "latency").unwrap_or(0)
    }

    pub fn dims(&self) -> ObsDims {
        let per_state = STATE_ENTRY + if self.action_history { ACTION_DIM } else { 0 };
        ObsDims {
            state: self.history * per_state,
            reference: self.reference * REF_ENTRY,
            privileged: if self.privileged_gravity { 8 } else { 7 },
        }
    }

    pub fn command_box(&self) -> CommandBox {
        CommandBox::for_space(self.action_space, &self.nominal, &self.limits)
    }
}

/// Block sizes of the observation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsDims {
    /// State history (with action history when enabled).
    pub state: usize,
    pub reference: usize,
    /// Critic-only block.
    pub privileged: usize,
}

impl ObsDims {
    pub fn actor(&self) -> usize {
        self.state + self.reference
    }

    pub fn critic(&self) -> usize {
        self.state + self.privileged + self.reference
    }
}

/// Actor input `[state | reference]` and the critic-only privileged block.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub actor: Vec<f64>,
    pub privileged: Vec<f64>,
}

impl Observation {
    /// Critic input `[state | privileged | reference]`.
    pub fn critic(&self, dims: &ObsDims) -> Vec<f64> {
        let mut v = Vec::with_capacity(dims.critic());
        v.extend_from_slice(&self.actor[..dims.state]);
        v.extend_from_slice(&self.privileged);
        v.extend_from_slice(&self.actor[dims.state..]);
        v
    }
}

/// Quadratic tracking reward with the crash penalty.
pub fn compute_reward(
    x: &QuadState,
    x_ref: &ReferencePoint,
    u: &[f64; 4],
    u_ref: &[f64; 4],
    crashed: bool,
    w: &RewardConfig,
) -> f64 {
    let ep = (x.p - x_ref.p).norm_squared();
    let ev = (x.v - x_ref.v).norm_squared();
    let ew = (x.w - x_ref.w).norm_squared();
    let ea = (x.q.to_rotmat() - x_ref.q.to_rotmat()).norm_squared();
    let eu: f64 = u.iter().zip(u_ref).map(|(a, b)| (a - b) * (a - b)).sum();
    let mut r = -(w.position * ep + w.attitude * ea + w.velocity * ev + w.rates * ew) - w.action * eu;
    if crashed {
        r -= w.crash_penalty;
    }
    r
}

fn rotmat_row_major(q: &Quat) -> [f64; 9] {
    let m = q.to_rotmat();
    std::array::from_fn(|i| m[(i / 3, i % 3)])
}

/// Sliding-window observation assembly shared by the environment and deployed policies.
#[derive(Debug, Clone)]
pub struct ObservationBuilder {
    history: usize,
    reference: usize,
    action_history: bool,
    control_dt: f64,
    scales: ObsScales,
    states: VecDeque<[f64; STATE_ENTRY]>,
    actions: VecDeque<[f64; ACTION_DIM]>,
}

impl ObservationBuilder {
    pub fn new(cfg: &EnvConfig) -> Self {
        Self {
            history: cfg.history,
            reference: cfg.reference,
            action_history: cfg.action_history,
            control_dt: cfg.control_dt,
            scales: cfg.scales.clone(),
            states: VecDeque::with_capacity(cfg.history + 1),
            actions: VecDeque::with_capacity(cfg.history + 1),
        }
    }

    fn encode_state(&self, x: &QuadState) -> [f64; STATE_ENTRY] {
        let s = &self.scales;
        let m = rotmat_row_major(&x.q);
        let mut e = [0.0; STATE_ENTRY];
        e[0] = x.p.z * s.position;
        for i in 0..3 {
            e[1 + i] = x.v[i] * s.velocity;
            e[13 + i] = x.w[i] * s.rates;
        }
        for i in 0..9 {
            e[4 + i] = m[i] * s.attitude;
        }
        e
    }

    /// Fills every history slot with `x` and the normalized action `action`.
    pub fn prime(&mut self, x: &QuadState, action: [f64; ACTION_DIM]) {
        let e = self.encode_state(x);
        self.states.clear();
        self.actions.clear();
        for _ in 0..self.history {
            self.states.push_front(e);
            self.actions.push_front(action);
        }
    }

    /// Records the measured state and the normalized action that led to it.
    pub fn push(&mut self, x: &QuadState, action: [f64; ACTION_DIM]) {
        self.states.push_front(self.encode_state(x));
        self.actions.push_front(action);
        self.states.truncate(self.history);
        self.actions.truncate(self.history);
    }

    /// Actor observation for the latest measurement `x` at time `t`; the
    /// reference window covers `t + control_dt, ..., t + R * control_dt`.
    pub fn build(&self, x: &QuadState, traj: &Trajectory, t: f64) -> Vec<f64> {
        let s = &self.scales;
        let mut out = Vec::with_capacity(
            self.history * (STATE_ENTRY + ACTION_DIM) + self.reference * REF_ENTRY,
        );
        for k in 0..self.history {
            out.extend_from_slice(&self.states[k]);
            if self.action_history {
                out.extend_from_slice(&self.actions[k]);
            }
        }
        for k in 1..=self.reference {
            let r = traj.at(t + k as f64 * self.control_dt);
            let dp = (r.p - x.p) * s.position;
            let dv = (r.v - x.v) * s.velocity;
            out.extend_from_slice(dp.as_slice());
            out.extend_from_slice(dv.as_slice());
            out.extend(rotmat_row_major(&r.q).iter().map(|v| v * s.attitude));
            out.extend_from_slice((r.w * s.rates).as_slice());
        }
        out
    }
}

/// Relative deviations of the simulated plant from the nominal parameters.
pub fn privileged_block(params: &PhysParams, nominal: &PhysParams, with_gravity: bool) -> Vec<f64> {
    let mut v = vec![params.mass / nominal.mass - 1.0];
    for i in 0..3 {
        v.push(params.inertia[i] / nominal.inertia[i] - 1.0);
    }
    v.extend_from_slice(params.drag.as_slice());
    if with_gravity {
        v.push(params.gravity.z - nominal.gravity.z);
    }
    v
}

/// Simulated vehicle with its actuation layer and command delay line.
#[derive(Debug, Clone)]
pub struct Plant {
    pub x: QuadState,
    pub params: PhysParams,
    stack: ActuationStack,
    delay: VecDeque<Command>,
    latency_steps: usize,
    sim_dt: f64,
}

impl Plant {
    pub fn new(
        x: QuadState,
        params: PhysParams,
        cfg: &EnvConfig,
        initial_cmd: Command,
    ) -> Self {
        let stack = ActuationStack::new(
            &cfg.nominal,
            cfg.gains.clone(),
            cfg.velocity_gains.clone(),
            &cfg.limits,
            cfg.sim_dt,
        );
        let latency_steps = cfg.latency_steps();
        Self {
            x,
            params,
            stack,
            delay: std::iter::repeat_n(initial_cmd, latency_steps).collect(),
            latency_steps,
            sim_dt: cfg.sim_dt,
        }
    }

    pub fn latency_steps(&self) -> usize {
        self.latency_steps
    }

    /// One simulation step: `cmd` enters the delay line, the delayed command
    /// drives the actuation layer, the plant integrates.
    pub fn substep(&mut self, cmd: &Command) -> (Command, Actuated) {
        let applied = if self.latency_steps == 0 {
            *cmd
        } else {
            self.delay.push_back(*cmd);
            self.delay.pop_front().expect("delay line primed")
        };
        let act = self.stack.apply(&self.x, &applied);
        self.x = step_symplectic_euler(&self.x, &self.params, &act.rotor_speed_cmd, self.sim_dt);
        (applied, act)
    }

    pub fn crashed(&self) -> bool {
        !(self.x.p.z > 0.0) || !self.x.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub state: QuadState,
    pub reference: ReferencePoint,
    /// Rotor thrusts commanded in the last simulation step, N.
    pub thrusts: [f64; 4],
    /// Any actuation-layer saturation during the control step.
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub crashed: bool,
    pub info: StepInfo,
}

pub struct Env {
    cfg: EnvConfig,
    dims: ObsDims,
    cbox: CommandBox,
    traj: Arc<Trajectory>,
    plant: Plant,
    obs: ObservationBuilder,
    rng: ChaCha8Rng,
    step: usize,
    max_steps: usize,
    done: bool,
}

impl Env {
    pub fn new(cfg: EnvConfig, traj: Arc<Trajectory>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let x0 = traj.points[0].to_state(&cfg.nominal);
        let u0 = Command::from_array(cfg.action_space, traj.points[0].u_ref(cfg.action_space));
        let mut env = Self {
            dims: cfg.dims(),
            cbox: cfg.command_box(),
            plant: Plant::new(x0, cfg.nominal.clone(), &cfg, u0),
            obs: ObservationBuilder::new(&cfg),
            rng: ChaCha8Rng::seed_from_u64(seed),
            traj: traj.clone(),
            step: 0,
            max_steps: 0,
            done: true,
            cfg,
        };
        env.reset(traj, seed);
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn dims(&self) -> ObsDims {
        self.dims
    }

    pub fn command_box(&self) -> CommandBox {
        self.cbox
    }

    pub fn state(&self) -> &QuadState {
        &self.plant.x
    }

    pub fn params(&self) -> &PhysParams {
        &self.plant.params
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.control_dt
    }

    pub fn trajectory(&self) -> &Arc<Trajectory> {
        &self.traj
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn reset(&mut self, traj: Arc<Trajectory>, seed: u64) -> Observation {
        let cfg = &self.cfg;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let params = if cfg.randomize {
            sample_params_with(&cfg.nominal, &cfg.randomization, &mut self.rng)
        } else {
            cfg.nominal.clone()
        };
        let first = traj.points[0];
        let mut x = first.to_state(&cfg.nominal);
        cfg.perturbation.apply(&mut x, &mut self.rng);

        let u_ref = first.u_ref(cfg.action_space);
        self.plant = Plant::new(x, params, cfg, Command::from_array(cfg.action_space, u_ref));
        self.max_steps = (traj.duration() / cfg.control_dt + 1e-9).floor() as usize;
        self.traj = traj;
        self.step = 0;
        self.done = false;
        let measured = self.measure();
        self.obs.prime(&measured, self.cbox.to_normalized(&u_ref));
        self.observation(&measured)
    }

    fn measure(&mut self) -> QuadState {
        let mut x = self.plant.x;
        let n = &self.cfg.noise;
        if !n.enabled {
            return x;
        }
        let mut gauss = |sd: f64| -> Vec3 {
            if sd <= 0.0 {
                return Vec3::zeros();
            }
            let d = Normal::new(0.0, sd).expect("finite std");
            Vec3::new(d.sample(&mut self.rng), d.sample(&mut self.rng), d.sample(&mut self.rng))
        };
        x.p += gauss(n.position);
        x.v += gauss(n.velocity);
        x.w += gauss(n.rates);
        let rot = gauss(n.attitude_deg.to_radians());
        x.q = (x.q * Quat::from_rotation_vector(&rot)).normalized();
        x
    }

    fn observation(&self, measured: &QuadState) -> Observation {
        Observation {
            actor: self.obs.build(measured, &self.traj, self.time()),
            privileged: privileged_block(&self.plant.params, &self.cfg.nominal, self.cfg.privileged_gravity),
        }
    }

    /// Advances one control period with a command from the configured action space.
    pub fn step(&mut self, cmd: &Command) -> Result<StepResult> {
        if cmd.space() != self.cfg.action_space {
            return Err(Error::Controller(format!(
                "environment expects {} commands, got {}",
                self.cfg.action_space,
                cmd.space()
            )));
        }
        if self.done {
            return Err(Error::Controller("step called on a finished episode; reset first".into()));
        }
        let t0 = self.time();
        let u_ref = self.traj.at(t0).u_ref(self.cfg.action_space);
        let mut saturated = false;
        let mut thrusts = [0.0; 4];
        let mut crashed = false;
        for _ in 0..self.cfg.substeps() {
            let (_, act) = self.plant.substep(cmd);
            saturated |= act.saturated;
            thrusts = act.thrusts;
            if self.plant.crashed() {
                crashed = true;
                break;
            }
        }
        self.step += 1;
        let t1 = self.time();
        let reference = self.traj.at(t1);
        let u = cmd.to_array();
        let reward = compute_reward(&self.plant.x, &reference, &u, &u_ref, crashed, &self.cfg.reward);
        self.done = crashed || self.step >= self.max_steps;
        let measured = self.measure();
        self.obs.push(&measured, self.cbox.to_normalized(&u));
        Ok(StepResult {
            obs: self.observation(&measured),
            reward,
            done: self.done,
            crashed,
            info: StepInfo {
                state: self.plant.x,
                reference,
                thrusts,
                saturated,
            },
        })
    }
}
