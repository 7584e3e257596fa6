//! Closed-loop tracking runs and the sweeps built on them.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actuation::{ActionSpace, Command, CommandBox};
use crate::dynamics::{PhysParams, QuadState};
use crate::env::{compute_reward, EnvConfig, ObservationBuilder, Perturbation, Plant};
use crate::error::{Error, Result};
use crate::math::{Quat, Vec3};
use crate::mpc::{Mpc, MpcConfig, MpcVariant, SolveInfo};
use crate::policy::{train, Policy, PpoConfig};
use crate::trajgen::Trajectory;

/// Anything that turns a measured state into a command at a fixed rate.
pub trait Controller: Send {
    fn id(&self) -> String;
    fn action_space(&self) -> ActionSpace;
    fn control_dt(&self) -> f64;
    fn reset(&mut self, traj: &Trajectory);
    fn command(&mut self, x: &QuadState, traj: &Trajectory, t: f64) -> Result<Command>;
    fn diagnostics(&self) -> Option<SolveInfo> {
        None
    }
}

/// Learned policy with its own observation history.
pub struct PolicyController {
    policy: Arc<Policy>,
    builder: ObservationBuilder,
    cbox: CommandBox,
    pending: Option<[f64; 4]>,
    name: String,
}

impl PolicyController {
    pub fn new(policy: Arc<Policy>) -> Self {
        let builder = ObservationBuilder::new(&policy.meta.env);
        Self {
            cbox: policy.meta.command_box,
            name: format!("policy-{}", policy.meta.action_space),
            builder,
            policy,
            pending: None,
        }
    }
}

impl Controller for PolicyController {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn action_space(&self) -> ActionSpace {
        self.policy.meta.action_space
    }

    fn control_dt(&self) -> f64 {
        self.policy.meta.env.control_dt
    }

    fn reset(&mut self, _traj: &Trajectory) {
        self.pending = None;
    }

    fn command(&mut self, x: &QuadState, traj: &Trajectory, t: f64) -> Result<Command> {
        match self.pending {
            Some(a) => self.builder.push(x, a),
            None => {
                let u_ref = traj.at(t).u_ref(self.action_space());
                self.builder.prime(x, self.cbox.to_normalized(&u_ref));
            }
        }
        let obs = self.builder.build(x, traj, t);
        let cmd = self.policy.act(&obs)?;
        self.pending = Some(self.cbox.to_normalized(&cmd.to_array()));
        Ok(cmd)
    }
}

pub struct MpcController {
    mpc: Mpc,
    last: Option<SolveInfo>,
}

impl MpcController {
    pub fn new(config: MpcConfig, model: PhysParams) -> Result<Self> {
        Ok(Self {
            mpc: Mpc::new(config, model)?,
            last: None,
        })
    }
}

impl Controller for MpcController {
    fn id(&self) -> String {
        match self.mpc.config.variant {
            MpcVariant::Srt => "mpc-srt".into(),
            MpcVariant::Ctbr => "mpc-ctbr".into(),
        }
    }

    fn action_space(&self) -> ActionSpace {
        self.mpc.config.variant.action_space()
    }

    fn control_dt(&self) -> f64 {
        self.mpc.config.control_dt
    }

    fn reset(&mut self, _traj: &Trajectory) {
        self.mpc.reset();
        self.last = None;
    }

    fn command(&mut self, x: &QuadState, traj: &Trajectory, t: f64) -> Result<Command> {
        let step = self.mpc.control(x, traj, t);
        self.last = Some(step.info);
        Ok(step.command)
    }

    fn diagnostics(&self) -> Option<SolveInfo> {
        self.last
    }
}

/// Replays the reference command of the given action space.
pub struct FeedforwardController {
    pub space: ActionSpace,
    pub dt: f64,
}

impl Controller for FeedforwardController {
    fn id(&self) -> String {
        format!("feedforward-{}", self.space)
    }

    fn action_space(&self) -> ActionSpace {
        self.space
    }

    fn control_dt(&self) -> f64 {
        self.dt
    }

    fn reset(&mut self, _traj: &Trajectory) {}

    fn command(&mut self, _x: &QuadState, traj: &Trajectory, t: f64) -> Result<Command> {
        Ok(Command::from_array(self.space, traj.at(t).u_ref(self.space)))
    }
}

pub struct ZeroThrustController {
    pub dt: f64,
}

impl Controller for ZeroThrustController {
    fn id(&self) -> String {
        "zero-thrust".into()
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Srt
    }

    fn control_dt(&self) -> f64 {
        self.dt
    }

    fn reset(&mut self, _traj: &Trajectory) {}

    fn command(&mut self, _x: &QuadState, _traj: &Trajectory, _t: f64) -> Result<Command> {
        Ok(Command::Srt([0.0; 4]))
    }
}

/// Where an injected latency acts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyMode {
    /// Commands reach the vehicle late.
    #[default]
    Command,
    /// The controller sees an old state.
    Measurement,
}

impl std::fmt::Display for LatencyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LatencyMode::Command => "command",
            LatencyMode::Measurement => "measurement",
        })
    }
}

/// Simulation side of a tracking run. Latency, sim rate and low-level gains
/// come from `env`; `plant` is the vehicle actually flown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingSetup {
    pub env: EnvConfig,
    pub plant: PhysParams,
    pub latency_mode: LatencyMode,
    pub start_perturbation: Perturbation,
    pub seed: u64,
    /// Samples before this time are excluded from the post-ramp metric.
    pub ramp_time: f64,
    pub keep_log: bool,
}

impl Default for TrackingSetup {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            plant: PhysParams::default(),
            latency_mode: LatencyMode::Command,
            start_perturbation: Perturbation::none(),
            seed: 0,
            ramp_time: 2.0,
            keep_log: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub position: Vec3,
    pub velocity: Vec3,
    pub attitude: Quat,
    pub rates: Vec3,
    pub reference: Vec3,
    pub command: [f64; 4],
    pub thrusts: [f64; 4],
    pub reward: f64,
    pub solve: Option<SolveInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EpisodeStatus {
    Completed,
    Crashed { t: f64 },
    ControllerError { t: f64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub rows: Vec<LogRow>,
    pub status: EpisodeStatus,
}

impl EpisodeLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        self.write_csv_with(out, true)
    }

    /// Without `wall_clock` the solver timing column is left empty, so the file
    /// depends only on the inputs.
    pub fn write_csv_with<W: Write>(&self, out: W, wall_clock: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t", "px", "py", "pz", "rx", "ry", "rz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz", "u1",
            "u2", "u3", "u4", "f1", "f2", "f3", "f4", "reward", "kkt_residual", "active_set", "solve_time_s",
        ])?;
        for r in &self.rows {
            let mut rec: Vec<String> = vec![r.t.to_string()];
            rec.extend(r.position.iter().chain(r.reference.iter()).chain(r.velocity.iter()).map(|v| v.to_string()));
            rec.extend(r.attitude.to_array().iter().map(|v| v.to_string()));
            rec.extend(r.rates.iter().map(|v| v.to_string()));
            rec.extend(r.command.iter().chain(r.thrusts.iter()).map(|v| v.to_string()));
            rec.push(r.reward.to_string());
            match &r.solve {
                Some(s) => {
                    rec.push(s.kkt_residual.to_string());
                    rec.push(s.active_set.to_string());
                    rec.push(if wall_clock { s.solve_time_s.to_string() } else { String::new() });
                }
                None => rec.extend(["".to_string(), "".to_string(), "".to_string()]),
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub controller: String,
    pub trajectory: String,
    pub seed: u64,
    /// Mean position error over all non-crashed samples, cm.
    pub avg_error_cm: f64,
    /// Same, restricted to samples after the ramp.
    pub post_ramp_error_cm: f64,
    pub max_error_cm: f64,
    pub crashed: bool,
    pub crash_time: Option<f64>,
    pub latency: f64,
    pub latency_mode: LatencyMode,
    pub scale_p: f64,
    pub scale_d: f64,
    pub history: usize,
    pub reference: usize,
}

impl BenchResult {
    /// Average error for tables: `None` for crashed runs.
    pub fn reported_error_cm(&self) -> Option<f64> {
        (!self.crashed).then_some(self.avg_error_cm)
    }
}

pub const RESULT_HEADER: [&str; 15] = [
    "controller",
    "trajectory",
    "seed",
    "avg_error_cm",
    "post_ramp_error_cm",
    "max_error_cm",
    "crashed",
    "crash_time",
    "latency",
    "latency_mode",
    "scale_p",
    "scale_d",
    "history",
    "reference",
    "status",
];

fn cell(v: f64, crashed: bool) -> String {
    if crashed {
        "crash".into()
    } else {
        format!("{v:.4}")
    }
}

pub fn write_results<W: Write>(rows: &[BenchResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_HEADER)?;
    for r in rows {
        w.write_record([
            r.controller.clone(),
            r.trajectory.clone(),
            r.seed.to_string(),
            cell(r.avg_error_cm, r.crashed),
            cell(r.post_ramp_error_cm, r.crashed),
            cell(r.max_error_cm, r.crashed),
            r.crashed.to_string(),
            r.crash_time.map(|t| format!("{t:.3}")).unwrap_or_default(),
            r.latency.to_string(),
            r.latency_mode.to_string(),
            r.scale_p.to_string(),
            r.scale_d.to_string(),
            r.history.to_string(),
            r.reference.to_string(),
            if r.crashed { "crashed" } else { "completed" }.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Flies `traj` with `controller` from the (optionally perturbed) first reference state.
pub fn run_tracking(
    controller: &mut dyn Controller,
    traj: &Trajectory,
    setup: &TrackingSetup,
) -> Result<(BenchResult, EpisodeLog)> {
    let mut env = setup.env.clone();
    env.action_space = controller.action_space();
    env.validate()?;
    let ctrl_dt = controller.control_dt();
    let substeps = (ctrl_dt / env.sim_dt).round() as usize;
    if substeps == 0 || ((substeps as f64) * env.sim_dt - ctrl_dt).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "controller period {ctrl_dt} s is not a multiple of the simulation step {}",
            env.sim_dt
        )));
    }
    let latency = env.latency;
    let measurement_delay = match setup.latency_mode {
        LatencyMode::Command => 0,
        LatencyMode::Measurement => {
            let steps = env.latency_steps();
            env.latency = 0.0;
            steps
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let first = traj.at(0.0);
    let mut x0 = first.to_state(&setup.plant);
    setup.start_perturbation.apply(&mut x0, &mut rng);
    let space = controller.action_space();
    let mut plant = Plant::new(x0, setup.plant.clone(), &env, Command::from_array(space, first.u_ref(space)));
    let mut history: VecDeque<QuadState> = std::iter::repeat_n(x0, measurement_delay + 1).collect();

    controller.reset(traj);
    let steps = (traj.duration() / ctrl_dt).round() as usize;
    let mut rows = Vec::with_capacity(if setup.keep_log { steps } else { 0 });
    let (mut sum, mut n, mut post_sum, mut post_n, mut max_err) = (0.0, 0usize, 0.0, 0usize, 0.0f64);
    let mut status = EpisodeStatus::Completed;
    'outer: for k in 0..steps {
        let t = k as f64 * ctrl_dt;
        let measured = history.front().copied().expect("history is never empty");
        let cmd = match controller.command(&measured, traj, t) {
            Ok(c) if c.space() == space => c,
            Ok(c) => {
                status = EpisodeStatus::ControllerError {
                    t,
                    message: format!("controller returned a {} command", c.space()),
                };
                break;
            }
            Err(e) => {
                status = EpisodeStatus::ControllerError { t, message: e.to_string() };
                break;
            }
        };
        let u_ref = traj.at(t).u_ref(space);
        let mut thrusts = [0.0; 4];
        let mut crashed = false;
        for s in 0..substeps {
            let (_, act) = plant.substep(&cmd);
            thrusts = act.thrusts;
            history.push_back(plant.x);
            history.pop_front();
            if plant.crashed() {
                crashed = true;
                status = EpisodeStatus::Crashed {
                    t: t + (s + 1) as f64 * env.sim_dt,
                };
                break;
            }
        }
        let t1 = (k + 1) as f64 * ctrl_dt;
        let reference = traj.at(t1);
        let x = plant.x;
        if !crashed {
            let e = (x.p - reference.p).norm();
            sum += e;
            n += 1;
            max_err = max_err.max(e);
            if t1 >= setup.ramp_time {
                post_sum += e;
                post_n += 1;
            }
        }
        if setup.keep_log {
            rows.push(LogRow {
                t: t1,
                position: x.p,
                velocity: x.v,
                attitude: x.q,
                rates: x.w,
                reference: reference.p,
                command: cmd.to_array(),
                thrusts,
                reward: compute_reward(&x, &reference, &cmd.to_array(), &u_ref, crashed, &env.reward),
                solve: controller.diagnostics(),
            });
        }
        if crashed {
            break 'outer;
        }
    }
    let (crashed, crash_time) = match &status {
        EpisodeStatus::Completed => (false, None),
        EpisodeStatus::Crashed { t } | EpisodeStatus::ControllerError { t, .. } => (true, Some(*t)),
    };
    let mean = |s: f64, n: usize| if n > 0 { 100.0 * s / n as f64 } else { f64::NAN };
    let result = BenchResult {
        controller: controller.id(),
        trajectory: traj.meta.name.clone(),
        seed: setup.seed,
        avg_error_cm: mean(sum, n),
        post_ramp_error_cm: mean(post_sum, post_n),
        max_error_cm: 100.0 * max_err,
        crashed,
        crash_time,
        latency,
        latency_mode: setup.latency_mode,
        scale_p: env.gains.scale_p,
        scale_d: env.gains.scale_d,
        history: env.history,
        reference: env.reference,
    };
    Ok((result, EpisodeLog { rows, status }))
}

/// Builds a fresh controller for each benchmark row.
pub type ControllerFactory<'a> = dyn Fn() -> Result<Box<dyn Controller>> + Sync + 'a;

/// Default latency grid, 0 to 60 ms in 10 ms steps.
pub fn default_latencies() -> Vec<f64> {
    (0..=6).map(|k| k as f64 * 0.01).collect()
}

/// One result per (latency, seed).
pub fn latency_sweep(
    factory: &ControllerFactory,
    traj: &Trajectory,
    latencies: &[f64],
    seeds: &[u64],
    base: &TrackingSetup,
) -> Result<Vec<BenchResult>> {
    let jobs: Vec<(f64, u64)> = latencies.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    jobs.par_iter()
        .map(|&(latency, seed)| {
            let mut setup = base.clone();
            setup.env.latency = latency;
            setup.seed = seed;
            setup.keep_log = false;
            let mut c = factory()?;
            Ok(run_tracking(c.as_mut(), traj, &setup)?.0)
        })
        .collect()
}

/// Default gain-scale axis: 11 values over [0, 100] including the nominal 1.0.
pub fn default_gain_scales() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0]
}

pub const GAIN_ERROR_CLIP_M: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCell {
    pub scale_p: f64,
    pub scale_d: f64,
    /// Average position error in meters, clipped at 5 m (crashes clip too).
    pub error_m: f64,
    pub crashed: bool,
    pub result: BenchResult,
}

pub fn gain_sweep(
    factory: &ControllerFactory,
    traj: &Trajectory,
    p_scales: &[f64],
    d_scales: &[f64],
    base: &TrackingSetup,
) -> Result<Vec<GainCell>> {
    let jobs: Vec<(f64, f64)> = p_scales.iter().flat_map(|&p| d_scales.iter().map(move |&d| (p, d))).collect();
    jobs.par_iter()
        .map(|&(sp, sd)| {
            let mut setup = base.clone();
            setup.env.gains.scale_p = sp;
            setup.env.gains.scale_d = sd;
            setup.keep_log = false;
            let mut c = factory()?;
            if c.action_space() != ActionSpace::Ctbr {
                return Err(Error::Config("gain sweeps need a CTBR controller".into()));
            }
            let (result, _) = run_tracking(c.as_mut(), traj, &setup)?;
            let error_m = if result.crashed {
                GAIN_ERROR_CLIP_M
            } else {
                (result.avg_error_cm / 100.0).min(GAIN_ERROR_CLIP_M)
            };
            Ok(GainCell {
                scale_p: sp,
                scale_d: sd,
                error_m,
                crashed: result.crashed,
                result,
            })
        })
        .collect()
}

pub fn write_gain_grid<W: Write>(cells: &[GainCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scale_p", "scale_d", "error_m", "crashed"])?;
    for c in cells {
        w.write_record([c.scale_p.to_string(), c.scale_d.to_string(), format!("{:.6}", c.error_m), c.crashed.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    H,
    R,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "H" | "h" => Ok(AblationAxis::H),
            "R" | "r" => Ok(AblationAxis::R),
            _ => Err(Error::InvalidValue {
                key: "axis".into(),
                reason: format!("expected H or R, got {s:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: usize,
    pub action_space: ActionSpace,
    pub mean_error_cm: Option<f64>,
    pub std_error_cm: Option<f64>,
    pub crash_rate: f64,
    pub actor_dim: usize,
}

/// Env config for one ablation cell: only the chosen axis differs from `base`.
pub fn ablation_env(base: &EnvConfig, axis: AblationAxis, value: usize) -> EnvConfig {
    let mut cfg = base.clone();
    match axis {
        AblationAxis::H => cfg.history = value,
        AblationAxis::R => cfg.reference = value,
    }
    cfg
}

/// Trains one policy per (value, seed) and evaluates it on `eval_trajs`.
pub fn ablation_batch(
    axis: AblationAxis,
    values: &[usize],
    base: &EnvConfig,
    ppo: &PpoConfig,
    train_trajs: &[Arc<Trajectory>],
    eval_trajs: &[Arc<Trajectory>],
    seeds: &[u64],
    setup: &TrackingSetup,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &value in values {
        let env = ablation_env(base, axis, value);
        let mut errors = Vec::new();
        let mut runs = 0usize;
        let mut crashes = 0usize;
        for &seed in seeds {
            let outcome = train(&env, ppo, train_trajs, seed, |_, _| Ok(()))?;
            let policy = Arc::new(outcome.policy);
            for traj in eval_trajs {
                let mut c = PolicyController::new(policy.clone());
                let mut s = setup.clone();
                s.env = env.clone();
                s.seed = seed;
                s.keep_log = false;
                let (r, _) = run_tracking(&mut c, traj, &s)?;
                runs += 1;
                match r.reported_error_cm() {
                    Some(e) => errors.push(e),
                    None => crashes += 1,
                }
            }
        }
        let (mean, std) = if errors.is_empty() {
            (None, None)
        } else {
            let m = errors.iter().sum::<f64>() / errors.len() as f64;
            let v = errors.iter().map(|e| (e - m).powi(2)).sum::<f64>() / errors.len() as f64;
            (Some(m), Some(v.sqrt()))
        };
        rows.push(AblationRow {
            axis: format!("{axis:?}"),
            value,
            action_space: env.action_space,
            mean_error_cm: mean,
            std_error_cm: std,
            crash_rate: crashes as f64 / runs.max(1) as f64,
            actor_dim: env.dims().actor(),
        });
    }
    Ok(rows)
}

pub fn write_ablation<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["axis", "value", "action_space", "mean_error_cm", "std_error_cm", "crash_rate", "actor_dim"])?;
    for r in rows {
        let fmt = |v: Option<f64>| v.map(|e| format!("{e:.4}")).unwrap_or_else(|| "crash".into());
        w.write_record([
            r.axis.clone(),
            r.value.to_string(),
            r.action_space.to_string(),
            fmt(r.mean_error_cm),
            fmt(r.std_error_cm),
            format!("{:.3}", r.crash_rate),
            r.actor_dim.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
