//! Parsing of `--controller` and `--traj` values.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use quadbench::actuation::ActionSpace;
use quadbench::bench::{Controller, FeedforwardController, MpcController, PolicyController, ZeroThrustController};
use quadbench::config::{diff_keys, RunConfig};
use quadbench::dynamics::PhysParams;
use quadbench::math::Vec3;
use quadbench::mpc::MpcVariant;
use quadbench::policy::{load_checkpoint, Policy};
use quadbench::trajgen::{eval_trajectory, gen_circle, hover, read_csv, EvalBin, TrainingSetConfig, Trajectory, SAMPLE_DT};

#[derive(Debug, Clone, PartialEq)]
pub enum ControllerKind {
    Mpc(MpcVariant),
    Policy,
    Feedforward(ActionSpace),
    Zero,
}

impl std::str::FromStr for ControllerKind {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mpc-ctbr" => ControllerKind::Mpc(MpcVariant::Ctbr),
            "mpc-srt" => ControllerKind::Mpc(MpcVariant::Srt),
            "policy" => ControllerKind::Policy,
            "zero" => ControllerKind::Zero,
            other => match other.strip_prefix("feedforward-") {
                Some(space) => ControllerKind::Feedforward(space.parse()?),
                None => bail!("unknown controller {s:?} (mpc-ctbr, mpc-srt, policy, feedforward-<space>, zero)"),
            },
        })
    }
}

/// Builds fresh controllers of one kind.
pub struct ControllerSpec {
    pub kind: ControllerKind,
    pub policy: Option<Arc<Policy>>,
    pub config: RunConfig,
}

impl ControllerSpec {
    pub fn build(&self) -> quadbench::Result<Box<dyn Controller>> {
        let cfg = &self.config;
        Ok(match &self.kind {
            ControllerKind::Mpc(v) => {
                let mpc = quadbench::mpc::MpcConfig {
                    variant: *v,
                    ..cfg.mpc.clone()
                };
                Box::new(MpcController::new(mpc, cfg.env.nominal.clone())?)
            }
            ControllerKind::Policy => Box::new(PolicyController::new(
                self.policy.clone().expect("policy controllers are built with a checkpoint"),
            )),
            ControllerKind::Feedforward(space) => Box::new(FeedforwardController {
                space: *space,
                dt: cfg.env.control_dt,
            }),
            ControllerKind::Zero => Box::new(ZeroThrustController { dt: cfg.env.control_dt }),
        })
    }
}

/// Loads a checkpoint. With `file_config` set, the checkpoint's environment must match it.
pub fn load_policy(path: &Path, file_config: Option<&RunConfig>) -> Result<Policy> {
    let policy = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if let Some(cfg) = file_config {
        let keys = diff_keys(&serde_json::to_value(&policy.meta.env)?, &serde_json::to_value(&cfg.env)?);
        if !keys.is_empty() {
            bail!(
                "checkpoint {} was trained with a different configuration; mismatched key(s): {}",
                path.display(),
                keys.iter().map(|k| format!("env.{k}")).collect::<Vec<_>>().join(", ")
            );
        }
    }
    Ok(policy)
}

/// Built-in names: `hover`, `circle_r<R>_v<V>[_i<deg>][_t<s>]`, `slow_<seed>`,
/// `mid_<seed>`, `aggressive_<seed>`. A trailing `.csv` is ignored when no
/// such file exists.
pub fn load_trajectory(spec: &str, params: &PhysParams, set: &TrainingSetConfig) -> Result<(Trajectory, Option<PathBuf>)> {
    let path = Path::new(spec);
    if path.is_file() {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trajectory");
        let f = std::fs::File::open(path)?;
        let traj = read_csv(f, params, name).with_context(|| format!("reading trajectory {spec}"))?;
        return Ok((traj, Some(path.to_path_buf())));
    }
    let name = spec.strip_suffix(".csv").unwrap_or(spec);
    Ok((builtin(name, params, set)?, None))
}

fn builtin(name: &str, params: &PhysParams, set: &TrainingSetConfig) -> Result<Trajectory> {
    let bad = || anyhow!("no trajectory file or built-in named {name:?}");
    if name == "hover" {
        let sig = hover(Vec3::new(0.0, 0.0, 2.0), set.duration);
        return Ok(Trajectory::sample(&sig, params, SAMPLE_DT, name)?);
    }
    for bin in EvalBin::ALL {
        if let Some(seed) = name.strip_prefix(bin.name()).and_then(|r| r.strip_prefix('_')) {
            let seed: u64 = seed.parse().map_err(|_| bad())?;
            return Ok(eval_trajectory(bin, seed, params, set)?);
        }
    }
    let rest = name.strip_prefix("circle_").ok_or_else(bad)?;
    let (mut r, mut v, mut incl, mut t) = (None, None, 0.0, set.duration);
    for part in rest.split('_') {
        let (key, val) = part.split_at(1.min(part.len()));
        let x: f64 = val.parse().map_err(|_| bad())?;
        match key {
            "r" => r = Some(x),
            "v" => v = Some(x),
            "i" => incl = x.to_radians(),
            "t" => t = x,
            _ => return Err(bad()),
        }
    }
    let sig = gen_circle(r.ok_or_else(bad)?, incl, v.ok_or_else(bad)?, t)?;
    Ok(Trajectory::sample(&sig, params, SAMPLE_DT, name)?)
}

/// All `*.csv` trajectories of a directory in name order, or the built-in hover for `hover`.
pub fn load_trajectory_set(spec: &str, params: &PhysParams, set: &TrainingSetConfig) -> Result<(Vec<Trajectory>, Vec<PathBuf>)> {
    let dir = Path::new(spec);
    if !dir.is_dir() {
        let (t, p) = load_trajectory(spec, params, set)?;
        return Ok((vec![t], p.into_iter().collect()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no trajectory CSVs in {}", dir.display());
    }
    let trajs = files
        .iter()
        .map(|f| load_trajectory(f.to_str().unwrap_or_default(), params, set).map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;
    Ok((trajs, files))
}
