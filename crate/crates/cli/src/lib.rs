//! Command-line front end: every command writes into its own run directory
//! together with a manifest that reproduces it.

pub mod manifest;
pub mod plot;
pub mod specs;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use quadbench::actuation::ActionSpace;
use quadbench::bench::{
    ablation_batch, default_gain_scales, default_latencies, gain_sweep, latency_sweep, run_tracking, write_ablation,
    write_gain_grid, write_results, AblationAxis, BenchResult, LatencyMode,
};
use quadbench::config::RunConfig;
use quadbench::policy::{evaluate, save_checkpoint, train, write_curve};
use quadbench::trajgen::{training_set, write_csv, write_meta, Trajectory};

use manifest::{hash_file, input_hash, InputFile, RunManifest, MANIFEST_FILE};
use plot::PlotKind;
use specs::{load_policy, load_trajectory, load_trajectory_set, ControllerKind, ControllerSpec};

/// Default output root when neither `--out-root` nor the environment sets one.
pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const OUT_ROOT_ENV: &str = "QUADBENCH_OUT";

#[derive(Parser, Debug, Clone)]
#[command(name = "quadbench", version, about = "Quadrotor action-space benchmark")]
pub struct Cli {
    /// TOML config file; missing sections keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory under which run directories are created.
    #[arg(long, global = true, env = OUT_ROOT_ENV, default_value = DEFAULT_OUT_ROOT)]
    pub out_root: PathBuf,
    /// Exact run directory, overriding the content-addressed default.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Run benchmark rows on a single thread.
    #[arg(long, global = true)]
    pub strict_determinism: bool,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Cmd {
    /// Generate the training trajectory set.
    GenTrajs(GenTrajsArgs),
    /// Train a PPO policy.
    Train(TrainArgs),
    /// Tracking runs for one controller.
    Eval(EvalArgs),
    /// Error against injected latency.
    SweepLatency(SweepLatencyArgs),
    /// Error over a grid of low-level gain scales.
    SweepGains(SweepGainsArgs),
    /// History or reference length ablation.
    Ablate(AblateArgs),
    /// Render a result CSV as SVG.
    Plot(PlotArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

impl Cmd {
    pub fn name(&self) -> &'static str {
        match self {
            Cmd::GenTrajs(_) => "gen-trajs",
            Cmd::Train(_) => "train",
            Cmd::Eval(_) => "eval",
            Cmd::SweepLatency(_) => "sweep-latency",
            Cmd::SweepGains(_) => "sweep-gains",
            Cmd::Ablate(_) => "ablate",
            Cmd::Plot(_) => "plot",
            Cmd::Replay(_) => "replay",
        }
    }
}

fn parse_count(s: &str) -> std::result::Result<u64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    if !(v >= 0.0) || v.fract() != 0.0 || v > u64::MAX as f64 {
        return Err(format!("expected a non-negative integer, got {s}"));
    }
    Ok(v as u64)
}

/// Evenly spaced values parsed from `MIN,MAX,COUNT`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<f64>);

fn parse_grid(s: &str) -> std::result::Result<Grid, String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [lo, hi, n] = parts[..] else {
        return Err("expected MIN,MAX,COUNT".into());
    };
    let (lo, hi): (f64, f64) = (lo.parse().map_err(|_| "bad MIN")?, hi.parse().map_err(|_| "bad MAX")?);
    let n: usize = n.parse().map_err(|_| "bad COUNT")?;
    if n < 2 || !(hi > lo) || lo < 0.0 {
        return Err("need COUNT >= 2 and 0 <= MIN < MAX".into());
    }
    Ok(Grid((0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()))
}

#[derive(Args, Debug, Clone)]
pub struct GenTrajsArgs {
    #[arg(long, default_value_t = 600)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub action_space: Option<ActionSpace>,
    /// `hover`, a built-in trajectory name, a trajectory CSV or a directory of them.
    #[arg(long, default_value = "hover")]
    pub traj_set: String,
    /// Environment steps (accepts forms like 2e6).
    #[arg(long, value_parser = parse_count)]
    pub steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluation episodes on the first trajectory after training.
    #[arg(long, default_value_t = 10)]
    pub eval_episodes: u64,
}

#[derive(Args, Debug, Clone)]
pub struct ControllerArgs {
    /// mpc-ctbr, mpc-srt, policy, feedforward-<srt|ctbr|lv> or zero.
    #[arg(long)]
    pub controller: ControllerKind,
    /// Policy checkpoint, required for `--controller policy`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub controller: ControllerArgs,
    /// Trajectory CSV or built-in name; repeatable.
    #[arg(long = "traj", required = true)]
    pub trajs: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Injected latency, s.
    #[arg(long)]
    pub latency: Option<f64>,
    #[arg(long)]
    pub latency_mode: Option<LatencyModeArg>,
    /// Skip per-episode logs.
    #[arg(long)]
    pub no_logs: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum LatencyModeArg {
    Command,
    Measurement,
}

impl From<LatencyModeArg> for LatencyMode {
    fn from(m: LatencyModeArg) -> Self {
        match m {
            LatencyModeArg::Command => LatencyMode::Command,
            LatencyModeArg::Measurement => LatencyMode::Measurement,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct SweepLatencyArgs {
    #[command(flatten)]
    pub controller: ControllerArgs,
    #[arg(long)]
    pub traj: String,
    /// Latencies in seconds; defaults to 0 to 60 ms in 10 ms steps.
    #[arg(long, value_delimiter = ',')]
    pub latencies: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub latency_mode: Option<LatencyModeArg>,
}

#[derive(Args, Debug, Clone)]
pub struct SweepGainsArgs {
    #[command(flatten)]
    pub controller: ControllerArgs,
    #[arg(long)]
    pub traj: String,
    /// Explicit P-gain scales; the default 11-point grid spans 0 to 100 and contains 1.
    #[arg(long, value_delimiter = ',', conflicts_with = "p_grid")]
    pub p_scales: Option<Vec<f64>>,
    /// Evenly spaced P scales as MIN,MAX,COUNT.
    #[arg(long, value_parser = parse_grid)]
    pub p_grid: Option<Grid>,
    #[arg(long, value_delimiter = ',', conflicts_with = "d_grid")]
    pub d_scales: Option<Vec<f64>>,
    #[arg(long, value_parser = parse_grid)]
    pub d_grid: Option<Grid>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[arg(long)]
    pub axis: AblationAxis,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub action_space: Option<ActionSpace>,
    #[arg(long, default_value = "hover")]
    pub traj_set: String,
    /// Evaluation trajectories; repeatable.
    #[arg(long = "eval-traj", default_value = "hover")]
    pub eval_trajs: Vec<String>,
    #[arg(long, value_parser = parse_count)]
    pub steps: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct PlotArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub kind: PlotKind,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Outcome of a command: where it wrote and a one-line summary.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub run_dir: PathBuf,
    pub summary: String,
}

/// Parses `argv` (program name first) and runs it.
pub fn run_from_args<I, T>(argv: I) -> Result<RunOutput>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv)?;
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    run(cli, args, None)
}

fn read_config(cli: &Cli) -> Result<(RunConfig, Option<RunConfig>)> {
    match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let cfg = RunConfig::from_toml(&text).with_context(|| format!("config {}", path.display()))?;
            Ok((cfg.clone(), Some(cfg)))
        }
        None => Ok((RunConfig::default(), None)),
    }
}

/// Applies command-line flags on top of the file config.
fn apply_flags(cmd: &Cmd, cfg: &mut RunConfig) {
    let latency = |cfg: &mut RunConfig, l: Option<f64>, m: Option<LatencyModeArg>| {
        if let Some(l) = l {
            cfg.env.latency = l;
        }
        if let Some(m) = m {
            cfg.tracking.latency_mode = m.into();
        }
    };
    match cmd {
        Cmd::Train(a) => {
            if let Some(s) = a.action_space {
                cfg.env.action_space = s;
            }
            if let Some(n) = a.steps {
                cfg.ppo.total_steps = n;
            }
        }
        Cmd::Ablate(a) => {
            if let Some(s) = a.action_space {
                cfg.env.action_space = s;
            }
            if let Some(n) = a.steps {
                cfg.ppo.total_steps = n;
            }
        }
        Cmd::Eval(a) => latency(cfg, a.latency, a.latency_mode),
        Cmd::SweepLatency(a) => latency(cfg, None, a.latency_mode),
        _ => {}
    }
}

fn seeds_of(cmd: &Cmd) -> Vec<u64> {
    match cmd {
        Cmd::GenTrajs(a) => vec![a.seed],
        Cmd::Train(a) => vec![a.seed],
        Cmd::Eval(a) => a.seeds.clone(),
        Cmd::SweepLatency(a) => a.seeds.clone(),
        Cmd::SweepGains(a) => vec![a.seed],
        Cmd::Ablate(a) => a.seeds.clone(),
        Cmd::Plot(_) | Cmd::Replay(_) => vec![],
    }
}

/// Files a command reads; they are hashed into the manifest.
fn input_files(cmd: &Cmd) -> Vec<PathBuf> {
    let mut files = Vec::new();
    let mut traj = |s: &str| {
        let p = Path::new(s);
        if p.is_file() {
            files.push(p.to_path_buf());
        } else if p.is_dir() {
            if let Ok(rd) = std::fs::read_dir(p) {
                let mut v: Vec<PathBuf> = rd
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                    .collect();
                v.sort();
                files.extend(v);
            }
        }
    };
    match cmd {
        Cmd::Train(a) => traj(&a.traj_set),
        Cmd::Eval(a) => a.trajs.iter().for_each(|t| traj(t)),
        Cmd::SweepLatency(a) => traj(&a.traj),
        Cmd::SweepGains(a) => traj(&a.traj),
        Cmd::Ablate(a) => {
            traj(&a.traj_set);
            a.eval_trajs.iter().for_each(|t| traj(t));
        }
        Cmd::Plot(a) => files.push(a.input.clone()),
        _ => {}
    }
    let ckpt = match cmd {
        Cmd::Eval(a) => a.controller.checkpoint.clone(),
        Cmd::SweepLatency(a) => a.controller.checkpoint.clone(),
        Cmd::SweepGains(a) => a.controller.checkpoint.clone(),
        _ => None,
    };
    files.extend(ckpt);
    files
}

/// Runs a parsed command. `config_override` replaces the file config (used by replay).
pub fn run(cli: Cli, args: Vec<String>, config_override: Option<RunConfig>) -> Result<RunOutput> {
    if let Cmd::Replay(r) = &cli.command {
        return replay(&r.manifest, &cli);
    }
    let (mut cfg, file_cfg) = match config_override {
        Some(c) => (c.clone(), Some(c)),
        None => read_config(&cli)?,
    };
    apply_flags(&cli.command, &mut cfg);
    cfg.validate().context("resolved config")?;

    let inputs = input_files(&cli.command)
        .iter()
        .map(|p| hash_file(p))
        .collect::<Result<Vec<InputFile>>>()?;
    let name = cli.command.name();
    let hash = input_hash(name, &args, &cfg, &inputs)?;
    let run_dir = cli
        .run_dir
        .clone()
        .unwrap_or_else(|| cli.out_root.join(format!("{name}-{}", &hash[..12])));
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let manifest = RunManifest {
        command: name.to_string(),
        args,
        config: cfg.clone(),
        seeds: seeds_of(&cli.command),
        inputs,
        input_hash: hash,
        output_dir: run_dir.clone(),
        strict_determinism: cli.strict_determinism,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    manifest.write(&run_dir)?;

    let threads = if cli.strict_determinism { 1 } else { 0 };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let ctx = Ctx {
        cfg,
        file_cfg,
        dir: run_dir.clone(),
        strict: cli.strict_determinism,
    };
    let summary = pool.install(|| dispatch(&cli.command, &ctx))?;
    Ok(RunOutput { run_dir, summary })
}

fn replay(path: &Path, cli: &Cli) -> Result<RunOutput> {
    let m = RunManifest::read(path)?;
    m.check_inputs()?;
    let argv = std::iter::once("quadbench".to_string()).chain(m.args.iter().cloned());
    let mut recorded = Cli::try_parse_from(argv).context("arguments recorded in the manifest")?;
    if matches!(recorded.command, Cmd::Replay(_)) {
        bail!("a manifest cannot replay another replay");
    }
    recorded.strict_determinism |= m.strict_determinism;
    recorded.run_dir = Some(
        cli.run_dir
            .clone()
            .unwrap_or_else(|| cli.out_root.join(format!("replay-{}", &m.input_hash[..12]))),
    );
    run(recorded, m.args, Some(m.config))
}

struct Ctx {
    cfg: RunConfig,
    /// Config as read from the file, before flags.
    file_cfg: Option<RunConfig>,
    dir: PathBuf,
    strict: bool,
}

impl Ctx {
    fn create(&self, rel: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
    }

    fn traj(&self, spec: &str) -> Result<Trajectory> {
        Ok(load_trajectory(spec, &self.cfg.env.nominal, &self.cfg.training_set)?.0)
    }

    fn controller(&self, a: &ControllerArgs) -> Result<ControllerSpec> {
        let policy = match (&a.controller, &a.checkpoint) {
            (ControllerKind::Policy, Some(p)) => Some(Arc::new(load_policy(p, self.file_cfg.as_ref())?)),
            (ControllerKind::Policy, None) => bail!("--controller policy needs --checkpoint"),
            (_, Some(_)) => bail!("--checkpoint only applies to --controller policy"),
            _ => None,
        };
        Ok(ControllerSpec {
            kind: a.controller.clone(),
            policy,
            config: self.cfg.clone(),
        })
    }
}

fn dispatch(cmd: &Cmd, ctx: &Ctx) -> Result<String> {
    match cmd {
        Cmd::GenTrajs(a) => gen_trajs(a, ctx),
        Cmd::Train(a) => train_cmd(a, ctx),
        Cmd::Eval(a) => eval_cmd(a, ctx),
        Cmd::SweepLatency(a) => sweep_latency(a, ctx),
        Cmd::SweepGains(a) => sweep_gains(a, ctx),
        Cmd::Ablate(a) => ablate(a, ctx),
        Cmd::Plot(a) => {
            let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
            let out = ctx.dir.join(format!("{stem}.svg"));
            plot::render(a.kind, &a.input, &out)?;
            Ok(format!("wrote {}", out.display()))
        }
        Cmd::Replay(_) => unreachable!("handled before dispatch"),
    }
}

fn gen_trajs(a: &GenTrajsArgs, ctx: &Ctx) -> Result<String> {
    let trajs = training_set(a.count, a.seed, &ctx.cfg.env.nominal, &ctx.cfg.training_set)?;
    let mut index = csv::Writer::from_writer(ctx.create("index.csv")?);
    index.write_record(["name", "duration", "v_max", "a_max", "c_max", "omega_max"])?;
    for t in &trajs {
        let name = &t.meta.name;
        write_csv(t, ctx.create(&format!("trajectories/{name}.csv"))?)?;
        write_meta(&t.meta, ctx.create(&format!("trajectories/{name}.toml"))?)?;
        let m = &t.meta;
        index.write_record([
            name.clone(),
            m.duration.to_string(),
            m.v_max.to_string(),
            m.a_max.to_string(),
            m.c_max.to_string(),
            m.omega_max.to_string(),
        ])?;
    }
    index.flush()?;
    Ok(format!("{} trajectories", trajs.len()))
}

fn train_cmd(a: &TrainArgs, ctx: &Ctx) -> Result<String> {
    let cfg = &ctx.cfg;
    let (trajs, _) = load_trajectory_set(&a.traj_set, &cfg.env.nominal, &cfg.training_set)?;
    let trajs: Vec<Arc<Trajectory>> = trajs.into_iter().map(Arc::new).collect();
    let start = std::time::Instant::now();
    let outcome = train(&cfg.env, &cfg.ppo, &trajs, a.seed, |iter, policy| {
        let path = ctx.dir.join(format!("checkpoints/iter_{iter:05}.qbp"));
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        save_checkpoint(policy, &path)
    })?;
    let elapsed = start.elapsed().as_secs_f64();
    save_checkpoint(&outcome.policy, &ctx.dir.join("policy.qbp"))?;
    write_curve(&outcome.curve, ctx.create("curve.csv")?)?;
    if let Some(reason) = &outcome.diverged {
        log::warn!("training stopped early: {reason}");
    }

    let mut w = csv::Writer::from_writer(ctx.create("eval.csv")?);
    w.write_record(["episode", "seed", "crashed", "mean_pos_error_m", "episode_return"])?;
    let (mut crash_free, mut err_sum) = (0u64, 0.0);
    for k in 0..a.eval_episodes {
        let seed = 1_000_000 + k;
        let e = evaluate(&outcome.policy, &cfg.env, trajs[0].clone(), seed)?;
        if !e.crashed {
            crash_free += 1;
            err_sum += e.mean_pos_error;
        }
        w.write_record([
            k.to_string(),
            seed.to_string(),
            e.crashed.to_string(),
            format!("{:.6}", e.mean_pos_error),
            format!("{:.6}", e.episode_return),
        ])?;
    }
    w.flush()?;
    let mean_err = if crash_free > 0 { err_sum / crash_free as f64 } else { f64::NAN };
    Ok(format!(
        "trained {} iterations in {elapsed:.0} s; eval {crash_free}/{} crash-free, mean error {mean_err:.3} m",
        outcome.curve.len(),
        a.eval_episodes
    ))
}

fn summarize(rows: &[BenchResult]) -> String {
    let ok: Vec<f64> = rows.iter().filter_map(BenchResult::reported_error_cm).collect();
    let crashed = rows.len() - ok.len();
    if ok.is_empty() {
        return format!("{} rows, all crashed", rows.len());
    }
    let mean = ok.iter().sum::<f64>() / ok.len() as f64;
    format!("{} rows, {crashed} crashed, mean error {mean:.3} cm over completed rows", rows.len())
}

fn eval_cmd(a: &EvalArgs, ctx: &Ctx) -> Result<String> {
    use rayon::prelude::*;
    let spec = ctx.controller(&a.controller)?;
    let trajs = a.trajs.iter().map(|t| ctx.traj(t)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..trajs.len()).flat_map(|i| a.seeds.iter().map(move |&s| (i, s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let mut setup = ctx.cfg.tracking_setup(seed);
            setup.keep_log = !a.no_logs;
            let mut c = spec.build()?;
            run_tracking(c.as_mut(), &trajs[i], &setup)
        })
        .collect::<quadbench::Result<Vec<_>>>()?;
    let mut results = Vec::with_capacity(runs.len());
    for (result, log) in runs {
        if !a.no_logs {
            log.write_csv_with(ctx.create(&format!("logs/{}_s{}.csv", result.trajectory, result.seed))?, !ctx.strict)?;
        }
        results.push(result);
    }
    write_results(&results, ctx.create("results.csv")?)?;
    Ok(summarize(&results))
}

fn sweep_latency(a: &SweepLatencyArgs, ctx: &Ctx) -> Result<String> {
    let spec = ctx.controller(&a.controller)?;
    let traj = ctx.traj(&a.traj)?;
    let latencies = a.latencies.clone().unwrap_or_else(default_latencies);
    let base = ctx.cfg.tracking_setup(0);
    let rows = latency_sweep(&|| spec.build(), &traj, &latencies, &a.seeds, &base)?;
    write_results(&rows, ctx.create("latency.csv")?)?;
    Ok(summarize(&rows))
}

fn sweep_gains(a: &SweepGainsArgs, ctx: &Ctx) -> Result<String> {
    let spec = ctx.controller(&a.controller)?;
    let traj = ctx.traj(&a.traj)?;
    let p = a.p_scales.clone().or(a.p_grid.clone().map(|g| g.0)).unwrap_or_else(default_gain_scales);
    let d = a.d_scales.clone().or(a.d_grid.clone().map(|g| g.0)).unwrap_or_else(default_gain_scales);
    if let Some(bad) = p.iter().chain(&d).find(|s| !(0.0..=100.0).contains(*s)) {
        bail!("gain scale {bad} outside [0, 100]");
    }
    let base = ctx.cfg.tracking_setup(a.seed);
    let cells = gain_sweep(&|| spec.build(), &traj, &p, &d, &base)?;
    write_gain_grid(&cells, ctx.create("gains.csv")?)?;
    let rows: Vec<BenchResult> = cells.iter().map(|c| c.result.clone()).collect();
    write_results(&rows, ctx.create("results.csv")?)?;
    let crashed = cells.iter().filter(|c| c.crashed).count();
    Ok(format!("{} cells, {crashed} crashed", cells.len()))
}

fn ablate(a: &AblateArgs, ctx: &Ctx) -> Result<String> {
    let cfg = &ctx.cfg;
    let (train_trajs, _) = load_trajectory_set(&a.traj_set, &cfg.env.nominal, &cfg.training_set)?;
    let train_trajs: Vec<Arc<Trajectory>> = train_trajs.into_iter().map(Arc::new).collect();
    let eval = a
        .eval_trajs
        .iter()
        .map(|t| ctx.traj(t).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    let setup = cfg.tracking_setup(0);
    let rows = ablation_batch(a.axis, &a.values, &cfg.env, &cfg.ppo, &train_trajs, &eval, &a.seeds, &setup)?;
    write_ablation(&rows, ctx.create("ablation.csv")?)?;
    Ok(format!("{} ablation rows", rows.len()))
}

/// Path of the manifest inside a run directory.
pub fn manifest_path(run_dir: &Path) -> PathBuf {
    run_dir.join(MANIFEST_FILE)
}
