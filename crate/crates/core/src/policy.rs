//! Actor-critic networks, diagonal Gaussian policy, GAE and the PPO trainer.
//!
//! Both networks share one layout: a state encoder and a reference encoder
//! (tanh MLPs) whose outputs are concatenated and fed to a tanh head and a
//! linear output layer. The critic's state encoder additionally receives the
//! privileged block. Gradients are hand-written reverse mode over batches.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actuation::{ActionSpace, Command, CommandBox};
use crate::env::{Env, EnvConfig, ObsDims, Observation};
use crate::error::{Error, Result};
use crate::trajgen::Trajectory;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Orthogonal rows/columns scaled by `gain`, zero bias.
    fn orthogonal<R: Rng>(inp: usize, out: usize, gain: f64, rng: &mut R) -> Self {
        let (rows, cols) = (out.max(inp), out.min(inp));
        let g = nalgebra::DMatrix::<f64>::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
        let qr = g.qr();
        let q = qr.q();
        let r = qr.r();
        let mut w = Array2::zeros((out, inp));
        for i in 0..out {
            for j in 0..inp {
                let (a, b) = if out >= inp { (i, j) } else { (j, i) };
                // sign fix makes the distribution uniform over orthogonal matrices
                let sign = if r[(b, b)] < 0.0 { -1.0 } else { 1.0 };
                w[(i, j)] = gain * q[(a, b)] * sign;
            }
        }
        Self { w, b: Array1::zeros(out) }
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Hidden widths of the encoders and the head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub encoder: Vec<usize>,
    pub head: Vec<usize>,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            encoder: vec![64, 64, 64],
            head: vec![128, 128],
        }
    }
}

/// Two-branch MLP: `[x_state | x_ref]` → encoders → concat → head → linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub state_in: usize,
    pub ref_in: usize,
    pub state_enc: Vec<Linear>,
    pub ref_enc: Vec<Linear>,
    pub head: Vec<Linear>,
    pub out: Linear,
}

/// Activations kept for the backward pass.
pub struct NetCache {
    xs: Array2<f64>,
    xr: Array2<f64>,
    hs: Vec<Array2<f64>>,
    hr: Vec<Array2<f64>>,
    concat: Array2<f64>,
    hh: Vec<Array2<f64>>,
}

fn tanh_inplace(mut a: Array2<f64>) -> Array2<f64> {
    a.mapv_inplace(f64::tanh);
    a
}

impl Net {
    pub fn new<R: Rng>(
        state_in: usize,
        ref_in: usize,
        outputs: usize,
        shape: &NetShape,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(!shape.encoder.is_empty() && !shape.head.is_empty());
        let gain = std::f64::consts::SQRT_2;
        let tower = |inp: usize, widths: &[usize], rng: &mut R| {
            let mut prev = inp;
            widths
                .iter()
                .map(|&w| {
                    let l = Linear::orthogonal(prev, w, gain, rng);
                    prev = w;
                    l
                })
                .collect::<Vec<_>>()
        };
        let state_enc = tower(state_in, &shape.encoder, rng);
        let ref_enc = tower(ref_in, &shape.encoder, rng);
        let enc_out = *shape.encoder.last().unwrap();
        let head = tower(2 * enc_out, &shape.head, rng);
        let out = Linear::orthogonal(*shape.head.last().unwrap(), outputs, out_gain, rng);
        Self {
            state_in,
            ref_in,
            state_enc,
            ref_enc,
            head,
            out,
        }
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            encoder: self.state_enc.iter().map(|l| l.b.len()).collect(),
            head: self.head.iter().map(|l| l.b.len()).collect(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.state_in + self.ref_in
    }

    pub fn outputs(&self) -> usize {
        self.out.b.len()
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.state_enc
            .iter()
            .chain(&self.ref_enc)
            .chain(&self.head)
            .chain(std::iter::once(&self.out))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.state_enc
            .iter_mut()
            .chain(self.ref_enc.iter_mut())
            .chain(self.head.iter_mut())
            .chain(std::iter::once(&mut self.out))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for l in z.layers_mut() {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Linear::len).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimMismatch {
                what: "network parameters",
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut k = 0;
        for l in self.layers_mut() {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.inputs() {
            return Err(Error::DimMismatch {
                what: "network input",
                expected: self.inputs(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, NetCache)> {
        self.check_input(x)?;
        let xs = x.slice(s![.., ..self.state_in]).to_owned();
        let xr = x.slice(s![.., self.state_in..]).to_owned();
        let run = |layers: &[Linear], input: &Array2<f64>| {
            let mut acts = Vec::with_capacity(layers.len());
            for l in layers {
                let prev = acts.last().unwrap_or(input);
                acts.push(tanh_inplace(l.forward(&prev.view())));
            }
            acts
        };
        let hs = run(&self.state_enc, &xs);
        let hr = run(&self.ref_enc, &xr);
        let concat = ndarray::concatenate(Axis(1), &[hs.last().unwrap().view(), hr.last().unwrap().view()])
            .expect("encoder outputs share the batch size");
        let hh = run(&self.head, &concat);
        let y = self.out.forward(&hh.last().unwrap().view());
        Ok((
            y,
            NetCache {
                xs,
                xr,
                hs,
                hr,
                concat,
                hh,
            },
        ))
    }

    /// Parameter gradients for an upstream gradient `dy` on the outputs.
    pub fn backward(&self, cache: &NetCache, dy: &Array2<f64>) -> Net {
        let mut g = self.zeros_like();
        fn linear_grad(layer: &Linear, grad: &mut Linear, input: &Array2<f64>, d_pre: &Array2<f64>) -> Array2<f64> {
            grad.w = d_pre.t().dot(input);
            grad.b = d_pre.sum_axis(Axis(0));
            d_pre.dot(&layer.w)
        }
        fn tower_grad(
            layers: &[Linear],
            grads: &mut [Linear],
            input: &Array2<f64>,
            acts: &[Array2<f64>],
            mut d_out: Array2<f64>,
        ) {
            for i in (0..layers.len()).rev() {
                let h = &acts[i];
                let d_pre = &d_out * &h.mapv(|v| 1.0 - v * v);
                if i == 0 {
                    // the raw observation needs no gradient
                    grads[0].w = d_pre.t().dot(input);
                    grads[0].b = d_pre.sum_axis(Axis(0));
                    return;
                }
                d_out = linear_grad(&layers[i], &mut grads[i], &acts[i - 1], &d_pre);
            }
        }
        let d_last = linear_grad(&self.out, &mut g.out, cache.hh.last().unwrap(), dy);
        let mut d_concat = d_last;
        for i in (0..self.head.len()).rev() {
            let h = &cache.hh[i];
            let d_pre = &d_concat * &h.mapv(|v| 1.0 - v * v);
            let inp = if i == 0 { &cache.concat } else { &cache.hh[i - 1] };
            d_concat = linear_grad(&self.head[i], &mut g.head[i], inp, &d_pre);
        }
        let enc = self.state_enc.last().unwrap().b.len();
        let d_s = d_concat.slice(s![.., ..enc]).to_owned();
        let d_r = d_concat.slice(s![.., enc..]).to_owned();
        tower_grad(&self.state_enc, &mut g.state_enc, &cache.xs, &cache.hs, d_s);
        tower_grad(&self.ref_enc, &mut g.ref_enc, &cache.xr, &cache.hr, d_r);
        g
    }

    /// State-encoder output for a single input, used to audit branch separation.
    pub fn state_encoding(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Controller(e.to_string()))?;
        self.check_input(&m)?;
        let (_, cache) = self.forward_cached(&m)?;
        Ok(cache.hs.last().unwrap().iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_coef: f64,
    pub clip: f64,
    pub gae_lambda: f64,
    /// Steps per agent per iteration.
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub num_envs: usize,
    pub total_steps: u64,
    pub value_coef: f64,
    pub init_log_std: f64,
    pub max_grad_norm: Option<f64>,
    pub normalize_advantages: bool,
    /// Decay learning rates linearly to zero over the run.
    pub lr_anneal: bool,
    /// Multiplies rewards before the critic and GAE see them; logged returns stay unscaled.
    pub reward_scale: f64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub shape: NetShape,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.98,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            entropy_coef: 1e-2,
            clip: 0.2,
            gae_lambda: 0.95,
            rollout_len: 256,
            epochs: 10,
            minibatch: 4096,
            num_envs: 50,
            total_steps: 50_000_000,
            value_coef: 0.5,
            init_log_std: -1.0,
            max_grad_norm: None,
            normalize_advantages: true,
            lr_anneal: false,
            reward_scale: 1.0,
            checkpoint_every: 25,
            shape: NetShape::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("gamma", (0.0..=1.0).contains(&self.gamma)),
            ("gae_lambda", (0.0..=1.0).contains(&self.gae_lambda)),
            ("actor_lr", self.actor_lr > 0.0),
            ("critic_lr", self.critic_lr > 0.0),
            ("clip", self.clip > 0.0),
            ("entropy_coef", self.entropy_coef >= 0.0),
            ("rollout_len", self.rollout_len > 0),
            ("minibatch", self.minibatch > 0),
            ("num_envs", self.num_envs > 0),
            ("epochs", self.epochs > 0),
            ("reward_scale", self.reward_scale > 0.0 && self.reward_scale.is_finite()),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::InvalidValue {
                    key: key.into(),
                    reason: "out of range".into(),
                });
            }
        }
        Ok(())
    }
}

/// Everything a deployed policy needs besides its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub action_space: ActionSpace,
    pub dims: ObsDims,
    pub command_box: CommandBox,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    /// Hash of `env` and `ppo`.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub actor: Net,
    /// Log standard deviation in normalized action units.
    pub log_std: Array1<f64>,
    pub critic: Net,
    pub meta: PolicyMeta,
}

/// SHA-256 over the JSON of the environment and trainer configurations.
pub fn config_hash(env: &EnvConfig, ppo: &PpoConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(env).expect("config serializes"));
    h.update(serde_json::to_vec(ppo).expect("config serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Policy {
    pub fn new(env: &EnvConfig, ppo: &PpoConfig, seed: u64) -> Self {
        let dims = env.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor = Net::new(dims.state, dims.reference, 4, &ppo.shape, 0.01, &mut rng);
        // start from the hover command instead of the box center
        let hover = crate::trajgen::flatness_map(&crate::trajgen::hover(crate::math::Vec3::zeros(), 1.0), &env.nominal, 0.0)
            .expect("hover is never in free fall")
            .u_ref(env.action_space);
        actor.out.b = Array1::from(env.command_box().to_normalized(&hover).to_vec());
        let critic = Net::new(dims.state + dims.privileged, dims.reference, 1, &ppo.shape, 1.0, &mut rng);
        Self {
            actor,
            log_std: Array1::from_elem(4, ppo.init_log_std),
            critic,
            meta: PolicyMeta {
                action_space: env.action_space,
                dims,
                command_box: env.command_box(),
                env: env.clone(),
                ppo: ppo.clone(),
                config_hash: config_hash(env, ppo),
            },
        }
    }

    /// Normalized action mean for a batch of actor observations.
    pub fn mean_normalized(&self, obs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.actor.forward(obs)
    }

    /// Action mean and standard deviation in physical command units.
    pub fn actor_forward(&self, obs: &[f64]) -> Result<([f64; 4], [f64; 4])> {
        let m = ArrayView2::from_shape((1, obs.len()), obs).map_err(|e| Error::Controller(e.to_string()))?;
        let mean = self.actor.forward(&m)?;
        let b = &self.meta.command_box;
        let (c, h) = (b.center(), b.half_width());
        Ok((
            std::array::from_fn(|i| c[i] + h[i] * mean[(0, i)]),
            std::array::from_fn(|i| h[i] * self.log_std[i].exp()),
        ))
    }

    /// Deterministic command (clipped mean) for an actor observation.
    pub fn act(&self, obs: &[f64]) -> Result<Command> {
        let m = ArrayView2::from_shape((1, obs.len()), obs).map_err(|e| Error::Controller(e.to_string()))?;
        let mean = self.actor.forward(&m)?;
        let n: Vec<f64> = mean.row(0).to_vec();
        Ok(Command::from_array(self.meta.action_space, self.meta.command_box.from_normalized(&n)))
    }

    pub fn value(&self, critic_obs: &ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.critic.forward(critic_obs)?.column(0).to_owned())
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite() && self.log_std.iter().all(|v| v.is_finite())
    }
}

/// Generalized advantage estimation over one sequence; `dones[t]` marks that
/// the transition at `t` ended its episode.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n);
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Training samples for one gradient step.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub actor_obs: Array2<f64>,
    pub critic_obs: Array2<f64>,
    /// Raw (unclipped) normalized actions.
    pub actions: Array2<f64>,
    pub old_log_probs: Array1<f64>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossStats {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

#[derive(Debug, Clone)]
pub struct PpoGrads {
    pub actor: Net,
    pub log_std: Array1<f64>,
    pub critic: Net,
}

/// Diagonal Gaussian log-density of `actions` under `mean` and `log_std`.
pub fn log_prob(mean: &Array2<f64>, log_std: &Array1<f64>, actions: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(mean.nrows());
    for (i, (m, a)) in mean.rows().into_iter().zip(actions.rows()).enumerate() {
        let mut lp = 0.0;
        for j in 0..m.len() {
            let z = (a[j] - m[j]) * (-log_std[j]).exp();
            lp += -0.5 * z * z - log_std[j] - 0.5 * LN_2PI;
        }
        out[i] = lp;
    }
    out
}

/// Clipped-surrogate PPO loss (policy + entropy bonus + weighted value loss)
/// and its analytic gradients.
pub fn ppo_loss_and_grad(policy: &Policy, batch: &Minibatch, cfg: &PpoConfig) -> Result<(LossStats, PpoGrads)> {
    let n = batch.actions.nrows();
    if n == 0 {
        return Err(Error::DimMismatch {
            what: "minibatch",
            expected: 1,
            got: 0,
        });
    }
    let nf = n as f64;
    let (mean, a_cache) = policy.actor.forward_cached(&batch.actor_obs.view())?;
    let (vout, c_cache) = policy.critic.forward_cached(&batch.critic_obs.view())?;
    let logp = log_prob(&mean, &policy.log_std, &batch.actions);
    let inv_var: Vec<f64> = policy.log_std.iter().map(|l| (-2.0 * l).exp()).collect();

    let mut d_mean = Array2::zeros(mean.raw_dim());
    let mut d_log_std = Array1::zeros(policy.log_std.len());
    let (mut surr_sum, mut clipped, mut kl) = (0.0, 0usize, 0.0);
    for i in 0..n {
        let ratio = (logp[i] - batch.old_log_probs[i]).exp();
        let adv = batch.advantages[i];
        let clipped_ratio = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        let (u, c) = (ratio * adv, clipped_ratio * adv);
        surr_sum += u.min(c);
        kl += (ratio - 1.0) - (logp[i] - batch.old_log_probs[i]);
        let active = u <= c || clipped_ratio == ratio;
        if !active || clipped_ratio != ratio {
            clipped += 1;
        }
        if active {
            // d(-surr/n)/d logp
            let g = -adv * ratio / nf;
            for j in 0..4 {
                let diff = batch.actions[(i, j)] - mean[(i, j)];
                d_mean[(i, j)] += g * diff * inv_var[j];
                d_log_std[j] += g * (diff * diff * inv_var[j] - 1.0);
            }
        }
    }
    let entropy: f64 = policy.log_std.iter().map(|l| l + 0.5 * (LN_2PI + 1.0)).sum();
    d_log_std -= cfg.entropy_coef;

    let mut value_loss = 0.0;
    let mut d_v = Array2::zeros((n, 1));
    for i in 0..n {
        let e = vout[(i, 0)] - batch.returns[i];
        value_loss += e * e / nf;
        d_v[(i, 0)] = cfg.value_coef * 2.0 * e / nf;
    }
    let policy_loss = -surr_sum / nf;
    let total = policy_loss - cfg.entropy_coef * entropy + cfg.value_coef * value_loss;
    for (name, v) in [("policy", policy_loss), ("value", value_loss), ("entropy", entropy)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss term")));
        }
    }
    let grads = PpoGrads {
        actor: policy.actor.backward(&a_cache, &d_mean),
        log_std: d_log_std,
        critic: policy.critic.backward(&c_cache, &d_v),
    };
    Ok((
        LossStats {
            policy: policy_loss,
            value: value_loss,
            entropy,
            total,
            clip_fraction: clipped as f64 / nf,
            approx_kl: kl / nf,
        },
        grads,
    ))
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

fn clip_norm(g: &mut [f64], max: Option<f64>) {
    if let Some(max) = max {
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > max {
            g.iter_mut().for_each(|v| *v *= max / n);
        }
    }
}

/// Optimizer state of a policy under training.
pub struct PpoOptimizer {
    actor: Adam,
    critic: Adam,
}

impl PpoOptimizer {
    pub fn new(policy: &Policy, cfg: &PpoConfig) -> Self {
        Self {
            actor: Adam::new(policy.actor.param_count() + policy.log_std.len(), cfg.actor_lr),
            critic: Adam::new(policy.critic.param_count(), cfg.critic_lr),
        }
    }

    /// Sets both learning rates to `fraction` of their configured values.
    pub fn scale_lr(&mut self, fraction: f64, cfg: &PpoConfig) {
        self.actor.set_lr(cfg.actor_lr * fraction);
        self.critic.set_lr(cfg.critic_lr * fraction);
    }

    pub fn apply(&mut self, policy: &mut Policy, grads: &PpoGrads, cfg: &PpoConfig) {
        let mut p = policy.actor.to_flat();
        p.extend(policy.log_std.iter());
        let mut g = grads.actor.to_flat();
        g.extend(grads.log_std.iter());
        clip_norm(&mut g, cfg.max_grad_norm);
        self.actor.step(&mut p, &g);
        let k = policy.actor.param_count();
        policy.actor.set_flat(&p[..k]).expect("same shape");
        policy.log_std.iter_mut().zip(&p[k..]).for_each(|(d, s)| *d = *s);

        let mut c = policy.critic.to_flat();
        let mut gc = grads.critic.to_flat();
        clip_norm(&mut gc, cfg.max_grad_norm);
        self.critic.step(&mut c, &gc);
        policy.critic.set_flat(&c).expect("same shape");
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"QBPOLICY";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    meta: PolicyMeta,
    actor_shape: NetShape,
    critic_shape: NetShape,
    actor_params: usize,
    critic_params: usize,
}

/// Binary checkpoint: magic, version, JSON header length and header, then
/// little-endian f64 actor parameters, log-std and critic parameters.
pub fn encode_checkpoint(policy: &Policy) -> Vec<u8> {
    let header = CheckpointHeader {
        meta: policy.meta.clone(),
        actor_shape: policy.actor.shape(),
        critic_shape: policy.critic.shape(),
        actor_params: policy.actor.param_count(),
        critic_params: policy.critic.param_count(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in policy
        .actor
        .to_flat()
        .iter()
        .chain(policy.log_std.iter())
        .chain(policy.critic.to_flat().iter())
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Policy> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a policy checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let body = &bytes[20..];
    if hlen > body.len() as u64 {
        return Err(bad("truncated header"));
    }
    let (head, payload) = body.split_at(hlen as usize);
    let header: CheckpointHeader =
        serde_json::from_slice(head).map_err(|e| bad(&format!("header: {e}")))?;
    let meta = &header.meta;
    if config_hash(&meta.env, &meta.ppo) != meta.config_hash {
        return Err(bad("config hash does not match the stored configuration"));
    }
    if meta.env.dims() != meta.dims || meta.env.action_space != meta.action_space || meta.env.command_box() != meta.command_box {
        return Err(bad("metadata is inconsistent with the stored environment"));
    }
    let dims = header.meta.dims;
    let sane = |s: &NetShape| {
        !s.encoder.is_empty()
            && !s.head.is_empty()
            && s.encoder.iter().chain(&s.head).all(|&w| (1..=4096).contains(&w))
            && s.encoder.len() + s.head.len() <= 16
    };
    if !sane(&header.actor_shape) || !sane(&header.critic_shape) || dims.state > 1 << 20 || dims.reference > 1 << 20 || dims.privileged > 1 << 10 {
        return Err(bad("implausible network shape"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let expected_params = |state_in: usize, outputs: usize, shape: &NetShape| -> usize {
        let tower = |inp: usize, widths: &[usize]| {
            let mut prev = inp;
            widths.iter().map(|&w| {
                let n = (prev + 1) * w;
                prev = w;
                n
            }).sum::<usize>()
        };
        let enc = *shape.encoder.last().unwrap();
        tower(state_in, &shape.encoder)
            + tower(dims.reference, &shape.encoder)
            + tower(2 * enc, &shape.head)
            + (shape.head.last().unwrap() + 1) * outputs
    };
    let na = expected_params(dims.state, 4, &header.actor_shape);
    let nc = expected_params(dims.state + dims.privileged, 1, &header.critic_shape);
    if na != header.actor_params || nc != header.critic_params {
        return Err(bad("parameter counts disagree with the network shapes"));
    }
    let total = na + 4 + nc;
    if payload.len() != total * 8 {
        return Err(bad(&format!("payload holds {} bytes, expected {}", payload.len(), total * 8)));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut actor = Net::new(dims.state, dims.reference, 4, &header.actor_shape, 1.0, &mut rng);
    let mut critic = Net::new(dims.state + dims.privileged, dims.reference, 1, &header.critic_shape, 1.0, &mut rng);
    actor.set_flat(&values[..na])?;
    critic.set_flat(&values[na + 4..])?;
    Ok(Policy {
        actor,
        log_std: Array1::from(values[na..na + 4].to_vec()),
        critic,
        meta: header.meta,
    })
}

pub fn save_checkpoint(policy: &Policy, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(policy))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Policy> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub env_steps: u64,
    pub mean_return: f64,
    pub mean_pos_error_cm: f64,
    pub crash_rate: f64,
}

pub fn write_curve<W: Write>(rows: &[CurveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "env_steps", "mean_return", "mean_pos_error_cm", "crash_rate"])?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.env_steps.to_string(),
            r.mean_return.to_string(),
            r.mean_pos_error_cm.to_string(),
            r.crash_rate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub policy: Policy,
    pub curve: Vec<CurveRow>,
    /// Set when training stopped on non-finite parameters; `policy` is then the last good one.
    pub diverged: Option<String>,
}

/// Per-agent state of the rollout workers.
struct Agent {
    env: Env,
    rng: ChaCha8Rng,
    obs: Observation,
    episode_return: f64,
}

fn pick_trajectory(trajs: &[Arc<Trajectory>], rng: &mut ChaCha8Rng) -> Arc<Trajectory> {
    trajs[rng.random_range(0..trajs.len())].clone()
}

fn rows_to_matrix(rows: &[&[f64]], width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(&ndarray::ArrayView1::from(*r));
    }
    m
}

/// PPO training over `num_envs` agents that draw a new trajectory from `trajs`
/// at every episode start. `checkpoint` receives periodic snapshots.
pub fn train(
    env_cfg: &EnvConfig,
    ppo: &PpoConfig,
    trajs: &[Arc<Trajectory>],
    seed: u64,
    mut checkpoint: impl FnMut(usize, &Policy) -> Result<()>,
) -> Result<TrainOutcome> {
    env_cfg.validate()?;
    ppo.validate()?;
    if trajs.is_empty() {
        return Err(Error::Config("training needs at least one trajectory".into()));
    }
    let mut policy = Policy::new(env_cfg, ppo, seed);
    let dims = policy.meta.dims;
    let cbox = policy.meta.command_box;
    let space = env_cfg.action_space;
    let mut main_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7EA1);
    let mut agents: Vec<Agent> = (0..ppo.num_envs)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1));
            let traj = pick_trajectory(trajs, &mut rng);
            let env_seed = rng.random();
            let mut env = Env::new(env_cfg.clone(), traj.clone(), env_seed)?;
            let obs = env.reset(traj, env_seed);
            Ok(Agent {
                env,
                rng,
                obs,
                episode_return: 0.0,
            })
        })
        .collect::<Result<_>>()?;

    let steps_per_iter = (ppo.num_envs * ppo.rollout_len) as u64;
    let iterations = (ppo.total_steps / steps_per_iter) as usize;
    let mut optimizer = PpoOptimizer::new(&policy, ppo);
    let mut curve = Vec::with_capacity(iterations);
    let (ne, t_len) = (ppo.num_envs, ppo.rollout_len);
    let batch = ne * t_len;

    for iter in 0..iterations {
        let mut actor_obs = Array2::<f64>::zeros((batch, dims.actor()));
        let mut critic_obs = Array2::<f64>::zeros((batch, dims.critic()));
        let mut actions = Array2::<f64>::zeros((batch, 4));
        let mut old_logp = Array1::<f64>::zeros(batch);
        let mut rewards = vec![0.0; batch];
        let mut values = vec![0.0; batch];
        let mut dones = vec![false; batch];
        let (mut finished, mut crashes, mut return_sum) = (0usize, 0usize, 0.0);
        let (mut err_sum, mut err_n) = (0.0, 0usize);

        for t in 0..t_len {
            let a_rows: Vec<&[f64]> = agents.iter().map(|a| a.obs.actor.as_slice()).collect();
            let a_mat = rows_to_matrix(&a_rows, dims.actor());
            let critic_rows: Vec<Vec<f64>> = agents.iter().map(|a| a.obs.critic(&dims)).collect();
            let c_refs: Vec<&[f64]> = critic_rows.iter().map(|r| r.as_slice()).collect();
            let c_mat = rows_to_matrix(&c_refs, dims.critic());
            let mean = policy.actor.forward(&a_mat.view())?;
            let v = policy.value(&c_mat.view())?;
            let std: Vec<f64> = policy.log_std.iter().map(|l| l.exp()).collect();

            for (e, agent) in agents.iter_mut().enumerate() {
                let row = t * ne + e;
                actor_obs.row_mut(row).assign(&a_mat.row(e));
                critic_obs.row_mut(row).assign(&c_mat.row(e));
                let raw: [f64; 4] = std::array::from_fn(|j| {
                    let z: f64 = StandardNormal.sample(&mut agent.rng);
                    mean[(e, j)] + std[j] * z
                });
                for j in 0..4 {
                    actions[(row, j)] = raw[j];
                }
                values[row] = v[e];
                let cmd = Command::from_array(space, cbox.from_normalized(&raw));
                let res = agent.env.step(&cmd)?;
                err_sum += (res.info.state.p - res.info.reference.p).norm();
                err_n += 1;
                let mut r = res.reward * ppo.reward_scale;
                agent.episode_return += res.reward;
                if res.done {
                    if !res.crashed {
                        // time-limit end: bootstrap with the value of the final observation
                        let c = res.obs.critic(&dims);
                        let cv = ArrayView2::from_shape((1, c.len()), &c).expect("row");
                        r += ppo.gamma * policy.value(&cv)?[0];
                    }
                    finished += 1;
                    crashes += res.crashed as usize;
                    return_sum += agent.episode_return;
                    agent.episode_return = 0.0;
                    let traj = pick_trajectory(trajs, &mut agent.rng);
                    let env_seed = agent.rng.random();
                    agent.obs = agent.env.reset(traj, env_seed);
                } else {
                    agent.obs = res.obs;
                }
                rewards[row] = r;
                dones[row] = res.done;
            }
        }
        {
            let lp = log_prob(&policy.actor.forward(&actor_obs.view())?, &policy.log_std, &actions);
            old_logp.assign(&lp);
        }

        let critic_rows: Vec<Vec<f64>> = agents.iter().map(|a| a.obs.critic(&dims)).collect();
        let c_refs: Vec<&[f64]> = critic_rows.iter().map(|r| r.as_slice()).collect();
        let last_values = policy.value(&rows_to_matrix(&c_refs, dims.critic()).view())?;
        let mut advantages = Array1::<f64>::zeros(batch);
        let mut returns = Array1::<f64>::zeros(batch);
        for e in 0..ne {
            let idx: Vec<usize> = (0..t_len).map(|t| t * ne + e).collect();
            let r: Vec<f64> = idx.iter().map(|&i| rewards[i]).collect();
            let v: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
            let d: Vec<bool> = idx.iter().map(|&i| dones[i]).collect();
            let (a, ret) = gae(&r, &v, &d, last_values[e], ppo.gamma, ppo.gae_lambda);
            for (k, &i) in idx.iter().enumerate() {
                advantages[i] = a[k];
                returns[i] = ret[k];
            }
        }
        if ppo.normalize_advantages {
            let mean = advantages.mean().unwrap_or(0.0);
            let std = advantages.std(0.0).max(1e-8);
            advantages.mapv_inplace(|a| (a - mean) / std);
        }

        if ppo.lr_anneal {
            optimizer.scale_lr(1.0 - iter as f64 / iterations as f64, ppo);
        }
        let last_good = policy.clone();
        let mut order: Vec<usize> = (0..batch).collect();
        'epochs: for _ in 0..ppo.epochs {
            order.shuffle(&mut main_rng);
            for chunk in order.chunks(ppo.minibatch.min(batch)) {
                let mb = Minibatch {
                    actor_obs: actor_obs.select(Axis(0), chunk),
                    critic_obs: critic_obs.select(Axis(0), chunk),
                    actions: actions.select(Axis(0), chunk),
                    old_log_probs: old_logp.select(Axis(0), chunk),
                    advantages: advantages.select(Axis(0), chunk),
                    returns: returns.select(Axis(0), chunk),
                };
                let (_, grads) = match ppo_loss_and_grad(&policy, &mb, ppo) {
                    Ok(v) => v,
                    Err(e) => {
                        policy = last_good.clone();
                        return Ok(TrainOutcome {
                            policy,
                            curve,
                            diverged: Some(e.to_string()),
                        });
                    }
                };
                optimizer.apply(&mut policy, &grads, ppo);
                if !policy.is_finite() {
                    break 'epochs;
                }
            }
        }
        if !policy.is_finite() {
            return Ok(TrainOutcome {
                policy: last_good,
                curve,
                diverged: Some(format!("non-finite parameters after iteration {}", iter + 1)),
            });
        }

        let row = CurveRow {
            iteration: iter + 1,
            env_steps: (iter as u64 + 1) * steps_per_iter,
            mean_return: if finished > 0 { return_sum / finished as f64 } else { f64::NAN },
            mean_pos_error_cm: 100.0 * err_sum / err_n.max(1) as f64,
            crash_rate: if finished > 0 { crashes as f64 / finished as f64 } else { 0.0 },
        };
        log::info!(
            "iter {} steps {} return {:.2} err {:.1} cm crash {:.2}",
            row.iteration,
            row.env_steps,
            row.mean_return,
            row.mean_pos_error_cm,
            row.crash_rate
        );
        curve.push(row);
        if ppo.checkpoint_every > 0 && (iter + 1) % ppo.checkpoint_every == 0 {
            checkpoint(iter + 1, &policy)?;
        }
    }
    Ok(TrainOutcome {
        policy,
        curve,
        diverged: None,
    })
}

/// Deterministic-mean evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalEpisode {
    pub crashed: bool,
    pub mean_pos_error: f64,
    pub episode_return: f64,
}

pub fn evaluate(policy: &Policy, env_cfg: &EnvConfig, traj: Arc<Trajectory>, seed: u64) -> Result<EvalEpisode> {
    let mut env = Env::new(env_cfg.clone(), traj.clone(), seed)?;
    let mut obs = env.reset(traj, seed);
    let (mut err, mut n, mut ret) = (0.0, 0usize, 0.0);
    loop {
        let cmd = policy.act(&obs.actor)?;
        let r = env.step(&cmd)?;
        ret += r.reward;
        if !r.crashed {
            err += (r.info.state.p - r.info.reference.p).norm();
            n += 1;
        }
        if r.done {
            return Ok(EvalEpisode {
                crashed: r.crashed,
                mean_pos_error: err / n.max(1) as f64,
                episode_return: ret,
            });
        }
        obs = r.obs;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_init_has_orthonormal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::orthogonal(10, 4, 1.0, &mut rng);
        let g = l.w.dot(&l.w.t());
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = NetShape {
            encoder: vec![3, 5],
            head: vec![4],
        };
        let net = Net::new(6, 7, 2, &shape, 1.0, &mut rng);
        let mut other = net.zeros_like();
        other.set_flat(&net.to_flat()).unwrap();
        assert_eq!(net, other);
        assert!(other.set_flat(&[1.0]).is_err());
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[1.0, -2.0]);
        assert!((p[0] - 0.9).abs() < 1e-9 && (p[1] + 0.9).abs() < 1e-9);
    }
}
