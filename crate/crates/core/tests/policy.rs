use std::sync::Arc;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use quadbench::actuation::ActionSpace;
use quadbench::dynamics::PhysParams;
use quadbench::env::{Env, EnvConfig, Perturbation};
use quadbench::math::Vec3;
use quadbench::policy::*;
use quadbench::trajgen::{hover, Trajectory, SAMPLE_DT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_env() -> EnvConfig {
    EnvConfig {
        history: 2,
        reference: 2,
        perturbation: Perturbation::none(),
        ..EnvConfig::default()
    }
}

fn small_ppo() -> PpoConfig {
    PpoConfig {
        shape: NetShape {
            encoder: vec![6, 5],
            head: vec![7],
        },
        init_log_std: -0.4,
        ..PpoConfig::default()
    }
}

fn random_batch(policy: &Policy, n: usize, seed: u64) -> Minibatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = policy.meta.dims;
    let mut m = |r: usize, c: usize, s: f64| Array2::from_shape_fn((r, c), |_| rng.random_range(-s..s));
    let actor_obs = m(n, d.actor(), 1.0);
    let critic_obs = m(n, d.critic(), 1.0);
    let actions = m(n, 4, 1.2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mean = policy.mean_normalized(&actor_obs.view()).unwrap();
    let logp = log_prob(&mean, &policy.log_std, &actions);
    Minibatch {
        actor_obs,
        critic_obs,
        actions,
        // old policy a little off so both clipped and unclipped samples occur
        old_log_probs: logp.mapv(|l| l + rng.random_range(-0.4..0.4)),
        advantages: Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0)),
        returns: Array1::from_shape_fn(n, |_| rng.random_range(-3.0..3.0)),
    }
}

fn total_loss(policy: &Policy, batch: &Minibatch, cfg: &PpoConfig) -> f64 {
    ppo_loss_and_grad(policy, batch, cfg).unwrap().0.total
}

#[test]
fn analytic_gradients_match_central_differences() {
    let (env, ppo) = (small_env(), small_ppo());
    let policy = Policy::new(&env, &ppo, 3);
    let batch = random_batch(&policy, 24, 9);
    let (stats, g) = ppo_loss_and_grad(&policy, &batch, &ppo).unwrap();
    assert!(stats.clip_fraction > 0.0 && stats.clip_fraction < 1.0, "{}", stats.clip_fraction);

    let h = 1e-6;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let actor_flat = policy.actor.to_flat();
    let actor_grad = g.actor.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut check = |analytic: f64, perturb: &dyn Fn(f64) -> Policy| {
        let num = (total_loss(&perturb(h), &batch, &ppo) - total_loss(&perturb(-h), &batch, &ppo)) / (2.0 * h);
        let rel = (num - analytic).abs() / num.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(rel);
        checked += 1;
    };
    for _ in 0..60 {
        let i = rng.random_range(0..actor_flat.len());
        check(actor_grad[i], &|d| {
            let mut p = policy.clone();
            let mut f = actor_flat.clone();
            f[i] += d;
            p.actor.set_flat(&f).unwrap();
            p
        });
    }
    let critic_flat = policy.critic.to_flat();
    let critic_grad = g.critic.to_flat();
    for _ in 0..60 {
        let i = rng.random_range(0..critic_flat.len());
        check(critic_grad[i], &|d| {
            let mut p = policy.clone();
            let mut f = critic_flat.clone();
            f[i] += d;
            p.critic.set_flat(&f).unwrap();
            p
        });
    }
    for j in 0..4 {
        check(g.log_std[j], &|d| {
            let mut p = policy.clone();
            p.log_std[j] += d;
            p
        });
    }
    assert_eq!(checked, 124);
    assert!(worst <= 1e-4, "worst relative gradient error {worst}");
}

/// Advantages from explicit discounted sums of TD residuals.
fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], last: f64, g: f64, l: f64) -> Vec<f64> {
    let n = r.len();
    let next_v = |t: usize| if t + 1 < n { v[t + 1] } else { last };
    let delta: Vec<f64> = (0..n)
        .map(|t| r[t] + if d[t] { 0.0 } else { g * next_v(t) } - v[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut w = 1.0;
            for k in t..n {
                sum += w * delta[k];
                if d[k] {
                    break;
                }
                w *= g * l;
            }
            sum
        })
        .collect()
}

#[test]
fn gae_matches_explicit_sums() {
    let r = [1.0, -0.5, 2.0, 0.0, 0.3, -1.0, 0.7];
    let v = [0.2, 0.1, -0.3, 0.5, 0.0, 0.4, -0.2];
    let d = [false, false, true, false, false, true, false];
    let (adv, ret) = gae(&r, &v, &d, 0.9, 0.98, 0.95);
    let oracle = gae_oracle(&r, &v, &d, 0.9, 0.98, 0.95);
    for t in 0..r.len() {
        assert!((adv[t] - oracle[t]).abs() < 1e-12);
        assert!((ret[t] - (oracle[t] + v[t])).abs() < 1e-12);
    }
    // single step: delta only
    let (a, _) = gae(&[1.0], &[0.5], &[false], 2.0, 0.9, 0.5);
    assert!((a[0] - (1.0 + 0.9 * 2.0 - 0.5)).abs() < 1e-15);
}

#[test]
fn actor_never_sees_privileged_information() {
    let env_cfg = EnvConfig::randomized(ActionSpace::Ctbr);
    let policy = Policy::new(&env_cfg, &PpoConfig::default(), 4);
    let dims = policy.meta.dims;
    assert_eq!(policy.actor.inputs(), dims.actor());
    assert_eq!(policy.critic.inputs(), dims.critic());
    let traj = Arc::new(Trajectory::sample(&hover(Vec3::new(0.0, 0.0, 2.0), 2.0), &PhysParams::default(), SAMPLE_DT, "h").unwrap());
    let mut env = Env::new(env_cfg, traj.clone(), 0).unwrap();
    let mut obs = env.reset(traj.clone(), 1);
    let before = policy.act(&obs.actor).unwrap();
    let v0 = policy.value(&ndarray::ArrayView2::from_shape((1, dims.critic()), &obs.critic(&dims)).unwrap()).unwrap()[0];
    obs.privileged.iter_mut().for_each(|p| *p += 0.3);
    assert_eq!(policy.act(&obs.actor).unwrap(), before);
    let v1 = policy.value(&ndarray::ArrayView2::from_shape((1, dims.critic()), &obs.critic(&dims)).unwrap()).unwrap()[0];
    assert_ne!(v0, v1);
}

#[test]
fn zero_weights_give_box_center() {
    let env_cfg = EnvConfig::default();
    let mut policy = Policy::new(&env_cfg, &PpoConfig::default(), 0);
    policy.actor = policy.actor.zeros_like();
    let obs = vec![0.3; policy.meta.dims.actor()];
    let (mean, std) = policy.actor_forward(&obs).unwrap();
    let b = env_cfg.command_box();
    assert_eq!(mean, b.center());
    for i in 0..4 {
        assert!((std[i] - b.half_width()[i] * (-1.0f64).exp()).abs() < 1e-12);
    }
    assert!(policy.actor_forward(&obs[1..]).is_err());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (env, ppo) = (small_env(), small_ppo());
    let policy = Policy::new(&env, &ppo, 8);
    let bytes = encode_checkpoint(&policy);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, policy);
    let obs: Vec<f64> = (0..policy.meta.dims.actor()).map(|i| (i as f64 * 0.37).sin()).collect();
    let (a, b) = (policy.actor_forward(&obs).unwrap(), back.actor_forward(&obs).unwrap());
    for i in 0..4 {
        assert_eq!(a.0[i].to_bits(), b.0[i].to_bits());
    }
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode_checkpoint(b"QBPOLICY").is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(decode_checkpoint(&wrong).is_err());
    assert_eq!(back.meta.config_hash, config_hash(&env, &ppo));
}

#[test]
fn ppo_step_reduces_the_surrogate_loss() {
    let (env, ppo) = (small_env(), small_ppo());
    let mut policy = Policy::new(&env, &ppo, 5);
    let batch = random_batch(&policy, 64, 2);
    let before = total_loss(&policy, &batch, &ppo);
    let mut opt = PpoOptimizer::new(&policy, &PpoConfig { actor_lr: 1e-3, critic_lr: 1e-3, ..ppo.clone() });
    for _ in 0..20 {
        let (_, g) = ppo_loss_and_grad(&policy, &batch, &ppo).unwrap();
        opt.apply(&mut policy, &g, &ppo);
    }
    assert!(total_loss(&policy, &batch, &ppo) < before);
}

#[test]
fn short_training_run_is_deterministic_and_logs_curve() {
    let env_cfg = small_env();
    let ppo = PpoConfig {
        num_envs: 3,
        rollout_len: 16,
        minibatch: 20,
        epochs: 2,
        total_steps: 3 * 16 * 3,
        checkpoint_every: 2,
        ..small_ppo()
    };
    let traj = Arc::new(Trajectory::sample(&hover(Vec3::new(0.0, 0.0, 2.0), 0.5), &PhysParams::default(), SAMPLE_DT, "h").unwrap());
    let mut saved = Vec::new();
    let a = train(&env_cfg, &ppo, &[traj.clone()], 1, |it, _| {
        saved.push(it);
        Ok(())
    })
    .unwrap();
    let b = train(&env_cfg, &ppo, &[traj], 1, |_, _| Ok(())).unwrap();
    assert_eq!(saved, vec![2]);
    assert_eq!(a.curve.len(), 3);
    assert_eq!(a.policy, b.policy);
    assert!(a.diverged.is_none());
    let steps: Vec<u64> = a.curve.iter().map(|r| r.env_steps).collect();
    assert_eq!(steps, vec![48, 96, 144]);
    let mut csv = Vec::new();
    write_curve(&a.curve, &mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("iteration,env_steps,mean_return,mean_pos_error_cm,crash_rate\n"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_checkpoint(&bytes);
        let mut framed = b"QBPOLICY\x01\x00\x00\x00".to_vec();
        framed.extend_from_slice(&bytes);
        let _ = decode_checkpoint(&framed);
    }
}
