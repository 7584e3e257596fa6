use quadbench::actuation::ActionSpace;
use quadbench::bench::LatencyMode;
use quadbench::config::{diff_keys, RunConfig};
use quadbench::mpc::MpcVariant;

#[test]
fn default_config_round_trips_through_toml() {
    let cfg = RunConfig::default();
    let text = cfg.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
}

#[test]
fn partial_sections_keep_other_defaults() {
    let cfg = RunConfig::from_toml(
        r#"
[env]
action_space = "srt"
history = 5
latency = 0.02

[ppo]
total_steps = 2000000

[mpc]
variant = "srt"

[tracking]
latency_mode = "measurement"
"#,
    )
    .unwrap();
    let d = RunConfig::default();
    assert_eq!(cfg.env.action_space, ActionSpace::Srt);
    assert_eq!(cfg.env.history, 5);
    assert_eq!(cfg.env.reference, d.env.reference);
    assert_eq!(cfg.ppo.total_steps, 2_000_000);
    assert_eq!(cfg.ppo.gamma, d.ppo.gamma);
    assert_eq!(cfg.mpc.variant, MpcVariant::Srt);
    assert_eq!(cfg.tracking.latency_mode, LatencyMode::Measurement);
    let setup = cfg.tracking_setup(4);
    assert_eq!(setup.seed, 4);
    assert_eq!(setup.env.latency, 0.02);
    assert_eq!(setup.plant, cfg.env.nominal);
}

#[test]
fn unknown_and_invalid_keys_are_named() {
    let err = RunConfig::from_toml("[env]\nhistroy = 3\n").unwrap_err().to_string();
    assert!(err.contains("histroy"), "{err}");
    let err = RunConfig::from_toml("[ppo]\ngamma = 1.5\n").unwrap_err().to_string();
    assert!(err.contains("gamma"), "{err}");
    let err = RunConfig::from_toml("[tracking]\nramp_time = -1.0\n").unwrap_err().to_string();
    assert!(err.contains("ramp_time"), "{err}");
    assert!(RunConfig::from_toml("[env\n").is_err());
}

#[test]
fn diff_keys_lists_changed_leaves() {
    let a = RunConfig::default();
    let mut b = a.clone();
    b.env.history = 3;
    b.env.reward.position = 0.2;
    let keys = diff_keys(&serde_json::to_value(&a).unwrap(), &serde_json::to_value(&b).unwrap());
    assert_eq!(keys, vec!["env.history".to_string(), "env.reward.position".to_string()]);
    assert!(diff_keys(&serde_json::to_value(&a).unwrap(), &serde_json::to_value(&a).unwrap()).is_empty());
}
