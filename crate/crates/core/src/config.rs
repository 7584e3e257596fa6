//! One TOML schema shared by every command. Missing sections take their defaults.

use serde::{Deserialize, Serialize};

use crate::bench::{LatencyMode, TrackingSetup};
use crate::dynamics::PhysParams;
use crate::env::{EnvConfig, Perturbation};
use crate::error::{Error, Result};
use crate::mpc::MpcConfig;
use crate::policy::PpoConfig;
use crate::trajgen::TrainingSetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingOptions {
    /// Vehicle flown in evaluation; `None` uses the environment's nominal parameters.
    pub plant: Option<PhysParams>,
    pub latency_mode: LatencyMode,
    pub start_perturbation: Perturbation,
    pub ramp_time: f64,
}

impl Default for TrackingOptions {
    fn default() -> Self {
        let s = TrackingSetup::default();
        Self {
            plant: None,
            latency_mode: s.latency_mode,
            start_perturbation: s.start_perturbation,
            ramp_time: s.ramp_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub mpc: MpcConfig,
    pub tracking: TrackingOptions,
    pub training_set: TrainingSetConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        self.mpc.validate()?;
        if !(self.tracking.ramp_time >= 0.0) {
            return Err(Error::InvalidValue {
                key: "tracking.ramp_time".into(),
                reason: "must be non-negative".into(),
            });
        }
        Ok(())
    }

    /// Tracking setup for one evaluation row.
    pub fn tracking_setup(&self, seed: u64) -> TrackingSetup {
        TrackingSetup {
            env: self.env.clone(),
            plant: self.tracking.plant.clone().unwrap_or_else(|| self.env.nominal.clone()),
            latency_mode: self.tracking.latency_mode,
            start_perturbation: self.tracking.start_perturbation.clone(),
            seed,
            ramp_time: self.tracking.ramp_time,
            keep_log: false,
        }
    }
}

/// Dotted paths of the leaves where two serialized values differ.
pub fn diff_keys(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(a: &serde_json::Value, b: &serde_json::Value, path: &str, out: &mut Vec<String>) {
        use serde_json::Value;
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(u, v, &p, out),
                        _ => out.push(p),
                    }
                }
            }
            _ if a != b => out.push(path.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}
