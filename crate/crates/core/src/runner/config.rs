use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::env::{EnvConfig, EnvName};
use crate::error::{Error, Result};
use crate::extensions::{RndConfig, SymmetrySpec};
use crate::nn::NetworkConfig;
use crate::ppo::PpoConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AlgoConfig {
    Ppo(PpoConfig),
    Distill(DistillConfig),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtensionsConfig {
    pub symmetry: Option<SymmetrySpec>,
    pub rnd: Option<RndConfig>,
}

fn one() -> usize {
    1
}

fn fifty() -> usize {
    50
}

fn yes() -> bool {
    true
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub algo: AlgoConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub extensions: ExtensionsConfig,
    #[serde(default)]
    pub seed: u64,
    pub max_iterations: usize,
    #[serde(default = "one")]
    pub log_interval: usize,
    #[serde(default = "fifty")]
    pub checkpoint_interval: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// When false, wall-clock fields in the metrics are written as zero so
    /// repeated runs produce byte-identical files.
    #[serde(default = "yes")]
    pub record_timing: bool,
}

impl RunConfig {
    pub fn new(env: EnvConfig, algo: AlgoConfig, max_iterations: usize) -> Self {
        Self {
            env,
            algo,
            network: NetworkConfig::default(),
            extensions: ExtensionsConfig::default(),
            seed: 0,
            max_iterations,
            log_interval: 1,
            checkpoint_interval: 50,
            out_dir: default_out(),
            record_timing: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn ppo(&self) -> Option<&PpoConfig> {
        match &self.algo {
            AlgoConfig::Ppo(p) => Some(p),
            AlgoConfig::Distill(_) => None,
        }
    }

    pub fn distill(&self) -> Option<&DistillConfig> {
        match &self.algo {
            AlgoConfig::Distill(d) => Some(d),
            AlgoConfig::Ppo(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.env.num_envs == 0 {
            return Err(Error::Config("env.num_envs must be >= 1".into()));
        }
        if self.log_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config("log_interval and checkpoint_interval must be >= 1".into()));
        }
        for w in &self.network.hidden_sizes {
            if *w == 0 {
                return Err(Error::Config("network hidden sizes must be >= 1".into()));
            }
        }
        if self.network.recurrent && self.network.hidden_dim == 0 {
            return Err(Error::Config("network.hidden_dim must be >= 1".into()));
        }
        if !self.network.value_init_scale.is_finite() || !self.network.init_log_std.is_finite() {
            return Err(Error::Config("network init values must be finite".into()));
        }
        match &self.algo {
            AlgoConfig::Ppo(p) => p.validate()?,
            AlgoConfig::Distill(d) => {
                d.validate()?;
                if self.extensions.symmetry.is_some() || self.extensions.rnd.is_some() {
                    return Err(Error::Config("extension blocks are only valid with ppo".into()));
                }
            }
        }
        if let Some(s) = &self.extensions.symmetry {
            s.validate()?;
            if self.network.recurrent {
                return Err(Error::Config("symmetry requires a feedforward network".into()));
            }
        }
        if let Some(r) = &self.extensions.rnd {
            r.validate()?;
        }
        if self.env.name == EnvName::ConstantReward && self.env.overrides.constant_reward.is_nan() {
            return Err(Error::Config("constant_reward must be a number".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "env": {"name": "point_mass", "num_envs": 8},
        "algo": {"ppo": {"learning_rate": 0.0005}},
        "max_iterations": 3
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.ppo().unwrap().learning_rate, 0.0005);
        assert_eq!(c.ppo().unwrap().gamma, 0.99);
        assert_eq!(c.checkpoint_interval, 50);
        assert_eq!(c.network.hidden_sizes, vec![64, 64]);
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn rejects_two_algorithms_and_unknown_keys() {
        let two = MINIMAL.replace(r#""algo": {"ppo": {"learning_rate": 0.0005}}"#, r#""algo": {"ppo": {}, "distill": {}}"#);
        assert!(RunConfig::from_json(&two).unwrap_err().is_config());
        let unknown = MINIMAL.replace("\"seed\"", "\"sed\"").replace("\"max_iterations\"", "\"bogus\": 1, \"max_iterations\"");
        assert!(RunConfig::from_json(&unknown).unwrap_err().is_config());
        let bad_env = MINIMAL.replace("point_mass", "cartpole");
        assert!(RunConfig::from_json(&bad_env).unwrap_err().is_config());
    }

    #[test]
    fn rejects_invalid_values() {
        let bad_gamma = MINIMAL.replace(r#""learning_rate": 0.0005"#, r#""gamma": 1.5"#);
        assert!(RunConfig::from_json(&bad_gamma).unwrap_err().is_config());
        let ext_with_distill = r#"{
            "env": {"name": "point_mass", "num_envs": 8},
            "algo": {"distill": {}},
            "extensions": {"rnd": {}},
            "max_iterations": 3
        }"#;
        assert!(RunConfig::from_json(ext_with_distill).unwrap_err().is_config());
    }
}
