//! JSON experiment configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{BaselineConfig, BaselineKind};
use crate::ebm::EbmConfig;
use crate::envsuite::ClinicalConfig;
use crate::error::{Error, Result};
use crate::icil::IcilConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Cartpole,
    OfflineClinical,
}

/// A learner the harness can train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Icil,
    Baseline(BaselineKind),
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline(BaselineKind::Bc),
        Method::Baseline(BaselineKind::Rcal),
        Method::Baseline(BaselineKind::BcIrm),
        Method::Baseline(BaselineKind::RcalIrm),
        Method::Icil,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Icil => "icil",
            Method::Baseline(k) => k.name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "icil" {
            return Ok(Method::Icil);
        }
        s.parse::<BaselineKind>()
            .map(Method::Baseline)
            .map_err(|_| Error::invalid(format!("unknown method `{s}`; expected icil, bc, rcal, bc-irm or rcal-irm")))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Settings of the spurious CartPole family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartpoleSettings {
    /// Spurious copies per environment.
    pub noise_dim: usize,
    /// Append a constant environment-id coordinate to observations.
    pub env_feature: bool,
}

impl Default for CartpoleSettings {
    fn default() -> Self {
        Self { noise_dim: 3, env_feature: false }
    }
}

/// Settings of the synthetic clinical task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClinicalSettings {
    pub generator: ClinicalConfig,
    pub train_agreement: Vec<f64>,
    pub test_agreement: f64,
    /// Test patients; training uses the trajectory grid.
    pub test_patients: usize,
}

impl Default for ClinicalSettings {
    fn default() -> Self {
        Self { generator: ClinicalConfig::default(), train_agreement: vec![0.1, 0.2], test_agreement: 0.8, test_patients: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Trajectories per training environment.
    pub n_traj_grid: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: u64,
    pub rollout_episodes: usize,
    /// Episodes used to measure the random and expert reference returns.
    pub reference_episodes: usize,
    pub cartpole: CartpoleSettings,
    pub clinical: ClinicalSettings,
    pub ebm: EbmConfig,
    pub icil: IcilConfig,
    pub baseline: BaselineConfig,
    /// Trajectories per environment for `ablate`.
    pub ablation_n_traj: usize,
    /// Trajectories per environment for `noise-sweep`.
    pub noise_n_traj: usize,
    pub noise_grid: Vec<usize>,
    /// Also evaluate CartPole policies on a training environment.
    pub eval_train_env: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Cartpole,
            n_traj_grid: vec![1, 5, 10, 15, 20],
            methods: Method::ALL.to_vec(),
            seeds: 10,
            rollout_episodes: 300,
            reference_episodes: 1000,
            cartpole: CartpoleSettings::default(),
            clinical: ClinicalSettings::default(),
            ebm: EbmConfig::default(),
            icil: IcilConfig::default(),
            baseline: BaselineConfig::default(),
            ablation_n_traj: 5,
            noise_n_traj: 5,
            noise_grid: vec![3, 6, 9, 12],
            eval_train_env: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::invalid("seeds must be at least 1"));
        }
        if self.rollout_episodes == 0 || self.reference_episodes == 0 {
            return Err(Error::invalid("rollout and reference episodes must be at least 1"));
        }
        if self.n_traj_grid.is_empty() || self.n_traj_grid.contains(&0) {
            return Err(Error::invalid("the trajectory grid must be non-empty and positive"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("at least one method is required"));
        }
        if self.noise_grid.is_empty() || self.ablation_n_traj == 0 || self.noise_n_traj == 0 {
            return Err(Error::invalid("ablation and noise-sweep settings must be positive and non-empty"));
        }
        if self.task == Task::OfflineClinical {
            let c = &self.clinical;
            if c.train_agreement.len() < 2 || c.test_patients == 0 {
                return Err(Error::invalid("the clinical task needs two training environments and test patients"));
            }
        }
        Ok(())
    }

    /// Short digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.seeds = 3;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seeds": 2, "methods": ["icil", "bc-irm"], "icil": {"iterations": 50}}"#).unwrap();
        assert_eq!(cfg.seeds, 2);
        assert_eq!(cfg.methods, vec![Method::Icil, Method::Baseline(BaselineKind::BcIrm)]);
        assert_eq!(cfg.icil.iterations, 50);
        assert_eq!(cfg.icil.batch, 64);
        assert_eq!(cfg.rollout_episodes, 300);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sedes": 2}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"methods": ["gail"]}"#).is_err());
        let cfg = ExperimentConfig { seeds: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
