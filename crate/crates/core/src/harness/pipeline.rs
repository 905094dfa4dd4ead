//! The steps of one run: data, energy model, training, evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method, Task};
use super::eval::{action_matching, mean_se, rollout_returns, scale_return, ActionMatching, Controller};
use crate::autodiff::Array;
use crate::baselines::{train_baseline, BaselinePolicy};
use crate::ebm::{train_ebm, EnergyModel};
use crate::envsuite::{
    cartpole_test_env, cartpole_train_family, clinical, generate_dataset, Dataset, EnvironmentSpec, InterventionSpec,
    ScriptedExpert,
};
use crate::error::{Error, Result};
use crate::icil::{train_icil, IcilModel, LossMask};
use crate::policy::{ActMode, Policy};
use crate::rng;

/// Reference returns that anchor the scaled return.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub r_random: f64,
    pub r_expert: f64,
    pub episodes: usize,
    pub seed: u64,
}

/// Mean returns of the uniform-random policy and the scripted expert on
/// CartPole without spurious features.
pub fn measure_references(episodes: usize, seed: u64) -> Result<References> {
    let spec = EnvironmentSpec::cartpole(0, InterventionSpec::none());
    let expert = ScriptedExpert::default();
    let random = rollout_returns::<BaselinePolicy>(&Controller::Random, &spec, episodes, rng::derive_seed(seed, &[0]))?;
    let expert = rollout_returns::<BaselinePolicy>(&Controller::Expert(&expert), &spec, episodes, rng::derive_seed(seed, &[1]))?;
    Ok(References { r_random: mean_se(&random)?.mean, r_expert: mean_se(&expert)?.mean, episodes, seed })
}

/// Loads cached references from `path` when they match, otherwise measures
/// and stores them.
pub fn cached_references(path: &Path, episodes: usize, seed: u64) -> Result<References> {
    if let Ok(text) = std::fs::read_to_string(path) {
        if let Ok(r) = serde_json::from_str::<References>(&text) {
            if r.episodes == episodes && r.seed == seed {
                return Ok(r);
            }
        }
    }
    let r = measure_references(episodes, seed)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(&r)?)?;
    Ok(r)
}

const HELD_OUT: u64 = 0x4845_4c44;

/// Where a trained policy is scored.
#[derive(Clone, Debug)]
pub enum TestTarget {
    /// Online rollouts in a CartPole environment with fresh factors.
    Online(EnvironmentSpec),
    /// Action matching on held-out patients.
    Offline(Dataset),
}

/// Everything shared by the methods of one `(n_traj, noise_dim, seed)` run.
pub struct Fixture {
    pub n_traj: usize,
    pub noise_dim: usize,
    pub seed: u64,
    pub train: Dataset,
    pub test: TestTarget,
    ebm: Option<EnergyModel>,
    held_out: Option<Dataset>,
}

impl Fixture {
    pub fn build(cfg: &ExperimentConfig, n_traj: usize, noise_dim: usize, seed: u64) -> Result<Self> {
        let path = [n_traj as u64, noise_dim as u64];
        let (train, test) = match cfg.task {
            Task::Cartpole => {
                let env_feature = cfg.cartpole.env_feature;
                let specs = cartpole_train_family(noise_dim, env_feature)?;
                let train = generate_dataset(&specs, &ScriptedExpert::default(), n_traj, seed)?;
                let mut r = rng::stream(seed, "test-env", &path);
                let test = cartpole_test_env(specs.len(), noise_dim, env_feature, &mut r)?;
                (train, TestTarget::Online(test))
            }
            Task::OfflineClinical => {
                let c = &cfg.clinical;
                let train = clinical::offline_clinical_dataset(n_traj, &c.train_agreement, seed, &c.generator)?;
                let spec = clinical::clinical_spec(c.train_agreement.len(), c.test_agreement, &c.generator)?;
                let test = clinical::clinical_dataset_for(&[spec], c.test_patients, rng::derive_seed(seed, &path), &c.generator)?;
                (train, TestTarget::Offline(test))
            }
        };
        Ok(Self { n_traj, noise_dim, seed, train, test, ebm: None, held_out: None })
    }

    /// A held-out environment from the training distribution, if online.
    pub fn train_env(&self) -> Option<&EnvironmentSpec> {
        match self.test {
            TestTarget::Online(_) => self.train.header.env_specs.first(),
            TestTarget::Offline(_) => None,
        }
    }

    /// The energy model for this fixture, trained on first use.
    pub fn ebm(&mut self, cfg: &ExperimentConfig) -> Result<&EnergyModel> {
        if self.ebm.is_none() {
            let mut r = rng::stream(self.seed, "ebm", &[self.n_traj as u64, self.noise_dim as u64]);
            let (model, _) = train_ebm(&self.train.transitions()?.obs, &cfg.ebm, &mut r)?;
            self.ebm = Some(model);
        }
        Ok(self.ebm.as_ref().expect("just trained"))
    }

    pub fn set_ebm(&mut self, model: EnergyModel) {
        self.ebm = Some(model);
    }

    /// Fresh demonstrations from the training environments, generated on
    /// first use from a seed unrelated to the training data.
    pub fn held_out(&mut self, cfg: &ExperimentConfig) -> Result<&Dataset> {
        if self.held_out.is_none() {
            let seed = rng::derive_seed(rng::derive_seed(self.seed, &[self.n_traj as u64, self.noise_dim as u64]), &[HELD_OUT]);
            let specs = &self.train.header.env_specs;
            let ds = match cfg.task {
                Task::Cartpole => generate_dataset(specs, &ScriptedExpert::default(), self.n_traj, seed)?,
                Task::OfflineClinical => clinical::clinical_dataset_for(specs, self.n_traj, seed, &cfg.clinical.generator)?,
            };
            self.held_out = Some(ds);
        }
        Ok(self.held_out.as_ref().expect("just generated"))
    }
}

/// A trained imitation policy of any method.
#[derive(Clone, Debug)]
pub enum Trained {
    Icil(IcilModel),
    Baseline(BaselinePolicy),
}

impl Trained {
    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Trained::Icil(m) => m.save(path),
            Trained::Baseline(p) => p.save(path),
        }
    }

    /// Loads either kind of checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        match IcilModel::load(path) {
            Ok(m) => Ok(Trained::Icil(m)),
            Err(Error::Format { .. }) => BaselinePolicy::load(path).map(Trained::Baseline),
            Err(e) => Err(e),
        }
    }
}

impl Policy for Trained {
    fn obs_dim(&self) -> usize {
        match self {
            Trained::Icil(m) => m.obs_dim(),
            Trained::Baseline(p) => p.obs_dim(),
        }
    }

    fn action_count(&self) -> usize {
        match self {
            Trained::Icil(m) => m.action_count(),
            Trained::Baseline(p) => p.action_count(),
        }
    }

    fn logits(&self, obs: &Array) -> Result<Array> {
        match self {
            Trained::Icil(m) => m.logits(obs),
            Trained::Baseline(p) => p.logits(obs),
        }
    }
}

/// Trains `method` on the fixture; `mask` only affects ICIL.
pub fn train_method(cfg: &ExperimentConfig, fixture: &mut Fixture, method: Method, mask: LossMask) -> Result<Trained> {
    match method {
        Method::Icil => {
            let icil_cfg = crate::icil::IcilConfig { losses: mask, ..cfg.icil.clone() };
            let ebm = if mask.energy { Some(fixture.ebm(cfg)?.clone()) } else { None };
            let (model, _) = train_icil(&fixture.train, ebm.as_ref(), &icil_cfg, fixture.seed)?;
            Ok(Trained::Icil(model))
        }
        Method::Baseline(kind) => {
            let (policy, _) = train_baseline(kind, &fixture.train, &cfg.baseline, fixture.seed)?;
            Ok(Trained::Baseline(policy))
        }
    }
}

/// Scores of one trained policy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub raw_return: Option<f64>,
    pub scaled_return: Option<f64>,
    pub train_raw_return: Option<f64>,
    pub train_scaled_return: Option<f64>,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub apr: Option<f64>,
    /// ICIL only: mean environment-classifier entropy on held-out
    /// training-environment observations, in nats.
    pub classifier_entropy: Option<f64>,
}

/// Mean undiscounted return of greedy rollouts.
pub fn online_return<P: Policy>(policy: &P, spec: &EnvironmentSpec, episodes: usize, seed: u64, mode: ActMode) -> Result<f64> {
    Ok(mean_se(&rollout_returns(&Controller::Policy(policy, mode), spec, episodes, seed)?)?.mean)
}

/// Evaluates a policy on the fixture's test target, and on a training
/// environment when `train_env` is set and the task is online. ICIL models
/// also report their classifier entropy on held-out demonstrations.
pub fn evaluate(
    cfg: &ExperimentConfig,
    fixture: &mut Fixture,
    policy: &Trained,
    refs: Option<&References>,
    train_env: bool,
) -> Result<Scores> {
    let mut s = Scores::default();
    match &fixture.test {
        TestTarget::Online(spec) => {
            let refs = refs.ok_or_else(|| Error::invalid("online evaluation needs reference returns"))?;
            let seed = rng::derive_seed(fixture.seed, &[fixture.n_traj as u64, fixture.noise_dim as u64]);
            let raw = online_return(policy, spec, cfg.rollout_episodes, seed, ActMode::Greedy)?;
            s.raw_return = Some(raw);
            s.scaled_return = Some(scale_return(raw, refs.r_random, refs.r_expert)?);
            if train_env {
                if let Some(env) = fixture.train_env() {
                    let raw = online_return(policy, env, cfg.rollout_episodes, seed, ActMode::Greedy)?;
                    s.train_raw_return = Some(raw);
                    s.train_scaled_return = Some(scale_return(raw, refs.r_random, refs.r_expert)?);
                }
            }
        }
        TestTarget::Offline(ds) => {
            let ActionMatching { acc, auc, apr } = action_matching(policy, ds)?;
            (s.acc, s.auc, s.apr) = (Some(acc), Some(auc), Some(apr));
        }
    }
    if let Trained::Icil(model) = policy {
        let obs = fixture.held_out(cfg)?.transitions()?.obs;
        s.classifier_entropy = Some(model.classifier_entropy(&obs)?);
    }
    Ok(s)
}
