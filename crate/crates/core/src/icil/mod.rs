//! Invariant causal imitation learning.
//!
//! A shared encoder `φ` maps observations to a representation `s` that feeds
//! the policy `π`. Per-environment encoders `μᵉ` capture the remaining
//! variation `ηᵉ`. Dynamics heads `g_s`, `g_ηᵉ` and a decoder `ψ` predict the
//! next observation. An adversarial environment classifier keeps `s` free of
//! environment information, a statistics network penalizes dependence between
//! `s` and `η`, and a frozen energy model pulls imagined next observations
//! towards the expert distribution.

mod losses;
mod train;

use std::path::Path;

use rand::Rng;
use rand_distr::Gumbel;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Activation, Array, Binder, Graph, Mlp, ParameterStore, Var};
use crate::envsuite::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::mine::StatisticsNetwork;
use crate::policy::Policy;
use crate::rng;

pub use losses::{build_losses, expected_routing, routing_audit, LossGraph, LossName, RoutingEntry};
pub use train::{train_icil, write_history_csv, LossBreakdown};

/// Loss terms that can be removed for ablations. `L_π` is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTerm {
    Inv,
    Dyn,
    Mi,
    Energy,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Inv, LossTerm::Dyn, LossTerm::Mi, LossTerm::Energy];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Inv => "inv",
            LossTerm::Dyn => "dyn",
            LossTerm::Mi => "mi",
            LossTerm::Energy => "energy",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossMask {
    pub inv: bool,
    pub dynamics: bool,
    pub mi: bool,
    pub energy: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        Self { inv: true, dynamics: true, mi: true, energy: true }
    }
}

impl LossMask {
    pub fn only_policy() -> Self {
        Self { inv: false, dynamics: false, mi: false, energy: false }
    }

    pub fn without(mut self, term: LossTerm) -> Self {
        *self.flag(term) = false;
        self
    }

    pub fn has(self, term: LossTerm) -> bool {
        match term {
            LossTerm::Inv => self.inv,
            LossTerm::Dyn => self.dynamics,
            LossTerm::Mi => self.mi,
            LossTerm::Energy => self.energy,
        }
    }

    fn flag(&mut self, term: LossTerm) -> &mut bool {
        match term {
            LossTerm::Inv => &mut self.inv,
            LossTerm::Dyn => &mut self.dynamics,
            LossTerm::Mi => &mut self.mi,
            LossTerm::Energy => &mut self.energy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcilConfig {
    pub learning_rate: f64,
    pub batch: usize,
    pub iterations: usize,
    /// Representation size; defaults to the base-state dimension.
    pub s_dim: Option<usize>,
    /// Noise-representation size; defaults to the number of non-base features.
    pub eta_dim: Option<usize>,
    pub temperature: f64,
    pub losses: LossMask,
    /// Feed the environment-id coordinate (when present) to `φ`.
    pub phi_sees_env_feature: bool,
}

impl Default for IcilConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch: 64,
            iterations: 10_000,
            s_dim: None,
            eta_dim: None,
            temperature: 1.0,
            losses: LossMask::default(),
            phi_sees_env_feature: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcilDims {
    pub obs: usize,
    /// Leading observation columns seen by `φ`.
    pub phi_input: usize,
    pub s: usize,
    pub eta: usize,
    pub actions: usize,
    pub envs: usize,
}

impl IcilDims {
    pub fn for_dataset(ds: &Dataset, config: &IcilConfig) -> Result<Self> {
        let h = &ds.header;
        let env_feature = h.env_specs.first().is_some_and(|s| s.env_feature);
        let extra = usize::from(env_feature);
        let phi_input = if env_feature && !config.phi_sees_env_feature { h.obs_dim - 1 } else { h.obs_dim };
        let s = config.s_dim.unwrap_or(h.base_dim);
        let eta = config.eta_dim.unwrap_or_else(|| (h.obs_dim - h.base_dim - extra).max(1));
        if s == 0 || eta == 0 {
            return Err(Error::invalid("representation sizes must be positive"));
        }
        Ok(Self { obs: h.obs_dim, phi_input, s, eta, actions: h.action_count, envs: ds.env_ids().len() })
    }
}

/// All ICIL networks in one parameter store.
#[derive(Clone, Debug)]
pub struct IcilModel {
    pub config: IcilConfig,
    pub dims: IcilDims,
    pub store: ParameterStore,
    pub normalizer: Normalizer,
    pub env_ids: Vec<usize>,
}

impl IcilModel {
    /// Fresh model; every network draws its initial weights from its own
    /// stream derived from `seed` and the network name.
    pub fn new(dims: IcilDims, config: IcilConfig, normalizer: Normalizer, env_ids: Vec<usize>, seed: u64) -> Result<Self> {
        if env_ids.len() != dims.envs {
            return Err(Error::invalid("one environment id per trained environment is required"));
        }
        if normalizer.dim() != dims.obs {
            return Err(Error::shape("icil", format!("normalizer covers {} features, observations have {}", normalizer.dim(), dims.obs)));
        }
        let mut model = Self { config, dims, store: ParameterStore::new(), normalizer, env_ids };
        for net in model.networks() {
            let mut r = init_stream(seed, &net.name);
            net.init(&mut model.store, &mut r)?;
        }
        Ok(model)
    }

    pub fn phi(&self) -> Mlp {
        Mlp::standard("phi", self.dims.phi_input, self.dims.s, Activation::Elu)
    }

    pub fn mu(&self, k: usize) -> Mlp {
        Mlp::standard(format!("mu{k}"), self.dims.obs, self.dims.eta, Activation::Elu)
    }

    pub fn gs(&self) -> Mlp {
        Mlp::standard("gs", self.dims.s + self.dims.actions, self.dims.s, Activation::Elu)
    }

    pub fn geta(&self, k: usize) -> Mlp {
        Mlp::standard(format!("geta{k}"), self.dims.eta + self.dims.actions, self.dims.eta, Activation::Elu)
    }

    pub fn psi(&self) -> Mlp {
        Mlp::standard("psi", self.dims.s + self.dims.eta, self.dims.obs, Activation::Elu)
    }

    pub fn classifier(&self) -> Mlp {
        Mlp::standard("cls", self.dims.s, self.dims.envs, Activation::Elu)
    }

    pub fn pi(&self) -> Mlp {
        Mlp::standard("pi", self.dims.s, self.dims.actions, Activation::Elu)
    }

    pub fn statistics(&self) -> StatisticsNetwork {
        StatisticsNetwork::new("mine", self.dims.s, self.dims.eta)
    }

    fn networks(&self) -> Vec<Mlp> {
        let mut nets = vec![self.phi()];
        nets.extend((0..self.dims.envs).map(|k| self.mu(k)));
        nets.push(self.gs());
        nets.extend((0..self.dims.envs).map(|k| self.geta(k)));
        nets.extend([self.psi(), self.classifier(), self.pi(), self.statistics().net]);
        nets
    }

    /// The columns of standardized observations that `φ` reads.
    pub fn phi_columns(&self, z: &Array) -> Array {
        if self.dims.phi_input == z.cols() {
            z.clone()
        } else {
            z.slice_cols(0, self.dims.phi_input)
        }
    }

    /// Representation `s` of raw observations.
    pub fn representation(&self, obs: &Array) -> Result<Array> {
        let z = self.normalizer.apply(obs)?;
        self.phi().eval(&self.store, &self.phi_columns(&z))
    }

    /// Mean entropy of the environment classifier over raw observations.
    pub fn classifier_entropy(&self, obs: &Array) -> Result<f64> {
        let s = self.representation(obs)?;
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let sv = g.constant(s)?;
        let logits = self.classifier().forward(&mut g, &self.store, &mut binder, sv, false)?;
        let h = g.entropy(logits);
        let m = g.mean(h);
        Ok(g.forward(m)?.item())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "icil",
            "config": self.config,
            "dims": self.dims,
            "normalizer": self.normalizer,
            "env_ids": self.env_ids,
        });
        checkpoint::save(path, &meta, &[("icil", &self.store)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("icil") {
            return Err(Error::Format { path: path.to_path_buf(), reason: "not an ICIL checkpoint".into() });
        }
        let model = Self {
            config: serde_json::from_value(ckpt.meta["config"].clone())?,
            dims: serde_json::from_value(ckpt.meta["dims"].clone())?,
            normalizer: serde_json::from_value(ckpt.meta["normalizer"].clone())?,
            env_ids: serde_json::from_value(ckpt.meta["env_ids"].clone())?,
            store: ckpt.store("icil")?.clone(),
        };
        for net in model.networks() {
            for name in net.param_names() {
                model.store.value(&name).map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("missing parameter `{name}`"),
                })?;
            }
        }
        Ok(model)
    }
}

impl Policy for IcilModel {
    fn obs_dim(&self) -> usize {
        self.dims.obs
    }

    fn action_count(&self) -> usize {
        self.dims.actions
    }

    fn logits(&self, obs: &Array) -> Result<Array> {
        if obs.cols() != self.dims.obs {
            return Err(Error::shape("act", format!("policy expects {} features, got {}", self.dims.obs, obs.cols())));
        }
        self.pi().eval(&self.store, &self.representation(obs)?)
    }
}

/// Initialization stream of the network called `name`.
pub fn init_stream(seed: u64, name: &str) -> rng::Rng {
    rng::stream(seed, &format!("init.{name}"), &[])
}

/// Standard Gumbel noise of the given shape.
pub fn gumbel_noise<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array {
    let dist = Gumbel::new(0.0, 1.0).expect("unit Gumbel is valid");
    let data = (0..rows * cols).map(|_| rng.sample(dist)).collect();
    Array::matrix(rows, cols, data).expect("shape matches data")
}

/// `softmax((logits + noise) / temperature)`, differentiable in `logits`.
pub fn gumbel_softmax(g: &mut Graph, logits: Var, noise: &Array, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("Gumbel-softmax temperature must be positive, got {temperature}")));
    }
    let n = g.constant(noise.clone())?;
    let perturbed = g.add(logits, n)?;
    let scaled = g.scale(perturbed, 1.0 / temperature);
    Ok(g.softmax(scaled))
}

/// Relaxed one-hot sample for each row of `logits`.
pub fn gumbel_action<R: Rng>(logits: &Array, temperature: f64, rng: &mut R) -> Result<Array> {
    let noise = gumbel_noise(logits.rows(), logits.cols(), rng);
    let mut g = Graph::new();
    let l = g.constant(logits.clone())?;
    let y = gumbel_softmax(&mut g, l, &noise, temperature)?;
    Ok(g.forward(y)?.clone())
}

#[cfg(test)]
mod tests;
