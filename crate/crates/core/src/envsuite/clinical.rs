//! Synthetic stand-in for an ICU treatment dataset with spurious binary features.
//!
//! Patient state is an 8-dimensional AR(1) Gaussian process nudged by the
//! binary treatment. The clinician treats with probability
//! `σ(2·s₀ + 1.5·s₁ − s₂)`. Each environment appends binary features that
//! equal the treatment with an environment-specific probability.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{ActionCopies, BaseTask, Dataset, EnvironmentSpec, Step, Trajectory};
use super::intervention::InterventionSpec;
use crate::error::{Error, Result};
use crate::rng;

pub const BASE_DIM: usize = 8;
const PERSISTENCE: f64 = 0.85;
const COUPLING: f64 = 0.1;
const TREATMENT_EFFECT: [f64; BASE_DIM] = [-0.6, -0.4, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0];
const EXPERT_WEIGHTS: [f64; 3] = [2.0, 1.5, -1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClinicalConfig {
    pub horizon: usize,
    pub spurious_dim: usize,
    pub process_noise: f64,
}

impl Default for ClinicalConfig {
    fn default() -> Self {
        Self { horizon: 24, spurious_dim: 20, process_noise: 0.5 }
    }
}

/// Probability that the clinician treats in state `s`.
pub fn treatment_probability(s: &[f64]) -> f64 {
    let logit: f64 = EXPERT_WEIGHTS.iter().zip(s).map(|(w, v)| w * v).sum();
    1.0 / (1.0 + (-logit).exp())
}

fn transition<R: Rng>(s: &[f64; BASE_DIM], action: usize, noise: f64, rng: &mut R) -> [f64; BASE_DIM] {
    let centred = action as f64 - 0.5;
    std::array::from_fn(|i| {
        let coupled = if i + 1 < BASE_DIM { COUPLING * s[i + 1] } else { 0.0 };
        let eps: f64 = rng.sample(StandardNormal);
        PERSISTENCE * s[i] + coupled + TREATMENT_EFFECT[i] * centred + noise * eps
    })
}

/// Environment spec with spurious agreement probability `p`.
pub fn clinical_spec(env_id: usize, p: f64, config: &ClinicalConfig) -> Result<EnvironmentSpec> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("agreement probability {p} must lie in [0, 1]")));
    }
    let mut spec = EnvironmentSpec::new(env_id, BaseTask::OfflineClinical, InterventionSpec::none(), 0.99, config.horizon, 2)?;
    spec.action_copies = Some(ActionCopies { dim: config.spurious_dim, agreement: p });
    Ok(spec)
}

/// `n_traj` patients per environment; environment `i` gets id `i` and
/// agreement `p_spurious[i]`.
pub fn offline_clinical_dataset(n_traj: usize, p_spurious: &[f64], seed: u64, config: &ClinicalConfig) -> Result<Dataset> {
    if n_traj == 0 {
        return Err(Error::invalid("at least one trajectory per environment is required"));
    }
    let specs = p_spurious
        .iter()
        .enumerate()
        .map(|(e, &p)| clinical_spec(e, p, config))
        .collect::<Result<Vec<_>>>()?;
    clinical_dataset_for(&specs, n_traj, seed, config)
}

/// Generates patients for explicit specs (ids need not start at zero).
pub fn clinical_dataset_for(specs: &[EnvironmentSpec], n_traj: usize, seed: u64, config: &ClinicalConfig) -> Result<Dataset> {
    let mut trajectories = Vec::with_capacity(specs.len() * n_traj);
    for spec in specs {
        let copies = spec.action_copies.ok_or_else(|| Error::invalid("clinical spec without action copies"))?;
        for i in 0..n_traj {
            let mut r = rng::stream(seed, "patient", &[spec.env_id as u64, i as u64]);
            trajectories.push(patient(spec, copies, config, &mut r)?);
        }
    }
    Dataset::new(specs.to_vec(), seed, trajectories)
}

fn patient<R: Rng>(spec: &EnvironmentSpec, copies: ActionCopies, config: &ClinicalConfig, rng: &mut R) -> Result<Trajectory> {
    let mut s: [f64; BASE_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let mut observations = Vec::with_capacity(config.horizon + 1);
    let mut actions = Vec::with_capacity(config.horizon + 1);
    for _ in 0..=config.horizon {
        let action = usize::from(rng.random::<f64>() < treatment_probability(&s));
        let mut obs = s.to_vec();
        obs.extend((0..copies.dim).map(|_| {
            let agree = rng.random::<f64>() < copies.agreement;
            let bit = if agree { action } else { 1 - action };
            bit as f64
        }));
        if spec.env_feature {
            obs.push(spec.env_id as f64);
        }
        observations.push(obs);
        actions.push(action);
        s = transition(&s, action, config.process_noise, rng);
    }
    let steps = (0..config.horizon)
        .map(|t| Step { obs: observations[t].clone(), action: actions[t], next_obs: observations[t + 1].clone(), terminal: false })
        .collect();
    Ok(Trajectory { env_id: spec.env_id, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn full_agreement_copies_action() {
        let ds = offline_clinical_dataset(5, &[1.0], 3, &ClinicalConfig::default()).unwrap();
        for t in &ds.trajectories {
            for s in &t.steps {
                assert!(s.obs[BASE_DIM..].iter().all(|&b| b == s.action as f64));
            }
        }
    }

    #[test]
    fn spurious_correlation_matches_agreement() {
        let ds = offline_clinical_dataset(2000, &[0.1, 0.2, 0.8], 4, &ClinicalConfig::default()).unwrap();
        for (e, p) in [(0usize, 0.1), (1, 0.2), (2, 0.8)] {
            let (mut f, mut a) = (Vec::new(), Vec::new());
            for t in ds.trajectories.iter().filter(|t| t.env_id == e) {
                for s in &t.steps {
                    f.push(s.obs[BASE_DIM]);
                    a.push(s.action as f64);
                }
            }
            let c = corr(&f, &a);
            assert!((c - (2.0 * p - 1.0)).abs() < 0.05, "env {e}: corr {c}");
        }
    }

    #[test]
    fn chains_and_is_deterministic() {
        let cfg = ClinicalConfig::default();
        let a = offline_clinical_dataset(3, &[0.1, 0.2], 9, &cfg).unwrap();
        let b = offline_clinical_dataset(3, &[0.1, 0.2], 9, &cfg).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.obs_dim(), BASE_DIM + 20);
    }
}
