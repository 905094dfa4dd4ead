//! Online rollouts, return scaling, and offline action matching.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::envsuite::cartpole::{CartPole, ACTIONS, MAX_STEPS};
use crate::envsuite::{BaseTask, Dataset, EnvironmentSpec, Expert};
use crate::error::{Error, Result};
use crate::policy::{ActMode, Policy};
use crate::rng;

/// Mean and standard error (`std / √n` with the `n − 1` sample std; zero for
/// a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

pub fn mean_se(xs: &[f64]) -> Result<MeanSe> {
    if xs.is_empty() {
        return Err(Error::invalid("mean of an empty sample"));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Ok(MeanSe { mean, se: 0.0, n: 1 });
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MeanSe { mean, se: var.sqrt() / n.sqrt(), n: xs.len() })
}

/// `(raw − r_random) / (r_expert − r_random)`, not clamped.
pub fn scale_return(raw: f64, r_random: f64, r_expert: f64) -> Result<f64> {
    let denom = r_expert - r_random;
    if !(denom.abs() > 1e-12) || !denom.is_finite() {
        return Err(Error::invalid(format!("expert return {r_expert} and random return {r_random} cannot define a scale")));
    }
    Ok((raw - r_random) / denom)
}

/// Who chooses actions during a rollout.
pub enum Controller<'a, P: Policy> {
    Policy(&'a P, ActMode),
    /// Acts on the base state, ignoring the observation.
    Expert(&'a dyn Expert),
    Random,
}

fn check_cartpole(spec: &EnvironmentSpec) -> Result<()> {
    if spec.task != BaseTask::Cartpole {
        return Err(Error::invalid(format!("online rollouts need a CartPole environment, got {:?}", spec.task)));
    }
    Ok(())
}

/// Undiscounted returns of `episodes` CartPole episodes in `spec`.
///
/// Episode `i` starts from a stream derived from `(seed, i)`; all live
/// episodes advance in lockstep so the policy sees one batch per time step.
pub fn rollout_returns<P: Policy>(controller: &Controller<'_, P>, spec: &EnvironmentSpec, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    check_cartpole(spec)?;
    if episodes == 0 {
        return Err(Error::invalid("at least one rollout episode is required"));
    }
    if let Controller::Policy(p, _) = controller {
        if p.obs_dim() != spec.obs_dim() {
            return Err(Error::shape("rollout", format!("policy expects {} features, environment emits {}", p.obs_dim(), spec.obs_dim())));
        }
    }
    let mut envs: Vec<CartPole> = (0..episodes).map(|i| CartPole::reset(&mut rng::stream(seed, "episode", &[i as u64]))).collect();
    let mut action_rngs: Vec<rng::Rng> = (0..episodes).map(|i| rng::stream(seed, "episode-actions", &[i as u64])).collect();
    let mut returns = vec![0.0; episodes];
    let mut live: Vec<usize> = (0..episodes).collect();
    for _ in 0..MAX_STEPS {
        if live.is_empty() {
            break;
        }
        let actions: Vec<usize> = match controller {
            Controller::Policy(p, mode) => {
                let rows = live.iter().map(|&i| spec.observe(&envs[i].state)).collect::<Result<Vec<_>>>()?;
                let obs = Array::from_rows(&rows)?;
                match mode {
                    ActMode::Greedy => p.logits(&obs)?.argmax_rows(),
                    ActMode::Sample => {
                        let probs = p.probabilities(&obs)?;
                        probs
                            .iter_rows()
                            .zip(&live)
                            .map(|(row, &i)| crate::policy::sample_categorical(row, &mut action_rngs[i]))
                            .collect()
                    }
                }
            }
            Controller::Expert(e) => live.iter().map(|&i| e.act(&envs[i].state)).collect(),
            Controller::Random => live.iter().map(|&i| action_rngs[i].random_range(0..ACTIONS)).collect(),
        };
        let mut still = Vec::with_capacity(live.len());
        for (&i, a) in live.iter().zip(actions) {
            let out = envs[i].step(a);
            returns[i] += 1.0;
            if !(out.terminated || out.truncated) {
                still.push(i);
            }
        }
        live = still;
    }
    Ok(returns)
}

/// Accuracy, ROC area, and precision-recall area of a binary policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionMatching {
    pub acc: f64,
    pub auc: f64,
    pub apr: f64,
}

/// ROC and PR areas of `scores` for binary `labels`, by an exact sweep over
/// distinct score thresholds (tied scores enter together) with trapezoids.
pub fn roc_pr_areas(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::invalid("scores and labels must be non-empty and the same length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC and PR areas are undefined when only one class is present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut auc, mut apr) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    // The PR curve starts at recall 0 with the precision of the first threshold.
    let mut prev_recall = 0.0;
    let mut prev_precision: Option<f64> = None;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        let precision = tp as f64 / (tp + fp) as f64;
        let start = prev_precision.unwrap_or(precision);
        apr += (tpr - prev_recall) * (precision + start) / 2.0;
        (prev_tpr, prev_fpr, prev_recall, prev_precision) = (tpr, fpr, tpr, Some(precision));
    }
    Ok((auc, apr))
}

/// Greedy accuracy and ranking quality of `policy` on a binary-action dataset.
pub fn action_matching<P: Policy>(policy: &P, ds: &Dataset) -> Result<ActionMatching> {
    if ds.action_count() != 2 {
        return Err(Error::invalid(format!("action matching needs binary actions, dataset has {}", ds.action_count())));
    }
    let tr = ds.transitions()?;
    let probs = policy.probabilities(&tr.obs)?;
    let greedy = policy.logits(&tr.obs)?.argmax_rows();
    let correct = greedy.iter().zip(&tr.actions).filter(|(a, b)| a == b).count();
    let scores: Vec<f64> = probs.iter_rows().map(|r| r[1]).collect();
    let labels: Vec<bool> = tr.actions.iter().map(|&a| a == 1).collect();
    let (auc, apr) = roc_pr_areas(&scores, &labels)?;
    Ok(ActionMatching { acc: correct as f64 / tr.len() as f64, auc, apr })
}
