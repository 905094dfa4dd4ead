//! The interface evaluation code uses to query any trained imitation policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Array};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    /// Highest-probability action, lowest index on ties.
    #[default]
    Greedy,
    /// Categorical draw from the policy distribution.
    Sample,
}

pub trait Policy {
    fn obs_dim(&self) -> usize;
    fn action_count(&self) -> usize;
    /// Action logits for a batch of raw observations.
    fn logits(&self, obs: &Array) -> Result<Array>;

    fn probabilities(&self, obs: &Array) -> Result<Array> {
        Ok(softmax_rows(&self.logits(obs)?))
    }

    fn act_batch<R: Rng>(&self, obs: &Array, mode: ActMode, rng: &mut R) -> Result<Vec<usize>>
    where
        Self: Sized,
    {
        if obs.cols() != self.obs_dim() {
            return Err(Error::shape("act", format!("policy expects {} features, got {}", self.obs_dim(), obs.cols())));
        }
        match mode {
            ActMode::Greedy => Ok(self.logits(obs)?.argmax_rows()),
            ActMode::Sample => {
                let p = self.probabilities(obs)?;
                Ok(p.iter_rows().map(|row| sample_categorical(row, rng)).collect())
            }
        }
    }
}

/// Index drawn with probability proportional to `probs`.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
