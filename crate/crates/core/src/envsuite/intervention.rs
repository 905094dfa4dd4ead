use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest factor magnitude kept when sampling test environments.
pub const MIN_SAMPLED_FACTOR: f64 = 0.05;

/// Spurious coordinates appended to the base state: noise `i` equals
/// `factors[i] * base[source_indices[i]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    factors: Vec<f64>,
    source_indices: Vec<usize>,
}

impl InterventionSpec {
    pub fn new(factors: Vec<f64>, source_indices: Vec<usize>) -> Result<Self> {
        if factors.len() != source_indices.len() {
            return Err(Error::invalid(format!(
                "{} factors for {} source indices",
                factors.len(),
                source_indices.len()
            )));
        }
        if let Some(f) = factors.iter().find(|f| !f.is_finite() || **f == 0.0) {
            return Err(Error::invalid(format!("multiplicative factor {f} would make the observation map non-invertible")));
        }
        Ok(Self { factors, source_indices })
    }

    /// No spurious coordinates.
    pub fn none() -> Self {
        Self { factors: Vec::new(), source_indices: Vec::new() }
    }

    /// `noise_dim` copies cycling over `sources`, all scaled by `factor`.
    pub fn constant(noise_dim: usize, factor: f64, sources: &[usize]) -> Result<Self> {
        Self::new(vec![factor; noise_dim], cycle(sources, noise_dim)?)
    }

    /// Factors drawn from `U(-1, 1)`, redrawing any with magnitude below
    /// [`MIN_SAMPLED_FACTOR`].
    pub fn sample_uniform<R: Rng>(noise_dim: usize, sources: &[usize], rng: &mut R) -> Result<Self> {
        let factors = (0..noise_dim)
            .map(|_| loop {
                let f: f64 = rng.random_range(-1.0..1.0);
                if f.abs() >= MIN_SAMPLED_FACTOR {
                    break f;
                }
            })
            .collect();
        Self::new(factors, cycle(sources, noise_dim)?)
    }

    pub fn noise_dim(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    /// `concat(base, factors ⊙ base[sources])`, plus the environment feature when given.
    pub fn augment(&self, base: &[f64], env_feature: Option<f64>) -> Result<Vec<f64>> {
        if let Some(&bad) = self.source_indices.iter().find(|&&i| i >= base.len()) {
            return Err(Error::invalid(format!("source index {bad} out of range for a {}-dim base state", base.len())));
        }
        let mut obs = Vec::with_capacity(base.len() + self.noise_dim() + 1);
        obs.extend_from_slice(base);
        obs.extend(self.factors.iter().zip(&self.source_indices).map(|(f, &i)| f * base[i]));
        obs.extend(env_feature);
        Ok(obs)
    }

    /// Recovers the base state from an observation and checks that every
    /// spurious coordinate is consistent with it.
    pub fn recover_base(&self, obs: &[f64], base_dim: usize) -> Result<Vec<f64>> {
        if obs.len() < base_dim + self.noise_dim() {
            return Err(Error::invalid(format!("observation of length {} is too short", obs.len())));
        }
        let base = obs[..base_dim].to_vec();
        for (k, (f, &i)) in self.factors.iter().zip(&self.source_indices).enumerate() {
            let implied = obs[base_dim + k] / f;
            if (implied - base[i]).abs() > 1e-9 * (1.0 + base[i].abs()) {
                return Err(Error::invalid(format!("noise coordinate {k} is inconsistent with its source")));
            }
        }
        Ok(base)
    }
}

fn cycle(sources: &[usize], n: usize) -> Result<Vec<usize>> {
    if sources.is_empty() && n > 0 {
        return Err(Error::invalid("noise variables need at least one source coordinate"));
    }
    Ok((0..n).map(|i| sources[i % sources.len()]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    const LAST3: [usize; 3] = [1, 2, 3];

    #[test]
    fn unit_factors_duplicate_last_three() {
        let spec = InterventionSpec::constant(3, 1.0, &LAST3).unwrap();
        let obs = spec.augment(&[0.1, 0.2, 0.3, 0.4], None).unwrap();
        assert_eq!(obs, vec![0.1, 0.2, 0.3, 0.4, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn doubled_factors() {
        let spec = InterventionSpec::constant(6, 2.0, &LAST3).unwrap();
        let obs = spec.augment(&[1.0, 2.0, 3.0, 4.0], Some(1.0)).unwrap();
        assert_eq!(&obs[4..], &[4.0, 6.0, 8.0, 4.0, 6.0, 8.0, 1.0]);
    }

    #[test]
    fn zero_factor_rejected() {
        assert!(InterventionSpec::new(vec![1.0, 0.0], vec![1, 2]).is_err());
    }

    #[test]
    fn sampled_factors_in_range() {
        let mut r = rng::stream(3, "test-env", &[]);
        for _ in 0..200 {
            let s = InterventionSpec::sample_uniform(3, &LAST3, &mut r).unwrap();
            assert!(s.factors().iter().all(|f| f.abs() >= MIN_SAMPLED_FACTOR && f.abs() < 1.0));
        }
    }

    #[test]
    fn recovery_is_exact() {
        let mut r = rng::stream(5, "test-env", &[]);
        let spec = InterventionSpec::sample_uniform(9, &LAST3, &mut r).unwrap();
        let base = [0.01, -0.7, 0.12, 1.9];
        let obs = spec.augment(&base, None).unwrap();
        assert_eq!(spec.recover_base(&obs, 4).unwrap(), base.to_vec());
        let mut tampered = obs.clone();
        tampered[5] += 0.1;
        assert!(spec.recover_base(&tampered, 4).is_err());
    }
}
