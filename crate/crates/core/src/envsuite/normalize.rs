use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Array;
use crate::error::{Error, Result};

/// Per-coordinate standardization fitted on training observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Coordinates with (near) zero spread keep unit scale.
    pub fn fit(obs: &Array) -> Self {
        let (n, d) = (obs.rows() as f64, obs.cols());
        let mut mean = vec![0.0; d];
        for r in obs.iter_rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in obs.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).map(|s| if s < 1e-8 { 1.0 } else { s }).collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, obs: &Array) -> Result<Array> {
        if obs.cols() != self.dim() {
            return Err(Error::shape("normalize", format!("{} columns, normalizer has {}", obs.cols(), self.dim())));
        }
        let mut out = obs.clone();
        let d = self.dim();
        for r in out.data_mut().chunks_exact_mut(d) {
            for ((v, m), s) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn invert(&self, z: &Array) -> Result<Array> {
        if z.cols() != self.dim() {
            return Err(Error::shape("denormalize", format!("{} columns, normalizer has {}", z.cols(), self.dim())));
        }
        let mut out = z.clone();
        let d = self.dim();
        for r in out.data_mut().chunks_exact_mut(d) {
            for ((v, m), s) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }

    /// Stable identifier of the exact constants.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}
