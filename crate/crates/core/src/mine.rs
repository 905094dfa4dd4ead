//! Donsker–Varadhan mutual-information estimation with a statistics network.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Array, Binder, Graph, Mlp, ParameterStore, Var};
use crate::error::{Error, Result};

/// `T(u, v)`: concatenated inputs to a scalar, 2×64 ELU.
#[derive(Clone, Debug, PartialEq)]
pub struct StatisticsNetwork {
    pub net: Mlp,
    pub u_dim: usize,
    pub v_dim: usize,
}

impl StatisticsNetwork {
    pub fn new(name: &str, u_dim: usize, v_dim: usize) -> Self {
        Self { net: Mlp::standard(name, u_dim + v_dim, 1, Activation::Elu), u_dim, v_dim }
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.net.init(store, rng)
    }

    /// `T` on row pairs; returns `[n, 1]`.
    pub fn statistic(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        binder: &mut Binder,
        u: Var,
        v: Var,
        trainable: bool,
    ) -> Result<Var> {
        let uv = g.concat_cols(&[u, v])?;
        self.net.forward(g, store, binder, uv, trainable)
    }

    /// Bound on `I(U; V)` where joint pairs are `(u_i, v_i)` and marginal
    /// pairs are `(u_i, v_perm[i])`.
    #[allow(clippy::too_many_arguments)]
    pub fn bound(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        binder: &mut Binder,
        u: Var,
        v: Var,
        perm: &[usize],
        trainable: bool,
    ) -> Result<Var> {
        let n = g.shape(u).0;
        if n < 2 {
            return Err(Error::invalid(format!("mutual-information bound needs at least 2 pairs, got {n}")));
        }
        if perm.len() != n || g.shape(v).0 != n {
            return Err(Error::shape("mine_bound", format!("{n} u rows, {} v rows, {} permutation entries", g.shape(v).0, perm.len())));
        }
        let joint = self.statistic(g, store, binder, u, v, trainable)?;
        let v_perm = g.gather_rows(v, perm)?;
        let marginal = self.statistic(g, store, binder, u, v_perm, trainable)?;
        mine_bound(g, joint, marginal)
    }
}

/// `mean(T_joint) − log mean exp(T_marginal)`.
pub fn mine_bound(g: &mut Graph, t_joint: Var, t_marginal: Var) -> Result<Var> {
    let (nj, nm) = (g.shape(t_joint).0, g.shape(t_marginal).0);
    if nj < 2 || nm < 2 {
        return Err(Error::invalid(format!("mutual-information bound needs at least 2 pairs, got {nj} and {nm}")));
    }
    if nj != nm {
        return Err(Error::shape("mine_bound", format!("joint batch {nj} vs marginal batch {nm}")));
    }
    let first = g.mean(t_joint);
    let second = g.log_mean_exp(t_marginal);
    g.sub(first, second)
}

/// Uniformly random permutation of `0..n`.
pub fn permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineConfig {
    pub batch: usize,
    pub learning_rate: f64,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self { batch: 64, learning_rate: 1e-3 }
    }
}

/// Standalone estimator for paired samples.
#[derive(Clone, Debug)]
pub struct MineEstimator {
    pub network: StatisticsNetwork,
    pub store: ParameterStore,
    pub config: MineConfig,
}

impl MineEstimator {
    pub fn new<R: Rng>(u_dim: usize, v_dim: usize, config: MineConfig, rng: &mut R) -> Result<Self> {
        let network = StatisticsNetwork::new("mine", u_dim, v_dim);
        let mut store = ParameterStore::new();
        network.init(&mut store, rng)?;
        Ok(Self { network, store, config })
    }

    fn check(&self, u: &Array, v: &Array) -> Result<()> {
        if u.rows() != v.rows() || u.cols() != self.network.u_dim || v.cols() != self.network.v_dim {
            return Err(Error::shape("mine", format!("u {:?}, v {:?}", u.shape(), v.shape())));
        }
        Ok(())
    }

    /// One gradient-ascent step on the bound over the given pairs. Returns
    /// the bound before the update.
    pub fn ascent_step<R: Rng>(&mut self, u: &Array, v: &Array, rng: &mut R) -> Result<f64> {
        self.check(u, v)?;
        let perm = permutation(u.rows(), rng);
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let uv = g.constant(u.clone())?;
        let vv = g.constant(v.clone())?;
        let bound = self.network.bound(&mut g, &self.store, &mut binder, uv, vv, &perm, true)?;
        let objective = g.neg(bound);
        let value = g.forward(bound)?.item();
        g.forward(objective)?;
        let grads = g.backward(objective)?;
        self.store.accumulate(&grads, &binder);
        self.store.adam_step(self.config.learning_rate)?;
        Ok(value)
    }

    /// Trains on minibatches drawn with replacement from `(u, v)`.
    pub fn fit<R: Rng>(&mut self, u: &Array, v: &Array, steps: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.check(u, v)?;
        let mut trace = Vec::with_capacity(steps);
        for _ in 0..steps {
            let rows: Vec<usize> = (0..self.config.batch).map(|_| rng.random_range(0..u.rows())).collect();
            trace.push(self.ascent_step(&u.select_rows(&rows), &v.select_rows(&rows), rng)?);
        }
        Ok(trace)
    }

    /// Bound evaluated on all pairs with one random permutation.
    pub fn estimate<R: Rng>(&self, u: &Array, v: &Array, rng: &mut R) -> Result<f64> {
        self.check(u, v)?;
        let perm = permutation(u.rows(), rng);
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let uv = g.constant(u.clone())?;
        let vv = g.constant(v.clone())?;
        let bound = self.network.bound(&mut g, &self.store, &mut binder, uv, vv, &perm, false)?;
        Ok(g.forward(bound)?.item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn pairs(n: usize) -> (Array, Array) {
        let u = Array::matrix(n, 1, (0..n).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let v = Array::matrix(n, 1, (0..n).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
        (u, v)
    }

    #[test]
    fn constant_statistic_gives_zero() {
        let mut g = Graph::new();
        let tj = g.constant(Array::full(5, 1, 3.7)).unwrap();
        let tm = g.constant(Array::full(5, 1, 3.7)).unwrap();
        let b = mine_bound(&mut g, tj, tm).unwrap();
        assert!(g.forward(b).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn bound_is_shift_invariant() {
        let mut g = Graph::new();
        let tj = g.constant(Array::column(&[0.1, -2.0, 0.5])).unwrap();
        let tm = g.constant(Array::column(&[1.0, 0.3, -0.4])).unwrap();
        let b0 = mine_bound(&mut g, tj, tm).unwrap();
        let sj = g.shift(tj, 12.5);
        let sm = g.shift(tm, 12.5);
        let b1 = mine_bound(&mut g, sj, sm).unwrap();
        let v0 = g.forward(b0).unwrap().item();
        let v1 = g.forward(b1).unwrap().item();
        assert!((v0 - v1).abs() < 1e-9);
    }

    #[test]
    fn degenerate_batches_are_rejected() {
        let mut g = Graph::new();
        let one = g.constant(Array::scalar(1.0)).unwrap();
        assert!(mine_bound(&mut g, one, one).is_err());
        let mut r = rng::stream(0, "t", &[]);
        let mut est = MineEstimator::new(1, 1, MineConfig::default(), &mut r).unwrap();
        let (u, v) = pairs(1);
        assert!(est.ascent_step(&u, &v, &mut r).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_network_unchanged() {
        let mut r = rng::stream(1, "t", &[]);
        let mut est = MineEstimator::new(1, 1, MineConfig { batch: 8, learning_rate: 0.0 }, &mut r).unwrap();
        let before = est.store.snapshot();
        let (u, v) = pairs(32);
        est.fit(&u, &v, 5, &mut r).unwrap();
        assert!(est.store.values_bit_equal(&before));
    }

    #[test]
    fn ascent_increases_the_bound() {
        let mut r = rng::stream(2, "t", &[]);
        let mut est = MineEstimator::new(1, 1, MineConfig::default(), &mut r).unwrap();
        let u = Array::matrix(512, 1, (0..512).map(|i| (i as f64 / 256.0) - 1.0).collect()).unwrap();
        let v = u.clone();
        let before = est.estimate(&u, &v, &mut r).unwrap();
        est.fit(&u, &v, 200, &mut r).unwrap();
        let after = est.estimate(&u, &v, &mut r).unwrap();
        assert!(after > before + 0.1, "{before} -> {after}");
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut r = rng::stream(3, "t", &[]);
        let mut p = permutation(50, &mut r);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
