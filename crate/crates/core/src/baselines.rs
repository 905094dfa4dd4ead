//! Behaviour cloning, RCAL, and their IRMv1-penalized variants.
//!
//! All four share one policy architecture (observations to action logits,
//! 2×64 ELU) and one optimizer setting.
//!
//! The IRMv1 penalty needs `∂Rᵉ(w·z)/∂w` at `w = 1` for logits `z`. Rather
//! than differentiate twice, the derivative is written out as a graph
//! expression: for cross-entropy it is `mean(E_softmax(z)[z] − z_a)`, and the
//! RCAL term `coeff·mean|r̂|` is positively homogeneous in `w`, so it
//! contributes itself.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Activation, Array, Binder, Graph, Mlp, ParameterStore, Var};
use crate::envsuite::{Batch, Dataset, Normalizer, Transitions};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Bc,
    Rcal,
    BcIrm,
    RcalIrm,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [BaselineKind::Bc, BaselineKind::Rcal, BaselineKind::BcIrm, BaselineKind::RcalIrm];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Bc => "bc",
            BaselineKind::Rcal => "rcal",
            BaselineKind::BcIrm => "bc-irm",
            BaselineKind::RcalIrm => "rcal-irm",
        }
    }

    pub fn uses_rcal(self) -> bool {
        matches!(self, BaselineKind::Rcal | BaselineKind::RcalIrm)
    }

    pub fn uses_irm(self) -> bool {
        matches!(self, BaselineKind::BcIrm | BaselineKind::RcalIrm)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown baseline `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub learning_rate: f64,
    pub batch: usize,
    pub iterations: usize,
    /// Weight of the implied-reward sparsity term.
    pub rcal_coeff: f64,
    /// Weight of the IRMv1 penalty.
    pub irm_penalty: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch: 64, iterations: 10_000, rcal_coeff: 0.01, irm_penalty: 1.0 }
    }
}

/// Mean cross-entropy of `actions` under `logits`.
pub fn bc_loss(g: &mut Graph, logits: Var, actions: &[usize]) -> Result<Var> {
    let ce = g.cross_entropy(logits, actions)?;
    Ok(g.mean(ce))
}

/// `mean |r̂|` with `r̂ = Q(x, a) − γ·max Q(x', ·)`, no bootstrap at terminals.
pub fn implied_reward_penalty(
    g: &mut Graph,
    q: Var,
    q_next: Var,
    actions: &[usize],
    terminal: &[bool],
    gamma: f64,
) -> Result<Var> {
    if terminal.len() != actions.len() || g.shape(q_next) != g.shape(q) {
        return Err(Error::shape("implied_reward", "next-observation values do not match the batch"));
    }
    let qa = g.pick(q, actions)?;
    let best_next = g.max_cols(q_next);
    let discount = Array::column(&terminal.iter().map(|&t| if t { 0.0 } else { gamma }).collect::<Vec<_>>());
    let discount = g.constant(discount)?;
    let boot = g.mul(best_next, discount)?;
    let r = g.sub(qa, boot)?;
    let r_abs = g.abs(r);
    Ok(g.mean(r_abs))
}

/// `∂/∂w mean CE(w·z, a)` at `w = 1`.
pub fn ce_dummy_derivative(g: &mut Graph, logits: Var, actions: &[usize]) -> Result<Var> {
    let p = g.softmax(logits);
    let pz = g.mul(p, logits)?;
    let expected = g.sum_cols(pz);
    let za = g.pick(logits, actions)?;
    let d = g.sub(expected, za)?;
    Ok(g.mean(d))
}

/// `Σ_e (∂Rᵉ/∂w)²` over the environment groups of a batch.
pub fn irm_penalty(g: &mut Graph, per_env_derivatives: &[Var]) -> Result<Var> {
    if per_env_derivatives.len() < 2 {
        return Err(Error::invalid("the invariance penalty needs at least two environments"));
    }
    let mut total: Option<Var> = None;
    for &d in per_env_derivatives {
        let sq = g.square(d);
        total = Some(match total {
            None => sq,
            Some(t) => g.add(t, sq)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Shared baseline policy: observations to action logits.
#[derive(Clone, Debug)]
pub struct BaselinePolicy {
    pub kind: BaselineKind,
    pub net: Mlp,
    pub store: ParameterStore,
    pub normalizer: Normalizer,
}

impl BaselinePolicy {
    pub fn architecture(obs_dim: usize, actions: usize) -> Mlp {
        Mlp::standard("policy", obs_dim, actions, Activation::Elu)
    }

    pub fn new(kind: BaselineKind, obs_dim: usize, actions: usize, normalizer: Normalizer, seed: u64) -> Result<Self> {
        let net = Self::architecture(obs_dim, actions);
        let mut store = ParameterStore::new();
        net.init(&mut store, &mut rng::stream(seed, "init.policy", &[]))?;
        Ok(Self { kind, net, store, normalizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "baseline",
            "method": self.kind,
            "sizes": self.net.sizes,
            "normalizer": self.normalizer,
        });
        checkpoint::save(path, &meta, &[("policy", &self.store)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("baseline") {
            return Err(bad("not a baseline checkpoint".into()));
        }
        let kind: BaselineKind = serde_json::from_value(ckpt.meta["method"].clone())?;
        let sizes: Vec<usize> = serde_json::from_value(ckpt.meta["sizes"].clone())?;
        let normalizer: Normalizer = serde_json::from_value(ckpt.meta["normalizer"].clone())?;
        let (Some(&input), Some(&output)) = (sizes.first(), sizes.last()) else {
            return Err(bad("empty layer list".into()));
        };
        let net = Self::architecture(input, output);
        let store = ckpt.store("policy")?.clone();
        for name in net.param_names() {
            store.value(&name).map_err(|_| bad(format!("missing parameter `{name}`")))?;
        }
        Ok(Self { kind, net, store, normalizer })
    }

    /// Training objective on a standardized batch.
    pub fn objective(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        batch: &Batch,
        gamma: f64,
        config: &BaselineConfig,
    ) -> Result<Var> {
        let x = g.constant(batch.obs.clone())?;
        let q = self.net.forward(g, &self.store, binder, x, true)?;
        let mut loss = bc_loss(g, q, &batch.actions)?;
        let q_next = if self.kind.uses_rcal() {
            let xn = g.constant(batch.next_obs.clone())?;
            let qn = self.net.forward(g, &self.store, binder, xn, true)?;
            let pen = implied_reward_penalty(g, q, qn, &batch.actions, &batch.terminal, gamma)?;
            let weighted = g.scale(pen, config.rcal_coeff);
            loss = g.add(loss, weighted)?;
            Some(qn)
        } else {
            None
        };
        if self.kind.uses_irm() && config.irm_penalty != 0.0 {
            let mut derivs = Vec::new();
            for range in batch.groups.iter().filter(|r| !r.is_empty()) {
                let qe = g.slice_rows(q, range.start, range.end)?;
                let actions = &batch.actions[range.clone()];
                let mut d = ce_dummy_derivative(g, qe, actions)?;
                if let Some(qn) = q_next {
                    let qne = g.slice_rows(qn, range.start, range.end)?;
                    let pen = implied_reward_penalty(g, qe, qne, actions, &batch.terminal[range.clone()], gamma)?;
                    let weighted = g.scale(pen, config.rcal_coeff);
                    d = g.add(d, weighted)?;
                }
                derivs.push(d);
            }
            let penalty = irm_penalty(g, &derivs)?;
            let weighted = g.scale(penalty, config.irm_penalty);
            loss = g.add(loss, weighted)?;
        }
        Ok(loss)
    }
}

impl Policy for BaselinePolicy {
    fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn action_count(&self) -> usize {
        self.net.output_dim()
    }

    fn logits(&self, obs: &Array) -> Result<Array> {
        if obs.cols() != self.obs_dim() {
            return Err(Error::shape("act", format!("policy expects {} features, got {}", self.obs_dim(), obs.cols())));
        }
        self.net.eval(&self.store, &self.normalizer.apply(obs)?)
    }
}

/// Trains a baseline on a dataset; the discount comes from its environment specs.
pub fn train_baseline(kind: BaselineKind, ds: &Dataset, config: &BaselineConfig, seed: u64) -> Result<(BaselinePolicy, Vec<f64>)> {
    if kind.uses_irm() && ds.env_ids().len() < 2 {
        return Err(Error::invalid(format!("{kind} needs at least two training environments")));
    }
    let gamma = ds.header.env_specs.first().map_or(0.99, |s| s.gamma);
    train_baseline_on(kind, &ds.transitions()?, gamma, config, seed)
}

/// Trains on raw transitions; returns the policy and the per-iteration objective.
pub fn train_baseline_on(
    kind: BaselineKind,
    transitions: &Transitions,
    gamma: f64,
    config: &BaselineConfig,
    seed: u64,
) -> Result<(BaselinePolicy, Vec<f64>)> {
    if kind.uses_irm() && transitions.num_envs() < 2 {
        return Err(Error::invalid(format!("{kind} needs at least two training environments")));
    }
    let normalizer = Normalizer::fit(&transitions.obs);
    let data = transitions.normalized(&normalizer)?;
    let mut policy = BaselinePolicy::new(kind, data.obs.cols(), data.action_count, normalizer, seed)?;
    let mut batch_rng = rng::stream(seed, "batch", &[]);
    let mut trace = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let batch = data.sample_stratified(config.batch, &mut batch_rng)?;
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let loss = policy.objective(&mut g, &mut binder, &batch, gamma, config)?;
        let value = g.forward(loss)?.item();
        if !value.is_finite() {
            return Err(Error::Diverged { iteration, loss: "baseline" });
        }
        let grads = g.backward(loss)?;
        policy.store.accumulate(&grads, &binder);
        policy.store.adam_step(config.learning_rate)?;
        trace.push(value);
    }
    Ok((policy, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn eval(g: &mut Graph, v: Var) -> f64 {
        g.forward(v).unwrap().item()
    }

    #[test]
    fn bc_loss_limits() {
        let mut g = Graph::new();
        let z = g.constant(Array::zeros(4, 2)).unwrap();
        let l = bc_loss(&mut g, z, &[0, 1, 1, 0]).unwrap();
        assert!((eval(&mut g, l) - std::f64::consts::LN_2).abs() < 1e-12);
        let sharp = g.constant(Array::matrix(2, 2, vec![60.0, -60.0, -60.0, 60.0]).unwrap()).unwrap();
        let l = bc_loss(&mut g, sharp, &[0, 1]).unwrap();
        assert!(eval(&mut g, l) < 1e-12);
    }

    #[test]
    fn constant_q_gives_hand_computed_penalty() {
        let (c, gamma) = (3.0, 0.9);
        let mut g = Graph::new();
        let q = g.constant(Array::full(3, 2, c)).unwrap();
        let qn = g.constant(Array::full(3, 2, c)).unwrap();
        let p = implied_reward_penalty(&mut g, q, qn, &[0, 1, 0], &[false; 3], gamma).unwrap();
        let rcal = g.scale(p, 0.01);
        assert!((eval(&mut g, rcal) - 0.01 * c * (1.0 - gamma)).abs() < 1e-15);
        let t = implied_reward_penalty(&mut g, q, qn, &[0, 1, 0], &[true; 3], gamma).unwrap();
        assert!((eval(&mut g, t) - c).abs() < 1e-15);
    }

    /// Risk with an explicit multiplier on the logits, for finite differences.
    fn scaled_risk(z: &Array, zn: &Array, actions: &[usize], terminal: &[bool], coeff: f64, w: f64) -> f64 {
        let mut g = Graph::new();
        let q = g.constant(z.map(|v| v * w)).unwrap();
        let qn = g.constant(zn.map(|v| v * w)).unwrap();
        let ce = bc_loss(&mut g, q, actions).unwrap();
        let pen = implied_reward_penalty(&mut g, q, qn, actions, terminal, 0.99).unwrap();
        let pen = g.scale(pen, coeff);
        let r = g.add(ce, pen).unwrap();
        eval(&mut g, r)
    }

    #[test]
    fn dummy_derivative_matches_finite_differences() {
        let mut r = rng::stream(0, "irm", &[]);
        let n = 7;
        let z = Array::matrix(n, 3, (0..3 * n).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let zn = Array::matrix(n, 3, (0..3 * n).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let actions: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let terminal: Vec<bool> = (0..n).map(|i| i == 3).collect();
        for coeff in [0.0, 0.01, 0.5] {
            let mut g = Graph::new();
            let q = g.constant(z.clone()).unwrap();
            let qn = g.constant(zn.clone()).unwrap();
            let mut d = ce_dummy_derivative(&mut g, q, &actions).unwrap();
            let pen = implied_reward_penalty(&mut g, q, qn, &actions, &terminal, 0.99).unwrap();
            let pen = g.scale(pen, coeff);
            d = g.add(d, pen).unwrap();
            let analytic = eval(&mut g, d);
            let h = 1e-6;
            let fd = (scaled_risk(&z, &zn, &actions, &terminal, coeff, 1.0 + h)
                - scaled_risk(&z, &zn, &actions, &terminal, coeff, 1.0 - h))
                / (2.0 * h);
            assert!((analytic - fd).abs() < 1e-6, "coeff {coeff}: {analytic} vs {fd}");
        }
    }

    #[test]
    fn penalty_symmetry_cases() {
        let mut g = Graph::new();
        let z = g.constant(Array::zeros(5, 2)).unwrap();
        let d = ce_dummy_derivative(&mut g, z, &[0, 1, 0, 1, 1]).unwrap();
        let p = irm_penalty(&mut g, &[d, d]).unwrap();
        assert_eq!(eval(&mut g, p), 0.0);
        let z = g.constant(Array::matrix(2, 2, vec![0.3, -0.1, 1.0, 0.2]).unwrap()).unwrap();
        let d = ce_dummy_derivative(&mut g, z, &[1, 0]).unwrap();
        let p = irm_penalty(&mut g, &[d, d]).unwrap();
        let dv = eval(&mut g, d);
        assert!((eval(&mut g, p) - 2.0 * dv * dv).abs() < 1e-15);
        assert!(irm_penalty(&mut g, &[d]).is_err());
    }

    /// Two environments where a spurious feature predicts the label with
    /// different strength. The pooled-risk optimum leans on it and pays a
    /// penalty; the best causal-only model does not.
    #[test]
    fn penalty_separates_spurious_optimum_from_invariant_solution() {
        let mut r = rng::stream(1, "irm-grid", &[]);
        let mut envs = Vec::new();
        for p_spurious in [0.95, 0.7] {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..2000 {
                let y = usize::from(r.random::<bool>());
                let sign = |keep: bool| if (y == 1) == keep { 1.0 } else { -1.0 };
                rows.push([sign(r.random::<f64>() < 0.75), sign(r.random::<f64>() < p_spurious)]);
                labels.push(y);
            }
            envs.push((rows, labels));
        }
        let eval_at = |w1: f64, w2: f64| -> (f64, f64) {
            let mut g = Graph::new();
            let mut risks = Vec::new();
            let mut derivs = Vec::new();
            for (rows, labels) in &envs {
                let logits: Vec<f64> = rows.iter().flat_map(|x| [0.0, w1 * x[0] + w2 * x[1]]).collect();
                let z = g.constant(Array::matrix(rows.len(), 2, logits).unwrap()).unwrap();
                risks.push(bc_loss(&mut g, z, labels).unwrap());
                derivs.push(ce_dummy_derivative(&mut g, z, labels).unwrap());
            }
            let pooled = g.add(risks[0], risks[1]).unwrap();
            let pen = irm_penalty(&mut g, &derivs).unwrap();
            (eval(&mut g, pooled), eval(&mut g, pen))
        };
        let grid: Vec<f64> = (0..=60).map(|i| i as f64 * 0.05).collect();
        let mut erm = (f64::INFINITY, 0.0, 0.0);
        let mut causal = (f64::INFINITY, 0.0);
        for &w1 in &grid {
            for &w2 in &grid {
                let (risk, _) = eval_at(w1, w2);
                if risk < erm.0 {
                    erm = (risk, w1, w2);
                }
            }
            let (risk, _) = eval_at(w1, 0.0);
            if risk < causal.0 {
                causal = (risk, w1);
            }
        }
        assert!(erm.2 > 0.5, "pooled optimum should use the spurious feature");
        let (_, pen_erm) = eval_at(erm.1, erm.2);
        let (_, pen_causal) = eval_at(causal.1, 0.0);
        assert!(pen_erm > pen_causal, "{pen_erm} vs {pen_causal}");
    }

    fn separable(n: usize, seed: u64) -> Transitions {
        let mut r = rng::stream(seed, "sep", &[]);
        let mut obs = Vec::new();
        let mut actions = Vec::new();
        let mut env = Vec::new();
        for i in 0..n {
            let x: [f64; 2] = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            if (x[0] + 0.5 * x[1]).abs() < 0.05 {
                continue;
            }
            actions.push(usize::from(x[0] + 0.5 * x[1] > 0.0));
            obs.extend(x);
            env.push(i % 2);
        }
        let m = actions.len();
        let obs = Array::matrix(m, 2, obs).unwrap();
        Transitions::new(obs.clone(), actions, obs, vec![false; m], env, vec![0, 1], 2).unwrap()
    }

    #[test]
    fn bc_fits_separable_data_and_irm_at_zero_weight_is_bc() {
        let data = separable(600, 2);
        let cfg = BaselineConfig { iterations: 1500, ..BaselineConfig::default() };
        let (bc, _) = train_baseline_on(BaselineKind::Bc, &data, 0.99, &cfg, 3).unwrap();
        let pred = bc.logits(&data.obs).unwrap().argmax_rows();
        let acc = pred.iter().zip(&data.actions).filter(|(a, b)| a == b).count() as f64 / data.len() as f64;
        assert!(acc >= 0.99, "train accuracy {acc}");

        let cfg0 = BaselineConfig { iterations: 50, irm_penalty: 0.0, ..BaselineConfig::default() };
        let (a, ta) = train_baseline_on(BaselineKind::Bc, &data, 0.99, &cfg0, 5).unwrap();
        let (b, tb) = train_baseline_on(BaselineKind::BcIrm, &data, 0.99, &cfg0, 5).unwrap();
        assert!(a.store.values_bit_equal(&b.store));
        assert_eq!(ta, tb);
        let (c, _) = train_baseline_on(BaselineKind::RcalIrm, &data, 0.99, &BaselineConfig { iterations: 5, ..cfg0 }, 5).unwrap();
        assert_eq!(c.net, a.net);
    }

    #[test]
    fn irm_needs_two_environments_and_checkpoints_round_trip() {
        let data = separable(50, 4);
        let one = Transitions::new(data.obs.clone(), data.actions.clone(), data.obs.clone(), data.terminal.clone(), vec![0; data.len()], vec![0], 2)
            .unwrap();
        let cfg = BaselineConfig { iterations: 2, ..BaselineConfig::default() };
        assert!(train_baseline_on(BaselineKind::BcIrm, &one, 0.99, &cfg, 0).is_err());
        let (p, _) = train_baseline_on(BaselineKind::Rcal, &one, 0.99, &cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        p.save(&path).unwrap();
        let back = BaselinePolicy::load(&path).unwrap();
        assert_eq!(back.kind, BaselineKind::Rcal);
        assert!(back.store.values_bit_equal(&p.store));
        assert_eq!("rcal-irm".parse::<BaselineKind>().unwrap(), BaselineKind::RcalIrm);
        assert!("gail".parse::<BaselineKind>().is_err());
    }
}
