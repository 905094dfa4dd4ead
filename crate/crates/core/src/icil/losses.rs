//! Graph construction for every ICIL loss on one minibatch.
//!
//! Gradient routing is encoded by how each network is bound:
//!
//! | loss            | trainable networks                 |
//! |-----------------|------------------------------------|
//! | `L_inv`         | φ                                  |
//! | `L_dyn`         | φ, μᵉ, g_s, g_ηᵉ, ψ                |
//! | `L_mi`          | φ, μᵉ                              |
//! | `L_π`           | φ, π                               |
//! | `L_energy`      | π                                  |
//! | `L_c`           | classifier                         |
//! | MINE objective  | statistics network (ascent)        |

use serde::{Deserialize, Serialize};

use super::{gumbel_softmax, IcilModel};
use crate::autodiff::{Array, Binder, Graph, Var};
use crate::ebm::EnergyModel;
use crate::envsuite::Batch;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossName {
    Inv,
    Dyn,
    Mi,
    Pi,
    Energy,
    Classifier,
    /// `−L_mi` as a function of the statistics network alone.
    MineAscent,
}

impl LossName {
    pub const ALL: [LossName; 7] =
        [LossName::Inv, LossName::Dyn, LossName::Mi, LossName::Pi, LossName::Energy, LossName::Classifier, LossName::MineAscent];
}

/// Every loss node of one minibatch graph.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub inv: Var,
    pub dynamics: Var,
    pub mi: Var,
    pub pi: Var,
    /// Absent when no energy model is supplied.
    pub energy: Option<Var>,
    pub classifier: Var,
    pub mine_ascent: Var,
    /// Sum of the enabled representation and policy losses.
    pub total: Var,
}

impl LossGraph {
    pub fn get(&self, name: LossName) -> Option<Var> {
        match name {
            LossName::Inv => Some(self.inv),
            LossName::Dyn => Some(self.dynamics),
            LossName::Mi => Some(self.mi),
            LossName::Pi => Some(self.pi),
            LossName::Energy => self.energy,
            LossName::Classifier => Some(self.classifier),
            LossName::MineAscent => Some(self.mine_ascent),
        }
    }
}

fn one_hot(actions: &[usize], k: usize) -> Array {
    let mut a = Array::zeros(actions.len(), k);
    for (i, &x) in actions.iter().enumerate() {
        a.data_mut()[i * k + x] = 1.0;
    }
    a
}

/// Applies the per-environment network `net(k)` to each environment's rows
/// and stacks the results back in row order.
fn per_env(
    g: &mut Graph,
    groups: &[std::ops::Range<usize>],
    x: Var,
    mut apply: impl FnMut(&mut Graph, usize, Var) -> Result<Var>,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(groups.len());
    for (k, range) in groups.iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let rows = g.slice_rows(x, range.start, range.end)?;
        parts.push(apply(g, k, rows)?);
    }
    g.concat_rows(&parts)
}

fn check_batch(model: &IcilModel, batch: &Batch) -> Result<()> {
    if batch.envs_present() < 2 {
        return Err(Error::invalid("the invariance loss needs rows from at least two environments"));
    }
    if batch.groups.len() != model.dims.envs {
        return Err(Error::invalid(format!("batch covers {} environments, model has {}", batch.groups.len(), model.dims.envs)));
    }
    let mut next = 0;
    for (k, r) in batch.groups.iter().enumerate() {
        if r.start != next && !r.is_empty() {
            return Err(Error::invalid("batch rows must be grouped by environment in order"));
        }
        if batch.env[r.clone()].iter().any(|&e| e != k) {
            return Err(Error::invalid(format!("rows of group {k} carry a different environment index")));
        }
        next = if r.is_empty() { next } else { r.end };
    }
    if next != batch.len() {
        return Err(Error::invalid("environment groups do not cover the batch"));
    }
    Ok(())
}

/// Builds all losses for a standardized, environment-grouped batch.
///
/// `gumbel` holds one row of Gumbel noise per transition and `perm` the
/// permutation pairing representations for the marginal term of `L_mi`.
#[allow(clippy::too_many_arguments)]
pub fn build_losses(
    model: &IcilModel,
    g: &mut Graph,
    binder: &mut Binder,
    batch: &Batch,
    gumbel: &Array,
    perm: &[usize],
    ebm: Option<&EnergyModel>,
) -> Result<LossGraph> {
    check_batch(model, batch)?;
    let store = &model.store;
    let d = model.dims;
    let x_phi = g.constant(model.phi_columns(&batch.obs))?;
    let x = g.constant(batch.obs.clone())?;
    let x_next = g.constant(batch.next_obs.clone())?;
    let a = g.constant(one_hot(&batch.actions, d.actions))?;

    let s = model.phi().forward(g, store, binder, x_phi, true)?;
    let eta = per_env(g, &batch.groups, x, |g, k, rows| model.mu(k).forward(g, store, binder, rows, true))?;

    // Invariance: maximize the entropy of a classifier that is held fixed.
    let cls_logits = model.classifier().forward(g, store, binder, s, false)?;
    let h = g.entropy(cls_logits);
    let mean_h = g.mean(h);
    let inv = g.neg(mean_h);

    // Dynamics through both branches and the decoder.
    let sa = g.concat_cols(&[s, a])?;
    let s_next = model.gs().forward(g, store, binder, sa, true)?;
    let ea = g.concat_cols(&[eta, a])?;
    let eta_next = per_env(g, &batch.groups, ea, |g, k, rows| model.geta(k).forward(g, store, binder, rows, true))?;
    let both = g.concat_cols(&[s_next, eta_next])?;
    let x_hat = model.psi().forward(g, store, binder, both, true)?;
    let err = g.sub(x_next, x_hat)?;
    let sq = g.square(err);
    let per_row = g.sum_cols(sq);
    let dynamics = g.mean(per_row);

    // Mutual information with the statistics network fixed.
    let stats = model.statistics();
    let mi = stats.bound(g, store, binder, s, eta, perm, false)?;

    let pi_logits = model.pi().forward(g, store, binder, s, true)?;
    let ce = g.cross_entropy(pi_logits, &batch.actions)?;
    let pi = g.mean(ce);

    // Energy of the imagined next observation; only π sees this gradient.
    let energy = match ebm {
        None => None,
        Some(ebm) => {
            if !ebm.is_frozen() {
                return Err(Error::invalid("the energy model must be trained and frozen before ICIL training"));
            }
            if gumbel.shape() != [batch.len(), d.actions] {
                return Err(Error::shape("gumbel_softmax", format!("noise {:?} for {} rows", gumbel.shape(), batch.len())));
            }
            let s_c = g.stop_gradient(s);
            let eta_c = g.stop_gradient(eta);
            let logits = model.pi().forward(g, store, binder, s_c, true)?;
            let a_bar = gumbel_softmax(g, logits, gumbel, model.config.temperature)?;
            let sa_bar = g.concat_cols(&[s_c, a_bar])?;
            let s_bar = model.gs().forward(g, store, binder, sa_bar, false)?;
            let ea_bar = g.concat_cols(&[eta_c, a_bar])?;
            let eta_bar =
                per_env(g, &batch.groups, ea_bar, |g, k, rows| model.geta(k).forward(g, store, binder, rows, false))?;
            let both_bar = g.concat_cols(&[s_bar, eta_bar])?;
            let x_bar = model.psi().forward(g, store, binder, both_bar, false)?;
            let e = ebm.energy(g, x_bar, &model.normalizer.fingerprint())?;
            Some(g.mean(e))
        }
    };

    // Classifier on detached features.
    let s_d = g.stop_gradient(s);
    let cls_train = model.classifier().forward(g, store, binder, s_d, true)?;
    let cls_ce = g.cross_entropy(cls_train, &batch.env)?;
    let classifier = g.mean(cls_ce);

    // Statistics network on detached representations, negated for ascent.
    let eta_d = g.stop_gradient(eta);
    let bound = stats.bound(g, store, binder, s_d, eta_d, perm, true)?;
    let mine_ascent = g.neg(bound);

    let mask = model.config.losses;
    let mut total = pi;
    for (on, term) in [(mask.inv, Some(inv)), (mask.dynamics, Some(dynamics)), (mask.mi, Some(mi)), (mask.energy, energy)] {
        if let (true, Some(t)) = (on, term) {
            total = g.add(total, t)?;
        }
    }
    Ok(LossGraph { inv, dynamics, mi, pi, energy, classifier, mine_ascent, total })
}

/// Network a parameter belongs to, with per-environment indices removed.
fn network_of(param: &str) -> &str {
    param.split('.').next().unwrap_or(param).trim_end_matches(|c: char| c.is_ascii_digit())
}

/// Whether `loss` is allowed to move `param`.
pub fn expected_routing(loss: LossName, param: &str) -> bool {
    let net = network_of(param);
    match loss {
        LossName::Inv => net == "phi",
        LossName::Dyn => matches!(net, "phi" | "mu" | "gs" | "geta" | "psi"),
        LossName::Mi => matches!(net, "phi" | "mu"),
        LossName::Pi => matches!(net, "phi" | "pi"),
        LossName::Energy => net == "pi",
        LossName::Classifier => net == "cls",
        LossName::MineAscent => net == "mine",
    }
}

/// Largest absolute gradient a single loss sends to a single parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingEntry {
    pub loss: LossName,
    pub param: String,
    pub max_abs_grad: f64,
}

/// Backpropagates every loss separately and reports the gradient each
/// parameter receives from it, as the optimizer would see it.
pub fn routing_audit(
    model: &IcilModel,
    batch: &Batch,
    gumbel: &Array,
    perm: &[usize],
    ebm: Option<&EnergyModel>,
) -> Result<Vec<RoutingEntry>> {
    let mut g = Graph::new();
    let mut binder = Binder::new();
    let lg = build_losses(model, &mut g, &mut binder, batch, gumbel, perm, ebm)?;
    let mut out = Vec::new();
    for loss in LossName::ALL {
        let Some(root) = lg.get(loss) else { continue };
        g.forward(root)?;
        let grads = g.backward(root)?;
        for (name, _) in model.store.iter() {
            let max_abs_grad = binder
                .trainable_var(name)
                .and_then(|v| grads.get(v))
                .map_or(0.0, |a| a.data().iter().fold(0.0, |m: f64, x| m.max(x.abs())));
            out.push(RoutingEntry { loss, param: name.to_string(), max_abs_grad });
        }
    }
    Ok(out)
}
