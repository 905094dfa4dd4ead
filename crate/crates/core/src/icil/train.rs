use std::io::Write;

use super::{build_losses, gumbel_noise, IcilConfig, IcilDims, IcilModel};
use crate::autodiff::{Binder, Graph, Var};
use crate::ebm::EnergyModel;
use crate::envsuite::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::mine::permutation;
use crate::rng;

/// Loss values of one training iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_inv: f64,
    pub l_dyn: f64,
    pub l_mi: f64,
    pub l_pi: f64,
    pub l_energy: f64,
    pub l_c: f64,
}

fn checked(g: &mut Graph, v: Var, iteration: usize, loss: &'static str) -> Result<f64> {
    let x = g.forward(v)?.item();
    if !x.is_finite() {
        return Err(Error::Diverged { iteration, loss });
    }
    Ok(x)
}

/// Trains every ICIL network on `ds` for `config.iterations` minibatch steps.
///
/// Each iteration backpropagates three objectives built on one forward pass:
/// the representation/policy total, the classifier loss, and the negated
/// mutual-information bound for the statistics network. Because every
/// network is bound trainable only where it is routed, one Adam step over the
/// accumulated gradients applies each update rule exactly. Minibatches,
/// permutations and Gumbel noise come from separate streams so that removing
/// a loss never changes the data order.
pub fn train_icil(
    ds: &Dataset,
    ebm: Option<&EnergyModel>,
    config: &IcilConfig,
    seed: u64,
) -> Result<(IcilModel, Vec<LossBreakdown>)> {
    let env_ids = ds.env_ids();
    if env_ids.len() < 2 {
        return Err(Error::invalid(format!(
            "invariant training needs at least two training environments, dataset has {}",
            env_ids.len()
        )));
    }
    if config.losses.energy && ebm.is_none() {
        return Err(Error::invalid("the energy loss is enabled but no energy model was given"));
    }
    if config.batch < env_ids.len() * 2 {
        return Err(Error::invalid(format!("batch {} too small for {} environments", config.batch, env_ids.len())));
    }
    let transitions = ds.transitions()?;
    let normalizer = match ebm {
        Some(e) => {
            if e.input_dim() != ds.obs_dim() {
                return Err(Error::shape("icil", format!("energy model takes {} features, data has {}", e.input_dim(), ds.obs_dim())));
            }
            e.normalizer.clone()
        }
        None => Normalizer::fit(&transitions.obs),
    };
    let data = transitions.normalized(&normalizer)?;
    let dims = IcilDims::for_dataset(ds, config)?;
    let mut model = IcilModel::new(dims, config.clone(), normalizer, env_ids, seed)?;

    let mut batch_rng = rng::stream(seed, "batch", &[]);
    let mut perm_rng = rng::stream(seed, "permutation", &[]);
    let mut gumbel_rng = rng::stream(seed, "gumbel", &[]);
    let mut history = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let batch = data.sample_stratified(config.batch, &mut batch_rng)?;
        let perm = permutation(batch.len(), &mut perm_rng);
        let noise = gumbel_noise(batch.len(), dims.actions, &mut gumbel_rng);

        let mut g = Graph::new();
        let mut binder = Binder::new();
        let lg = build_losses(&model, &mut g, &mut binder, &batch, &noise, &perm, ebm)?;
        let row = LossBreakdown {
            l_inv: checked(&mut g, lg.inv, iteration, "l_inv")?,
            l_dyn: checked(&mut g, lg.dynamics, iteration, "l_dyn")?,
            l_mi: checked(&mut g, lg.mi, iteration, "l_mi")?,
            l_pi: checked(&mut g, lg.pi, iteration, "l_pi")?,
            l_energy: match lg.energy {
                Some(v) => checked(&mut g, v, iteration, "l_energy")?,
                None => 0.0,
            },
            l_c: checked(&mut g, lg.classifier, iteration, "l_c")?,
        };
        checked(&mut g, lg.total, iteration, "total")?;
        checked(&mut g, lg.mine_ascent, iteration, "mine")?;

        for root in [lg.total, lg.classifier, lg.mine_ascent] {
            let grads = g.backward(root)?;
            model.store.accumulate(&grads, &binder);
        }
        model.store.adam_step(config.learning_rate)?;
        history.push(row);
    }
    Ok((model, history))
}

/// Loss history as CSV with columns `iter,l_inv,l_dyn,l_mi,l_pi,l_energy,l_c`.
pub fn write_history_csv<W: Write>(history: &[LossBreakdown], mut w: W) -> Result<()> {
    writeln!(w, "iter,l_inv,l_dyn,l_mi,l_pi,l_energy,l_c")?;
    for (i, r) in history.iter().enumerate() {
        writeln!(w, "{i},{},{},{},{},{},{}", r.l_inv, r.l_dyn, r.l_mi, r.l_pi, r.l_energy, r.l_c)?;
    }
    Ok(())
}
