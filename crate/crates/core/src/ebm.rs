//! Energy-based model of expert observations trained by persistent
//! contrastive divergence with Langevin sampling.
//!
//! All energies are defined on standardized observations. The model carries
//! the normalizer it was fitted with and refuses graph inputs produced under a
//! different one.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Activation, Array, Binder, Graph, Mlp, ParameterStore, Var};
use crate::envsuite::Normalizer;
use crate::error::{Error, Result};

/// Chains whose state leaves this box are treated as diverged.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EbmConfig {
    pub langevin_steps: usize,
    pub step_size: f64,
    /// Standard deviation of the Langevin noise.
    pub noise_std: f64,
    pub batch: usize,
    pub buffer_capacity: usize,
    pub restart_prob: f64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for EbmConfig {
    fn default() -> Self {
        Self {
            langevin_steps: 100,
            step_size: 0.01,
            noise_std: 0.01,
            batch: 64,
            buffer_capacity: 10_000,
            restart_prob: 0.05,
            iterations: 1000,
            learning_rate: 1e-3,
        }
    }
}

impl EbmConfig {
    fn validate(&self) -> Result<()> {
        if self.langevin_steps == 0 || self.batch == 0 || self.buffer_capacity == 0 {
            return Err(Error::invalid("langevin_steps, batch and buffer_capacity must be positive"));
        }
        if !(self.step_size > 0.0) || !(self.noise_std >= 0.0) || !(self.learning_rate >= 0.0) {
            return Err(Error::invalid("step_size must be positive; noise_std and learning_rate non-negative"));
        }
        if !(0.0..=1.0).contains(&self.restart_prob) {
            return Err(Error::invalid("restart_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Anything Langevin dynamics can run on.
pub trait EnergyFunction {
    fn input_dim(&self) -> usize;
    /// Row-wise gradient of the energy with respect to the input rows.
    fn grad_input(&self, x: &Array) -> Result<Array>;
}

/// `E(x) = ½‖x‖²`.
#[derive(Clone, Copy, Debug)]
pub struct Quadratic {
    pub dim: usize,
}

impl EnergyFunction for Quadratic {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn grad_input(&self, x: &Array) -> Result<Array> {
        Ok(x.clone())
    }
}

/// Runs `k` steps of `x ← x − α∇E(x) + ω`, `ω ~ N(0, σ²)`.
pub fn langevin_chain<E: EnergyFunction + ?Sized, R: Rng>(
    model: &E,
    x0: &Array,
    k: usize,
    alpha: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Array> {
    if k == 0 || !(alpha > 0.0) || !(sigma >= 0.0) {
        return Err(Error::invalid(format!("langevin needs k >= 1, alpha > 0, sigma >= 0 (got {k}, {alpha}, {sigma})")));
    }
    if x0.rank() != 2 || x0.cols() != model.input_dim() {
        return Err(Error::shape("langevin_chain", format!("expected {} columns, got {:?}", model.input_dim(), x0.shape())));
    }
    let mut x = x0.clone();
    for step in 0..k {
        let grad = model.grad_input(&x)?;
        for (v, d) in x.data_mut().iter_mut().zip(grad.data()) {
            let noise = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            *v += -alpha * d + noise;
        }
        if x.data().iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            return Err(Error::NonFinite(format!("langevin chain at step {}", step + 1)));
        }
    }
    Ok(x)
}

/// Fixed-capacity FIFO of negative samples.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Vec<f64>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push_rows(&mut self, x: &Array) {
        for row in x.iter_rows() {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(row.to_vec());
        }
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.items[i]
    }
}

/// Two-hidden-layer ReLU network with scalar output plus the normalization it
/// was trained under.
#[derive(Clone, Debug)]
pub struct EnergyModel {
    pub net: Mlp,
    pub store: ParameterStore,
    pub normalizer: Normalizer,
    pub config: EbmConfig,
    frozen: bool,
}

/// Per-iteration diagnostics of [`train_ebm`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EbmHistory {
    pub l_cd: Vec<f64>,
    pub l_rg: Vec<f64>,
    /// Mean positive minus mean negative energy.
    pub energy_gap: Vec<f64>,
    pub diverged_chains: usize,
}

impl EbmHistory {
    /// CSV with columns `iter,l_cd,l_rg,energy_gap`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iter,l_cd,l_rg,energy_gap")?;
        for (i, ((cd, rg), gap)) in self.l_cd.iter().zip(&self.l_rg).zip(&self.energy_gap).enumerate() {
            writeln!(w, "{i},{cd},{rg},{gap}")?;
        }
        Ok(())
    }
}

impl EnergyModel {
    pub fn new<R: Rng>(normalizer: Normalizer, config: EbmConfig, rng: &mut R) -> Result<Self> {
        let net = Mlp::standard("ebm", normalizer.dim(), 1, Activation::Relu);
        let mut store = ParameterStore::new();
        net.init(&mut store, rng)?;
        Ok(Self { net, store, normalizer, config, frozen: false })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Energies (`[n, 1]`) of standardized rows, with frozen parameters, as
    /// part of a caller's graph. `fingerprint` identifies the normalization
    /// `x` was produced under.
    pub fn energy(&self, g: &mut Graph, x: Var, fingerprint: &str) -> Result<Var> {
        self.check_fingerprint(fingerprint)?;
        if g.shape(x).1 != self.input_dim() {
            return Err(Error::shape("energy", format!("expected {} columns, got {}", self.input_dim(), g.shape(x).1)));
        }
        let mut binder = Binder::new();
        self.net.forward(g, &self.store, &mut binder, x, false)
    }

    /// Energies of raw observations.
    pub fn energy_raw(&self, obs: &Array) -> Result<Vec<f64>> {
        let z = self.normalizer.apply(obs)?;
        Ok(self.net.eval(&self.store, &z)?.into_data())
    }

    pub fn check_fingerprint(&self, fingerprint: &str) -> Result<()> {
        let own = self.normalizer.fingerprint();
        if own != fingerprint {
            return Err(Error::invalid(format!("energy model normalized with {own}, input with {fingerprint}")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "ebm",
            "normalizer": self.normalizer,
            "config": self.config,
            "frozen": self.frozen,
        });
        checkpoint::save(path, &meta, &[("ebm", &self.store)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
        if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("ebm") {
            return Err(bad("not an energy-model checkpoint"));
        }
        let normalizer: Normalizer = serde_json::from_value(ckpt.meta["normalizer"].clone())?;
        let config: EbmConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
        let frozen = ckpt.meta["frozen"].as_bool().unwrap_or(false);
        let store = ckpt.store("ebm")?.clone();
        let net = Mlp::standard("ebm", normalizer.dim(), 1, Activation::Relu);
        for name in net.param_names() {
            store.value(&name).map_err(|_| bad("missing network parameter"))?;
        }
        Ok(Self { net, store, normalizer, config, frozen })
    }
}

/// Input-gradient evaluator that binds the frozen weights once and rewinds
/// the graph between calls.
struct InputGradient<'a> {
    model: &'a EnergyModel,
    graph: std::cell::RefCell<(Graph, Vec<Var>)>,
}

impl<'a> InputGradient<'a> {
    fn new(model: &'a EnergyModel) -> Result<Self> {
        let mut g = Graph::new();
        let mut weights = Vec::new();
        for l in 0..model.net.layers() {
            weights.push(g.constant(model.store.value(&model.net.weight_name(l))?.clone())?);
            weights.push(g.constant(model.store.value(&model.net.bias_name(l))?.clone())?);
        }
        Ok(Self { model, graph: std::cell::RefCell::new((g, weights)) })
    }
}

impl EnergyFunction for InputGradient<'_> {
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn grad_input(&self, x: &Array) -> Result<Array> {
        let mut guard = self.graph.borrow_mut();
        let (g, weights) = &mut *guard;
        let keep = weights.len();
        g.truncate(keep);
        let xv = g.param(x.clone())?;
        let mut h = xv;
        let layers = weights.len() / 2;
        for l in 0..layers {
            let z = g.matmul(h, weights[2 * l])?;
            h = g.add_row(z, weights[2 * l + 1])?;
            if l + 1 < layers {
                h = g.relu(h);
            }
        }
        let total = g.sum(h);
        g.forward(total)?;
        let grads = g.backward(total)?;
        Ok(grads.get_or_zeros(xv, x.rows(), x.cols()))
    }
}

impl EnergyFunction for EnergyModel {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn grad_input(&self, x: &Array) -> Result<Array> {
        InputGradient::new(self)?.grad_input(x)
    }
}

fn uniform_rows<R: Rng>(n: usize, d: usize, rng: &mut R) -> Array {
    Array::from_shape_unchecked(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Fits an energy model to raw observations.
///
/// Observations are standardized with a normalizer fitted on `obs`; uniform
/// restarts and buffer contents live in that standardized space.
pub fn train_ebm<R: Rng>(obs: &Array, config: &EbmConfig, rng: &mut R) -> Result<(EnergyModel, EbmHistory)> {
    config.validate()?;
    if obs.rows() == 0 {
        return Err(Error::invalid("cannot train an energy model on an empty dataset"));
    }
    let normalizer = Normalizer::fit(obs);
    let data = normalizer.apply(obs)?;
    let mut model = EnergyModel::new(normalizer, config.clone(), rng)?;
    let (n, d) = (config.batch, data.cols());
    let fingerprint = model.normalizer.fingerprint();
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut history = EbmHistory::default();

    for iteration in 0..config.iterations {
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.rows())).collect();
        let positives = data.select_rows(&rows);

        let mut init = uniform_rows(n, d, rng);
        if !buffer.is_empty() {
            for i in 0..n {
                if rng.random::<f64>() >= config.restart_prob {
                    let src = buffer.get(rng.random_range(0..buffer.len()));
                    init.data_mut()[i * d..(i + 1) * d].copy_from_slice(src);
                }
            }
        }
        let sampler = InputGradient::new(&model)?;
        let negatives = match langevin_chain(&sampler, &init, config.langevin_steps, config.step_size, config.noise_std, rng) {
            Ok(x) => x,
            Err(Error::NonFinite(_)) => {
                history.diverged_chains += 1;
                let restart = uniform_rows(n, d, rng);
                langevin_chain(&sampler, &restart, config.langevin_steps, config.step_size, config.noise_std, rng)
                    .map_err(|_| Error::Diverged { iteration, loss: "langevin" })?
            }
            Err(e) => return Err(e),
        };
        drop(sampler);

        let mut g = Graph::new();
        let mut binder = Binder::new();
        let pos = g.constant(positives)?;
        let neg = g.constant(negatives.clone())?;
        let neg = g.stop_gradient(neg);
        model.check_fingerprint(&fingerprint)?;
        let e_pos = model.net.forward(&mut g, &model.store, &mut binder, pos, true)?;
        let e_neg = model.net.forward(&mut g, &model.store, &mut binder, neg, true)?;
        let m_pos = g.mean(e_pos);
        let m_neg = g.mean(e_neg);
        let l_cd = g.sub(m_pos, m_neg)?;
        let sq_pos = g.square(e_pos);
        let sq_neg = g.square(e_neg);
        let sq = g.add(sq_pos, sq_neg)?;
        let l_rg = g.mean(sq);
        let total = g.add(l_cd, l_rg)?;
        let value = g.forward(total)?.item();
        if !value.is_finite() {
            return Err(Error::Diverged { iteration, loss: "ebm" });
        }
        let cd = g.value(l_cd).map_or(f64::NAN, Array::item);
        history.l_cd.push(cd);
        history.l_rg.push(g.value(l_rg).map_or(f64::NAN, Array::item));
        history.energy_gap.push(cd);
        let grads = g.backward(total)?;
        model.store.accumulate(&grads, &binder);
        model.store.adam_step(config.learning_rate)?;
        buffer.push_rows(&negatives);
    }
    model.freeze();
    Ok((model, history))
}
