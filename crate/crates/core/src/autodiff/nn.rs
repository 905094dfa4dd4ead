use rand::Rng;
use serde::{Deserialize, Serialize};

use super::array::Array;
use super::graph::{Graph, Var};
use super::params::{Binder, ParameterStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Relu,
}

/// Fully connected network with a linear output layer.
///
/// Parameters live in a [`ParameterStore`] under `{name}.w{i}` (`[in, out]`)
/// and `{name}.b{i}` (`[1, out]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub name: String,
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(name: impl Into<String>, input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self { name: name.into(), sizes, activation }
    }

    /// The 2×64 architecture shared by every network in this crate.
    pub fn standard(name: impl Into<String>, input: usize, output: usize, activation: Activation) -> Self {
        Self::new(name, input, &[64, 64], output, activation)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layer sizes")
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{layer}", self.name)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.name)
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers()).flat_map(|l| [self.weight_name(l), self.bias_name(l)]).collect()
    }

    /// Uniform fan-in scaled weights (gain √2 on hidden layers, 1 on the
    /// output layer) and zero biases.
    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let gain: f64 = if l + 1 == self.layers() { 1.0 } else { 2f64.sqrt() };
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            store.insert(self.weight_name(l), Array::matrix(fan_in, fan_out, w)?)?;
            store.insert(self.bias_name(l), Array::zeros(1, fan_out))?;
        }
        Ok(())
    }

    /// Registers all-zero parameters (useful for degenerate fixtures).
    pub fn init_zeros(&self, store: &mut ParameterStore) -> Result<()> {
        for l in 0..self.layers() {
            store.insert(self.weight_name(l), Array::zeros(self.sizes[l], self.sizes[l + 1]))?;
            store.insert(self.bias_name(l), Array::zeros(1, self.sizes[l + 1]))?;
        }
        Ok(())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        binder: &mut Binder,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.input_dim() {
            return Err(Error::shape("mlp", format!("`{}` expects {} inputs, got {cols}", self.name, self.input_dim())));
        }
        let mut h = x;
        for l in 0..self.layers() {
            let w = binder.bind(g, store, &self.weight_name(l), trainable)?;
            let b = binder.bind(g, store, &self.bias_name(l), trainable)?;
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if l + 1 < self.layers() {
                h = match self.activation {
                    Activation::Elu => g.elu(h),
                    Activation::Relu => g.relu(h),
                };
            }
        }
        Ok(h)
    }

    /// Forward pass outside of any graph.
    pub fn eval(&self, store: &ParameterStore, x: &Array) -> Result<Array> {
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let xv = g.constant(x.clone())?;
        let out = self.forward(&mut g, store, &mut binder, xv, false)?;
        Ok(g.forward(out)?.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_logits() {
        let net = Mlp::standard("pi", 5, 3, Activation::Elu);
        let mut store = ParameterStore::new();
        net.init_zeros(&mut store).unwrap();
        let x = Array::from_rows(&[[1.0, -2.0, 3.0, 0.5, 9.0], [0.0; 5]]).unwrap();
        let out = net.eval(&store, &x).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let net = Mlp::standard("f", 4, 2, Activation::Relu);
        let mk = |seed| {
            let mut s = ParameterStore::new();
            net.init(&mut s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            s
        };
        assert!(mk(3).values_bit_equal(&mk(3)));
        assert!(!mk(3).values_bit_equal(&mk(4)));
        assert_eq!(mk(3).len(), 6);
    }

    #[test]
    fn input_width_checked() {
        let net = Mlp::standard("f", 4, 2, Activation::Elu);
        let mut s = ParameterStore::new();
        net.init_zeros(&mut s).unwrap();
        let err = net.eval(&s, &Array::zeros(1, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "mlp", .. }));
    }
}
