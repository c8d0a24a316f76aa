//! Layer parameters and seeded synthetic stimulus.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topology::{Dims, LayerSpec, Topology};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `K x C/g x R x S` for conv, `n_out x n_in` for fully-connected.
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Weights {
    layers: BTreeMap<String, LayerParams>,
}

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, params: LayerParams) {
        self.layers.insert(name.into(), params);
    }

    pub fn get(&self, name: &str) -> Result<&LayerParams> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::MissingWeights(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LayerParams)> {
        self.layers.iter()
    }

    /// Checks that every parameterized layer has weights of the right shape.
    pub fn check(&self, t: &Topology) -> Result<()> {
        for layer in &t.layers {
            let (shape, k) = match layer.spec {
                LayerSpec::Conv(c) => (
                    vec![c.out_channels, c.channels_per_group(), c.kernel_h, c.kernel_w],
                    c.out_channels,
                ),
                LayerSpec::FullyConnected(f) => (vec![f.n_out, f.n_in], f.n_out),
                _ => continue,
            };
            let p = self.get(&layer.name)?;
            if p.weights.shape() != shape || p.bias.len() != k {
                return Err(Error::ShapeMismatch(format!(
                    "layer '{}' expects weights {shape:?} and {k} biases, got {:?} and {}",
                    layer.name,
                    p.weights.shape(),
                    p.bias.len()
                )));
            }
        }
        Ok(())
    }
}

/// Seeded weights for every conv/fc layer of `t`.
///
/// Weights are uniform in `[-a, a]` with `a = sqrt(6 / fan_in)` so activations
/// keep their scale from layer to layer; biases are uniform in `[-0.1, 0.1]`.
pub fn random_weights(t: &Topology, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Weights::new();
    for layer in &t.layers {
        let (shape, fan_in, k) = match layer.spec {
            LayerSpec::Conv(c) => (
                vec![c.out_channels, c.channels_per_group(), c.kernel_h, c.kernel_w],
                c.channels_per_group() * c.kernel_h * c.kernel_w,
                c.out_channels,
            ),
            LayerSpec::FullyConnected(f) => (vec![f.n_out, f.n_in], f.n_in, f.n_out),
            _ => continue,
        };
        let a = (6.0 / fan_in as f64).sqrt();
        let weights = Tensor::from_fn(shape, |_| rng.random_range(-a..=a));
        let bias = (0..k).map(|_| rng.random_range(-0.1..=0.1)).collect();
        w.insert(layer.name.clone(), LayerParams { weights, bias });
    }
    w
}

/// `n` seeded images with pixels uniform in `[-1, 1]`.
pub fn random_images(dims: Dims, n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::from_fn(vec![dims.c, dims.h, dims.w], |_| rng.random_range(-1.0..=1.0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::builtin_alexnet;

    #[test]
    fn seeded_and_complete() {
        let t = builtin_alexnet();
        let a = random_weights(&t, 7);
        a.check(&t).unwrap();
        let b = random_weights(&t, 7);
        assert_eq!(a.get("conv3").unwrap(), b.get("conv3").unwrap());
        let c = random_weights(&t, 8);
        assert_ne!(a.get("fc8").unwrap(), c.get("fc8").unwrap());
        assert!(matches!(a.get("relu1"), Err(Error::MissingWeights(_))));
    }
}
