use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{BoundParams, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{DhnError, Result};
use crate::probcore::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer `activation(x Wᵀ + b)` applied row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl DenseLayer {
    /// Registers a new layer with Glorot-uniform weights and zero biases.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut RngStream,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w =
            Array2::from_shape_simple_fn((out_dim, in_dim), || (2.0 * rng.uniform() - 1.0) * bound);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
        }
    }

    /// Checks the stored matrices agree with the recorded dimensions.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        let w = store.value(self.weight).dim();
        let b = store.value(self.bias).dim();
        if w != (self.out_dim, self.in_dim) || b != (1, self.out_dim) {
            return Err(DhnError::Config(format!(
                "layer {} has weight {:?} and bias {:?}, expected ({}, {}) and (1, {})",
                store.name(self.weight),
                w,
                b,
                self.out_dim,
                self.in_dim,
                self.out_dim
            )));
        }
        Ok(())
    }

    /// Records the layer on `tape` for a batch `x` of shape (rows x in_dim).
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.in_dim {
            return Err(DhnError::Config(format!(
                "dense layer expects input width {}, got {cols}",
                self.in_dim
            )));
        }
        let z = tape.matmul_t(x, params.get(self.weight));
        let z = tape.add_row(z, params.get(self.bias));
        Ok(match self.activation {
            Activation::Relu => tape.relu(z),
            Activation::Identity => z,
        })
    }

    /// Tape-free evaluation for inference.
    pub fn apply(&self, store: &ParamStore, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim {
            return Err(DhnError::Config(format!(
                "dense layer expects input width {}, got {}",
                self.in_dim,
                x.ncols()
            )));
        }
        let mut z = x.dot(&store.value(self.weight).t()) + store.value(self.bias);
        if self.activation == Activation::Relu {
            z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
        }
        Ok(z)
    }
}

/// Runs `layers` in order on the tape.
pub fn forward_stack(
    layers: &[DenseLayer],
    tape: &mut Tape,
    params: &BoundParams,
    mut x: Var,
) -> Result<Var> {
    for layer in layers {
        x = layer.forward(tape, params, x)?;
    }
    Ok(x)
}

/// Tape-free counterpart of [`forward_stack`].
pub fn apply_stack(
    layers: &[DenseLayer],
    store: &ParamStore,
    x: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut h = x.clone();
    for layer in layers {
        h = layer.apply(store, &h)?;
    }
    Ok(h)
}
