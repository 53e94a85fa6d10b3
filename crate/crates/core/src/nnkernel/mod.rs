//! Minimal differentiable compute kernel: tensors, a reverse-mode tape with
//! the layer primitives the three networks need, and Adam.

mod adam;
mod gemm;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use graph::{
    sigmoid, softmax_row, tanh, Activation, BatchNormMode, BatchStats, Gradients, Graph, NodeId,
    BATCHNORM_EPS,
};
pub use params::{ParamEntry, ParameterSet};
pub use tensor::Tensor;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a sequential network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Batchnorm {
        features: usize,
        momentum: f32,
    },
    Dropout {
        rate: f32,
    },
    Activation {
        function: Activation,
    },
    /// `[N, L, C] -> [N, L*C]`
    Flatten,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
            } => {
                if kernel % 2 == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "conv1d kernel width must be odd for 'same' padding, got {kernel}"
                    )));
                }
                if *in_channels == 0 || *out_channels == 0 {
                    return Err(Error::InvalidArgument("conv1d needs non-zero channels".into()));
                }
            }
            LayerSpec::Dense { inputs, outputs } => {
                if *inputs == 0 || *outputs == 0 {
                    return Err(Error::InvalidArgument("dense layer needs non-zero width".into()));
                }
            }
            LayerSpec::Batchnorm { features, momentum } => {
                if *features == 0 || !(0.0..=1.0).contains(momentum) {
                    return Err(Error::InvalidArgument(format!(
                        "batchnorm needs features > 0 and momentum in [0, 1], got {features}/{momentum}"
                    )));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::InvalidArgument(format!(
                        "dropout rate must lie in [0, 1), got {rate}"
                    )));
                }
            }
            LayerSpec::Activation { .. } | LayerSpec::Flatten => {}
        }
        Ok(())
    }
}

// Tensor-level conveniences over a throwaway graph, for single forward calls.

/// Row-major `[rows, cols]` -> `[cols, rows]`.
fn transpose(data: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// `input: [C_in, T]`, `weights: [C_out, C_in, k]`, `bias: [C_out]` -> `[C_out, T]`.
pub fn conv1d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.shape().len() != 2 {
        return Err(Error::shape(
            "conv1d",
            format!("input must be [C_in, T], got {:?}", input.shape()),
        ));
    }
    let (c, t) = (input.shape()[0], input.shape()[1]);
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, t, c], transpose(input.data(), c, t))?);
    let w = g.input(weights.clone());
    let b = g.input(bias.clone());
    let y = g.conv1d(x, w, b)?;
    let cout = g.value(y).shape()[2];
    Tensor::new(vec![cout, t], transpose(g.value(y).data(), t, cout))
}

pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let w = g.input(weights.clone());
    let b = g.input(bias.clone());
    let y = g.linear(x, w, b)?;
    Ok(g.value(y).clone())
}

pub fn activation_forward(input: &Tensor, kind: &str) -> Result<Tensor> {
    let kind: Activation = kind.parse()?;
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let y = g.activation(x, kind)?;
    Ok(g.value(y).clone())
}

/// Inverted dropout; `train = false` is the identity.
pub fn dropout_forward<R: Rng + ?Sized>(input: &Tensor, rate: f32, train: bool, rng: &mut R) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let y = g.dropout(x, rate, if train { Some(rng) } else { None })?;
    Ok(g.value(y).clone())
}
