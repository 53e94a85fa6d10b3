//! Network definitions: the TempCNN classifier, the MLP noiser, the
//! TempCNN-bodied discriminator, and counterfactual composition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkernel::{
    Activation, BatchNormMode, BatchStats, Graph, LayerSpec, NodeId, ParameterSet, Tensor,
};

pub const BATCHNORM_MOMENTUM: f32 = 0.1;

/// Forward-pass behaviour. Training mode samples dropout masks from the
/// given generator and normalizes with batch statistics.
pub enum Mode<'r> {
    Train(&'r mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Batch statistics collected by a training-mode pass, keyed by layer index.
#[derive(Debug, Default)]
pub struct RunningUpdates(Vec<(usize, BatchStats)>);

impl RunningUpdates {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A sequential stack of layers with its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<LayerSpec>,
    params: ParameterSet,
}

fn weight_name(i: usize) -> String {
    format!("{i}.weight")
}
fn bias_name(i: usize) -> String {
    format!("{i}.bias")
}
fn gamma_name(i: usize) -> String {
    format!("{i}.gamma")
}
fn beta_name(i: usize) -> String {
    format!("{i}.beta")
}
fn running_mean_name(i: usize) -> String {
    format!("{i}.running_mean")
}
fn running_var_name(i: usize) -> String {
    format!("{i}.running_var")
}

fn uniform(rng: &mut impl Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

impl Network {
    /// Builds the parameter set for `layers`. Weights and biases are drawn
    /// uniformly in `±1/sqrt(fan_in)`; batchnorm starts at identity.
    pub fn new(scope: &str, layers: Vec<LayerSpec>, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParameterSet::new(scope);
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            match *layer {
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let fan_in = in_channels * kernel;
                    let bound = 1.0 / (fan_in as f32).sqrt();
                    let w = uniform(rng, out_channels * fan_in, bound);
                    let b = uniform(rng, out_channels, bound);
                    params.insert(
                        weight_name(i),
                        Tensor::new(vec![out_channels, in_channels, kernel], w)?,
                        true,
                    )?;
                    params.insert(bias_name(i), Tensor::vector(b), true)?;
                }
                LayerSpec::Dense { inputs, outputs } => {
                    let bound = 1.0 / (inputs as f32).sqrt();
                    let w = uniform(rng, outputs * inputs, bound);
                    let b = uniform(rng, outputs, bound);
                    params.insert(weight_name(i), Tensor::new(vec![outputs, inputs], w)?, true)?;
                    params.insert(bias_name(i), Tensor::vector(b), true)?;
                }
                LayerSpec::Batchnorm { features, .. } => {
                    params.insert(gamma_name(i), Tensor::filled(vec![features], 1.0), true)?;
                    params.insert(beta_name(i), Tensor::zeros(vec![features]), true)?;
                    params.insert(running_mean_name(i), Tensor::zeros(vec![features]), false)?;
                    params.insert(running_var_name(i), Tensor::filled(vec![features], 1.0), false)?;
                }
                LayerSpec::Dropout { .. } | LayerSpec::Activation { .. } | LayerSpec::Flatten => {}
            }
        }
        Ok(Self { layers, params })
    }

    /// Reassembles a network from stored parts, checking that every tensor
    /// the layer list needs is present with the right shape.
    pub fn from_parts(layers: Vec<LayerSpec>, params: ParameterSet) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let template = Network::new(params.scope(), layers.clone(), &mut rng)?;
        for e in template.params.iter() {
            let got = params.entry(&e.name).map_err(|_| {
                Error::Checkpoint(format!("missing tensor '{}' for layer list", e.name))
            })?;
            if got.value.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, layer list needs {:?}",
                    e.name,
                    got.value.shape(),
                    e.value.shape()
                )));
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, layer list defines {}",
                params.len(),
                template.params.len()
            )));
        }
        Ok(Self { layers, params })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Records the network on `g`. `trainable = false` records frozen weight
    /// leaves (gradients still flow to `x`). Batchnorm statistics gathered in
    /// training mode are returned rather than applied.
    pub fn forward(
        &self,
        g: &mut Graph,
        mut x: NodeId,
        mode: &mut Mode<'_>,
        trainable: bool,
    ) -> Result<(NodeId, RunningUpdates)> {
        let mut updates = RunningUpdates::default();
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                LayerSpec::Conv1d { .. } => {
                    let w = g.param(&self.params, &weight_name(i), trainable)?;
                    let b = g.param(&self.params, &bias_name(i), trainable)?;
                    g.conv1d(x, w, b)?
                }
                LayerSpec::Dense { .. } => {
                    let w = g.param(&self.params, &weight_name(i), trainable)?;
                    let b = g.param(&self.params, &bias_name(i), trainable)?;
                    g.linear(x, w, b)?
                }
                LayerSpec::Batchnorm { .. } => {
                    let gamma = g.param(&self.params, &gamma_name(i), trainable)?;
                    let beta = g.param(&self.params, &beta_name(i), trainable)?;
                    let bn_mode = if mode.is_train() {
                        BatchNormMode::Train
                    } else {
                        BatchNormMode::Eval {
                            running_mean: self.params.get(&running_mean_name(i))?.data(),
                            running_var: self.params.get(&running_var_name(i))?.data(),
                        }
                    };
                    let (y, stats) = g.batch_norm(x, gamma, beta, bn_mode)?;
                    if let Some(stats) = stats {
                        updates.0.push((i, stats));
                    }
                    y
                }
                LayerSpec::Dropout { rate } => match mode {
                    Mode::Train(rng) => g.dropout(x, *rate, Some(&mut **rng))?,
                    Mode::Eval => x,
                },
                LayerSpec::Activation { function } => g.activation(x, *function)?,
                LayerSpec::Flatten => {
                    let shape = g.value(x).shape().to_vec();
                    if shape.len() < 2 {
                        return Err(Error::shape("flatten", format!("input {shape:?} has no batch axis")));
                    }
                    let rest = shape[1..].iter().product();
                    g.reshape(x, vec![shape[0], rest])?
                }
            };
        }
        Ok((x, updates))
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_running_updates(&mut self, updates: RunningUpdates) -> Result<()> {
        for (i, stats) in updates.0 {
            let momentum = match self.layers.get(i) {
                Some(LayerSpec::Batchnorm { momentum, .. }) => *momentum,
                _ => return Err(Error::State(format!("layer {i} is not a batchnorm layer"))),
            };
            for (name, batch) in [(running_mean_name(i), &stats.mean), (running_var_name(i), &stats.var)] {
                let mut t = self.params.get(&name)?.clone();
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
                self.params.set(&name, t)?;
            }
        }
        Ok(())
    }

    /// Forward pass in evaluation mode on a detached graph.
    pub fn infer(&self, input: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(input);
        let (y, _) = self.forward(&mut g, x, &mut Mode::Eval, false)?;
        Ok(g.value(y).clone())
    }
}

/// TempCNN body hyperparameters shared by classifier and discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TempCnnConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub dropout: f32,
    pub dense_units: usize,
}

impl Default for TempCnnConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![64, 64, 64],
            kernel: 5,
            dropout: 0.5,
            dense_units: 256,
        }
    }
}

impl TempCnnConfig {
    /// Conv blocks, flatten, and the hidden dense block (without the output layer).
    pub fn body(&self, series_len: usize) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut cin = 1;
        for &c in &self.conv_channels {
            layers.push(LayerSpec::Conv1d {
                in_channels: cin,
                out_channels: c,
                kernel: self.kernel,
            });
            layers.push(LayerSpec::Batchnorm {
                features: c,
                momentum: BATCHNORM_MOMENTUM,
            });
            layers.push(LayerSpec::Activation {
                function: Activation::Relu,
            });
            layers.push(LayerSpec::Dropout { rate: self.dropout });
            cin = c;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense {
            inputs: cin * series_len,
            outputs: self.dense_units,
        });
        layers.push(LayerSpec::Activation {
            function: Activation::Relu,
        });
        layers.push(LayerSpec::Dropout { rate: self.dropout });
        layers
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiserConfig {
    pub hidden: Vec<usize>,
    pub dropout: f32,
}

impl Default for NoiserConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            dropout: 0.5,
        }
    }
}

fn check_batch(x: &Tensor, series_len: usize, what: &str) -> Result<usize> {
    match x.shape() {
        [n, t] if *t == series_len => Ok(*n),
        s => Err(Error::shape(
            "model input",
            format!("{what} expects [N, {series_len}], got {s:?}"),
        )),
    }
}

/// Sample-wise argmax (lowest index on ties).
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Classifier,
    Noiser,
    Discriminator,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Classifier => "classifier",
            ModelKind::Noiser => "noiser",
            ModelKind::Discriminator => "discriminator",
        })
    }
}

/// TempCNN classifier producing `K` logits per series.
#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub net: Network,
    pub num_classes: usize,
    pub series_len: usize,
}

impl ClassifierModel {
    pub fn new(cfg: &TempCnnConfig, series_len: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_classes == 0 || series_len == 0 {
            return Err(Error::InvalidArgument("classifier needs K >= 1 and T >= 1".into()));
        }
        let mut layers = cfg.body(series_len);
        layers.push(LayerSpec::Dense {
            inputs: cfg.dense_units,
            outputs: num_classes,
        });
        Ok(Self {
            net: Network::new("classifier", layers, rng)?,
            num_classes,
            series_len,
        })
    }

    /// Records the network from a `[N, T]` node to `[N, K]` logits.
    pub fn logits(
        &self,
        g: &mut Graph,
        x: NodeId,
        mode: &mut Mode<'_>,
        trainable: bool,
    ) -> Result<(NodeId, RunningUpdates)> {
        let n = check_batch(g.value(x), self.series_len, "classifier")?;
        let x3 = g.reshape(x, vec![n, self.series_len, 1])?;
        self.net.forward(g, x3, mode, trainable)
    }

    /// Class-probability rows for a `[N, T]` batch.
    pub fn forward_probs(&self, g: &mut Graph, x: NodeId, mode: &mut Mode<'_>, trainable: bool) -> Result<(NodeId, RunningUpdates)> {
        let (logits, upd) = self.logits(g, x, mode, trainable)?;
        Ok((g.softmax(logits)?, upd))
    }

    /// Evaluation-mode probabilities.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let (p, _) = self.forward_probs(&mut g, x, &mut Mode::Eval, false)?;
        Ok(g.value(p).clone())
    }

    /// Evaluation-mode predicted classes (0-based).
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let p = self.predict_proba(batch)?;
        Ok(p.rows().map(argmax).collect())
    }
}

/// MLP generating a perturbation with entries in (-1, 1).
#[derive(Clone, Debug)]
pub struct NoiserModel {
    pub net: Network,
    pub series_len: usize,
}

impl NoiserModel {
    /// Hidden blocks are dense -> batchnorm -> tanh -> dropout; the output
    /// layer starts at zero so the initial perturbation is exactly zero.
    pub fn new(cfg: &NoiserConfig, series_len: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = series_len;
        for &h in &cfg.hidden {
            layers.push(LayerSpec::Dense {
                inputs: width,
                outputs: h,
            });
            layers.push(LayerSpec::Batchnorm {
                features: h,
                momentum: BATCHNORM_MOMENTUM,
            });
            layers.push(LayerSpec::Activation {
                function: Activation::Tanh,
            });
            layers.push(LayerSpec::Dropout { rate: cfg.dropout });
            width = h;
        }
        let out = layers.len();
        layers.push(LayerSpec::Dense {
            inputs: width,
            outputs: series_len,
        });
        layers.push(LayerSpec::Activation {
            function: Activation::Tanh,
        });
        let mut net = Network::new("noiser", layers, rng)?;
        let params = net.params_mut();
        params.set(&weight_name(out), Tensor::zeros(vec![series_len, width]))?;
        params.set(&bias_name(out), Tensor::zeros(vec![series_len]))?;
        Ok(Self { net, series_len })
    }

    /// Records `delta = noiser(x)` for a `[N, T]` node.
    pub fn delta(&self, g: &mut Graph, x: NodeId, mode: &mut Mode<'_>, trainable: bool) -> Result<(NodeId, RunningUpdates)> {
        check_batch(g.value(x), self.series_len, "noiser")?;
        self.net.forward(g, x, mode, trainable)
    }

    pub fn generate(&self, batch: &Tensor) -> Result<Tensor> {
        check_batch(batch, self.series_len, "noiser")?;
        self.net.infer(batch.clone())
    }
}

/// TempCNN body with a single sigmoid output scoring "realness".
#[derive(Clone, Debug)]
pub struct DiscriminatorModel {
    pub net: Network,
    pub series_len: usize,
}

impl DiscriminatorModel {
    pub fn new(cfg: &TempCnnConfig, series_len: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = cfg.body(series_len);
        layers.push(LayerSpec::Dense {
            inputs: cfg.dense_units,
            outputs: 1,
        });
        layers.push(LayerSpec::Activation {
            function: Activation::Sigmoid,
        });
        Ok(Self {
            net: Network::new("discriminator", layers, rng)?,
            series_len,
        })
    }

    /// Records scores `[N]` for a `[N, T]` node.
    pub fn scores(&self, g: &mut Graph, x: NodeId, mode: &mut Mode<'_>, trainable: bool) -> Result<(NodeId, RunningUpdates)> {
        let n = check_batch(g.value(x), self.series_len, "discriminator")?;
        let x3 = g.reshape(x, vec![n, self.series_len, 1])?;
        let (s, upd) = self.net.forward(g, x3, mode, trainable)?;
        Ok((g.reshape(s, vec![n])?, upd))
    }

    pub fn score(&self, batch: &Tensor) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let (s, _) = self.scores(&mut g, x, &mut Mode::Eval, false)?;
        Ok(g.value(s).data().to_vec())
    }
}

/// Index of the largest `|delta_t|`, lowest index on ties.
pub fn peak_index(delta: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in delta.iter().enumerate() {
        if v.abs() > delta[best].abs() {
            best = i;
        }
    }
    best
}

/// An input series, its perturbation and the resulting counterfactual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub id: u64,
    pub x: Vec<f32>,
    pub delta: Vec<f32>,
    pub x_cf: Vec<f32>,
    /// Ground-truth class, when known.
    pub y_true: Option<usize>,
    /// Predicted class of `x`.
    pub y_src: Option<usize>,
    /// Predicted class of `x_cf`.
    pub y_cf: Option<usize>,
    pub t_tilde: usize,
}

impl CounterfactualPair {
    pub fn success(&self) -> bool {
        matches!((self.y_src, self.y_cf), (Some(a), Some(b)) if a != b)
    }

    /// True when `x_cf` leaves the NDVI domain `[-1, 1]` anywhere.
    pub fn out_of_range(&self) -> bool {
        self.x_cf.iter().any(|v| !(-1.0..=1.0).contains(v))
    }
}

/// `x_cf = x + delta` (unclipped) with `t_tilde = peak_index(delta)`.
/// Labels are left to the caller.
pub fn compose_counterfactual(id: u64, x: &[f32], delta: &[f32]) -> Result<CounterfactualPair> {
    if x.len() != delta.len() {
        return Err(Error::shape(
            "compose_counterfactual",
            format!("series length {} != perturbation length {}", x.len(), delta.len()),
        ));
    }
    Ok(CounterfactualPair {
        id,
        x: x.to_vec(),
        delta: delta.to_vec(),
        x_cf: x.iter().zip(delta).map(|(a, d)| a + d).collect(),
        y_true: None,
        y_src: None,
        y_cf: None,
        t_tilde: peak_index(delta),
    })
}
